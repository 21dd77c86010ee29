use std::collections::BTreeMap;

use super::{EntityGraph, GraphError};

/// Weighted modularity of `partition` (entity name → community label).
///
/// The partition must cover exactly the entities of `graph`; `resolution`
/// must be positive. A graph without edge weight has modularity 0.
pub fn modularity(graph: &EntityGraph, partition: &BTreeMap<String, usize>, resolution: f64) -> Result<f64, GraphError> {
    if !(resolution > 0.0) {
        return Err(GraphError::InvalidPartition(format!("resolution must be positive, got {resolution}")));
    }
    if partition.len() != graph.entities.len() {
        return Err(GraphError::InvalidPartition(format!(
            "partition has {} nodes, graph has {}",
            partition.len(),
            graph.entities.len()
        )));
    }
    let mut labels = Vec::with_capacity(partition.len());
    let mut dense: BTreeMap<usize, usize> = BTreeMap::new();
    for name in graph.entities.keys() {
        let label = *partition
            .get(name)
            .ok_or_else(|| GraphError::InvalidPartition(format!("entity {name} is not assigned")))?;
        let next = dense.len();
        labels.push(*dense.entry(label).or_insert(next));
    }
    Ok(graph.to_weighted().modularity(&labels, resolution))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge_graph::{Entity, Relationship};
    use proptest::prelude::*;

    fn graph(n: usize, edges: &[(usize, usize, f64)]) -> EntityGraph {
        let name = |i: usize| format!("N{i}");
        let mut g = EntityGraph::default();
        for i in 0..n {
            g.entities.insert(
                name(i),
                Entity {
                    name: name(i),
                    entity_type: "T".into(),
                    description: String::new(),
                    source_chunk_ids: ["c".to_string()].into(),
                    mention_count: 1,
                },
            );
        }
        for &(u, v, w) in edges {
            let (s, t) = if name(u) < name(v) { (name(u), name(v)) } else { (name(v), name(u)) };
            let r = g.relationships.entry((s.clone(), t.clone())).or_insert(Relationship {
                source: s,
                target: t,
                description: String::new(),
                weight: 0.0,
                source_chunk_ids: Default::default(),
                mention_count: 0,
            });
            r.weight += w;
        }
        g
    }

    /// Textbook form: (1/2W) Σ_ij [A_ij − γ k_i k_j / 2W] δ(c_i, c_j).
    fn naive(g: &EntityGraph, part: &BTreeMap<String, usize>, gamma: f64) -> f64 {
        let names = g.node_names();
        let n = names.len();
        let mut a = vec![vec![0.0; n]; n];
        for r in g.relationships.values() {
            let i = names.iter().position(|x| x == &r.source).unwrap();
            let j = names.iter().position(|x| x == &r.target).unwrap();
            a[i][j] += r.weight;
            a[j][i] += r.weight;
        }
        let k: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
        let two_w: f64 = k.iter().sum();
        if two_w == 0.0 {
            return 0.0;
        }
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                if part[&names[i]] == part[&names[j]] {
                    q += a[i][j] - gamma * k[i] * k[j] / two_w;
                }
            }
        }
        q / two_w
    }

    fn labels(g: &EntityGraph, ls: &[usize]) -> BTreeMap<String, usize> {
        g.node_names().into_iter().zip(ls.iter().copied()).collect()
    }

    #[test]
    fn one_block_is_zero() {
        let g = graph(4, &[(0, 1, 2.0), (1, 2, 1.0), (2, 3, 5.0)]);
        assert!(modularity(&g, &labels(&g, &[0, 0, 0, 0]), 1.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn two_triangles() {
        let g = graph(6, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0), (3, 4, 1.0), (4, 5, 1.0), (3, 5, 1.0)]);
        let q = modularity(&g, &labels(&g, &[0, 0, 0, 1, 1, 1]), 1.0).unwrap();
        assert!((q - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let g = graph(3, &[(0, 1, 1.0)]);
        assert!(matches!(modularity(&g, &labels(&g, &[0, 0]), 1.0), Err(GraphError::InvalidPartition(_))));
        let mut p = labels(&g, &[0, 0, 1]);
        p.remove("N2");
        p.insert("ZZ".into(), 1);
        assert!(modularity(&g, &p, 1.0).is_err());
        assert!(modularity(&g, &labels(&g, &[0, 0, 1]), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn matches_naive_oracle(
            n in 1usize..9,
            raw in prop::collection::vec((0usize..9, 0usize..9, 1u32..10), 0..20),
            part in prop::collection::vec(0usize..4, 9),
            gamma in 0.1f64..3.0,
        ) {
            let edges: Vec<_> = raw.iter().filter(|(u, v, _)| u < &n && v < &n && u != v).map(|&(u, v, w)| (u, v, w as f64)).collect();
            let g = graph(n, &edges);
            let p = labels(&g, &part[..n]);
            let q = modularity(&g, &p, gamma).unwrap();
            prop_assert!((q - naive(&g, &p, gamma)).abs() < 1e-12);
        }
    }
}
