//! Leiden community detection over weighted modularity.
//!
//! Each iteration runs fast local moving, refinement of every community into
//! well-connected sub-communities, and aggregation of the refined partition.
//! The partition carried to the aggregate graph is the unrefined one, so
//! quality never drops between phases. Iteration stops once local moving
//! leaves every aggregate node in its own community.
//!
//! The refined partitions produced along the way nest inside each other and
//! inside the final partition; together they form the community hierarchy.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CommunityAssignment, EntityGraph};

const MOVE_EPSILON: f64 = 1e-10;

/// Undirected weighted graph on nodes `0..n`; parallel edges are summed and
/// self-loops kept separately (they appear after aggregation).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    strength: Vec<f64>,
    total_weight: f64,
}

impl WeightedGraph {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (u, v, w) in edges {
            assert!(u < n && v < n, "edge ({u},{v}) out of range for {n} nodes");
            *merged.entry((u.min(v), u.max(v))).or_default() += w;
        }
        let mut adj = vec![Vec::new(); n];
        let mut self_loops = vec![0.0; n];
        let mut strength = vec![0.0; n];
        let mut total_weight = 0.0;
        for ((u, v), w) in merged {
            total_weight += w;
            if u == v {
                self_loops[u] += w;
                strength[u] += 2.0 * w;
            } else {
                adj[u].push((v, w));
                adj[v].push((u, w));
                strength[u] += w;
                strength[v] += w;
            }
        }
        Self { adj, self_loops, strength, total_weight }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn strength(&self, v: usize) -> f64 {
        self.strength[v]
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adj[v]
    }

    /// Every edge once as `(u, v, w)` with `u <= v`; self-loops have `u == v`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (u, list) in self.adj.iter().enumerate() {
            if self.self_loops[u] != 0.0 {
                out.push((u, u, self.self_loops[u]));
            }
            out.extend(list.iter().filter(|(v, _)| *v > u).map(|&(v, w)| (u, v, w)));
        }
        out
    }

    /// `Σ_c [ w_in(c)/W − γ·(K_c/2W)² ]`; 0 for a graph without edge weight.
    pub fn modularity(&self, membership: &[usize], resolution: f64) -> f64 {
        assert_eq!(membership.len(), self.node_count());
        if self.total_weight == 0.0 {
            return 0.0;
        }
        let labels = membership.iter().copied().max().map_or(0, |m| m + 1);
        let mut internal = vec![0.0; labels];
        let mut degree = vec![0.0; labels];
        for (u, v, w) in self.edges() {
            if membership[u] == membership[v] {
                internal[membership[u]] += w;
            }
        }
        for (v, &c) in membership.iter().enumerate() {
            degree[c] += self.strength[v];
        }
        let two_w = 2.0 * self.total_weight;
        internal
            .iter()
            .zip(&degree)
            .map(|(w_in, k)| w_in / self.total_weight - resolution * (k / two_w) * (k / two_w))
            .sum()
    }

    /// Connected components restricted to edges inside the same label.
    fn split_disconnected(&self, membership: &[usize]) -> Vec<usize> {
        let n = self.node_count();
        let mut out = vec![usize::MAX; n];
        let mut next = 0;
        for start in 0..n {
            if out[start] != usize::MAX {
                continue;
            }
            out[start] = next;
            let mut stack = vec![start];
            while let Some(v) = stack.pop() {
                for &(u, _) in &self.adj[v] {
                    if out[u] == usize::MAX && membership[u] == membership[v] {
                        out[u] = next;
                        stack.push(u);
                    }
                }
            }
            next += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeidenConfig {
    pub resolution: f64,
    pub seed: u64,
    pub max_levels: usize,
    /// Randomness of the refinement merge choice.
    pub theta: f64,
    pub max_iterations: usize,
}

impl Default for LeidenConfig {
    fn default() -> Self {
        Self {
            resolution: super::DEFAULT_RESOLUTION,
            seed: 42,
            max_levels: 2,
            theta: 0.01,
            max_iterations: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseQuality {
    pub iteration: usize,
    pub phase: String,
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeidenRun {
    /// Memberships over the input nodes, coarsest first, labels numbered by
    /// first appearance in node order.
    pub levels: Vec<Vec<usize>>,
    pub quality_log: Vec<PhaseQuality>,
    /// Modularity of `levels[0]`.
    pub quality: f64,
}

struct Partition {
    membership: Vec<usize>,
    comm_strength: Vec<f64>,
    comm_size: Vec<usize>,
    empty: Vec<usize>,
}

impl Partition {
    /// `labels` must lie in `0..g.node_count()`.
    fn from_labels(g: &WeightedGraph, labels: Vec<usize>) -> Self {
        let n = g.node_count();
        let mut comm_strength = vec![0.0; n];
        let mut comm_size = vec![0; n];
        for (v, &c) in labels.iter().enumerate() {
            comm_strength[c] += g.strength[v];
            comm_size[c] += 1;
        }
        let empty = (0..n).rev().filter(|&c| comm_size[c] == 0).collect();
        Self { membership: labels, comm_strength, comm_size, empty }
    }

    fn community_count(&self) -> usize {
        self.comm_size.iter().filter(|&&s| s > 0).count()
    }
}

/// Relabels to `0..k` in order of first appearance.
fn compact(labels: &[usize]) -> Vec<usize> {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

fn fast_local_move(g: &WeightedGraph, part: &mut Partition, resolution: f64, rng: &mut ChaCha8Rng) -> bool {
    let n = g.node_count();
    let two_w = 2.0 * g.total_weight;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut queue: VecDeque<usize> = order.into();
    let mut queued = vec![true; n];
    let mut link = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut changed = false;

    while let Some(v) = queue.pop_front() {
        queued[v] = false;
        let current = part.membership[v];
        let kv = g.strength[v];
        for &(u, w) in &g.adj[v] {
            let c = part.membership[u];
            if link[c] == 0.0 {
                touched.push(c);
            }
            link[c] += w;
        }
        part.comm_strength[current] -= kv;
        part.comm_size[current] -= 1;

        let gain = |c: usize, link: &[f64], strength: &[f64]| link[c] - resolution * kv * strength[c] / two_w;
        let mut best = current;
        let mut best_gain = gain(current, &link, &part.comm_strength);
        for &c in &touched {
            let g_c = gain(c, &link, &part.comm_strength);
            if g_c > best_gain + MOVE_EPSILON {
                best = c;
                best_gain = g_c;
            }
        }
        if part.comm_size[current] > 0 && 0.0 > best_gain + MOVE_EPSILON {
            best = *part.empty.last().expect("a community is free while another is shared");
        }

        if best != current {
            if part.comm_size[best] == 0 {
                part.empty.pop();
            }
            if part.comm_size[current] == 0 {
                part.empty.push(current);
            }
            changed = true;
            for &(u, _) in &g.adj[v] {
                if !queued[u] && part.membership[u] != best {
                    queued[u] = true;
                    queue.push_back(u);
                }
            }
        }
        part.membership[v] = best;
        part.comm_strength[best] += kv;
        part.comm_size[best] += 1;

        for c in touched.drain(..) {
            link[c] = 0.0;
        }
    }
    changed
}

/// Splits every community of `part` into well-connected sub-communities by
/// merging singletons, starting from the singleton partition.
fn refine(g: &WeightedGraph, part: &Partition, resolution: f64, theta: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.node_count();
    let two_w = 2.0 * g.total_weight;
    let mut refined: Vec<usize> = (0..n).collect();
    let mut r_strength: Vec<f64> = g.strength.clone();
    let mut r_size = vec![1usize; n];
    // Weight from each refined community to the rest of its parent community.
    let mut r_external: Vec<f64> = (0..n)
        .map(|v| {
            g.adj[v]
                .iter()
                .filter(|(u, _)| part.membership[*u] == part.membership[v])
                .map(|(_, w)| w)
                .sum()
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut link = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();

    for v in order {
        let own = refined[v];
        if r_size[own] != 1 {
            continue;
        }
        let parent = part.membership[v];
        let parent_strength = part.comm_strength[parent];
        let kv = g.strength[v];
        if r_external[own] < resolution * kv * (parent_strength - kv) / two_w {
            continue;
        }
        for &(u, w) in &g.adj[v] {
            if part.membership[u] != parent {
                continue;
            }
            let t = refined[u];
            if link[t] == 0.0 {
                touched.push(t);
            }
            link[t] += w;
        }

        let mut candidates: Vec<(usize, f64)> = vec![(own, 0.0)];
        for &t in &touched {
            if t == own {
                continue;
            }
            let well_connected =
                r_external[t] >= resolution * r_strength[t] * (parent_strength - r_strength[t]) / two_w;
            let delta = link[t] - resolution * kv * r_strength[t] / two_w;
            if well_connected && delta >= 0.0 {
                candidates.push((t, delta));
            }
        }

        let chosen = if candidates.len() == 1 {
            own
        } else {
            let top = candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = candidates.iter().map(|c| ((c.1 - top) / theta).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut draw = rng.gen::<f64>() * total;
            let mut pick = candidates[candidates.len() - 1].0;
            for (c, w) in candidates.iter().zip(&weights) {
                if draw < *w {
                    pick = c.0;
                    break;
                }
                draw -= w;
            }
            pick
        };

        if chosen != own {
            r_external[chosen] = r_external[chosen] + r_external[own] - 2.0 * link[chosen];
            r_strength[chosen] += kv;
            r_size[chosen] += 1;
            r_size[own] = 0;
            refined[v] = chosen;
        }
        for t in touched.drain(..) {
            link[t] = 0.0;
        }
    }
    refined
}

/// Collapses each label of `labels` into one node.
fn aggregate(g: &WeightedGraph, labels: &[usize]) -> (WeightedGraph, Vec<usize>) {
    let map = compact(labels);
    let k = map.iter().copied().max().map_or(0, |m| m + 1);
    let edges = g.edges().into_iter().map(|(u, v, w)| (map[u], map[v], w));
    (WeightedGraph::from_edges(k, edges), map)
}

/// Runs Leiden on `graph` and returns the hierarchy plus the per-phase quality log.
pub fn run_leiden(graph: &WeightedGraph, cfg: &LeidenConfig) -> LeidenRun {
    let n = graph.node_count();
    let resolution = cfg.resolution;
    if n == 0 {
        return LeidenRun { levels: Vec::new(), quality_log: Vec::new(), quality: 0.0 };
    }
    let singletons: Vec<usize> = (0..n).collect();
    if graph.total_weight() == 0.0 {
        return LeidenRun {
            levels: vec![singletons],
            quality_log: vec![PhaseQuality { iteration: 0, phase: "initial".into(), quality: 0.0 }],
            quality: 0.0,
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let record = |iteration: usize, phase: &str, membership: &[usize], log: &mut Vec<PhaseQuality>| {
        log.push(PhaseQuality { iteration, phase: phase.into(), quality: graph.modularity(membership, resolution) });
    };

    let mut current = graph.clone();
    let mut to_current: Vec<usize> = singletons.clone();
    let mut part = Partition::from_labels(&current, (0..n).collect());
    let flatten = |part: &Partition, to_current: &[usize]| -> Vec<usize> {
        compact(&to_current.iter().map(|&a| part.membership[a]).collect::<Vec<_>>())
    };
    record(0, "initial", &singletons, &mut log);

    let mut refined_levels: Vec<Vec<usize>> = Vec::new();
    for iteration in 1..=cfg.max_iterations.max(1) {
        fast_local_move(&current, &mut part, resolution, &mut rng);
        record(iteration, "local_moving", &flatten(&part, &to_current), &mut log);
        if part.community_count() == current.node_count() {
            break;
        }

        let mut refined = refine(&current, &part, resolution, cfg.theta, &mut rng);
        if compact(&refined).iter().max().map_or(0, |m| m + 1) == current.node_count() {
            // No merges happened; fall back to the connected pieces of each community.
            refined = current.split_disconnected(&part.membership);
            if compact(&refined).iter().max().map_or(0, |m| m + 1) == current.node_count() {
                break;
            }
        }
        record(iteration, "refinement", &flatten(&part, &to_current), &mut log);

        let (next, map) = aggregate(&current, &refined);
        let mut labels = vec![0usize; next.node_count()];
        for (v, &a) in map.iter().enumerate() {
            labels[a] = part.membership[v];
        }
        for a in to_current.iter_mut() {
            *a = map[*a];
        }
        refined_levels.push(to_current.clone());
        part = Partition::from_labels(&next, compact(&labels));
        current = next;
        record(iteration, "aggregation", &flatten(&part, &to_current), &mut log);
    }

    let mut final_level = flatten(&part, &to_current);
    let connected = compact(&graph.split_disconnected(&final_level));
    if connected != final_level {
        final_level = connected;
        record(log.last().map_or(0, |q| q.iteration), "connectivity", &final_level, &mut log);
    }

    let mut levels = vec![final_level];
    for level in refined_levels.into_iter().rev() {
        let level = compact(&level);
        let is_singletons = level == singletons;
        if levels.last() != Some(&level) && !is_singletons {
            levels.push(level);
        }
    }
    levels.truncate(cfg.max_levels.max(1));
    let quality = graph.modularity(&levels[0], resolution);
    LeidenRun { levels, quality_log: log, quality }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommunityHierarchy {
    pub assignments: Vec<CommunityAssignment>,
    pub run: LeidenRun,
}

impl CommunityHierarchy {
    pub fn level(&self, level: usize) -> impl Iterator<Item = &CommunityAssignment> {
        self.assignments.iter().filter(move |a| a.level == level)
    }
}

/// Leiden over an entity graph. Node `i` is the `i`-th entity name in sorted order.
pub fn leiden_partition(graph: &EntityGraph, cfg: &LeidenConfig) -> CommunityHierarchy {
    let run = run_leiden(&graph.to_weighted(), cfg);
    let names = graph.node_names();
    CommunityHierarchy { assignments: assignments_from_levels(&names, &run.levels), run }
}

/// Turns membership levels into assignments with ids unique across levels.
pub fn assignments_from_levels(names: &[String], levels: &[Vec<usize>]) -> Vec<CommunityAssignment> {
    let mut out: Vec<CommunityAssignment> = Vec::new();
    let mut previous_ids: Vec<u32> = Vec::new();
    let mut next_id = 0u32;
    for (level, membership) in levels.iter().enumerate() {
        let count = membership.iter().copied().max().map_or(0, |m| m + 1);
        let first_id = next_id;
        let mut groups: Vec<CommunityAssignment> = (0..count)
            .map(|c| CommunityAssignment {
                level,
                community_id: first_id + c as u32,
                parent: None,
                members: Default::default(),
            })
            .collect();
        next_id += count as u32;
        let mut node_ids = vec![0u32; membership.len()];
        for (v, &c) in membership.iter().enumerate() {
            groups[c].members.insert(names[v].clone());
            node_ids[v] = first_id + c as u32;
            if level > 0 {
                groups[c].parent = Some(previous_ids[v]);
            }
        }
        previous_ids = node_ids;
        out.extend(groups);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_cliques_with_bridge() -> WeightedGraph {
        let mut edges = Vec::new();
        for base in [0, 5] {
            for i in 0..5 {
                for j in i + 1..5 {
                    edges.push((base + i, base + j, 1.0));
                }
            }
        }
        edges.push((4, 5, 1.0));
        WeightedGraph::from_edges(10, edges)
    }

    #[test]
    fn disjoint_triangles_modularity() {
        let g = WeightedGraph::from_edges(6, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0), (3, 4, 1.0), (4, 5, 1.0), (3, 5, 1.0)]);
        assert!((g.modularity(&[0, 0, 0, 1, 1, 1], 1.0) - 0.5).abs() < 1e-15);
        assert!(g.modularity(&[0; 6], 1.0).abs() < 1e-15);
    }

    #[test]
    fn cliques_are_recovered() {
        let run = run_leiden(&two_cliques_with_bridge(), &LeidenConfig::default());
        assert_eq!(run.levels[0], vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn edgeless_graph_gives_singletons() {
        let run = run_leiden(&WeightedGraph::from_edges(4, []), &LeidenConfig::default());
        assert_eq!(run.levels, vec![vec![0, 1, 2, 3]]);
        let run = run_leiden(&WeightedGraph::from_edges(0, []), &LeidenConfig::default());
        assert!(run.levels.is_empty());
    }

    #[test]
    fn quality_log_never_decreases() {
        let run = run_leiden(&two_cliques_with_bridge(), &LeidenConfig { seed: 3, ..LeidenConfig::default() });
        for pair in run.quality_log.windows(2) {
            assert!(pair[1].quality >= pair[0].quality, "{:?}", run.quality_log);
        }
    }

    #[test]
    fn aggregated_self_loops_preserve_quality() {
        let g = two_cliques_with_bridge();
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let (agg, map) = aggregate(&g, &labels);
        assert_eq!(agg.node_count(), 2);
        assert_eq!(agg.total_weight(), g.total_weight());
        let q_agg = agg.modularity(&[0, 1], 1.0);
        let q = g.modularity(&labels, 1.0);
        assert!((q - q_agg).abs() < 1e-12);
        assert_eq!(map, labels);
    }

    #[test]
    fn hierarchy_levels_nest() {
        // Four 4-cliques in a ring of bridges, then pairs of rings joined weakly.
        let mut edges = Vec::new();
        for block in 0..8 {
            let b = block * 4;
            for i in 0..4 {
                for j in i + 1..4 {
                    edges.push((b + i, b + j, 1.0));
                }
            }
            edges.push((b + 3, (b + 4) % 32, 0.5));
        }
        let g = WeightedGraph::from_edges(32, edges);
        let run = run_leiden(&g, &LeidenConfig { max_levels: 5, ..LeidenConfig::default() });
        for pair in run.levels.windows(2) {
            let (coarse, fine) = (&pair[0], &pair[1]);
            let mut parent: BTreeMap<usize, usize> = BTreeMap::new();
            for v in 0..32 {
                assert_eq!(*parent.entry(fine[v]).or_insert(coarse[v]), coarse[v], "level does not nest");
            }
        }
        let names: Vec<String> = (0..32).map(|i| format!("N{i:02}")).collect();
        let assignments = assignments_from_levels(&names, &run.levels);
        let ids: std::collections::BTreeSet<u32> = assignments.iter().map(|a| a.community_id).collect();
        assert_eq!(ids.len(), assignments.len());
    }
}
