//! Conversation sessions persisted in an embedded key-value store file.
//!
//! A session idle for longer than the TTL is treated as absent: reading it
//! yields `None` and [`SessionStore::purge_expired`] deletes it.

use std::path::Path;

use redb::{Database, ReadableTable, ReadableTableMetadata, TableDefinition};
use reservoirchat_core::query_engine::ChatTurn;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

const SESSIONS: TableDefinition<&str, &[u8]> = TableDefinition::new("sessions");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<ChatTurn>,
    /// Unix seconds.
    pub created_at: i64,
    pub last_active: i64,
}

impl Session {
    pub fn new(session_id: impl Into<String>, now: i64) -> Self {
        Self { session_id: session_id.into(), turns: Vec::new(), created_at: now, last_active: now }
    }
}

fn store_err(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Store(e.to_string())
}

pub struct SessionStore {
    db: Database,
    ttl_secs: i64,
}

impl SessionStore {
    pub fn open(path: &Path, ttl_secs: u64) -> Result<Self, ServiceError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let db = Database::create(path).map_err(store_err)?;
        let tx = db.begin_write().map_err(store_err)?;
        tx.open_table(SESSIONS).map_err(store_err)?;
        tx.commit().map_err(store_err)?;
        Ok(Self { db, ttl_secs: i64::try_from(ttl_secs).unwrap_or(i64::MAX) })
    }

    fn expired(&self, s: &Session, now: i64) -> bool {
        now.saturating_sub(s.last_active) > self.ttl_secs
    }

    pub fn get(&self, session_id: &str, now: i64) -> Result<Option<Session>, ServiceError> {
        let tx = self.db.begin_read().map_err(store_err)?;
        let table = tx.open_table(SESSIONS).map_err(store_err)?;
        let Some(raw) = table.get(session_id).map_err(store_err)? else {
            return Ok(None);
        };
        let session: Session = serde_json::from_slice(raw.value()).map_err(store_err)?;
        Ok(Some(session).filter(|s| !self.expired(s, now)))
    }

    pub fn put(&self, session: &Session) -> Result<(), ServiceError> {
        let bytes = serde_json::to_vec(session).map_err(store_err)?;
        let tx = self.db.begin_write().map_err(store_err)?;
        {
            let mut table = tx.open_table(SESSIONS).map_err(store_err)?;
            table.insert(session.session_id.as_str(), bytes.as_slice()).map_err(store_err)?;
        }
        tx.commit().map_err(store_err)
    }

    /// Deletes every expired session; returns how many were removed.
    pub fn purge_expired(&self, now: i64) -> Result<usize, ServiceError> {
        let tx = self.db.begin_write().map_err(store_err)?;
        let removed = {
            let mut table = tx.open_table(SESSIONS).map_err(store_err)?;
            let mut stale = Vec::new();
            for row in table.iter().map_err(store_err)? {
                let (key, value) = row.map_err(store_err)?;
                let expired = match serde_json::from_slice::<Session>(value.value()) {
                    Ok(s) => self.expired(&s, now),
                    Err(_) => true,
                };
                if expired {
                    stale.push(key.value().to_string());
                }
            }
            for key in &stale {
                table.remove(key.as_str()).map_err(store_err)?;
            }
            stale.len()
        };
        tx.commit().map_err(store_err)?;
        Ok(removed)
    }

    pub fn len(&self) -> Result<usize, ServiceError> {
        let tx = self.db.begin_read().map_err(store_err)?;
        let table = tx.open_table(SESSIONS).map_err(store_err)?;
        Ok(table.len().map_err(store_err)? as usize)
    }

    pub fn is_empty(&self) -> Result<bool, ServiceError> {
        Ok(self.len()? == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_expiry_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sessions.redb");
        {
            let store = SessionStore::open(&path, 100).unwrap();
            let mut s = Session::new("a", 1_000);
            s.turns.push(ChatTurn::user("hello"));
            store.put(&s).unwrap();
            store.put(&Session::new("b", 1_050)).unwrap();
            assert_eq!(store.get("a", 1_100).unwrap(), Some(s));
            assert_eq!(store.get("a", 1_101).unwrap(), None, "idle past the TTL");
            assert_eq!(store.get("missing", 0).unwrap(), None);
        }
        let store = SessionStore::open(&path, 100).unwrap();
        assert_eq!(store.len().unwrap(), 2, "sessions survive reopening");
        assert_eq!(store.purge_expired(1_120).unwrap(), 1);
        assert!(store.get("b", 1_120).unwrap().is_some());
    }
}
