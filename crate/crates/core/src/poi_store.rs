//! Persistent POI registry and operator state with revision-cursor polling.
//!
//! Every POI mutation takes the next value of a global revision counter.
//! A client that polls with the cursor it was last given receives each POI
//! change exactly once, in revision order. When a POI changes twice between
//! polls only its latest revision is returned.
//!
//! Storage is a single journal file: a header line followed by one JSON event
//! per line. Mutations are appended and fsynced before they become visible.
//! [`PoiStore::checkpoint`] rewrites the journal as a compact snapshot through
//! a temporary file and an atomic rename.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::GeodeticCoord;

pub const STORE_FORMAT: &str = "poiloc-store";
pub const STORE_VERSION: u32 = 1;

/// Journal events beyond the live record count before an automatic checkpoint.
const COMPACT_SLACK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("corrupt store at byte {offset}: {reason}")]
    CorruptStore { offset: u64, reason: String },
    #[error("unknown target POI: {0}")]
    UnknownTarget(String),
    #[error("POI not found: {0}")]
    NotFound(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

fn storage(e: io::Error) -> StoreError {
    StoreError::StorageFailure(e.to_string())
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// POI category. Serialized as `victim`, `evidence`, `hazard` or `other:<label>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PoiKind {
    Victim,
    Evidence,
    Hazard,
    Other(String),
}

impl fmt::Display for PoiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoiKind::Victim => f.write_str("victim"),
            PoiKind::Evidence => f.write_str("evidence"),
            PoiKind::Hazard => f.write_str("hazard"),
            PoiKind::Other(label) => write!(f, "other:{label}"),
        }
    }
}

impl std::str::FromStr for PoiKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "victim" => Ok(PoiKind::Victim),
            "evidence" => Ok(PoiKind::Evidence),
            "hazard" => Ok(PoiKind::Hazard),
            _ => match s.strip_prefix("other:") {
                Some(label) if !label.trim().is_empty() => Ok(PoiKind::Other(label.to_string())),
                _ => Err(format!(
                    "unknown POI kind {s:?} (expected victim, evidence, hazard or other:<label>)"
                )),
            },
        }
    }
}

impl TryFrom<String> for PoiKind {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PoiKind> for String {
    fn from(k: PoiKind) -> Self {
        k.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: String,
    pub kind: PoiKind,
    pub location: GeodeticCoord,
    pub created_by: String,
    pub created_at_ms: u64,
    /// Global revision of the latest mutation of this POI.
    pub revision: u64,
    #[serde(default)]
    pub deleted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "RO")]
    Ro,
    #[serde(rename = "OSO")]
    Oso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorState {
    pub id: String,
    pub role: Role,
    #[serde(default)]
    pub location: Option<GeodeticCoord>,
    #[serde(default)]
    pub next_target: Option<String>,
    #[serde(default)]
    pub updated_at_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChangeCursor {
    pub last_revision: u64,
}

impl ChangeCursor {
    pub const START: ChangeCursor = ChangeCursor { last_revision: 0 };

    pub fn new(last_revision: u64) -> Self {
        Self { last_revision }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Event {
    PutPoi { poi: Poi },
    PutOperator { operator: OperatorState },
}

#[derive(Debug, Default, Clone, PartialEq)]
struct State {
    pois: HashMap<String, Poi>,
    /// Current revision of each POI, for cursor range scans.
    by_revision: BTreeMap<u64, String>,
    operators: BTreeMap<String, OperatorState>,
    revision: u64,
}

impl State {
    fn apply(&mut self, event: Event) {
        match event {
            Event::PutPoi { poi } => {
                if let Some(old) = self.pois.get(&poi.id) {
                    self.by_revision.remove(&old.revision);
                }
                self.revision = self.revision.max(poi.revision);
                self.by_revision.insert(poi.revision, poi.id.clone());
                self.pois.insert(poi.id.clone(), poi);
            }
            Event::PutOperator { operator } => {
                self.operators.insert(operator.id.clone(), operator);
            }
        }
    }

    fn check_event(&self, event: &Event) -> Result<(), String> {
        match event {
            Event::PutPoi { poi } => {
                if poi.revision <= self.revision {
                    return Err(format!(
                        "POI {} revision {} does not advance past {}",
                        poi.id, poi.revision, self.revision
                    ));
                }
                Ok(())
            }
            Event::PutOperator { operator } => match &operator.next_target {
                Some(t) if !self.pois.contains_key(t) => Err(format!("operator {} targets unknown POI {t}", operator.id)),
                _ => Ok(()),
            },
        }
    }

    fn snapshot(&self) -> Vec<Event> {
        let mut pois: Vec<&Poi> = self.pois.values().collect();
        pois.sort_by_key(|p| p.revision);
        pois.into_iter()
            .map(|p| Event::PutPoi { poi: p.clone() })
            .chain(self.operators.values().map(|o| Event::PutOperator { operator: o.clone() }))
            .collect()
    }
}

struct Journal {
    path: PathBuf,
    file: File,
    len: u64,
    events: usize,
}

impl Journal {
    fn append(&mut self, event: &Event) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(event).map_err(|e| StoreError::StorageFailure(e.to_string()))?;
        line.push(b'\n');
        let written = self.file.write_all(&line).and_then(|_| self.file.sync_data());
        if let Err(e) = written {
            // Roll back a torn append so the journal stays loadable.
            let _ = self.file.set_len(self.len);
            return Err(storage(e));
        }
        self.len += line.len() as u64;
        self.events += 1;
        Ok(())
    }
}

fn header_line() -> Vec<u8> {
    let mut line = serde_json::to_vec(&Header {
        format: STORE_FORMAT.into(),
        version: STORE_VERSION,
    })
    .expect("header serializes");
    line.push(b'\n');
    line
}

/// Thread-safe POI and operator store, optionally backed by a journal file.
pub struct PoiStore {
    // Held for the whole of a mutation, including its fsync, so revisions are
    // assigned and published in order. Readers only take `state`.
    journal: Mutex<Option<Journal>>,
    state: RwLock<State>,
}

impl fmt::Debug for PoiStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PoiStore").field("revision", &self.revision()).finish()
    }
}

impl PoiStore {
    /// A store that lives only in memory.
    pub fn in_memory() -> Self {
        Self {
            journal: Mutex::new(None),
            state: RwLock::new(State::default()),
        }
    }

    /// Opens or creates the store at `path`. A missing or empty file yields
    /// an empty store; any malformed content fails with `CorruptStore`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(storage(e)),
        };
        let (state, events) = parse_journal(&bytes)?;

        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(storage)?;
        let mut len = bytes.len() as u64;
        if bytes.is_empty() {
            let header = header_line();
            file.write_all(&header).and_then(|_| file.sync_all()).map_err(storage)?;
            sync_parent(&path)?;
            len = header.len() as u64;
        }
        Ok(Self {
            journal: Mutex::new(Some(Journal {
                path,
                file,
                len,
                events,
            })),
            state: RwLock::new(state),
        })
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.lock_journal().as_ref().map(|j| j.path.clone())
    }

    fn lock_journal(&self) -> std::sync::MutexGuard<'_, Option<Journal>> {
        self.journal.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|p| p.into_inner())
    }

    /// Persists `event` then publishes it. Caller holds the journal lock.
    fn commit(&self, journal: &mut Option<Journal>, event: Event) -> Result<(), StoreError> {
        if let Some(j) = journal.as_mut() {
            j.append(&event)?;
        }
        self.state.write().unwrap_or_else(|p| p.into_inner()).apply(event);
        let needs_compaction = journal.as_ref().is_some_and(|j| {
            let live = {
                let s = self.read();
                s.pois.len() + s.operators.len()
            };
            j.events > live + COMPACT_SLACK
        });
        if needs_compaction {
            // The mutation is already durable; a failed compaction leaves the
            // journal as it was.
            let _ = self.checkpoint_locked(journal);
        }
        Ok(())
    }

    /// Adds a POI and returns it once durable.
    pub fn add_poi(&self, kind: PoiKind, location: GeodeticCoord, created_by: &str) -> Result<Poi, StoreError> {
        if created_by.trim().is_empty() {
            return Err(StoreError::InvalidInput("created_by must not be empty".into()));
        }
        let mut journal = self.lock_journal();
        let revision = self.read().revision + 1;
        let poi = Poi {
            id: format!("poi-{revision}"),
            kind,
            location,
            created_by: created_by.to_string(),
            created_at_ms: now_ms(),
            revision,
            deleted: false,
        };
        self.commit(&mut journal, Event::PutPoi { poi: poi.clone() })?;
        Ok(poi)
    }

    /// Changes kind and/or location of an existing POI, bumping its revision.
    pub fn update_poi(&self, id: &str, kind: Option<PoiKind>, location: Option<GeodeticCoord>) -> Result<Poi, StoreError> {
        self.mutate_poi(id, |p| {
            if let Some(k) = kind {
                p.kind = k;
            }
            if let Some(l) = location {
                p.location = l;
            }
        })
    }

    /// Marks a POI deleted. It stays visible to polling so clients can drop it.
    pub fn delete_poi(&self, id: &str) -> Result<Poi, StoreError> {
        self.mutate_poi(id, |p| p.deleted = true)
    }

    fn mutate_poi(&self, id: &str, f: impl FnOnce(&mut Poi)) -> Result<Poi, StoreError> {
        let mut journal = self.lock_journal();
        let poi = {
            let s = self.read();
            let mut poi = s.pois.get(id).cloned().ok_or_else(|| StoreError::NotFound(id.into()))?;
            f(&mut poi);
            poi.revision = s.revision + 1;
            poi
        };
        self.commit(&mut journal, Event::PutPoi { poi: poi.clone() })?;
        Ok(poi)
    }

    pub fn get_poi(&self, id: &str) -> Option<Poi> {
        self.read().pois.get(id).cloned()
    }

    /// POIs whose current revision is newer than `since`, in revision order,
    /// and the cursor to use for the next poll.
    pub fn get_pois(&self, since: ChangeCursor) -> (Vec<Poi>, ChangeCursor) {
        let s = self.read();
        let pois = s
            .by_revision
            .range(since.last_revision.saturating_add(1)..)
            .map(|(_, id)| s.pois[id].clone())
            .collect();
        (pois, ChangeCursor::new(s.revision.max(since.last_revision)))
    }

    /// Inserts or replaces an operator's state. A `next_target` must name an
    /// existing, non-deleted POI. `updated_at_ms` of 0 is stamped with now.
    pub fn update_operator(&self, mut state: OperatorState) -> Result<OperatorState, StoreError> {
        if state.id.trim().is_empty() {
            return Err(StoreError::InvalidInput("operator id must not be empty".into()));
        }
        let mut journal = self.lock_journal();
        if let Some(target) = &state.next_target {
            match self.read().pois.get(target) {
                Some(p) if !p.deleted => {}
                _ => return Err(StoreError::UnknownTarget(target.clone())),
            }
        }
        if state.updated_at_ms == 0 {
            state.updated_at_ms = now_ms();
        }
        self.commit(&mut journal, Event::PutOperator { operator: state.clone() })?;
        Ok(state)
    }

    /// All operators, ordered by id.
    pub fn list_operators(&self) -> Vec<OperatorState> {
        self.read().operators.values().cloned().collect()
    }

    /// Highest revision assigned so far.
    pub fn revision(&self) -> u64 {
        self.read().revision
    }

    pub fn poi_count(&self) -> usize {
        self.read().pois.len()
    }

    /// Rewrites the journal as a snapshot of the current state.
    pub fn checkpoint(&self) -> Result<(), StoreError> {
        let mut journal = self.lock_journal();
        self.checkpoint_locked(&mut journal)
    }

    fn checkpoint_locked(&self, journal: &mut Option<Journal>) -> Result<(), StoreError> {
        let Some(j) = journal.as_mut() else {
            return Ok(());
        };
        let events = self.read().snapshot();
        let mut buf = header_line();
        for e in &events {
            serde_json::to_writer(&mut buf, e).map_err(|e| StoreError::StorageFailure(e.to_string()))?;
            buf.push(b'\n');
        }
        let tmp = j.path.with_extension("tmp");
        let write_tmp = || -> io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()
        };
        write_tmp().map_err(storage)?;
        fs::rename(&tmp, &j.path).map_err(storage)?;
        sync_parent(&j.path)?;
        j.file = OpenOptions::new().append(true).open(&j.path).map_err(storage)?;
        j.len = buf.len() as u64;
        j.events = events.len();
        Ok(())
    }
}

fn sync_parent(path: &Path) -> Result<(), StoreError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    // Directory fsync is not supported everywhere; the data itself is synced.
    if let Ok(dir) = File::open(parent) {
        let _ = dir.sync_all();
    }
    Ok(())
}

/// Parses a whole journal. Every line, the last included, must be complete.
fn parse_journal(bytes: &[u8]) -> Result<(State, usize), StoreError> {
    let mut state = State::default();
    if bytes.is_empty() {
        return Ok((state, 0));
    }
    let corrupt = |offset: usize, reason: String| StoreError::CorruptStore {
        offset: offset as u64,
        reason,
    };
    let mut offset = 0;
    let mut events = 0;
    while offset < bytes.len() {
        let Some(end) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(corrupt(offset, "truncated record".into()));
        };
        let line = &bytes[offset..offset + end];
        if offset == 0 {
            let header: Header =
                serde_json::from_slice(line).map_err(|e| corrupt(0, format!("invalid header: {e}")))?;
            if header.format != STORE_FORMAT || header.version != STORE_VERSION {
                return Err(corrupt(
                    0,
                    format!("unsupported store {} v{}", header.format, header.version),
                ));
            }
        } else {
            let event: Event = serde_json::from_slice(line).map_err(|e| corrupt(offset, e.to_string()))?;
            state.check_event(&event).map_err(|r| corrupt(offset, r))?;
            state.apply(event);
            events += 1;
        }
        offset += end + 1;
    }
    Ok((state, events))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loc(lat: f64) -> GeodeticCoord {
        GeodeticCoord::new(lat, -90.2342, 142.0).unwrap()
    }

    fn store_file() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pois.journal");
        (dir, path)
    }

    #[test]
    fn kind_text_form() {
        for (k, s) in [
            (PoiKind::Victim, "victim"),
            (PoiKind::Hazard, "hazard"),
            (PoiKind::Other("debris".into()), "other:debris"),
        ] {
            assert_eq!(k.to_string(), s);
            assert_eq!(s.parse::<PoiKind>().unwrap(), k);
        }
        assert!("other:".parse::<PoiKind>().is_err());
        assert!("rubble".parse::<PoiKind>().is_err());
    }

    #[test]
    fn add_then_poll() {
        let store = PoiStore::in_memory();
        let p = store.add_poi(PoiKind::Victim, loc(38.6367), "ro-1").unwrap();
        let (got, cursor) = store.get_pois(ChangeCursor::START);
        assert_eq!(got, vec![p.clone()]);
        assert_eq!(cursor.last_revision, p.revision);
        let (again, same) = store.get_pois(cursor);
        assert!(again.is_empty());
        assert_eq!(same, cursor);
    }

    #[test]
    fn ids_unique_and_revisions_increase() {
        let store = PoiStore::in_memory();
        let pois: Vec<_> = (0..5).map(|i| store.add_poi(PoiKind::Evidence, loc(38.0 + i as f64 * 1e-4), "ro").unwrap()).collect();
        for w in pois.windows(2) {
            assert!(w[1].revision > w[0].revision);
            assert_ne!(w[0].id, w[1].id);
        }
        let (_, c) = store.get_pois(ChangeCursor::new(2));
        assert_eq!(c.last_revision, 5);
        assert_eq!(store.get_pois(ChangeCursor::new(2)).0.len(), 3);
    }

    #[test]
    fn updates_and_deletes_resurface() {
        let store = PoiStore::in_memory();
        let a = store.add_poi(PoiKind::Victim, loc(38.0), "ro").unwrap();
        let b = store.add_poi(PoiKind::Hazard, loc(38.1), "ro").unwrap();
        let (_, cursor) = store.get_pois(ChangeCursor::START);

        let a2 = store.update_poi(&a.id, Some(PoiKind::Evidence), None).unwrap();
        assert_eq!(a2.revision, 3);
        let (changed, cursor) = store.get_pois(cursor);
        assert_eq!(changed, vec![a2]);

        let b2 = store.delete_poi(&b.id).unwrap();
        assert!(b2.deleted);
        assert_eq!(store.get_pois(cursor).0, vec![b2]);
        assert_eq!(store.update_poi("poi-99", None, None), Err(StoreError::NotFound("poi-99".into())));
    }

    #[test]
    fn operator_targets_must_exist() {
        let store = PoiStore::in_memory();
        let mut oso = OperatorState {
            id: "oso-1".into(),
            role: Role::Oso,
            location: Some(loc(38.6)),
            next_target: Some("poi-1".into()),
            updated_at_ms: 0,
        };
        assert_eq!(store.update_operator(oso.clone()), Err(StoreError::UnknownTarget("poi-1".into())));
        let p = store.add_poi(PoiKind::Victim, loc(38.0), "ro").unwrap();
        oso.next_target = Some(p.id.clone());
        let saved = store.update_operator(oso).unwrap();
        assert!(saved.updated_at_ms > 0);
        store.update_operator(OperatorState {
            id: "ro-1".into(),
            role: Role::Ro,
            location: None,
            next_target: None,
            updated_at_ms: 5,
        })
        .unwrap();
        let ops = store.list_operators();
        assert_eq!(ops.iter().map(|o| o.id.as_str()).collect::<Vec<_>>(), ["oso-1", "ro-1"]);
        store.delete_poi(&p.id).unwrap();
        let mut stale = ops[0].clone();
        stale.updated_at_ms = 0;
        assert!(matches!(store.update_operator(stale), Err(StoreError::UnknownTarget(_))));
    }

    #[test]
    fn missing_and_empty_files_load_empty() {
        let (_dir, path) = store_file();
        let store = PoiStore::open(&path).unwrap();
        assert_eq!(store.revision(), 0);
        assert!(path.exists());
        drop(store);
        fs::write(&path, b"").unwrap();
        assert_eq!(PoiStore::open(&path).unwrap().poi_count(), 0);
    }

    #[test]
    fn reload_preserves_everything() {
        let (_dir, path) = store_file();
        let store = PoiStore::open(&path).unwrap();
        let p = store.add_poi(PoiKind::Other("car".into()), loc(38.2), "ro-1").unwrap();
        store.add_poi(PoiKind::Victim, loc(38.3), "ro-2").unwrap();
        store.delete_poi(&p.id).unwrap();
        store
            .update_operator(OperatorState {
                id: "oso".into(),
                role: Role::Oso,
                location: Some(loc(38.25)),
                next_target: Some("poi-2".into()),
                updated_at_ms: 77,
            })
            .unwrap();
        let before = store.read().clone();
        drop(store);

        let reopened = PoiStore::open(&path).unwrap();
        assert_eq!(*reopened.read(), before);
        reopened.checkpoint().unwrap();
        drop(reopened);
        let compacted = PoiStore::open(&path).unwrap();
        assert_eq!(*compacted.read(), before);
        assert_eq!(compacted.add_poi(PoiKind::Hazard, loc(38.4), "ro").unwrap().revision, 4);
    }

    #[test]
    fn truncated_tail_is_corrupt() {
        let (_dir, path) = store_file();
        let store = PoiStore::open(&path).unwrap();
        store.add_poi(PoiKind::Victim, loc(38.0), "ro").unwrap();
        store.add_poi(PoiKind::Victim, loc(38.1), "ro").unwrap();
        drop(store);
        let bytes = fs::read(&path).unwrap();
        let last_start = bytes[..bytes.len() - 1].iter().rposition(|&b| b == b'\n').unwrap() + 1;
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match PoiStore::open(&path) {
            Err(StoreError::CorruptStore { offset, .. }) => assert_eq!(offset, last_start as u64),
            other => panic!("expected CorruptStore, got {other:?}"),
        }
    }

    #[test]
    fn garbage_and_bad_header_are_corrupt() {
        let (_dir, path) = store_file();
        fs::write(&path, b"{\"format\":\"other\",\"version\":1}\n").unwrap();
        assert!(matches!(PoiStore::open(&path), Err(StoreError::CorruptStore { offset: 0, .. })));

        let mut bytes = header_line();
        let header_len = bytes.len() as u64;
        bytes.extend_from_slice(b"not json\n");
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(PoiStore::open(&path), Err(StoreError::CorruptStore { offset, .. }) if offset == header_len));
    }

    #[test]
    fn journal_compacts_itself() {
        let (_dir, path) = store_file();
        let store = PoiStore::open(&path).unwrap();
        let op = OperatorState {
            id: "oso".into(),
            role: Role::Oso,
            location: None,
            next_target: None,
            updated_at_ms: 1,
        };
        for _ in 0..COMPACT_SLACK + 10 {
            store.update_operator(op.clone()).unwrap();
        }
        let events = store.lock_journal().as_ref().unwrap().events;
        assert!(events < 20, "{events}");
        drop(store);
        assert_eq!(PoiStore::open(&path).unwrap().list_operators(), vec![op]);
    }
}
