//! On-disk trajectory store.
//!
//! ```text
//! <root>/blobs/<first two hex chars>/<sha256 hex>.png
//! <root>/episodes/<episode_id>.jsonl
//! ```
//!
//! Each episode file holds one `start` line, one `turn` line per step and a
//! final `end` line. A file without an `end` line belongs to an episode the
//! server never closed and is read back as ABORTED.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::protocol::messages::{EpisodeStatus, TrajectoryFilter, TrajectoryRecord, TurnRecord};
use crate::protocol::ReplicaId;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {detail}")]
    Corrupt { path: PathBuf, line: usize, detail: String },
    #[error("episode {0} is not open")]
    NotOpen(String),
    #[error("episode {0} already exists")]
    Exists(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// One line of an episode file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpisodeLine {
    Start {
        episode_id: String,
        task_id: String,
        replica_id: ReplicaId,
        instruction: String,
        started_at: u64,
        /// Initial screenshot.
        observation_ref: String,
    },
    Turn(TurnRecord),
    End {
        status: EpisodeStatus,
        final_score: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        final_observation_ref: Option<String>,
        ended_at: u64,
    },
}

impl EpisodeLine {
    /// Sorted-key JSON, no trailing newline.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("episode lines always serialize");
        serde_json::to_string(&value).expect("json values always serialize")
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct OpenEpisode {
    record: TrajectoryRecord,
    /// Screenshot the agent sees before its next action.
    current_ref: String,
    file: File,
}

#[derive(Default)]
struct State {
    blobs: HashSet<String>,
    open: HashMap<String, OpenEpisode>,
    closed: BTreeMap<(u64, String), TrajectoryRecord>,
}

pub struct TrajectoryStore {
    root: PathBuf,
    state: Mutex<State>,
}

impl std::fmt::Debug for TrajectoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrajectoryStore").field("root", &self.root).finish()
    }
}

impl TrajectoryStore {
    /// Opens (or creates) a store, loading every episode already on disk.
    /// Unterminated episodes are closed as ABORTED.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let blobs_dir = root.join("blobs");
        let episodes_dir = root.join("episodes");
        fs::create_dir_all(&blobs_dir).map_err(io_err(&blobs_dir))?;
        fs::create_dir_all(&episodes_dir).map_err(io_err(&episodes_dir))?;

        let mut state = State::default();
        for entry in walkdir::WalkDir::new(&blobs_dir).min_depth(2).max_depth(2) {
            let entry = entry.map_err(|e| StoreError::Io {
                path: blobs_dir.clone(),
                source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("directory walk failed")),
            })?;
            let name = entry.file_name().to_string_lossy();
            if let Some(hash) = name.strip_suffix(".png") {
                state.blobs.insert(hash.to_string());
            }
        }

        let store = TrajectoryStore { root, state: Mutex::new(State::default()) };
        for path in store.episode_files()? {
            let (record, terminated) = read_episode(&path)?;
            if !terminated {
                let end = EpisodeLine::End {
                    status: EpisodeStatus::Aborted,
                    final_score: record.final_score,
                    final_observation_ref: record.final_observation_ref.clone(),
                    ended_at: record.ended_at,
                };
                append_line(&path, &end)?;
            }
            state.closed.insert((record.started_at, record.episode_id.clone()), record);
        }
        *store.state.lock() = state;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blob_path(&self, hash: &str) -> PathBuf {
        let prefix = hash.get(..2).unwrap_or("xx");
        self.root.join("blobs").join(prefix).join(format!("{hash}.png"))
    }

    pub fn episode_path(&self, episode_id: &str) -> PathBuf {
        self.root.join("episodes").join(format!("{episode_id}.jsonl"))
    }

    fn episode_files(&self) -> Result<Vec<PathBuf>, StoreError> {
        let dir = self.root.join("episodes");
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        Ok(files)
    }

    /// Stores `bytes` once under its SHA-256 and returns the hex digest.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let hash = content_hash(bytes);
        if self.state.lock().blobs.contains(&hash) {
            return Ok(hash);
        }
        let path = self.blob_path(&hash);
        let dir = path.parent().expect("blob paths have a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = dir.join(format!(".{hash}.{}.tmp", std::process::id()));
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.state.lock().blobs.insert(hash.clone());
        Ok(hash)
    }

    pub fn has_blob(&self, hash: &str) -> bool {
        self.state.lock().blobs.contains(hash)
    }

    pub fn read_blob(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.blob_path(hash);
        fs::read(&path).map_err(io_err(&path))
    }

    pub fn open_episode(
        &self,
        episode_id: &str,
        task_id: &str,
        replica_id: &ReplicaId,
        instruction: &str,
        started_at: u64,
        initial_observation: &[u8],
    ) -> Result<(), StoreError> {
        let observation_ref = self.put_blob(initial_observation)?;
        let path = self.episode_path(episode_id);
        let mut state = self.state.lock();
        if state.open.contains_key(episode_id) || path.exists() {
            return Err(StoreError::Exists(episode_id.to_string()));
        }
        let mut file = OpenOptions::new().create_new(true).append(true).open(&path).map_err(io_err(&path))?;
        let start = EpisodeLine::Start {
            episode_id: episode_id.to_string(),
            task_id: task_id.to_string(),
            replica_id: replica_id.clone(),
            instruction: instruction.to_string(),
            started_at,
            observation_ref: observation_ref.clone(),
        };
        writeln!(file, "{}", start.to_json()).map_err(io_err(&path))?;
        let record = TrajectoryRecord {
            episode_id: episode_id.to_string(),
            task_id: task_id.to_string(),
            replica_id: replica_id.clone(),
            instruction: instruction.to_string(),
            turns: Vec::new(),
            final_observation_ref: None,
            final_score: 0.0,
            status: EpisodeStatus::Aborted,
            started_at,
            ended_at: started_at,
        };
        state.open.insert(episode_id.to_string(), OpenEpisode { record, current_ref: observation_ref, file });
        Ok(())
    }

    /// Appends one turn. The turn's `observation_ref` is filled in from the
    /// screenshot the agent saw; `new_observation` becomes the next one.
    pub fn append_turn(&self, episode_id: &str, mut turn: TurnRecord, new_observation: &[u8]) -> Result<(), StoreError> {
        let new_ref = self.put_blob(new_observation)?;
        let path = self.episode_path(episode_id);
        let mut state = self.state.lock();
        let open = state.open.get_mut(episode_id).ok_or_else(|| StoreError::NotOpen(episode_id.to_string()))?;
        turn.observation_ref = std::mem::replace(&mut open.current_ref, new_ref);
        let line = EpisodeLine::Turn(turn.clone());
        writeln!(open.file, "{}", line.to_json()).map_err(io_err(&path))?;
        open.record.turns.push(turn);
        Ok(())
    }

    pub fn close_episode(
        &self,
        episode_id: &str,
        status: EpisodeStatus,
        final_score: f64,
        ended_at: u64,
    ) -> Result<TrajectoryRecord, StoreError> {
        let path = self.episode_path(episode_id);
        let mut state = self.state.lock();
        let mut open = state.open.remove(episode_id).ok_or_else(|| StoreError::NotOpen(episode_id.to_string()))?;
        let final_observation_ref = (!open.record.turns.is_empty()).then(|| open.current_ref.clone());
        let end = EpisodeLine::End { status, final_score, final_observation_ref: final_observation_ref.clone(), ended_at };
        writeln!(open.file, "{}", end.to_json()).map_err(io_err(&path))?;
        open.file.flush().map_err(io_err(&path))?;
        let mut record = open.record;
        record.status = status;
        record.final_score = final_score;
        record.final_observation_ref = final_observation_ref;
        record.ended_at = ended_at;
        state.closed.insert((record.started_at, record.episode_id.clone()), record.clone());
        Ok(record)
    }

    pub fn is_open(&self, episode_id: &str) -> bool {
        self.state.lock().open.contains_key(episode_id)
    }

    pub fn open_count(&self) -> usize {
        self.state.lock().open.len()
    }

    /// Closed episodes in `(started_at, episode_id)` order, filtered then paged.
    pub fn query(&self, filter: &TrajectoryFilter) -> Vec<TrajectoryRecord> {
        let state = self.state.lock();
        let matching = state.closed.values().filter(|r| filter.matches(r)).skip(filter.offset);
        match filter.limit {
            Some(limit) => matching.take(limit).cloned().collect(),
            None => matching.cloned().collect(),
        }
    }

    pub fn closed_count(&self) -> usize {
        self.state.lock().closed.len()
    }
}

fn append_line(path: &Path, line: &EpisodeLine) -> Result<(), StoreError> {
    let mut file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    writeln!(file, "{}", line.to_json()).map_err(io_err(path))
}

/// Folds an episode file into a record; the flag tells whether it had an end line.
pub fn read_episode(path: &Path) -> Result<(TrajectoryRecord, bool), StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let corrupt = |line: usize, detail: String| StoreError::Corrupt { path: path.to_path_buf(), line, detail };
    let mut record: Option<TrajectoryRecord> = None;
    let mut terminated = false;
    for (index, text) in BufReader::new(file).lines().enumerate() {
        let number = index + 1;
        let text = text.map_err(io_err(path))?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: EpisodeLine = match serde_json::from_str(&text) {
            Ok(line) => line,
            // A torn final write from a crash; everything before it stands.
            Err(_) if record.is_some() && !terminated => break,
            Err(e) => return Err(corrupt(number, e.to_string())),
        };
        match (parsed, record.as_mut()) {
            (EpisodeLine::Start { episode_id, task_id, replica_id, instruction, started_at, observation_ref }, None) => {
                let _ = observation_ref;
                record = Some(TrajectoryRecord {
                    episode_id,
                    task_id,
                    replica_id,
                    instruction,
                    turns: Vec::new(),
                    final_observation_ref: None,
                    final_score: 0.0,
                    status: EpisodeStatus::Aborted,
                    started_at,
                    ended_at: started_at,
                });
            }
            (EpisodeLine::Turn(turn), Some(r)) if !terminated => {
                r.ended_at = r.ended_at.max(turn.timestamp);
                r.turns.push(turn);
            }
            (EpisodeLine::End { status, final_score, final_observation_ref, ended_at }, Some(r)) if !terminated => {
                r.status = status;
                r.final_score = final_score;
                r.final_observation_ref = final_observation_ref;
                r.ended_at = ended_at;
                terminated = true;
            }
            (line, _) => return Err(corrupt(number, format!("unexpected {:?} line", kind_of(&line)))),
        }
    }
    let record = record.ok_or_else(|| corrupt(0, "missing start line".into()))?;
    Ok((record, terminated))
}

fn kind_of(line: &EpisodeLine) -> &'static str {
    match line {
        EpisodeLine::Start { .. } => "start",
        EpisodeLine::Turn(_) => "turn",
        EpisodeLine::End { .. } => "end",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Action, ActionPayload};

    fn turn(ts: u64) -> TurnRecord {
        TurnRecord {
            observation_ref: String::new(),
            thought: Some("look".into()),
            action: Action::new(ActionPayload::Noop),
            reward: 0.0,
            latency_ms: 50.0,
            timestamp: ts,
        }
    }

    #[test]
    fn blobs_are_deduplicated() {
        let dir = tempfile::tempdir().unwrap();
        let store = TrajectoryStore::open(dir.path()).unwrap();
        let a = store.put_blob(b"same bytes").unwrap();
        let b = store.put_blob(b"same bytes").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, content_hash(b"same bytes"));
        assert_eq!(store.read_blob(&a).unwrap(), b"same bytes");
        let files = walkdir::WalkDir::new(dir.path().join("blobs")).into_iter().filter(|e| {
            e.as_ref().unwrap().file_type().is_file()
        });
        assert_eq!(files.count(), 1);
    }

    #[test]
    fn refs_follow_the_observation_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let store = TrajectoryStore::open(dir.path()).unwrap();
        let id = ReplicaId::new("h", 1);
        store.open_episode("ep-1", "t", &id, "do it", 10, b"o0").unwrap();
        store.append_turn("ep-1", turn(11), b"o1").unwrap();
        store.append_turn("ep-1", turn(12), b"o2").unwrap();
        let rec = store.close_episode("ep-1", EpisodeStatus::Complete, 1.0, 13).unwrap();
        assert_eq!(rec.turns[0].observation_ref, content_hash(b"o0"));
        assert_eq!(rec.turns[1].observation_ref, content_hash(b"o1"));
        assert_eq!(rec.final_observation_ref, Some(content_hash(b"o2")));
        let (back, terminated) = read_episode(&store.episode_path("ep-1")).unwrap();
        assert!(terminated);
        assert_eq!(back, rec);
    }

    #[test]
    fn reopen_marks_unterminated_as_aborted() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = TrajectoryStore::open(dir.path()).unwrap();
            let id = ReplicaId::new("h", 1);
            store.open_episode("ep-a", "t", &id, "x", 10, b"o0").unwrap();
            store.append_turn("ep-a", turn(11), b"o1").unwrap();
            store.open_episode("ep-b", "t", &id, "x", 20, b"o0").unwrap();
            store.close_episode("ep-b", EpisodeStatus::Truncated, 0.0, 21).unwrap();
        }
        let store = TrajectoryStore::open(dir.path()).unwrap();
        let all = store.query(&TrajectoryFilter::default());
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].episode_id, "ep-a");
        assert_eq!(all[0].status, EpisodeStatus::Aborted);
        assert_eq!(all[0].turns.len(), 1);
        assert_eq!(all[1].status, EpisodeStatus::Truncated);
        let again = TrajectoryStore::open(dir.path()).unwrap();
        assert_eq!(again.query(&TrajectoryFilter::default()), all);
    }

    #[test]
    fn torn_tail_is_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let store = TrajectoryStore::open(dir.path()).unwrap();
        store.open_episode("ep-t", "t", &ReplicaId::new("h", 0), "x", 1, b"o").unwrap();
        store.append_turn("ep-t", turn(2), b"p").unwrap();
        drop(store);
        let path = dir.path().join("episodes/ep-t.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        write!(f, "{{\"kind\":\"tu").unwrap();
        drop(f);
        let (rec, terminated) = read_episode(&path).unwrap();
        assert!(!terminated);
        assert_eq!(rec.turns.len(), 1);
    }

    #[test]
    fn filters_and_paging() {
        let dir = tempfile::tempdir().unwrap();
        let store = TrajectoryStore::open(dir.path()).unwrap();
        let id = ReplicaId::new("h", 0);
        for i in 0..6u64 {
            let ep = format!("ep-{i}");
            let task = if i % 2 == 0 { "even" } else { "odd" };
            store.open_episode(&ep, task, &id, "x", 100 - i, b"o").unwrap();
            let status = if i % 3 == 0 { EpisodeStatus::Complete } else { EpisodeStatus::Truncated };
            store.close_episode(&ep, status, (i as f64) / 5.0, 200).unwrap();
        }
        let all = store.query(&TrajectoryFilter::default());
        let started: Vec<u64> = all.iter().map(|r| r.started_at).collect();
        assert_eq!(started, [95, 96, 97, 98, 99, 100]);
        let f = TrajectoryFilter { task_id: Some("even".into()), min_final_score: Some(0.4), ..Default::default() };
        let ids: Vec<_> = store.query(&f).into_iter().map(|r| r.episode_id).collect();
        assert_eq!(ids, ["ep-4", "ep-2"]);
        let page = TrajectoryFilter { limit: Some(2), offset: 1, ..Default::default() };
        let ids: Vec<_> = store.query(&page).into_iter().map(|r| r.episode_id).collect();
        assert_eq!(ids, ["ep-4", "ep-3"]);
        let f = TrajectoryFilter { status: Some(EpisodeStatus::Complete), ..Default::default() };
        assert_eq!(store.query(&f).len(), 2);
    }
}
