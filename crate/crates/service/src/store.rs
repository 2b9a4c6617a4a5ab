//! Line-delimited event log on local disk.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use migdial_core::eval::RatingRecord;

use crate::session::{Event, Session};
use crate::ServiceError;

/// Append-only event log. Without a path events are kept in memory only.
#[derive(Debug)]
pub struct SessionStore {
    path: Option<PathBuf>,
    out: Option<BufWriter<File>>,
    events: Vec<Event>,
}

/// Every session rebuilt from a log, plus the ratings in log order.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Replay {
    pub sessions: BTreeMap<String, Session>,
    pub ratings: Vec<RatingRecord>,
}

impl Replay {
    pub fn apply(&mut self, event: &Event) -> Result<(), ServiceError> {
        let id = event.session_id();
        match event {
            Event::Created { .. } => {
                if self.sessions.contains_key(id) {
                    return Err(ServiceError::Corrupt(format!("session {id} created twice")));
                }
                self.sessions.insert(id.to_string(), Session::create(event)?);
            }
            _ => {
                let s = self
                    .sessions
                    .get_mut(id)
                    .ok_or_else(|| ServiceError::Corrupt(format!("event for unknown session {id}")))?;
                s.apply(event)?;
                if let Event::Rated { record } = event {
                    self.ratings.push(record.clone());
                }
            }
        }
        Ok(())
    }
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self { path: None, out: None, events: Vec::new() }
    }

    /// Opens (or creates) the log at `path` and returns it with the state
    /// it holds. A final line cut short by a crash is dropped and the file
    /// truncated to the last complete event.
    pub fn open(path: &Path) -> Result<(Self, Replay), ServiceError> {
        let raw = if path.exists() { fs::read(path)? } else { Vec::new() };
        let (events, replay, complete) = parse_log(path, &raw)?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if complete < raw.len() {
            file.set_len(complete as u64)?;
        }
        let out = Some(BufWriter::new(file));
        Ok((Self { path: Some(path.to_path_buf()), out, events }, replay))
    }

    /// Replays the log at `path` without opening it for writing.
    pub fn read(path: &Path) -> Result<Replay, ServiceError> {
        Ok(parse_log(path, &fs::read(path)?)?.1)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Writes one event and flushes it before returning.
    pub fn append(&mut self, event: Event) -> Result<(), ServiceError> {
        if let Some(out) = &mut self.out {
            let line = serde_json::to_string(&event).map_err(|e| ServiceError::Internal(e.to_string()))?;
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn sync(&mut self) -> Result<(), ServiceError> {
        if let Some(out) = &mut self.out {
            out.flush()?;
            out.get_ref().sync_all()?;
        }
        Ok(())
    }
}

/// Parses every complete line; returns the events, their replay, and the
/// byte length of the complete prefix.
fn parse_log(path: &Path, raw: &[u8]) -> Result<(Vec<Event>, Replay, usize), ServiceError> {
    let complete = raw.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut events = Vec::new();
    let mut replay = Replay::default();
    for (i, line) in raw[..complete].split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let event: Event = serde_json::from_slice(line)
            .map_err(|e| ServiceError::Corrupt(format!("{}:{}: {e}", path.display(), i + 1)))?;
        replay.apply(&event)?;
        events.push(event);
    }
    Ok((events, replay, complete))
}
