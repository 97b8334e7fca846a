//! Append-only review log and the state replayed from it.
//!
//! Every change is one JSON line. The in-memory [`State`] is a fold over the
//! log, so the latest label of an item is always derivable from its audit
//! records. Writes go through a single mutex; readers take a cheap clone of
//! the current `Arc<State>`.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use sdie_core::corpus::{EventRow, RawLabel};
use sdie_core::pipeline::{CorpusRef, QueueItem, QueuePrediction, QueueSpan};

pub const DEFAULT_LEASE_MINUTES: i64 = 10;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("project {0} not found")]
    NoProject(String),
    #[error("event {event} not found in project {project}")]
    NoItem { project: String, event: String },
    #[error("a project named {0:?} already exists")]
    DuplicateName(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Conflict(String),
    #[error("review log {path}: line {line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
    #[error("review log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    pub name: String,
    pub corpus: CorpusRef,
    pub vocabulary_version: Option<String>,
    pub members: Vec<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Labeled,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub label: RawLabel,
    pub note: Option<String>,
    pub reviewer: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub event_id: String,
    pub text: String,
    pub raw_text: String,
    /// Label the event carried when it was enqueued.
    pub original_label: RawLabel,
    pub source: Option<String>,
    pub date: Option<String>,
    pub prescreen_probability: f64,
    pub prediction: QueuePrediction,
    pub spans: Vec<QueueSpan>,
    pub status: ItemStatus,
    pub analyst_label: Option<RawLabel>,
    pub note: Option<String>,
    pub reviewer: Option<String>,
    pub labeled_at: Option<DateTime<Utc>>,
    /// Every label ever submitted, oldest first.
    pub history: Vec<LabelRecord>,
}

impl ReviewItem {
    fn from_queue(q: QueueItem) -> Self {
        Self {
            event_id: q.event_id,
            text: q.text,
            raw_text: q.raw_text,
            original_label: q.raw_label,
            source: q.source,
            date: q.date,
            prescreen_probability: q.prescreen_probability,
            prediction: q.prediction,
            spans: q.spans,
            status: ItemStatus::Pending,
            analyst_label: None,
            note: None,
            reviewer: None,
            labeled_at: None,
            history: Vec::new(),
        }
    }

    /// Corpus row carrying the analyst's latest label and note.
    pub fn export_row(&self) -> EventRow {
        EventRow {
            id: self.event_id.clone(),
            text: self.raw_text.clone(),
            label: self.analyst_label.map(|l| l.as_str().to_string()),
            source: self.source.clone(),
            date: self.date.clone(),
            note: self.note.clone(),
        }
    }
}

/// One log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    ProjectCreated { project: Project },
    Enqueued { project: String, item: QueueItem },
    Labeled { project: String, event_id: String, record: LabelRecord },
    Skipped { project: String, event_id: String, reviewer: String, at: DateTime<Utc> },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProjectItems {
    pub items: Vec<ReviewItem>,
    index: HashMap<String, usize>,
}

impl ProjectItems {
    pub fn get(&self, event_id: &str) -> Option<&ReviewItem> {
        self.index.get(event_id).map(|&i| &self.items[i])
    }

    fn get_mut(&mut self, event_id: &str) -> Option<&mut ReviewItem> {
        self.index.get(event_id).map(|&i| &mut self.items[i])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub pending: usize,
    pub labeled: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct State {
    pub projects: Vec<Project>,
    pub items: HashMap<String, ProjectItems>,
}

impl State {
    pub fn project(&self, id: &str) -> Result<&Project, StoreError> {
        self.projects.iter().find(|p| p.id == id).ok_or_else(|| StoreError::NoProject(id.to_string()))
    }

    pub fn items(&self, project: &str) -> Result<&ProjectItems, StoreError> {
        self.project(project)?;
        Ok(self.items.get(project).expect("items exist for every project"))
    }

    pub fn item(&self, project: &str, event_id: &str) -> Result<&ReviewItem, StoreError> {
        self.items(project)?
            .get(event_id)
            .ok_or_else(|| StoreError::NoItem { project: project.to_string(), event: event_id.to_string() })
    }

    pub fn progress(&self, project: &str) -> Result<Progress, StoreError> {
        let mut p = Progress::default();
        for item in &self.items(project)?.items {
            p.total += 1;
            match item.status {
                ItemStatus::Pending => p.pending += 1,
                ItemStatus::Labeled => p.labeled += 1,
                ItemStatus::Skipped => p.skipped += 1,
            }
        }
        Ok(p)
    }

    /// Fold one entry into the state. Fails without side effects.
    pub fn apply(&mut self, entry: &LogEntry) -> Result<(), StoreError> {
        match entry {
            LogEntry::ProjectCreated { project } => {
                if self.projects.iter().any(|p| p.name == project.name) {
                    return Err(StoreError::DuplicateName(project.name.clone()));
                }
                if self.projects.iter().any(|p| p.id == project.id) {
                    return Err(StoreError::Conflict(format!("project id {} already used", project.id)));
                }
                self.projects.push(project.clone());
                self.items.insert(project.id.clone(), ProjectItems::default());
            }
            LogEntry::Enqueued { project, item } => {
                self.project(project)?;
                let items = self.items.get_mut(project).expect("items exist for every project");
                if items.index.contains_key(&item.event_id) {
                    return Err(StoreError::Conflict(format!("event {} already queued", item.event_id)));
                }
                items.index.insert(item.event_id.clone(), items.items.len());
                items.items.push(ReviewItem::from_queue(item.clone()));
            }
            LogEntry::Labeled { project, event_id, record } => {
                if !record.label.is_labeled() {
                    return Err(StoreError::Invalid(format!("{} is not an event type", record.label)));
                }
                let item = self.item_mut(project, event_id)?;
                item.status = ItemStatus::Labeled;
                item.analyst_label = Some(record.label);
                item.note = record.note.clone();
                item.reviewer = Some(record.reviewer.clone());
                item.labeled_at = Some(record.at);
                item.history.push(record.clone());
            }
            LogEntry::Skipped { project, event_id, reviewer, .. } => {
                let item = self.item_mut(project, event_id)?;
                if item.status == ItemStatus::Labeled {
                    return Err(StoreError::Conflict(format!("event {event_id} is already labeled")));
                }
                item.status = ItemStatus::Skipped;
                item.reviewer = Some(reviewer.clone());
            }
        }
        Ok(())
    }

    fn item_mut(&mut self, project: &str, event_id: &str) -> Result<&mut ReviewItem, StoreError> {
        self.project(project)?;
        self.items
            .get_mut(project)
            .and_then(|items| items.get_mut(event_id))
            .ok_or_else(|| StoreError::NoItem { project: project.to_string(), event: event_id.to_string() })
    }

    /// Entries that rebuild this state when replayed.
    fn entries(&self) -> Vec<LogEntry> {
        let mut out = Vec::new();
        for p in &self.projects {
            out.push(LogEntry::ProjectCreated { project: p.clone() });
        }
        for p in &self.projects {
            for item in &self.items[&p.id].items {
                out.push(LogEntry::Enqueued { project: p.id.clone(), item: queue_item_of(item) });
            }
        }
        for p in &self.projects {
            for item in &self.items[&p.id].items {
                for record in &item.history {
                    out.push(LogEntry::Labeled {
                        project: p.id.clone(),
                        event_id: item.event_id.clone(),
                        record: record.clone(),
                    });
                }
                if item.status == ItemStatus::Skipped {
                    out.push(LogEntry::Skipped {
                        project: p.id.clone(),
                        event_id: item.event_id.clone(),
                        reviewer: item.reviewer.clone().unwrap_or_default(),
                        at: item.labeled_at.unwrap_or_default(),
                    });
                }
            }
        }
        out
    }
}

fn queue_item_of(item: &ReviewItem) -> QueueItem {
    QueueItem {
        event_id: item.event_id.clone(),
        text: item.text.clone(),
        raw_text: item.raw_text.clone(),
        raw_label: item.original_label,
        source: item.source.clone(),
        date: item.date.clone(),
        prescreen_probability: item.prescreen_probability,
        prediction: item.prediction.clone(),
        spans: item.spans.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Lease {
    reviewer: String,
    expires: DateTime<Utc>,
}

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(Utc::now)
}

struct Writer {
    log: Option<File>,
    leases: HashMap<(String, String), Lease>,
    next_project: usize,
}

pub struct Store {
    snapshot: RwLock<Arc<State>>,
    writer: Mutex<Writer>,
    path: Option<PathBuf>,
    lease: Duration,
    clock: Clock,
}

impl Store {
    pub fn in_memory(clock: Clock) -> Self {
        Self::from_state(State::default(), None, None, clock)
    }

    /// Replay `path` (created if absent). A torn final line from an
    /// interrupted write is dropped and the log compacted; damage anywhere
    /// else is an error.
    pub fn open(path: &Path, clock: Clock) -> Result<Self, StoreError> {
        let mut state = State::default();
        let mut torn = false;
        if path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
            let last = lines.iter().rposition(|l| !l.trim().is_empty());
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |message: String| StoreError::Corrupt {
                    path: path.display().to_string(),
                    line: i + 1,
                    message,
                };
                match serde_json::from_str::<LogEntry>(line) {
                    Ok(entry) => state.apply(&entry).map_err(|e| corrupt(e.to_string()))?,
                    Err(_) if Some(i) == last => {
                        log::warn!("dropping torn final record at line {} of {}", i + 1, path.display());
                        torn = true;
                    }
                    Err(e) => return Err(corrupt(e.to_string())),
                }
            }
        }
        let store = Self::from_state(state, Some(path.to_path_buf()), None, clock);
        if torn {
            store.compact()?;
        }
        store.writer.lock().expect("writer lock").log = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(store)
    }

    fn from_state(state: State, path: Option<PathBuf>, log: Option<File>, clock: Clock) -> Self {
        let next_project = state.projects.len() + 1;
        Self {
            snapshot: RwLock::new(Arc::new(state)),
            writer: Mutex::new(Writer { log, leases: HashMap::new(), next_project }),
            path,
            lease: Duration::minutes(DEFAULT_LEASE_MINUTES),
            clock,
        }
    }

    pub fn with_lease(mut self, lease: Duration) -> Self {
        self.lease = lease;
        self
    }

    pub fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    /// Immutable view of the current state.
    pub fn snapshot(&self) -> Arc<State> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Validate, persist, then publish. Caller holds the writer lock.
    fn commit(&self, writer: &mut Writer, entries: &[LogEntry]) -> Result<(), StoreError> {
        let mut next = (*self.snapshot()).clone();
        for e in entries {
            next.apply(e)?;
        }
        if let Some(log) = writer.log.as_mut() {
            let mut buf = String::new();
            for e in entries {
                buf.push_str(&serde_json::to_string(e).expect("entry serializes"));
                buf.push('\n');
            }
            log.write_all(buf.as_bytes())?;
            log.sync_data()?;
        }
        *self.snapshot.write().expect("snapshot lock") = Arc::new(next);
        Ok(())
    }

    pub fn create_project(
        &self,
        name: &str,
        corpus: CorpusRef,
        vocabulary_version: Option<String>,
        members: Vec<String>,
    ) -> Result<Project, StoreError> {
        if name.trim().is_empty() {
            return Err(StoreError::Invalid("project name is empty".into()));
        }
        let mut w = self.writer.lock().expect("writer lock");
        let snapshot = self.snapshot();
        let mut n = w.next_project;
        while snapshot.projects.iter().any(|p| p.id == format!("p{n}")) {
            n += 1;
        }
        let project = Project {
            id: format!("p{n}"),
            name: name.to_string(),
            corpus,
            vocabulary_version,
            members,
            created_at: self.now(),
        };
        self.commit(&mut w, &[LogEntry::ProjectCreated { project: project.clone() }])?;
        w.next_project = n + 1;
        Ok(project)
    }

    /// Queue items not yet present; returns how many were added.
    pub fn enqueue(&self, project: &str, items: Vec<QueueItem>) -> Result<usize, StoreError> {
        let mut w = self.writer.lock().expect("writer lock");
        let snapshot = self.snapshot();
        let existing = snapshot.items(project)?;
        let mut seen = std::collections::HashSet::new();
        let entries: Vec<LogEntry> = items
            .into_iter()
            .filter(|i| existing.get(&i.event_id).is_none() && seen.insert(i.event_id.clone()))
            .map(|item| LogEntry::Enqueued { project: project.to_string(), item })
            .collect();
        self.commit(&mut w, &entries)?;
        Ok(entries.len())
    }

    /// Oldest pending item not leased to someone else. A reviewer asking
    /// again gets the item they already hold.
    pub fn next_item(&self, project: &str, reviewer: &str) -> Result<Option<ReviewItem>, StoreError> {
        let mut w = self.writer.lock().expect("writer lock");
        let snapshot = self.snapshot();
        let items = snapshot.items(project)?;
        let now = self.now();
        w.leases.retain(|_, l| l.expires > now);
        let pending = items.items.iter().filter(|i| i.status == ItemStatus::Pending);
        let held = pending
            .clone()
            .find(|i| w.leases.get(&(project.to_string(), i.event_id.clone())).is_some_and(|l| l.reviewer == reviewer));
        let chosen = held.or_else(|| pending.clone().find(|i| !w.leases.contains_key(&(project.to_string(), i.event_id.clone()))));
        Ok(chosen.map(|item| {
            w.leases.insert(
                (project.to_string(), item.event_id.clone()),
                Lease { reviewer: reviewer.to_string(), expires: now + self.lease },
            );
            item.clone()
        }))
    }

    pub fn submit_label(
        &self,
        project: &str,
        event_id: &str,
        label: RawLabel,
        note: Option<String>,
        reviewer: &str,
    ) -> Result<ReviewItem, StoreError> {
        if !label.is_labeled() {
            return Err(StoreError::Invalid(format!("{label} is not an event type")));
        }
        let mut w = self.writer.lock().expect("writer lock");
        let key = (project.to_string(), event_id.to_string());
        let now = self.now();
        if let Some(l) = w.leases.get(&key) {
            if l.reviewer != reviewer && l.expires > now {
                return Err(StoreError::Conflict(format!("event {event_id} is leased to {}", l.reviewer)));
            }
        }
        let record = LabelRecord { label, note: note.filter(|n| !n.trim().is_empty()), reviewer: reviewer.to_string(), at: now };
        self.commit(&mut w, &[LogEntry::Labeled { project: project.to_string(), event_id: event_id.to_string(), record }])?;
        w.leases.remove(&key);
        Ok(self.snapshot().item(project, event_id)?.clone())
    }

    pub fn skip(&self, project: &str, event_id: &str, reviewer: &str) -> Result<ReviewItem, StoreError> {
        let mut w = self.writer.lock().expect("writer lock");
        let entry = LogEntry::Skipped {
            project: project.to_string(),
            event_id: event_id.to_string(),
            reviewer: reviewer.to_string(),
            at: self.now(),
        };
        self.commit(&mut w, &[entry])?;
        w.leases.remove(&(project.to_string(), event_id.to_string()));
        Ok(self.snapshot().item(project, event_id)?.clone())
    }

    /// JSONL corpus of labeled items, in queue order.
    pub fn export_jsonl(&self, project: &str) -> Result<String, StoreError> {
        let snapshot = self.snapshot();
        let mut out = String::new();
        for item in snapshot.items(project)?.items.iter().filter(|i| i.status == ItemStatus::Labeled) {
            out.push_str(&serde_json::to_string(&item.export_row()).expect("row serializes"));
            out.push('\n');
        }
        Ok(out)
    }

    /// Rewrite the log as the minimal replay of the current state. Every
    /// label record is kept.
    pub fn compact(&self) -> Result<(), StoreError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let mut w = self.writer.lock().expect("writer lock");
        let tmp = path.with_extension("compacting");
        {
            let mut f = File::create(&tmp)?;
            for e in self.snapshot().entries() {
                writeln!(f, "{}", serde_json::to_string(&e).expect("entry serializes"))?;
            }
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        if w.log.is_some() {
            w.log = Some(OpenOptions::new().append(true).open(path)?);
        }
        Ok(())
    }
}
