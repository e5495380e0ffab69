//! Durable per-session storage: a metadata file and an append-only event log.

use bope_core::config::LoopConfig;
use bope_core::session::{events_from_jsonl, ModelSummary, StageEvent};
use serde::{Deserialize, Serialize};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

const META: &str = "session.json";
const EVENTS: &str = "events.jsonl";
const SNAPSHOT: &str = "snapshot.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub schema_version: u32,
    pub id: String,
    pub config: LoopConfig,
    pub created_ms: u64,
    pub updated_ms: u64,
    /// Runtime failure that ended the session.
    #[serde(default)]
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn create(&self, meta: &SessionMeta) -> io::Result<()> {
        fs::create_dir_all(self.dir(&meta.id))?;
        File::create(self.dir(&meta.id).join(EVENTS))?.sync_all()?;
        self.write_meta(meta)
    }

    /// Atomically replaces the metadata file.
    pub fn write_meta(&self, meta: &SessionMeta) -> io::Result<()> {
        write_atomic(&self.dir(&meta.id).join(META), &serde_json::to_vec_pretty(meta)?)
    }

    pub fn write_snapshot(&self, id: &str, summary: &ModelSummary) -> io::Result<()> {
        write_atomic(&self.dir(id).join(SNAPSHOT), &serde_json::to_vec_pretty(summary)?)
    }

    /// Appends events and syncs them to disk before returning.
    pub fn append(&self, id: &str, events: &[StageEvent]) -> io::Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for e in events {
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new().append(true).open(self.dir(id).join(EVENTS))?;
        f.write_all(&buf)?;
        f.sync_data()
    }

    /// Loads every stored session. A torn final line (no newline) is dropped.
    pub fn load_all(&self) -> io::Result<Vec<(SessionMeta, Vec<StageEvent>)>> {
        let mut out = Vec::new();
        let mut dirs: Vec<PathBuf> = fs::read_dir(&self.root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(META).is_file())
            .collect();
        dirs.sort();
        for d in dirs {
            let meta: SessionMeta = serde_json::from_slice(&fs::read(d.join(META))?)?;
            let text = fs::read_to_string(d.join(EVENTS)).unwrap_or_default();
            let complete = match text.rfind('\n') {
                Some(i) => &text[..=i],
                None => "",
            };
            if complete.len() < text.len() {
                log::warn!("dropping a torn trailing event in {}", d.display());
                write_atomic(&d.join(EVENTS), complete.as_bytes())?;
            }
            let events = events_from_jsonl(complete).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
            out.push((meta, events));
        }
        Ok(out)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}
