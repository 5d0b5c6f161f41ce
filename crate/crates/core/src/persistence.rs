//! Append-only JSON Lines storage for episodes, facts and learning cycle
//! records.
//!
//! Layout under the store root:
//!
//! ```text
//! manifest.json
//! <user>/episodes.jsonl
//! <user>/facts.jsonl
//! <user>/cycles.jsonl
//! ```
//!
//! Every `.jsonl` file starts with `{"type":"header","format_version":1}`.
//! Each append writes one whole batch and fsyncs before returning. A final
//! line without a newline is the trace of an interrupted write: it is ignored
//! on load and cut off before the next append.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::PersistError;
use crate::model::{EngineConfig, Episode, SemanticFact, UserId, FORMAT_VERSION};
use crate::semantic::{CycleSink, LearningCycleRecord};
use crate::store::Journal;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LogKind {
    Episodes,
    Facts,
    Cycles,
}

impl LogKind {
    pub fn file_name(self) -> &'static str {
        match self {
            LogKind::Episodes => "episodes.jsonl",
            LogKind::Facts => "facts.jsonl",
            LogKind::Cycles => "cycles.jsonl",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header { format_version: u32 },
    Episode(Episode),
    Fact(SemanticFact),
    CycleRecord(LearningCycleRecord),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub embedding_dimension: Option<usize>,
    /// Hash of the configuration fields that shape ingestion.
    pub config_hash: String,
}

/// Digest of the settings that change what ingestion writes. Retrieval-only
/// settings are left out so queries can be tuned against an existing store.
pub fn config_hash(cfg: &EngineConfig) -> String {
    let relevant = serde_json::json!({
        "boundary_confidence_threshold": cfg.boundary_confidence_threshold,
        "max_buffer_size": cfg.max_buffer_size,
        "semantic_retrieval_limit_for_learning": cfg.semantic_retrieval_limit_for_learning,
        "similarity_threshold": cfg.similarity_threshold,
        "detector_token_budget": cfg.detector_token_budget,
        "detector_recent_messages": cfg.detector_recent_messages,
        "direct_extraction": cfg.direct_extraction,
    });
    let digest = Sha256::digest(relevant.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Everything found in a store directory.
#[derive(Debug, Default)]
pub struct Loaded {
    pub episodes: Vec<Episode>,
    pub facts: Vec<SemanticFact>,
    pub cycles: Vec<LearningCycleRecord>,
    /// The store was written with a different ingestion configuration.
    pub config_mismatch: bool,
}

impl Loaded {
    /// Episodes that have no finished learning cycle, in storage order.
    pub fn unfinished_episodes(&self) -> Vec<Episode> {
        let done: HashSet<&str> = self.cycles.iter().map(|c| c.episode_id.as_str()).collect();
        self.episodes
            .iter()
            .filter(|e| !done.contains(e.id.as_str()))
            .cloned()
            .collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn header_line() -> String {
    serde_json::to_string(&Line::Header {
        format_version: FORMAT_VERSION,
    })
    .expect("header serializes")
}

/// A store directory. Implements the journals used by the vector stores and
/// the learning pipeline.
#[derive(Debug)]
pub struct Persistence {
    root: PathBuf,
    manifest: Mutex<Manifest>,
    /// Serializes appends and remembers files already checked for a torn tail.
    repaired: Mutex<HashSet<PathBuf>>,
}

impl Persistence {
    /// Opens (creating if needed) the store at `root` and loads its content.
    pub fn open(
        root: impl AsRef<Path>,
        cfg: &EngineConfig,
    ) -> Result<(Self, Loaded), PersistError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let manifest_path = root.join(MANIFEST_FILE);
        let current_hash = config_hash(cfg);
        let mut config_mismatch = false;
        let manifest = if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
            let manifest: Manifest =
                serde_json::from_str(&text).map_err(|e| PersistError::Malformed {
                    path: manifest_path.display().to_string(),
                    line: e.line(),
                    detail: e.to_string(),
                })?;
            if manifest.format_version != FORMAT_VERSION {
                return Err(PersistError::UnsupportedVersion {
                    path: manifest_path.display().to_string(),
                    found: manifest.format_version,
                    supported: FORMAT_VERSION,
                });
            }
            if manifest.config_hash != current_hash {
                tracing::warn!(
                    stored = %manifest.config_hash,
                    current = %current_hash,
                    "store was written with a different ingestion configuration"
                );
                config_mismatch = true;
            }
            manifest
        } else {
            let manifest = Manifest {
                format_version: FORMAT_VERSION,
                embedding_dimension: None,
                config_hash: current_hash,
            };
            write_manifest(&manifest_path, &manifest)?;
            manifest
        };

        let persistence = Self {
            root,
            manifest: Mutex::new(manifest),
            repaired: Mutex::new(HashSet::new()),
        };
        let mut loaded = persistence.load()?;
        loaded.config_mismatch = config_mismatch;
        Ok((persistence, loaded))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest.lock().expect("manifest poisoned").clone()
    }

    pub fn log_path(&self, user: &UserId, kind: LogKind) -> PathBuf {
        self.root.join(user.as_str()).join(kind.file_name())
    }

    fn user_dirs(&self) -> Result<Vec<UserId>, PersistError> {
        let mut users = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            if !entry.file_type().map_err(io_err(&entry.path()))?.is_dir() {
                continue;
            }
            match entry.file_name().to_str().map(UserId::new) {
                Some(Ok(user)) => users.push(user),
                _ => {
                    tracing::warn!(dir = %entry.path().display(), "skipping unrecognised directory")
                }
            }
        }
        users.sort();
        Ok(users)
    }

    fn load(&self) -> Result<Loaded, PersistError> {
        let mut loaded = Loaded::default();
        let mut ids = HashSet::new();
        let mut dimension = self.manifest().embedding_dimension;
        for user in self.user_dirs()? {
            for kind in [LogKind::Episodes, LogKind::Facts, LogKind::Cycles] {
                let path = self.log_path(&user, kind);
                if !path.exists() {
                    continue;
                }
                for (line_no, line) in read_log(&path)? {
                    let malformed = |detail: String| PersistError::Malformed {
                        path: path.display().to_string(),
                        line: line_no,
                        detail,
                    };
                    let dim = match &line {
                        Line::Episode(e) => Some(e.embedding.dim()),
                        Line::Fact(f) => Some(f.embedding.dim()),
                        _ => None,
                    };
                    if let (Some(d), Some(expected)) = (dim, dimension) {
                        if d != expected {
                            return Err(malformed(format!(
                                "{d}-dimensional embedding in a {expected}-dimensional store"
                            )));
                        }
                    }
                    dimension = dimension.or(dim);
                    match (kind, line) {
                        (LogKind::Episodes, Line::Episode(e)) => {
                            check_owner(&e.user_id, &user).map_err(malformed)?;
                            e.validate().map_err(|err| malformed(err.to_string()))?;
                            if !ids.insert(e.id.clone()) {
                                return Err(PersistError::DuplicateId(e.id));
                            }
                            loaded.episodes.push(e);
                        }
                        (LogKind::Facts, Line::Fact(f)) => {
                            check_owner(&f.user_id, &user).map_err(malformed)?;
                            f.validate().map_err(|err| malformed(err.to_string()))?;
                            if !ids.insert(f.id.clone()) {
                                return Err(PersistError::DuplicateId(f.id));
                            }
                            loaded.facts.push(f);
                        }
                        (LogKind::Cycles, Line::CycleRecord(c)) => {
                            check_owner(&c.user_id, &user).map_err(malformed)?;
                            loaded.cycles.push(c);
                        }
                        (_, other) => {
                            return Err(malformed(format!(
                                "unexpected {} record in {}",
                                line_type(&other),
                                kind.file_name()
                            )))
                        }
                    }
                }
            }
        }
        if let Some(d) = dimension {
            self.note_dimension(d)?;
        }
        Ok(loaded)
    }

    fn note_dimension(&self, dim: usize) -> Result<(), PersistError> {
        let mut manifest = self.manifest.lock().expect("manifest poisoned");
        if manifest.embedding_dimension.is_none() {
            manifest.embedding_dimension = Some(dim);
            write_manifest(&self.root.join(MANIFEST_FILE), &manifest)?;
        }
        Ok(())
    }

    /// Appends lines to the per-user logs of `kind`. Each user's lines are
    /// written with a single write and fsynced; a failed write is rolled back.
    fn append_lines(
        &self,
        kind: LogKind,
        lines: Vec<(UserId, String)>,
    ) -> Result<(), PersistError> {
        let mut grouped: BTreeMap<UserId, String> = BTreeMap::new();
        for (user, line) in lines {
            let buf = grouped.entry(user).or_default();
            buf.push_str(&line);
            buf.push('\n');
        }
        let mut repaired = self.repaired.lock().expect("append lock poisoned");
        for (user, payload) in grouped {
            let path = self.log_path(&user, kind);
            let dir = path.parent().expect("log has a parent");
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let fresh = !path.exists();
            let mut file = OpenOptions::new()
                .read(true)
                .append(true)
                .create(true)
                .open(&path)
                .map_err(io_err(&path))?;
            if !fresh && repaired.insert(path.clone()) {
                cut_torn_tail(&mut file, &path)?;
            }
            let start = file.metadata().map_err(io_err(&path))?.len();
            let mut bytes = String::new();
            if start == 0 {
                bytes.push_str(&header_line());
                bytes.push('\n');
                repaired.insert(path.clone());
            }
            bytes.push_str(&payload);
            if let Err(e) = file
                .write_all(bytes.as_bytes())
                .and_then(|_| file.sync_data())
            {
                let _ = file.set_len(start);
                return Err(io_err(&path)(e));
            }
        }
        Ok(())
    }
}

fn check_owner(found: &UserId, dir: &UserId) -> Result<(), String> {
    if found == dir {
        Ok(())
    } else {
        Err(format!("record for user {found} stored under {dir}"))
    }
}

fn line_type(line: &Line) -> &'static str {
    match line {
        Line::Header { .. } => "header",
        Line::Episode(_) => "episode",
        Line::Fact(_) => "fact",
        Line::CycleRecord(_) => "cycle_record",
    }
}

fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), PersistError> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| PersistError::Serialize(e.to_string()))?;
    let mut file = File::create(&tmp).map_err(io_err(&tmp))?;
    file.write_all(text.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .and_then(|_| file.sync_all())
        .map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Drops a trailing partial line left by an interrupted append.
fn cut_torn_tail(file: &mut File, path: &Path) -> Result<(), PersistError> {
    let len = file.metadata().map_err(io_err(path))?.len();
    if len == 0 {
        return Ok(());
    }
    let mut content = Vec::with_capacity(len as usize);
    file.seek(SeekFrom::Start(0)).map_err(io_err(path))?;
    file.read_to_end(&mut content).map_err(io_err(path))?;
    if content.last() == Some(&b'\n') {
        return Ok(());
    }
    let keep = content
        .iter()
        .rposition(|&b| b == b'\n')
        .map_or(0, |i| i + 1);
    tracing::warn!(path = %path.display(), dropped = content.len() - keep, "truncating partial trailing line");
    file.set_len(keep as u64).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))
}

/// Reads a log, checking the header. Returns records with their 1-based
/// line numbers; an unterminated final line is skipped.
fn read_log(path: &Path) -> Result<Vec<(usize, Line)>, PersistError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut raw = String::new();
    let mut line_no = 0;
    loop {
        raw.clear();
        let n = reader.read_line(&mut raw).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !raw.ends_with('\n') {
            tracing::warn!(path = %path.display(), line = line_no, "ignoring incomplete final line");
            break;
        }
        let text = raw.trim();
        if text.is_empty() {
            continue;
        }
        let malformed = |detail: String| PersistError::Malformed {
            path: path.display().to_string(),
            line: line_no,
            detail,
        };
        if line_no == 1 {
            let header: serde_json::Value =
                serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
            if header.get("type").and_then(|t| t.as_str()) != Some("header") {
                return Err(malformed("missing header line".into()));
            }
            let found = header
                .get("format_version")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| malformed("header without format_version".into()))?;
            if found != u64::from(FORMAT_VERSION) {
                return Err(PersistError::UnsupportedVersion {
                    path: path.display().to_string(),
                    found: found as u32,
                    supported: FORMAT_VERSION,
                });
            }
            continue;
        }
        let line: Line = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        if matches!(line, Line::Header { .. }) {
            return Err(malformed("header after the first line".into()));
        }
        out.push((line_no, line));
    }
    Ok(out)
}

fn encode<T>(
    items: &[T],
    wrap: impl Fn(T) -> Line,
    user: impl Fn(&T) -> UserId,
) -> Result<Vec<(UserId, String)>, PersistError>
where
    T: Clone,
{
    items
        .iter()
        .map(|item| {
            serde_json::to_string(&wrap(item.clone()))
                .map(|text| (user(item), text))
                .map_err(|e| PersistError::Serialize(e.to_string()))
        })
        .collect()
}

impl Journal<Episode> for Persistence {
    fn append(&self, items: &[Episode]) -> Result<(), PersistError> {
        if let Some(first) = items.first() {
            self.note_dimension(first.embedding.dim())?;
        }
        let lines = encode(items, Line::Episode, |e| e.user_id.clone())?;
        self.append_lines(LogKind::Episodes, lines)
    }
}

impl Journal<SemanticFact> for Persistence {
    fn append(&self, items: &[SemanticFact]) -> Result<(), PersistError> {
        if let Some(first) = items.first() {
            self.note_dimension(first.embedding.dim())?;
        }
        let lines = encode(items, Line::Fact, |f| f.user_id.clone())?;
        self.append_lines(LogKind::Facts, lines)
    }
}

impl CycleSink for Persistence {
    fn record(&self, record: &LearningCycleRecord) -> Result<(), PersistError> {
        let lines = encode(std::slice::from_ref(record), Line::CycleRecord, |c| {
            c.user_id.clone()
        })?;
        self.append_lines(LogKind::Cycles, lines)
    }
}

/// Per-user counts found in a store, for reporting.
pub fn summarize(loaded: &Loaded) -> HashMap<UserId, (usize, usize)> {
    let mut out: HashMap<UserId, (usize, usize)> = HashMap::new();
    for e in &loaded.episodes {
        out.entry(e.user_id.clone()).or_default().0 += 1;
    }
    for f in &loaded.facts {
        out.entry(f.user_id.clone()).or_default().1 += 1;
    }
    out
}
