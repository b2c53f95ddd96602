//! Line-delimited JSON files exchanged between pipeline stages.
//!
//! Each file may start with a header object naming its format and version.
//! Files this crate produces always carry one; for inputs that people write
//! by hand (prompts, tasks) it is optional. Blank lines are ignored.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoringTask;
use crate::selection::{PreferenceDataset, SkippedPool};
use crate::types::{CandidatePool, Prompt};

pub const FORMAT_VERSION: u32 = 1;
pub const PROMPTS_FORMAT: &str = "m3po-prompts";
pub const TASKS_FORMAT: &str = "m3po-tasks";
pub const POOLS_FORMAT: &str = "m3po-pools";
pub const PAIRS_FORMAT: &str = "m3po-pairs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHeader {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedPool>,
}

impl FileHeader {
    pub fn new(format: &str, fingerprint: Option<String>) -> Self {
        Self {
            format: format.to_string(),
            version: FORMAT_VERSION,
            fingerprint,
            skipped: Vec::new(),
        }
    }
}

fn looks_like_header(line: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("format").cloned())
        .is_some()
}

/// Splits `text` into an optional header and parsed records.
fn read_jsonl<T: DeserializeOwned>(
    text: &str,
    source_name: &str,
    format: &str,
    header_required: bool,
) -> Result<(Option<FileHeader>, Vec<T>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();
    let mut header = None;
    if let Some(&(n, first)) = lines.peek() {
        if looks_like_header(first) {
            let h: FileHeader = serde_json::from_str(first)
                .map_err(|e| Error::parse(source_name, n, format!("bad header: {e}")))?;
            if h.format != format {
                return Err(Error::parse(
                    source_name,
                    n,
                    format!("expected a {format} file, found {}", h.format),
                ));
            }
            if h.version != FORMAT_VERSION {
                return Err(Error::parse(source_name, n, format!("unsupported version {}", h.version)));
            }
            header = Some(h);
            lines.next();
        }
    }
    if header_required && header.is_none() {
        return Err(Error::parse(source_name, 1, format!("missing {format} header line")));
    }
    let records = lines
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::parse(source_name, n, e.to_string())))
        .collect::<Result<Vec<T>>>()?;
    Ok((header, records))
}

fn write_jsonl<T: Serialize>(header: &FileHeader, records: &[T]) -> String {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

fn check_unique_ids<'a>(ids: impl Iterator<Item = &'a str>, source_name: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::invalid("input", format!("{source_name}: duplicate prompt id `{id}`")));
        }
    }
    Ok(())
}

pub fn parse_prompts(text: &str, source_name: &str) -> Result<Vec<Prompt>> {
    let (_, prompts): (_, Vec<Prompt>) = read_jsonl(text, source_name, PROMPTS_FORMAT, false)?;
    check_unique_ids(prompts.iter().map(|p| p.id()), source_name)?;
    Ok(prompts)
}

pub fn encode_prompts(prompts: &[Prompt]) -> String {
    write_jsonl(&FileHeader::new(PROMPTS_FORMAT, None), prompts)
}

pub fn parse_tasks(text: &str, source_name: &str) -> Result<Vec<ScoringTask>> {
    let (_, tasks): (_, Vec<ScoringTask>) = read_jsonl(text, source_name, TASKS_FORMAT, false)?;
    check_unique_ids(tasks.iter().map(|t| t.prompt().id()), source_name)?;
    Ok(tasks)
}

pub fn encode_tasks(tasks: &[ScoringTask]) -> String {
    write_jsonl(&FileHeader::new(TASKS_FORMAT, None), tasks)
}

/// Pools and the generation fingerprint from the header.
pub fn parse_pools(text: &str, source_name: &str) -> Result<(String, Vec<CandidatePool>)> {
    let (header, pools): (_, Vec<CandidatePool>) = read_jsonl(text, source_name, POOLS_FORMAT, true)?;
    check_unique_ids(pools.iter().map(|p| p.prompt().id()), source_name)?;
    let fingerprint = header.and_then(|h| h.fingerprint).unwrap_or_default();
    Ok((fingerprint, pools))
}

pub fn encode_pools(pools: &[CandidatePool], fingerprint: &str) -> String {
    write_jsonl(&FileHeader::new(POOLS_FORMAT, Some(fingerprint.to_string())), pools)
}

pub fn parse_pairs(text: &str, source_name: &str) -> Result<PreferenceDataset> {
    let (header, pairs) = read_jsonl(text, source_name, PAIRS_FORMAT, true)?;
    let header = header.expect("required above");
    let fingerprint = header
        .fingerprint
        .ok_or_else(|| Error::parse(source_name, 1, "pairs header has no config fingerprint"))?;
    Ok(PreferenceDataset {
        fingerprint,
        pairs,
        skipped: header.skipped,
    })
}

pub fn encode_pairs(dataset: &PreferenceDataset) -> String {
    let mut header = FileHeader::new(PAIRS_FORMAT, Some(dataset.fingerprint.clone()));
    header.skipped = dataset.skipped.clone();
    write_jsonl(&header, &dataset.pairs)
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a new file; an existing file is replaced only when
/// `force` is set.
pub fn write_output(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    let mut opts = OpenOptions::new();
    opts.write(true);
    if force {
        opts.create(true).truncate(true);
    } else {
        opts.create_new(true);
    }
    let mut f = opts.open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
