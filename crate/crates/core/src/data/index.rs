//! Dataset index files: one `path,pid,camid` record per line.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub path: String,
    pub pid: usize,
    pub camid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            _ => Err(Error::invalid(format!("unknown split '{}'", s))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<Record>,
    pub split: Split,
    /// Directory that relative record paths are resolved against.
    pub root: PathBuf,
}

impl DatasetIndex {
    pub fn new(records: Vec<Record>, split: Split, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::invalid(format!("duplicate path {} in {} split", r.path, split)));
            }
        }
        Ok(DatasetIndex {
            records,
            split,
            root: root.into(),
        })
    }

    /// Parses index text. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, split: Split, root: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let [path, pid, camid] = parts[..] else {
                return Err(err(format!("expected path,pid,camid, got '{}'", line)));
            };
            if path.is_empty() {
                return Err(err("empty path".to_string()));
            }
            let pid = pid.parse().map_err(|_| err(format!("invalid pid '{}'", pid)))?;
            let camid = camid.parse().map_err(|_| err(format!("invalid camid '{}'", camid)))?;
            records.push(Record {
                path: path.to_string(),
                pid,
                camid,
            });
        }
        DatasetIndex::new(records, split, root)
    }

    pub fn to_text(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{},{},{}\n", r.path, r.pid, r.camid))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, r: &Record) -> PathBuf {
        let p = Path::new(&r.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Record indices grouped by person id, in ascending pid order.
    pub fn by_pid(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            m.entry(r.pid).or_default().push(i);
        }
        m
    }

    /// Maps each distinct pid to a contiguous class label 0..K.
    pub fn class_labels(&self) -> BTreeMap<usize, usize> {
        self.by_pid().keys().enumerate().map(|(i, &p)| (p, i)).collect()
    }

    pub fn num_pids(&self) -> usize {
        self.by_pid().len()
    }

    pub fn pids(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.pid).collect()
    }

    pub fn camids(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.camid).collect()
    }
}

/// Reads an index file; relative paths resolve against its directory.
pub fn read_index(path: impl AsRef<Path>, split: Split) -> Result<DatasetIndex> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetIndex::parse(&text, split, root)
}

pub fn write_index(path: impl AsRef<Path>, index: &DatasetIndex) -> Result<()> {
    std::fs::write(path, index.to_text())?;
    Ok(())
}
