//! Labeled dataset manifests: UTF-8 TSV, LF line endings, header
//! `path\tlabel\tsource`, image paths relative to the manifest's directory.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "path\tlabel\tsource";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub path: String,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Result<Self> {
        let m = DatasetManifest {
            root: root.into(),
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            check_field(&r.path, "path", i)?;
            check_field(&r.source, "source", i)?;
            if r.label > 1 {
                return Err(Error::config(format!("record {i}: label {} is not 0 or 1", r.label)));
            }
            if let Some(first) = seen.insert(&r.path, i) {
                return Err(Error::config(format!(
                    "record {i}: duplicate path `{}` (first at record {first})",
                    r.path
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, r: &Record) -> PathBuf {
        self.root.join(&r.path)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn sources(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.source.clone()).collect()
    }

    pub fn filter_source(&self, source: &str) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| r.source == source).cloned().collect(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!("{}\t{}\t{}\n", r.path, r.label, r.source));
        }
        s
    }
}

fn check_field(v: &str, what: &str, i: usize) -> Result<()> {
    if v.is_empty() || v.contains(['\t', '\n', '\r']) {
        return Err(Error::config(format!("record {i}: invalid {what} `{v}`")));
    }
    Ok(())
}

/// Parses manifest text; line numbers in errors are 1-based.
pub fn parse_manifest(text: &str, root: impl Into<PathBuf>, origin: &str) -> Result<DatasetManifest> {
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or_default();
    if header != MANIFEST_HEADER {
        return Err(Error::format(origin, 0, format!("line 1: expected header `{}`", MANIFEST_HEADER.replace('\t', "\\t"))));
    }
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut offset = header.len() + 1;
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let here = offset;
        offset += line.len() + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| Error::format(origin, here, format!("line {lineno}: {msg}"));
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[2].is_empty() || line.contains('\r') {
            return Err(bad("empty path or source, or CR line ending".into()));
        }
        let label = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label `{other}` is not 0 or 1"))),
        };
        if let Some(first) = seen.insert(fields[0].to_string(), lineno) {
            return Err(bad(format!("duplicate path `{}` (first on line {first})", fields[0])));
        }
        records.push(Record {
            path: fields[0].to_string(),
            label,
            source: fields[2].to_string(),
        });
    }
    Ok(DatasetManifest {
        root: root.into(),
        records,
    })
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = super::read_file(path)?;
    let origin = path.display().to_string();
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(&origin, e.valid_up_to(), "manifest is not UTF-8"))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(text, root, &origin)
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    m.validate()?;
    super::write_atomic(path, m.to_tsv().as_bytes())
}
