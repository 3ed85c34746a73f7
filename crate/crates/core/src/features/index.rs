//! Tab-separated dataset index: `path<TAB>split<TAB>labels`, where labels are
//! `tag;tag` for weak clips and `onset,offset,class;...` for strong ones.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.tsv";
pub const CLASSES_FILE: &str = "classes.txt";
/// Labels of the unlabeled split, kept for diagnostics only.
pub const PRIVATE_FILE: &str = "unlabeled_private.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Strong,
    Weak,
    Unlabeled,
    Validation,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Strong, Split::Weak, Split::Unlabeled, Split::Validation];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Strong => "strong",
            Split::Weak => "weak",
            Split::Unlabeled => "unlabeled",
            Split::Validation => "validation",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown split '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub onset: f64,
    pub offset: f64,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClipLabels {
    Strong(Vec<Annotation>),
    Weak(Vec<String>),
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    /// Relative to the corpus root.
    pub path: String,
    pub split: Split,
    pub labels: ClipLabels,
}

impl ClipRecord {
    /// Tags carried by the record, derived from strong events when present.
    pub fn tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = match &self.labels {
            ClipLabels::Strong(a) => a.iter().map(|e| e.class.clone()).collect(),
            ClipLabels::Weak(t) => t.clone(),
            ClipLabels::None => Vec::new(),
        };
        tags.sort();
        tags.dedup();
        tags
    }

    fn labels_field(&self) -> String {
        match &self.labels {
            ClipLabels::Strong(a) => a
                .iter()
                .map(|e| format!("{},{},{}", e.onset, e.offset, e.class))
                .collect::<Vec<_>>()
                .join(";"),
            ClipLabels::Weak(t) => t.join(";"),
            ClipLabels::None => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub classes: Vec<String>,
    pub records: Vec<ClipRecord>,
}

fn check_name(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', ';', ',']) {
        return Err(Error::InvalidArgument(format!("{kind} '{s}' is empty or contains a separator")));
    }
    Ok(())
}

impl DatasetIndex {
    pub fn new(classes: Vec<String>, records: Vec<ClipRecord>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidArgument("vocabulary is empty".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            check_name("class", c)?;
            if classes[..i].contains(c) {
                return Err(Error::InvalidArgument(format!("duplicate class '{c}'")));
            }
        }
        let idx = Self { classes, records };
        for r in &idx.records {
            idx.check_record(r)?;
        }
        Ok(idx)
    }

    fn check_record(&self, r: &ClipRecord) -> Result<()> {
        if r.path.is_empty() || r.path.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!("bad path '{}'", r.path)));
        }
        let known = |c: &String| {
            if self.classes.contains(c) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{}: class '{c}' not in vocabulary", r.path)))
            }
        };
        match &r.labels {
            ClipLabels::Strong(events) => {
                for e in events {
                    known(&e.class)?;
                    if !(e.onset >= 0.0 && e.onset < e.offset && e.offset.is_finite()) {
                        return Err(Error::InvalidArgument(format!(
                            "{}: event {}..{} is not a positive interval",
                            r.path, e.onset, e.offset
                        )));
                    }
                }
            }
            ClipLabels::Weak(tags) => tags.iter().try_for_each(known)?,
            ClipLabels::None => {}
        }
        Ok(())
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.in_split(split).count()
    }

    /// Checks every offset against the clip length.
    pub fn check_duration(&self, seconds: f64) -> Result<()> {
        for r in &self.records {
            if let ClipLabels::Strong(events) = &r.labels {
                if let Some(e) = events.iter().find(|e| e.offset > seconds + 1e-9) {
                    return Err(Error::InvalidArgument(format!(
                        "{}: offset {} exceeds clip length {seconds}",
                        r.path, e.offset
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.path, r.split, r.labels_field()))
            .collect()
    }

    /// Parses index text against a known vocabulary. Strong and validation
    /// rows hold event triples; weak rows hold tags; unlabeled rows hold
    /// nothing, or triples in the private file.
    pub fn parse(text: &str, classes: Vec<String>) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |m: String| Error::Parse(format!("index line {}: {m}", lineno + 1));
            let mut cols = line.split('\t');
            let path = cols.next().unwrap_or_default().to_string();
            let split: Split = cols.next().ok_or_else(|| at("missing split".into()))?.parse().map_err(|e: Error| at(e.to_string()))?;
            let field = cols.next().unwrap_or("");
            if cols.next().is_some() {
                return Err(at("too many columns".into()));
            }
            let labels = match split {
                Split::Weak => ClipLabels::Weak(field.split(';').filter(|s| !s.is_empty()).map(String::from).collect()),
                Split::Unlabeled if field.is_empty() => ClipLabels::None,
                _ => ClipLabels::Strong(
                    field
                        .split(';')
                        .filter(|s| !s.is_empty())
                        .map(|triple| {
                            let parts: Vec<&str> = triple.split(',').collect();
                            if parts.len() != 3 {
                                return Err(at(format!("expected onset,offset,class, got '{triple}'")));
                            }
                            let num = |s: &str| s.parse::<f64>().map_err(|_| at(format!("bad time '{s}'")));
                            Ok(Annotation { onset: num(parts[0])?, offset: num(parts[1])?, class: parts[2].to_string() })
                        })
                        .collect::<Result<_>>()?,
                ),
            };
            records.push(ClipRecord { path, split, labels });
        }
        Self::new(classes, records)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(CLASSES_FILE), self.classes.join("\n") + "\n")?;
        std::fs::write(dir.join(INDEX_FILE), self.to_tsv())?;
        Ok(())
    }

    pub fn read_classes(dir: &Path) -> Result<Vec<String>> {
        let text = std::fs::read_to_string(dir.join(CLASSES_FILE))?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let classes = Self::read_classes(dir)?;
        Self::parse(&std::fs::read_to_string(dir.join(INDEX_FILE))?, classes)
    }

    /// Reads the withheld labels of the unlabeled split.
    pub fn read_private(dir: &Path) -> Result<Self> {
        let classes = Self::read_classes(dir)?;
        Self::parse(&std::fs::read_to_string(dir.join(PRIVATE_FILE))?, classes)
    }
}
