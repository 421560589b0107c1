use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{read_png, Dataset, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["path", "label", "split", "anomaly_type"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "normal" => Ok(Label::Normal),
            "anomalous" => Ok(Label::Anomalous),
            _ => Err(format!("unknown label `{s}` (expected normal or anomalous)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    ValPool,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValPool => "val-pool",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val-pool" => Ok(Split::ValPool),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val-pool or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    /// As written in the file; doubles as the sample id.
    pub path: String,
    pub label: Label,
    pub split: Split,
    pub anomaly_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    /// Parse CSV text; row numbers in errors count data rows from 1.
    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != MANIFEST_HEADER {
            return Err(Error::Manifest {
                row: 0,
                message: format!("header must be `{}`, got `{}`", MANIFEST_HEADER.join(","), header.join(",")),
            });
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::Manifest {
                row,
                message: e.to_string(),
            })?;
            let bad = |message: String| Error::Manifest { row, message };
            let path = rec[0].to_string();
            if path.is_empty() {
                return Err(bad("empty path".into()));
            }
            let label: Label = rec[1].parse().map_err(bad)?;
            let split: Split = rec[2].parse().map_err(bad)?;
            let anomaly_type = Some(rec[3].to_string()).filter(|t| !t.is_empty());
            if split == Split::Train && label == Label::Anomalous {
                return Err(bad(format!("anomalous image `{path}` in the train split")));
            }
            if label == Label::Anomalous && anomaly_type.is_none() {
                return Err(bad(format!("anomalous image `{path}` has no anomaly_type")));
            }
            if !seen.insert(path.clone()) {
                return Err(bad(format!("duplicate path `{path}`")));
            }
            rows.push(ManifestRow {
                path,
                label,
                split,
                anomaly_type,
            });
        }
        Ok(Self { root, rows })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.path.as_str(),
                r.label.as_str(),
                r.split.as_str(),
                r.anomaly_type.as_deref().unwrap_or(""),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn count(&self, split: Split) -> usize {
        self.rows.iter().filter(|r| r.split == split).count()
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Decode every image; unreadable paths surface here.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let samples = self
            .rows
            .iter()
            .map(|r| {
                Ok(Sample {
                    id: r.path.clone(),
                    label: r.label,
                    split: r.split,
                    anomaly_type: r.anomaly_type.clone(),
                    image: read_png(&self.resolve(r))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }
}
