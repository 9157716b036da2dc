//! Dataset manifest: a JSON file listing each city's day files split into
//! train, validation and test partitions. Relative paths resolve against the
//! manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::WINDOW_FRAMES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestEntry {
    pub path: PathBuf,
    /// Window start indices evaluated on this file.
    pub starts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CityEntry {
    pub name: String,
    pub train: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<TestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cities: Vec<CityEntry>,
    #[serde(skip)]
    root: PathBuf,
}

/// Train/validation/test counts for `n` day files. 364 files give the
/// challenge split 285/7/72; smaller sets scale proportionally while
/// keeping at least one training and (for n >= 2) one validation file.
pub fn canonical_split(n: usize) -> (usize, usize, usize) {
    if n >= 364 {
        return (n - 79, 7, 72);
    }
    let val = if n >= 2 {
        ((n * 7) as f64 / 364.0).round().max(1.0) as usize
    } else {
        0
    };
    let test = ((n * 72) as f64 / 364.0).round() as usize;
    let test = test.min(n.saturating_sub(val + 1));
    (n - val - test, val, test)
}

/// Fixed evaluation starts for a day: every 48 frames (4 hours).
pub fn default_test_starts(num_frames: usize) -> Vec<usize> {
    if num_frames < WINDOW_FRAMES {
        return Vec::new();
    }
    (0..=num_frames - WINDOW_FRAMES).step_by(48).collect()
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            cities: Vec::new(),
            root: root.into(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn city(&self, name: &str) -> Option<&CityEntry> {
        self.cities.iter().find(|c| c.name == name)
    }

    /// Insert or replace a city entry.
    pub fn upsert(&mut self, entry: CityEntry) {
        match self.cities.iter_mut().find(|c| c.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.cities.push(entry),
        }
    }

    /// Partitions must be disjoint within and across cities.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut names = HashSet::new();
        for city in &self.cities {
            if !names.insert(&city.name) {
                return Err(Error::Format {
                    what: "manifest",
                    detail: format!("city {} listed twice", city.name),
                });
            }
            let paths = city
                .train
                .iter()
                .chain(&city.validation)
                .chain(city.test.iter().map(|t| &t.path));
            for p in paths {
                if !seen.insert(self.resolve(p)) {
                    return Err(Error::Format {
                        what: "manifest",
                        detail: format!("{} appears in more than one partition", p.display()),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
