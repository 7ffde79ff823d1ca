use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::batch::Dataset;
use super::sample::load_sample;
use crate::error::{Error, Result};
use crate::model::Category;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub(crate) fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub annotated: Vec<u8>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub categories: Vec<Category>,
    pub samples: Vec<ManifestEntry>,
    pub seed: u64,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        for (i, c) in self.categories.iter().enumerate() {
            if c.id == 0 || self.categories[..i].iter().any(|o| o.id == c.id) {
                return Err(Error::Manifest(format!("category id {} reserved or repeated", c.id)));
            }
        }
        for s in &self.samples {
            if let Some(id) = s.annotated.iter().find(|id| !self.categories.iter().any(|c| c.id == **id)) {
                return Err(Error::Manifest(format!("{} annotates unknown category {id}", s.path)));
            }
        }
        Ok(())
    }

    pub fn category_ids(&self) -> Vec<u8> {
        self.categories.iter().map(|c| c.id).collect()
    }

    /// Union of the annotated sets of the given split.
    pub fn annotated_ids(&self, split: Split) -> Vec<u8> {
        let mut ids: Vec<u8> = self
            .samples
            .iter()
            .filter(|s| s.split == split)
            .flat_map(|s| s.annotated.iter().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Load and check every file of one split.
    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let mut samples = Vec::new();
        for entry in self.samples.iter().filter(|s| s.split == split) {
            let path = self.root.join(&entry.path);
            let s = load_sample(&path)?;
            if s.annotated != entry.annotated {
                return Err(Error::Manifest(format!(
                    "{} annotates {:?} but the manifest lists {:?}",
                    path.display(),
                    s.annotated,
                    entry.annotated
                )));
            }
            samples.push(s);
        }
        Dataset::new(samples, self.categories.clone())
    }
}
