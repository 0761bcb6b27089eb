use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_sweep, Sweep};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Split membership of the sweep directories under a dataset root.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedMeta { path, reason: e.to_string() })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(INDEX_FILE);
        let json = serde_json::to_string_pretty(self).expect("index serialises");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<Sweep>> {
        self.split(split).iter().map(|name| load_sweep(&root.join(name))).collect()
    }
}
