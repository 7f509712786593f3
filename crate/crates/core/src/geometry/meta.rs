use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CameraParams, ScenePlaneGrid};
use crate::error::{Error, Result};

/// Per-scene camera metadata as stored in `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub cameras: Vec<CameraParams>,
    pub grid: ScenePlaneGrid,
}

impl SceneMeta {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.cameras.iter().try_for_each(CameraParams::validate)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene meta serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: SceneMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        meta.validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(meta)
    }
}
