use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sim::check_version;

pub const TRACK_DUMP_FORMAT_VERSION: u32 = 1;

/// One tracked segment in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub id: u64,
    /// Global point ids, sorted.
    pub points: Vec<u32>,
    pub objectness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTracks {
    pub t: usize,
    pub tracks: Vec<TrackRecord>,
}

/// Per-frame tracker output for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackDump {
    pub format_version: u32,
    pub sequence_id: String,
    pub frames: Vec<FrameTracks>,
}

impl TrackDump {
    pub fn new(sequence_id: impl Into<String>) -> Self {
        Self {
            format_version: TRACK_DUMP_FORMAT_VERSION,
            sequence_id: sequence_id.into(),
            frames: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        check_version(&v, TRACK_DUMP_FORMAT_VERSION)?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
