//! Clip/caption feature datasets: data model, on-disk format, context
//! windows, batch sampling and a synthetic generator.

mod io;
mod sampling;
mod synthetic;
mod window;

pub use io::{load_dataset, sha256_hex, write_dataset, CLIP_FEATS_FILE, MANIFEST_FILE, TOKEN_FEATS_FILE};
pub use sampling::{sample_batch, sample_neighbour, sample_neighbours, Batch, BatchPair};
pub use synthetic::{generate_synthetic, GenConfig};
pub use window::{build_context_window, ContextWindow};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on caption length in tokens.
pub const DEFAULT_L_MAX: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub clip_feature: Vec<f32>,
    pub token_features: Vec<Vec<f32>>,
    pub caption: String,
    pub t_start: Option<f64>,
    pub t_end: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub clips: Vec<ClipRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Position of a clip inside a split: `(video index, clip index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClipRef {
    pub video: usize,
    pub clip: usize,
}

/// Videos with per-clip visual features and per-token caption features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub d_v: usize,
    pub d_w: usize,
    pub l_max: usize,
    pub train: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
}

impl FeatureDataset {
    pub fn split(&self, split: Split) -> &[VideoRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn num_clips(&self, split: Split) -> usize {
        self.split(split).iter().map(|v| v.clips.len()).sum()
    }

    /// Every clip of a split in video order, then temporal order.
    pub fn clip_refs(&self, split: Split) -> Vec<ClipRef> {
        self.split(split)
            .iter()
            .enumerate()
            .flat_map(|(vi, v)| (0..v.clips.len()).map(move |ci| ClipRef { video: vi, clip: ci }))
            .collect()
    }

    pub fn clip(&self, split: Split, r: ClipRef) -> &ClipRecord {
        &self.split(split)[r.video].clips[r.clip]
    }

    /// Checks every record against the dataset dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_w == 0 || self.l_max == 0 {
            return Err(Error::Config(format!(
                "dataset dims must be positive (d_v={}, d_w={}, L_max={})",
                self.d_v, self.d_w, self.l_max
            )));
        }
        for video in self.train.iter().chain(&self.test) {
            if video.clips.is_empty() {
                return Err(Error::Input(format!("video {} has no clips", video.video_id)));
            }
            for clip in &video.clips {
                clip.validate(self.d_v, self.d_w, self.l_max)?;
            }
        }
        Ok(())
    }
}

impl ClipRecord {
    pub fn validate(&self, d_v: usize, d_w: usize, l_max: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(format!("clip {}: {msg}", self.clip_id)));
        if self.caption.is_empty() {
            return bad("empty caption".into());
        }
        if self.clip_feature.len() != d_v {
            return bad(format!("clip feature has {} values, expected {d_v}", self.clip_feature.len()));
        }
        if self.token_features.is_empty() || self.token_features.len() > l_max {
            return bad(format!(
                "token count {} outside 1..={l_max}",
                self.token_features.len()
            ));
        }
        if let Some(t) = self.token_features.iter().find(|t| t.len() != d_w) {
            return bad(format!("token vector has {} values, expected {d_w}", t.len()));
        }
        Ok(())
    }
}
