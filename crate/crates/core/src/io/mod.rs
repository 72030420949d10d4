//! Scene ingestion, synthetic scenes, checkpoints and PLY export.

pub mod checkpoint;
pub mod colmap;
pub mod ply;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::geometry::PointCloud;
use crate::imaging::Image;
use crate::raster::Camera;
use crate::{Result, SagsError};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMode};
pub use colmap::{parse_colmap_scene, parse_colmap_scene_with, write_bundle};
pub use synth::{synth_scene, SynthConfig, SynthScene};

/// How views are divided into training and held-out sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSplit {
    /// Views whose index is a multiple of `n` are held out.
    EveryNth(usize),
    /// Every view is used for training.
    None,
}

impl Default for TestSplit {
    fn default() -> Self {
        TestSplit::EveryNth(8)
    }
}

impl TestSplit {
    pub fn indices(self, views: usize) -> (Vec<usize>, Vec<usize>) {
        match self {
            TestSplit::EveryNth(n) if n > 0 => (0..views).partition(|i| i % n != 0),
            _ => ((0..views).collect(), Vec::new()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub points: PointCloud,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub names: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if self.images.len() != n || self.names.len() != n {
            return Err(SagsError::Contract(format!(
                "{n} cameras, {} images, {} names",
                self.images.len(),
                self.names.len()
            )));
        }
        for (i, (c, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            if c.width != img.width() || c.height != img.height() {
                return Err(SagsError::Contract(format!("view {i}: camera and image sizes differ")));
            }
        }
        let mut seen = vec![0u8; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n {
                return Err(SagsError::Contract(format!("split index {i} out of range")));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&s| s != 1) {
            return Err(SagsError::Contract("train/test split must be disjoint and cover every view".into()));
        }
        Ok(())
    }

    pub fn with_split(mut self, split: TestSplit) -> Self {
        let (train, test) = split.indices(self.cameras.len());
        self.train = train;
        self.test = test;
        self
    }

    pub fn views(&self, indices: &[usize]) -> (Vec<Camera>, Vec<Image>) {
        (
            indices.iter().map(|&i| self.cameras[i].clone()).collect(),
            indices.iter().map(|&i| self.images[i].clone()).collect(),
        )
    }

    pub fn train_views(&self) -> (Vec<Camera>, Vec<Image>) {
        self.views(&self.train)
    }

    pub fn test_views(&self) -> (Vec<Camera>, Vec<Image>) {
        self.views(&self.test)
    }
}
