//! On-disk dataset layout:
//!
//! ```text
//! <root>/<video_id>/frames/%04d.png        8-bit RGB
//! <root>/<video_id>/keypoints/%04d.png     8-bit RGB
//! <root>/<video_id>/masks/<category>/%04d.png   8-bit gray, {0,255}
//! <root>/<video_id>/manifest.json          {"video_id", "face", "motion"}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_video, sample_face_params, AttributeCategory, CategoryWeights, FaceParams, MotionSpec};
use crate::error::{Error, Result};
use crate::raster::{Frame, KeypointImage, Mask};

/// One rendered clip with its ground-truth parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub params: FaceParams,
    pub motion: MotionSpec,
    pub frames: Vec<Frame>,
    pub keypoints: Vec<KeypointImage>,
    pub masks: BTreeMap<AttributeCategory, Vec<Mask>>,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn categories(&self) -> Vec<AttributeCategory> {
        self.masks.keys().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub video_id: String,
    pub face: FaceParams,
    pub motion: MotionSpec,
}

pub fn write_video(root: &Path, video_id: &str, video: &VideoRecord) -> Result<PathBuf> {
    let dir = root.join(video_id);
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("keypoints"))?;
    for (i, (f, k)) in video.frames.iter().zip(&video.keypoints).enumerate() {
        f.save_png(&dir.join("frames").join(format!("{i:04}.png")))?;
        k.save_png(&dir.join("keypoints").join(format!("{i:04}.png")))?;
    }
    for (cat, masks) in &video.masks {
        let mdir = dir.join("masks").join(cat.name());
        fs::create_dir_all(&mdir)?;
        for (i, m) in masks.iter().enumerate() {
            m.save_png(&mdir.join(format!("{i:04}.png")))?;
        }
    }
    let manifest = Manifest { video_id: video_id.to_string(), face: video.params.clone(), motion: video.motion.clone() };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(dir)
}

pub fn load_video(dir: &Path) -> Result<VideoRecord> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let n = manifest.motion.frames;
    let load_seq = |sub: &Path| -> Result<Vec<Frame>> {
        (0..n).map(|i| Frame::load_png(&sub.join(format!("{i:04}.png")))).collect()
    };
    let frames = load_seq(&dir.join("frames"))?;
    let keypoints = load_seq(&dir.join("keypoints"))?;
    let mut masks = BTreeMap::new();
    for &cat in manifest.face.attributes.keys() {
        let mdir = dir.join("masks").join(cat.name());
        let seq = (0..n).map(|i| Mask::load_png(&mdir.join(format!("{i:04}.png")))).collect::<Result<Vec<_>>>()?;
        masks.insert(cat, seq);
    }
    Ok(VideoRecord { params: manifest.face, motion: manifest.motion, frames, keypoints, masks })
}

/// Sorted video directories (those holding a manifest) under `root`.
pub fn list_videos(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::Dataset(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Seeded generator of a whole synthetic dataset.
#[derive(Clone, Debug)]
pub struct DatasetWriter {
    pub seed: u64,
    pub frames: usize,
    pub weights: CategoryWeights,
}

impl DatasetWriter {
    pub fn new(seed: u64) -> Self {
        Self { seed, frames: 24, weights: Self::default_weights() }
    }

    pub fn default_weights() -> CategoryWeights {
        CategoryWeights::zero()
            .with(AttributeCategory::Hair, 0.7)
            .with(AttributeCategory::Eyeglasses, 0.5)
            .with(AttributeCategory::Beard, 0.4)
            .with(AttributeCategory::Hat, 0.3)
    }

    /// The `index`-th video. Identities are redrawn until at least one
    /// attribute is present, so every video supports self-reconstruction.
    pub fn video(&self, index: usize) -> Result<VideoRecord> {
        let base = self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64 * 7919);
        let mut sub = 0u64;
        let params = loop {
            let p = sample_face_params(base.wrapping_add(sub << 32), &self.weights);
            if !p.attributes.is_empty() || sub >= 64 {
                break p;
            }
            sub += 1;
        };
        let motion = MotionSpec::sample(base, self.frames);
        generate_video(&params, &motion)
    }

    pub fn generate(&self, count: usize) -> Result<Vec<VideoRecord>> {
        (0..count).map(|i| self.video(i)).collect()
    }

    pub fn video_id(index: usize) -> String {
        format!("video_{index:04}")
    }

    pub fn write(&self, root: &Path, count: usize) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(root)?;
        (0..count).map(|i| write_video(root, &Self::video_id(i), &self.video(i)?)).collect()
    }
}
