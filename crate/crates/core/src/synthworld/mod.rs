//! Procedural portrait-video world with exact masks and keypoints.
//!
//! A face is an ellipse with eyes and a mouth, optionally decorated with up to
//! four attributes. Everything is hard-rasterized from [`FaceParams`] so the
//! per-pixel label map doubles as a perfect segmenter.

mod dataset;
mod motion;
mod render;
#[cfg(test)]
pub(crate) mod oracles;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{color_linf, Rgb};

pub use dataset::{list_videos, load_video, write_video, DatasetWriter, Manifest, VideoRecord};
pub use motion::{MotionSpec, Sinusoid};
pub use render::{
    generate_video, frame_from_labels, landmarks, render_attribute_mask, render_attribute_mask_at, render_frame, render_keypoints,
    render_labels, Label, LabelMap, KEYPOINT_COLORS, LANDMARK_COUNT, YAW_SHIFT_PX,
};

/// Minimum L∞ separation between any two colors of one identity's palette.
pub const PALETTE_SEPARATION: f32 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeCategory {
    Hair,
    Eyeglasses,
    Beard,
    Hat,
}

impl AttributeCategory {
    pub const ALL: [AttributeCategory; 4] = [Self::Hair, Self::Eyeglasses, Self::Beard, Self::Hat];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hair => "hair",
            Self::Eyeglasses => "eyeglasses",
            Self::Beard => "beard",
            Self::Hat => "hat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl std::fmt::Display for AttributeCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Category-specific geometry, in pixels or radians of the unscaled face frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttributeShape {
    Hair { thickness: f32, extent: f32 },
    Eyeglasses { lens_radius: f32, bridge_width: f32 },
    Beard { thickness: f32 },
    Hat { width: f32, height: f32 },
}

impl AttributeShape {
    pub fn category(&self) -> AttributeCategory {
        match self {
            Self::Hair { .. } => AttributeCategory::Hair,
            Self::Eyeglasses { .. } => AttributeCategory::Eyeglasses,
            Self::Beard { .. } => AttributeCategory::Beard,
            Self::Hat { .. } => AttributeCategory::Hat,
        }
    }

    /// Inclusive sampling range of every shape scalar, in declaration order.
    pub fn ranges(category: AttributeCategory) -> &'static [(f32, f32)] {
        match category {
            AttributeCategory::Hair => &[(3.0, 7.0), (0.9, 1.5)],
            AttributeCategory::Eyeglasses => &[(3.0, 4.0), (1.0, 2.0)],
            AttributeCategory::Beard => &[(2.5, 5.0)],
            AttributeCategory::Hat => &[(20.0, 28.0), (5.0, 9.0)],
        }
    }

    pub fn scalars(&self) -> Vec<f32> {
        match *self {
            Self::Hair { thickness, extent } => vec![thickness, extent],
            Self::Eyeglasses { lens_radius, bridge_width } => vec![lens_radius, bridge_width],
            Self::Beard { thickness } => vec![thickness],
            Self::Hat { width, height } => vec![width, height],
        }
    }

    pub fn from_scalars(category: AttributeCategory, s: &[f32]) -> Self {
        match category {
            AttributeCategory::Hair => Self::Hair { thickness: s[0], extent: s[1] },
            AttributeCategory::Eyeglasses => Self::Eyeglasses { lens_radius: s[0], bridge_width: s[1] },
            AttributeCategory::Beard => Self::Beard { thickness: s[0] },
            AttributeCategory::Hat => Self::Hat { width: s[0], height: s[1] },
        }
    }

    pub fn sample<R: Rng>(category: AttributeCategory, rng: &mut R) -> Self {
        let s: Vec<f32> = Self::ranges(category).iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
        Self::from_scalars(category, &s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub color: Rgb,
    pub shape: AttributeShape,
}

impl AttributeSpec {
    pub fn category(&self) -> AttributeCategory {
        self.shape.category()
    }
}

/// Complete parametric description of one synthetic identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub background: Rgb,
    pub skin_color: Rgb,
    /// Semi-axes (ax, ay) of the face ellipse in pixels.
    pub face_axes: (f32, f32),
    pub eye_color: Rgb,
    pub mouth_color: Rgb,
    /// Neutral expression; renders take the per-frame value explicitly.
    pub mouth_open: f32,
    pub attributes: BTreeMap<AttributeCategory, AttributeSpec>,
}

/// Independent presence probability per attribute category.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryWeights(pub BTreeMap<AttributeCategory, f64>);

impl CategoryWeights {
    pub fn uniform(p: f64) -> Self {
        Self(AttributeCategory::ALL.iter().map(|&c| (c, p)).collect())
    }

    pub fn zero() -> Self {
        Self::uniform(0.0)
    }

    pub fn with(mut self, category: AttributeCategory, p: f64) -> Self {
        self.0.insert(category, p);
        self
    }

    pub fn get(&self, category: AttributeCategory) -> f64 {
        self.0.get(&category).copied().unwrap_or(0.0).clamp(0.0, 1.0)
    }
}

impl Default for FaceParams {
    fn default() -> Self {
        Self {
            background: [0.8, 0.8, 0.6],
            skin_color: [0.9, 0.6, 0.45],
            face_axes: (12.5, 15.5),
            eye_color: [0.2, 0.25, 0.6],
            mouth_color: [0.75, 0.1, 0.2],
            mouth_open: 0.3,
            attributes: BTreeMap::new(),
        }
    }
}

impl FaceParams {
    pub fn attribute(&self, category: AttributeCategory) -> Option<&AttributeSpec> {
        self.attributes.get(&category)
    }

    pub fn with_attribute(mut self, spec: AttributeSpec) -> Self {
        self.attributes.insert(spec.category(), spec);
        self
    }

    pub fn without_attribute(mut self, category: AttributeCategory) -> Self {
        self.attributes.remove(&category);
        self
    }

    /// Every distinct color an unjittered render of this identity can show.
    pub fn palette(&self) -> Vec<Rgb> {
        let mut p = vec![self.background, self.skin_color, self.eye_color, self.mouth_color];
        p.extend(self.attributes.values().map(|a| a.color));
        p
    }

    /// Checks color range, axis positivity, and shape scalars.
    pub fn validate(&self) -> Result<(), String> {
        let palette = self.palette();
        for c in &palette {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("color {c:?} outside [0,1]"));
            }
        }
        if self.face_axes.0 <= 0.0 || self.face_axes.1 <= 0.0 {
            return Err("face axes must be positive".into());
        }
        for (cat, spec) in &self.attributes {
            if spec.category() != *cat {
                return Err(format!("attribute stored under {cat} has shape of {}", spec.category()));
            }
            if spec.shape.scalars().iter().any(|&s| s <= 0.0) {
                return Err(format!("{cat} shape scalars must be positive"));
            }
        }
        Ok(())
    }

    /// Smallest pairwise L∞ distance between palette colors (black included).
    pub fn palette_separation(&self) -> f32 {
        let mut p = self.palette();
        p.push([0.0; 3]);
        let mut best = f32::INFINITY;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                best = best.min(color_linf(p[i], p[j]));
            }
        }
        best
    }
}

/// Draws a color quantized to 8 bits that is at least [`PALETTE_SEPARATION`]
/// away (L∞) from every color in `taken`.
pub fn sample_separated_color<R: Rng>(rng: &mut R, taken: &[Rgb]) -> Rgb {
    loop {
        let c = [0, 1, 2].map(|_| rng.random_range(0u8..=255) as f32 / 255.0);
        if taken.iter().all(|&t| color_linf(t, c) >= PALETTE_SEPARATION) {
            return c;
        }
    }
}

/// Deterministically samples an identity. Black is reserved (masked pixels)
/// and excluded from every palette.
pub fn sample_face_params(seed: u64, weights: &CategoryWeights) -> FaceParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken: Vec<Rgb> = vec![[0.0; 3]];
    let mut pick = |rng: &mut ChaCha8Rng| {
        let c = sample_separated_color(rng, &taken);
        taken.push(c);
        c
    };
    let background = pick(&mut rng);
    let skin_color = pick(&mut rng);
    let eye_color = pick(&mut rng);
    let mouth_color = pick(&mut rng);
    let face_axes = (rng.random_range(11.0..=13.5f32), rng.random_range(14.0..=16.5f32));
    let mouth_open = rng.random_range(0.0..=1.0f32);
    let mut attributes = BTreeMap::new();
    for category in AttributeCategory::ALL {
        // Draw unconditionally so one category's weight never shifts another's stream.
        let roll: f64 = rng.random();
        let color = pick(&mut rng);
        let shape = AttributeShape::sample(category, &mut rng);
        if roll < weights.get(category) {
            attributes.insert(category, AttributeSpec { color, shape });
        }
    }
    FaceParams { background, skin_color, face_axes, eye_color, mouth_color, mouth_open, attributes }
}

/// Head pose. Yaw is realized as a horizontal shift of facial features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub yaw: f32,
    pub roll: f32,
    pub tx: f32,
    pub ty: f32,
    pub scale: f32,
}

impl Pose {
    pub const YAW_RANGE: f32 = 0.5;
    pub const ROLL_RANGE: f32 = 0.3;
    pub const TRANSLATION_RANGE: f32 = 6.0;
    pub const SCALE_RANGE: (f32, f32) = (0.85, 1.15);

    pub fn identity() -> Self {
        Self { yaw: 0.0, roll: 0.0, tx: 0.0, ty: 0.0, scale: 1.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = self.yaw.abs() <= Self::YAW_RANGE
            && self.roll.abs() <= Self::ROLL_RANGE
            && self.tx.abs() <= Self::TRANSLATION_RANGE
            && self.ty.abs() <= Self::TRANSLATION_RANGE
            && (Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1).contains(&self.scale);
        if ok {
            Ok(())
        } else {
            Err(format!("{self:?}"))
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}
