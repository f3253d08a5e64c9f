//! Masked reference construction for self-reconstruction training: the
//! attribute-only image, the attribute-masked portrait, training-time mask
//! expansion, and reference augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{Frame, KeypointImage, Mask, Rgb};
use crate::synthworld::{
    render_attribute_mask_at, AttributeCategory, AttributeShape, AttributeSpec, FaceParams, Pose, VideoRecord,
};

/// Masked conditioning inputs: one or more attribute-only images with their
/// masks, and the attribute-masked portrait with its (removed-region) mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceBundle {
    pub attrs: Vec<(Frame, Mask)>,
    pub port_image: Frame,
    pub port_mask: Mask,
}

impl ReferenceBundle {
    pub fn validate(&self) -> Result<()> {
        if self.attrs.is_empty() {
            return Err(Error::InvalidArgument("reference bundle needs at least one attribute image".into()));
        }
        let size = self.port_image.size();
        for (img, mask) in &self.attrs {
            check_shapes(img, mask)?;
            if img.size() != size {
                return Err(Error::Shape("attribute and portrait references differ in size".into()));
            }
        }
        check_shapes(&self.port_image, &self.port_mask)
    }
}

fn check_shapes(image: &Frame, mask: &Mask) -> Result<()> {
    if image.size() != mask.size() {
        return Err(Error::Shape(format!("image side {} vs mask side {}", image.size(), mask.size())));
    }
    Ok(())
}

fn masked(image: &Frame, mask: &Mask, keep_on: bool) -> Result<Frame> {
    check_shapes(image, mask)?;
    let mut out = image.clone();
    for (px, &m) in out.data_mut().chunks_exact_mut(3).zip(mask.data()) {
        if (m != 0) != keep_on {
            px.fill(0.0);
        }
    }
    Ok(out)
}

/// `image ⊙ mask`: keeps only the attribute region.
pub fn make_attribute_only(image: &Frame, mask: &Mask) -> Result<Frame> {
    masked(image, mask, true)
}

/// `image ⊙ (1 − mask)`: removes the candidate transfer region.
pub fn make_attribute_masked_portrait(image: &Frame, mask: &Mask) -> Result<Frame> {
    masked(image, mask, false)
}

/// Result of [`expand_mask`]. `category_absent` flags that the identity has no
/// attribute of the requested category and the base mask was returned as is.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskExpansion {
    pub mask: Mask,
    pub category_absent: bool,
}

/// Moves every shape scalar of `spec` toward an independent draw from its
/// category range by `magnitude` (0 keeps the spec, 1 fully resamples it).
pub fn perturb_attribute(spec: &AttributeSpec, rng_seed: u64, magnitude: f32) -> AttributeSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let category = spec.category();
    let draw = AttributeShape::sample(category, &mut rng).scalars();
    let scalars: Vec<f32> =
        spec.shape.scalars().iter().zip(draw).map(|(&s, r)| s + magnitude * (r - s)).collect();
    AttributeSpec { color: spec.color, shape: AttributeShape::from_scalars(category, &scalars) }
}

/// Union of `base_mask` with the mask rendered under an alternative attribute spec.
pub fn expand_mask_with_spec(
    base_mask: &Mask,
    params: &FaceParams,
    pose: &Pose,
    mouth_open: f32,
    spec: AttributeSpec,
) -> Result<Mask> {
    let alt = params.clone().with_attribute(spec);
    let generated = render_attribute_mask_at(&alt, pose, mouth_open, spec.category())?;
    base_mask.union(&generated)
}

/// Attribute-aware mask expansion: `base ∪ M_gen`, where `M_gen` is the same
/// category rendered with perturbed shape scalars at the same pose.
pub fn expand_mask(
    base_mask: &Mask,
    params: &FaceParams,
    pose: &Pose,
    mouth_open: f32,
    category: AttributeCategory,
    rng_seed: u64,
    magnitude: f32,
) -> Result<MaskExpansion> {
    let Some(spec) = params.attribute(category) else {
        log::warn!("mask expansion requested for absent attribute {category}");
        return Ok(MaskExpansion { mask: base_mask.clone(), category_absent: true });
    };
    if magnitude == 0.0 {
        return Ok(MaskExpansion { mask: base_mask.clone(), category_absent: false });
    }
    let perturbed = perturb_attribute(spec, rng_seed, magnitude);
    let mask = expand_mask_with_spec(base_mask, params, pose, mouth_open, perturbed)?;
    Ok(MaskExpansion { mask, category_absent: false })
}

/// Photometric deltas. The identity is `(0, 1, 1, 0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    /// Additive brightness offset.
    pub tone: f32,
    /// Multiplier on deviations from the mean gray level.
    pub contrast: f32,
    /// Multiplier on deviations from per-pixel luma.
    pub saturation: f32,
    /// Hue rotation as a fraction of the full circle.
    pub hue: f32,
}

impl ColorJitter {
    pub const IDENTITY: ColorJitter = ColorJitter { tone: 0.0, contrast: 1.0, saturation: 1.0, hue: 0.0 };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub translation: (f32, f32),
    pub rotation: f32,
    pub scale: f32,
    pub jitter: ColorJitter,
    pub background_fill: Rgb,
}

impl AugmentParams {
    pub fn identity(background_fill: Rgb) -> Self {
        Self { translation: (0.0, 0.0), rotation: 0.0, scale: 1.0, jitter: ColorJitter::IDENTITY, background_fill }
    }

    fn affine_is_identity(&self) -> bool {
        self.translation == (0.0, 0.0) && self.rotation == 0.0 && self.scale == 1.0
    }
}

/// How often and how strongly references are perturbed during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub affine_prob: f64,
    pub max_translation: f32,
    pub max_rotation: f32,
    pub scale_range: (f32, f32),
    pub jitter_prob: f64,
    pub max_tone: f32,
    pub contrast_range: (f32, f32),
    pub saturation_range: (f32, f32),
    pub max_hue: f32,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            affine_prob: 0.5,
            max_translation: 2.0,
            max_rotation: 0.1,
            scale_range: (0.95, 1.05),
            jitter_prob: 0.2,
            max_tone: 0.1,
            contrast_range: (0.8, 1.25),
            saturation_range: (0.8, 1.25),
            max_hue: 0.05,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self { affine_prob: 0.0, jitter_prob: 0.0, ..Self::default() }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, background_fill: Rgb) -> AugmentParams {
        let mut p = AugmentParams::identity(background_fill);
        // Fixed draw count keeps the rng stream aligned whatever the probabilities.
        let affine_roll: f64 = rng.random();
        let t = (rng.random_range(-1.0..=1.0f32), rng.random_range(-1.0..=1.0f32));
        let rot = rng.random_range(-1.0..=1.0f32);
        let sc = rng.random_range(self.scale_range.0..=self.scale_range.1);
        let jitter_roll: f64 = rng.random();
        let tone = rng.random_range(-1.0..=1.0f32);
        let contrast = rng.random_range(self.contrast_range.0..=self.contrast_range.1);
        let saturation = rng.random_range(self.saturation_range.0..=self.saturation_range.1);
        let hue = rng.random_range(-1.0..=1.0f32);
        if affine_roll < self.affine_prob {
            p.translation = (t.0 * self.max_translation, t.1 * self.max_translation);
            p.rotation = rot * self.max_rotation;
            p.scale = sc;
        }
        if jitter_roll < self.jitter_prob {
            p.jitter = ColorJitter { tone: tone * self.max_tone, contrast, saturation, hue: hue * self.max_hue };
        }
        p
    }
}

/// Applies the same affine warp to image (bilinear) and mask (nearest), fills
/// exposed pixels with `background_fill`, then jitters the image colors.
pub fn augment_reference(image: &Frame, mask: &Mask, params: &AugmentParams) -> Result<(Frame, Mask)> {
    check_shapes(image, mask)?;
    if !(params.scale > 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate affine scale {}", params.scale)));
    }
    let (mut out, out_mask) = if params.affine_is_identity() {
        (image.clone(), mask.clone())
    } else {
        warp(image, mask, params)
    };
    apply_jitter(&mut out, &params.jitter);
    Ok((out.clamped(), out_mask))
}

fn warp(image: &Frame, mask: &Mask, params: &AugmentParams) -> (Frame, Mask) {
    let n = image.size();
    let c = n as f32 / 2.0;
    let (sin_r, cos_r) = params.rotation.sin_cos();
    let fill = params.background_fill;
    let sample = |x: i64, y: i64| -> Rgb {
        if x < 0 || y < 0 || x >= n as i64 || y >= n as i64 {
            fill
        } else {
            image.get(x as usize, y as usize)
        }
    };
    let mut out = Frame::black(n);
    let mut out_mask = Mask::zeros(n);
    for y in 0..n {
        for x in 0..n {
            // Inverse map of p' = c + s·R·(p − c) + t.
            let dx = x as f32 + 0.5 - c - params.translation.0;
            let dy = y as f32 + 0.5 - c - params.translation.1;
            let sx = c + (cos_r * dx + sin_r * dy) / params.scale;
            let sy = c + (cos_r * dy - sin_r * dx) / params.scale;

            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (wx, wy) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let (c00, c10, c01, c11) = (sample(x0, y0), sample(x0 + 1, y0), sample(x0, y0 + 1), sample(x0 + 1, y0 + 1));
            let mut px = [0.0f32; 3];
            for k in 0..3 {
                px[k] = (c00[k] * (1.0 - wx) + c10[k] * wx) * (1.0 - wy) + (c01[k] * (1.0 - wx) + c11[k] * wx) * wy;
            }
            out.set(x, y, px);

            let (nx, ny) = (sx.floor() as i64, sy.floor() as i64);
            let on = nx >= 0 && ny >= 0 && nx < n as i64 && ny < n as i64 && mask.get(nx as usize, ny as usize);
            out_mask.set(x, y, on);
        }
    }
    (out, out_mask)
}

fn luma(c: Rgb) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn rotate_hue(c: Rgb, turns: f32) -> Rgb {
    let (h, s, v) = rgb_to_hsv(c);
    hsv_to_rgb((h + turns).rem_euclid(1.0), s, v)
}

/// HSV with hue in [0,1).
pub fn rgb_to_hsv(c: Rgb) -> (f32, f32, f32) {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == c[0] {
        ((c[1] - c[2]) / d).rem_euclid(6.0) / 6.0
    } else if max == c[1] {
        ((c[2] - c[0]) / d + 2.0) / 6.0
    } else {
        ((c[0] - c[1]) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> Rgb {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn apply_jitter(frame: &mut Frame, j: &ColorJitter) {
    if *j == ColorJitter::IDENTITY {
        return;
    }
    let n = (frame.size() * frame.size()) as f32;
    let mean_gray = frame.pixels().map(luma).sum::<f32>() / n;
    for px in frame.data_mut().chunks_exact_mut(3) {
        let mut c = [px[0] + j.tone, px[1] + j.tone, px[2] + j.tone];
        for v in &mut c {
            *v = (*v - mean_gray) * j.contrast + mean_gray;
        }
        let g = luma(c);
        for v in &mut c {
            *v = g + (*v - g) * j.saturation;
        }
        if j.hue != 0.0 {
            c = rotate_hue(c.map(|v| v.clamp(0.0, 1.0)), j.hue);
        }
        px.copy_from_slice(&c);
    }
}

/// Knobs of the self-reconstruction sample builder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    /// Disable to train without attribute-aware mask expansion.
    pub mask_expansion: bool,
    pub expansion_magnitude: f32,
    pub augment: AugmentPolicy,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { mask_expansion: true, expansion_magnitude: 1.0, augment: AugmentPolicy::default() }
    }
}

/// One self-reconstruction example drawn from a single video.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub bundle: ReferenceBundle,
    pub keypoints: Vec<KeypointImage>,
    pub targets: Vec<Frame>,
    pub category: AttributeCategory,
    /// Portrait-side training mask before augmentation (frame-p mask ∪ generated mask).
    pub expanded_mask: Mask,
    pub attr_index: usize,
    pub port_index: usize,
    pub clip_start: usize,
}

/// Samples an attribute frame and a portrait frame (distinct), a target clip,
/// and a present attribute category, then builds the masked references.
pub fn build_training_sample(
    video: &VideoRecord,
    rng_seed: u64,
    clip_len: usize,
    config: &SampleConfig,
) -> Result<TrainingSample> {
    if clip_len == 0 {
        return Err(Error::InvalidArgument("clip length must be positive".into()));
    }
    if video.len() < clip_len + 2 {
        return Err(Error::InvalidArgument(format!(
            "video has {} frames, need at least {}",
            video.len(),
            clip_len + 2
        )));
    }
    let categories = video.categories();
    if categories.is_empty() {
        return Err(Error::NoTransferableAttribute);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let category = categories[rng.random_range(0..categories.len())];
    let n = video.len();
    let attr_index = rng.random_range(0..n);
    let port_index = (attr_index + rng.random_range(1..n)) % n;
    let clip_start = rng.random_range(0..=n - clip_len);
    let expansion_seed: u64 = rng.random();

    let masks = &video.masks[&category];
    let attr_mask = &masks[attr_index];
    let port_base = &masks[port_index];
    let expanded_mask = if config.mask_expansion {
        let (pose, open) = video.motion.at(port_index);
        expand_mask(port_base, &video.params, &pose, open, category, expansion_seed, config.expansion_magnitude)?.mask
    } else {
        port_base.clone()
    };

    let fill = video.params.background;
    let attr_aug = config.augment.sample(&mut rng, fill);
    let port_aug = config.augment.sample(&mut rng, fill);
    let (attr_frame, attr_mask) = augment_reference(&video.frames[attr_index], attr_mask, &attr_aug)?;
    let (port_frame, port_mask) = augment_reference(&video.frames[port_index], &expanded_mask, &port_aug)?;
    let bundle = ReferenceBundle {
        attrs: vec![(make_attribute_only(&attr_frame, &attr_mask)?, attr_mask)],
        port_image: make_attribute_masked_portrait(&port_frame, &port_mask)?,
        port_mask,
    };
    Ok(TrainingSample {
        bundle,
        keypoints: video.keypoints[clip_start..clip_start + clip_len].to_vec(),
        targets: video.frames[clip_start..clip_start + clip_len].to_vec(),
        category,
        expanded_mask,
        attr_index,
        port_index,
        clip_start,
    })
}
