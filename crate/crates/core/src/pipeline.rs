//! Inference: attribute alignment, mask fusion, animation generation,
//! multi-attribute composition, attribute interpolation and keypoint guidance.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{make_attribute_masked_portrait, make_attribute_only};
use crate::diffusion::{gaussian, sample_reverse, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::nnmodel::{
    frames_to_latents, from_model_space, latents_to_frames, load_checkpoint, masked_latent_tensor, AttrGroup, Model,
    Trainable,
};
use crate::raster::{Frame, KeypointImage, Mask, Rgb, RESOLUTION};
use crate::synthworld::{
    load_video, render_attribute_mask_at, render_frame, render_keypoints, sample_face_params, AttributeCategory,
    DatasetWriter, FaceParams, MotionSpec, Pose,
};

/// An input image together with the parameters that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceImage {
    pub frame: Frame,
    pub params: FaceParams,
    pub pose: Pose,
    pub mouth_open: f32,
}

impl SourceImage {
    pub fn render(params: FaceParams, pose: Pose, mouth_open: f32) -> Result<Self> {
        let frame = render_frame(&params, &pose, mouth_open)?;
        Ok(Self { frame, params, pose, mouth_open })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSource {
    pub source: SourceImage,
    pub category: AttributeCategory,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interpolation {
    /// Indices into the request's attribute list.
    pub pair: (usize, usize),
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub portrait: SourceImage,
    pub attributes: Vec<AttributeSource>,
    /// Driving trajectory; keypoints carry the portrait's face shape.
    pub motion: MotionSpec,
    /// First generated frame of `motion`.
    pub start_frame: usize,
    pub frames: usize,
    pub interpolation: Option<Interpolation>,
    pub steps: usize,
    pub seed: u64,
    /// Re-render attributes at the portrait pose to estimate the transfer region.
    pub align: bool,
}

impl InferenceRequest {
    pub fn new(portrait: SourceImage, attributes: Vec<AttributeSource>, motion: MotionSpec) -> Self {
        let frames = motion.frames;
        Self { portrait, attributes, motion, start_frame: 0, frames, interpolation: None, steps: 50, seed: 0, align: true }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.attributes.is_empty() {
            return bad("request needs at least one attribute".into());
        }
        if self.steps == 0 || self.frames == 0 {
            return bad("steps and frames must be positive".into());
        }
        if self.start_frame + self.frames > self.motion.frames {
            return bad(format!(
                "frames {}..{} exceed the motion length {}",
                self.start_frame,
                self.start_frame + self.frames,
                self.motion.frames
            ));
        }
        for src in std::iter::once(&self.portrait).chain(self.attributes.iter().map(|a| &a.source)) {
            if src.frame.size() != RESOLUTION {
                return Err(Error::Shape(format!("input frame side {} != {RESOLUTION}", src.frame.size())));
            }
            src.params.validate().map_err(Error::InvalidArgument)?;
            src.pose.validate().map_err(Error::PoseOutOfRange)?;
        }
        for a in &self.attributes {
            if a.source.params.attribute(a.category).is_none() {
                return Err(Error::AttributeAbsent(a.category));
            }
        }
        if let Some(ip) = &self.interpolation {
            let (i, j) = ip.pair;
            if !(0.0..=1.0).contains(&ip.alpha) {
                return bad(format!("alpha {} outside [0, 1]", ip.alpha));
            }
            if self.attributes.len() != 2 || i == j || i > 1 || j > 1 {
                return bad("interpolation takes exactly two attributes, indexed 0 and 1".into());
            }
            if self.attributes[0].category != self.attributes[1].category {
                return bad(format!(
                    "cannot interpolate {} with {}",
                    self.attributes[0].category.name(),
                    self.attributes[1].category.name()
                ));
            }
        }
        Ok(())
    }
}

/// Trained weights ready for inference.
#[derive(Clone, Debug)]
pub struct Weights {
    pub model: Model,
    /// Optimizer steps the weights went through; zero means untrained.
    pub step: usize,
    pub temporal: bool,
}

impl Weights {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path, DType::F32)?;
        let mut store = ck.store;
        store.set_trainable(Trainable::Nothing);
        let temporal = ck.stage == 2;
        let model = Model::new(&mut store, &ck.config, temporal)?;
        Ok(Self { model, step: ck.step, temporal })
    }
}

/// Everything generation actually conditioned on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub request: InferenceRequest,
    /// Final portrait-side transfer region.
    pub portrait_mask: Mask,
    pub portrait_reference: Frame,
    pub attribute_references: Vec<Frame>,
    /// Each attribute's own mask at its original pose.
    pub attribute_masks: Vec<Mask>,
    /// Masks contributed to the transfer region (aligned unless alignment is off).
    pub transfer_masks: Vec<Mask>,
    pub keypoints: Vec<KeypointImage>,
    pub weights_step: usize,
}

impl Diagnostics {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Re-renders the attribute identity at the portrait's pose.
pub fn align_attribute(
    params: &FaceParams,
    category: AttributeCategory,
    mouth_open: f32,
    portrait_pose: &Pose,
) -> Result<(Frame, Mask)> {
    if params.attribute(category).is_none() {
        return Err(Error::AttributeAbsent(category));
    }
    let image = render_frame(params, portrait_pose, mouth_open)?;
    let mask = render_attribute_mask_at(params, portrait_pose, mouth_open, category)?;
    Ok((image, mask))
}

/// Pixelwise OR.
pub fn fuse_masks(port_init: &Mask, aligned: &[Mask]) -> Result<Mask> {
    aligned.iter().try_fold(port_init.clone(), |acc, m| acc.union(m))
}

/// Portrait face shape driven by the motion's pose and expression.
pub fn make_keypoint_guidance(portrait_params: &FaceParams, driving_motion: &MotionSpec) -> Result<Vec<KeypointImage>> {
    driving_motion.trajectory().iter().map(|(pose, open)| render_keypoints(portrait_params, pose, *open)).collect()
}

struct Prepared {
    diagnostics: Diagnostics,
    groups: Vec<AttrGroup>,
    port: Tensor,
}

fn prepare(request: &InferenceRequest, weights: &Weights) -> Result<Prepared> {
    request.validate()?;
    if weights.step == 0 {
        return Err(Error::InvalidArgument("weights are untrained (step 0)".into()));
    }
    let cfg = &weights.model.config;
    if cfg.image_size != RESOLUTION {
        return Err(Error::Config(format!("model image size {} != {RESOLUTION}", cfg.image_size)));
    }
    let dtype = weights.model.dtype();
    let portrait = &request.portrait;

    let mut attribute_refs = Vec::new();
    let mut attribute_masks = Vec::new();
    let mut transfer_masks = Vec::new();
    for a in &request.attributes {
        let s = &a.source;
        let own = render_attribute_mask_at(&s.params, &s.pose, s.mouth_open, a.category)?;
        attribute_refs.push(make_attribute_only(&s.frame, &own)?);
        transfer_masks.push(if request.align {
            align_attribute(&s.params, a.category, s.mouth_open, &portrait.pose)?.1
        } else {
            own.clone()
        });
        attribute_masks.push(own);
    }
    let port_init = |cats: &mut dyn Iterator<Item = AttributeCategory>| -> Result<Mask> {
        cats.map(|c| render_attribute_mask_at(&portrait.params, &portrait.pose, portrait.mouth_open, c))
            .try_fold(Mask::zeros(RESOLUTION), |acc, m| acc.union(&m?))
    };
    let port_latent = |mask: &Mask| -> Result<(Frame, Tensor)> {
        let img = make_attribute_masked_portrait(&portrait.frame, mask)?;
        let t = masked_latent_tensor(&[&img], &[mask], cfg.patch, dtype)?;
        Ok((img, t))
    };
    let attr_latent = |k: usize| masked_latent_tensor(&[&attribute_refs[k]], &[&attribute_masks[k]], cfg.patch, dtype);

    let (portrait_mask, portrait_reference, port, groups) = match request.interpolation {
        None => {
            let mask = fuse_masks(&port_init(&mut request.attributes.iter().map(|a| a.category))?, &transfer_masks)?;
            let (img, port) = port_latent(&mask)?;
            let latents = (0..request.attributes.len()).map(attr_latent).collect::<Result<Vec<_>>>()?;
            (mask, img, port, vec![AttrGroup { weight: 1.0, latents, port: None }])
        }
        Some(ip) => {
            // Each endpoint keeps the portrait reference it would get alone.
            let init = port_init(&mut std::iter::once(request.attributes[0].category))?;
            let (a, b) = ip.pair;
            let (mask_a, mask_b) = (fuse_masks(&init, &transfer_masks[a..=a])?, fuse_masks(&init, &transfer_masks[b..=b])?);
            let (img_a, port_a) = port_latent(&mask_a)?;
            let (_, port_b) = port_latent(&mask_b)?;
            let groups = vec![
                AttrGroup { weight: 1.0 - ip.alpha, latents: vec![attr_latent(a)?], port: Some(port_a.clone()) },
                AttrGroup { weight: ip.alpha, latents: vec![attr_latent(b)?], port: Some(port_b) },
            ];
            let union = fuse_masks(&mask_a, &[mask_b])?;
            (union, img_a, port_a, groups)
        }
    };
    let keypoints = make_keypoint_guidance(&portrait.params, &request.motion)?
        [request.start_frame..request.start_frame + request.frames]
        .to_vec();
    Ok(Prepared {
        diagnostics: Diagnostics {
            request: request.clone(),
            portrait_mask,
            portrait_reference,
            attribute_references: attribute_refs,
            attribute_masks,
            transfer_masks,
            keypoints,
            weights_step: weights.step,
        },
        groups,
        port,
    })
}

/// Generates the animation clip with the deterministic sampler. With
/// several attributes their reference maps are fused in one attention; with
/// an interpolation pair the two attended features are blended by `alpha`.
pub fn generate_animation(
    request: &InferenceRequest,
    weights: &Weights,
    sched: &DiffusionSchedule,
) -> Result<(Vec<Frame>, Diagnostics)> {
    let prep = prepare(request, weights)?;
    let model = &weights.model;
    let cfg = &model.config;
    let dtype = model.dtype();
    let frames = request.frames;
    let refs = model.encode_references(&prep.groups, &prep.port)?.repeat_frames(frames)?;
    let kpt_refs: Vec<&Frame> = prep.diagnostics.keypoints.iter().collect();
    let pose = model.pose_features(&frames_to_latents(&kpt_refs, cfg.patch, dtype)?)?;
    let (c, s) = (cfg.latent_channels(), cfg.latent_size());
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let z_start = gaussian(&mut rng, &[frames, c, s, s], dtype)?;
    let temporal = weights.temporal && frames > 1;
    let z0 = sample_reverse(
        |z, t| model.dnet.forward(z, t, &refs, &pose, frames, temporal),
        &z_start,
        sched,
        request.steps,
        true,
    )?;
    let out = latents_to_frames(&from_model_space(&z0)?.clamp(0.0, 1.0)?)?;
    Ok((out, prep.diagnostics))
}

/// [`generate_animation`] with the request's interpolation ratio replaced by `alpha`.
pub fn interpolate_attributes(
    request: &InferenceRequest,
    alpha: f64,
    weights: &Weights,
    sched: &DiffusionSchedule,
) -> Result<Vec<Frame>> {
    let pair = request.interpolation.map(|ip| ip.pair).unwrap_or((0, 1));
    let req = InferenceRequest { interpolation: Some(Interpolation { pair, alpha }), ..request.clone() };
    Ok(generate_animation(&req, weights, sched)?.0)
}

/// Where an input image comes from in a request file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// Dataset video directory; the image is frame `frame` of it.
    pub video: Option<PathBuf>,
    #[serde(default)]
    pub frame: usize,
    /// Identity drawn from the dataset generator with this seed, at the neutral pose.
    pub seed: Option<u64>,
    /// Overrides the color of the requested attribute.
    pub color: Option<Rgb>,
    pub category: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSource {
    pub video: Option<PathBuf>,
    pub seed: Option<u64>,
    pub frames: Option<usize>,
}

/// Key-value request file (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestFile {
    pub portrait: SourceSpec,
    pub attributes: Vec<SourceSpec>,
    /// Defaults to the portrait's own video motion.
    pub motion: Option<MotionSource>,
    #[serde(default)]
    pub start_frame: usize,
    pub frames: Option<usize>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub align: bool,
    pub alpha: Option<f64>,
}

fn default_steps() -> usize {
    50
}

fn default_true() -> bool {
    true
}

impl RequestFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Relative paths resolve against `base`.
    pub fn resolve(&self, base: &Path) -> Result<InferenceRequest> {
        let portrait = resolve_source(&self.portrait, base, None)?;
        let mut attributes = Vec::new();
        for spec in &self.attributes {
            let name = spec.category.as_deref().ok_or_else(|| Error::Config("attribute entry needs `category`".into()))?;
            let category =
                AttributeCategory::parse(name).ok_or_else(|| Error::Config(format!("unknown category `{name}`")))?;
            attributes.push(AttributeSource { source: resolve_source(spec, base, Some(category))?, category });
        }
        let motion = match &self.motion {
            Some(MotionSource { video: Some(v), .. }) => load_video(&base.join(v))?.motion,
            Some(MotionSource { video: None, seed: Some(s), frames }) => MotionSpec::sample(*s, frames.unwrap_or(8)),
            Some(_) => return Err(Error::Config("motion needs `video` or `seed`".into())),
            None => match &self.portrait.video {
                Some(v) => load_video(&base.join(v))?.motion,
                None => MotionSpec::constant(8, portrait.pose, portrait.mouth_open),
            },
        };
        let frames = self.frames.unwrap_or(motion.frames - self.start_frame.min(motion.frames));
        let req = InferenceRequest {
            portrait,
            attributes,
            motion,
            start_frame: self.start_frame,
            frames,
            interpolation: self.alpha.map(|alpha| Interpolation { pair: (0, 1), alpha }),
            steps: self.steps,
            seed: self.seed,
            align: self.align,
        };
        req.validate()?;
        Ok(req)
    }
}

fn resolve_source(spec: &SourceSpec, base: &Path, category: Option<AttributeCategory>) -> Result<SourceImage> {
    let (mut params, pose, open) = match (&spec.video, spec.seed) {
        (Some(v), None) => {
            let video = load_video(&base.join(v))?;
            if spec.frame >= video.len() {
                return Err(Error::Config(format!("{} has no frame {}", v.display(), spec.frame)));
            }
            let (pose, open) = video.motion.at(spec.frame);
            (video.params, pose, open)
        }
        (None, Some(seed)) => {
            let p = sample_face_params(seed, &DatasetWriter::default_weights());
            let open = p.mouth_open;
            (p, Pose::identity(), open)
        }
        _ => return Err(Error::Config("a source needs exactly one of `video` and `seed`".into())),
    };
    if let Some(color) = spec.color {
        let cat = category.ok_or_else(|| Error::Config("`color` applies to attribute entries only".into()))?;
        let attr = params.attributes.get_mut(&cat).ok_or(Error::AttributeAbsent(cat))?;
        attr.color = color;
    }
    SourceImage::render(params, pose, open)
}
