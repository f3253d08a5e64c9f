use candle_core::{DType, Tensor};

use super::layers::{
    downsample, from_tokens, global_avg_pool, repeat_interleave, timestep_embedding, upsample, AttrLevel, Conv2d, FusionGroup, CrossAttention,
    Linear, ResBlock, SelfAttention, SpatialFusion, TemporalAttention, to_tokens,
};
use super::params::ParamStore;
use super::ModelConfig;
use crate::diffusion::make_schedule;
use crate::error::{Error, Result};

/// Keypoint latents to an additive offset for the noisy latent.
#[derive(Clone, Debug)]
pub struct PoseEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl PoseEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.latent_channels();
        Ok(Self {
            conv1: Conv2d::new(store, "pose.conv1", c, cfg.pose_channels, 3)?,
            conv2: Conv2d::new(store, "pose.conv2", cfg.pose_channels, c, 3)?,
        })
    }

    /// `kpt` holds patchified keypoint images in `[0,1]`.
    pub fn forward(&self, kpt: &Tensor) -> Result<Tensor> {
        self.conv2.forward(&self.conv1.forward(kpt)?.silu()?)
    }
}

/// Masked latent to a single semantic embedding vector.
#[derive(Clone, Debug)]
pub struct EmbeddingEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Linear,
}

impl EmbeddingEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels[0];
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cfg.latent_channels() + 1, c, 3)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 3)?,
            proj: Linear::new(store, &format!("{name}.proj"), c, cfg.d_emb)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = downsample(&self.conv1.forward(x)?.silu()?)?;
        let h = self.conv2.forward(&h)?.silu()?;
        self.proj.forward(&global_avg_pool(&h)?)
    }
}

#[derive(Clone, Debug)]
struct RefBlock {
    res: ResBlock,
    attn: Option<(SelfAttention, CrossAttention)>,
}

/// Reference encoder: the denoiser's encoder topology without timestep or
/// temporal layers. The features after each block's convolutions form the pyramid.
#[derive(Clone, Debug)]
pub struct ReferenceNet {
    conv_in: Conv2d,
    blocks: Vec<RefBlock>,
}

impl ReferenceNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let ch = &cfg.channels;
        let conv_in = Conv2d::new(store, &format!("{name}.conv_in"), cfg.latent_channels() + 1, ch[0], 3)?;
        let mut blocks = Vec::new();
        for (l, &c) in ch.iter().enumerate() {
            let p = format!("{name}.block{l}");
            let c_in = if l == 0 { ch[0] } else { ch[l - 1] };
            let res = ResBlock::new(store, &format!("{p}.res"), c_in, c, cfg.groups, None)?;
            // The deepest block's attention output would feed nothing.
            let attn = if l + 1 < ch.len() {
                Some((
                    SelfAttention::new(store, &format!("{p}.attn"), c, cfg.groups, cfg.head_dim)?,
                    CrossAttention::new(store, &format!("{p}.cross"), c, cfg.d_emb, cfg.groups, cfg.head_dim)?,
                ))
            } else {
                None
            };
            blocks.push(RefBlock { res, attn });
        }
        Ok(Self { conv_in, blocks })
    }

    /// `x`: `(B, c+1, s, s)` masked latent; `phi`: `(B, d_emb)`.
    pub fn forward(&self, x: &Tensor, phi: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.conv_in.forward(x)?;
        let mut pyramid = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                h = downsample(&h)?;
            }
            h = block.res.forward(&h, None)?;
            pyramid.push(h.clone());
            if let Some((attn, cross)) = &block.attn {
                h = cross.forward(&attn.forward(&h)?, phi)?;
            }
        }
        Ok(pyramid)
    }
}

#[derive(Clone, Debug)]
struct DBlock {
    res: ResBlock,
    spatial: SpatialFusion,
    cross: CrossAttention,
    temporal: Option<TemporalAttention>,
}

/// Encoded conditioning, computed once per generation and reused at every
/// frame and denoising step.
#[derive(Clone, Debug)]
pub struct References {
    pub port: Vec<Tensor>,
    pub attrs: Vec<AttrLevel>,
    pub phi_port: Tensor,
    pub phi_attr: Tensor,
}

impl References {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.port[0].dim(0)?)
    }

    /// Repeats every clip's references for each of its `frames` frames.
    pub fn repeat_frames(&self, frames: usize) -> Result<References> {
        let rep = |t: &Tensor| repeat_interleave(t, frames);
        Ok(References {
            port: self.port.iter().map(rep).collect::<Result<_>>()?,
            attrs: self
                .attrs
                .iter()
                .map(|lvl| {
                    Ok(AttrLevel {
                        groups: lvl
                            .groups
                            .iter()
                            .map(|g| {
                                Ok(FusionGroup {
                                    weight: g.weight,
                                    port: g.port.as_ref().map(rep).transpose()?,
                                    maps: g.maps.iter().map(rep).collect::<Result<Vec<_>>>()?,
                                })
                            })
                            .collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<_>>()?,
            phi_port: rep(&self.phi_port)?,
            phi_attr: rep(&self.phi_attr)?,
        })
    }
}

/// One blending group of attribute references: masked latents
/// `(B, c+1, s, s)` fused by concatenation, weighted by `weight`. A group
/// may bring its own masked portrait latent in place of the shared one.
#[derive(Clone, Debug)]
pub struct AttrGroup {
    pub weight: f64,
    pub latents: Vec<Tensor>,
    pub port: Option<Tensor>,
}

impl AttrGroup {
    pub fn single(latent: Tensor) -> Self {
        Self { weight: 1.0, latents: vec![latent], port: None }
    }
}

/// Denoising network: encoder blocks with spatial, cross and optional
/// temporal attention, and a plain convolutional decoder with skips.
#[derive(Clone, Debug)]
pub struct DNet {
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    time_dim: usize,
    blocks: Vec<DBlock>,
    ups: Vec<ResBlock>,
    norm_out: super::layers::GroupNorm,
    conv_out: Conv2d,
    /// Paths from `z_t` around the network, `a(t) ⊙ z_t + g ⊙ (I + M) z_t / σ_t`
    /// with `g` a per-position gate read from the last features. The finest
    /// level is narrower than the latent, and removing small noise needs a
    /// full-rank map with gain `1/σ_t` that stays shut at edges.
    skip_mix: Linear,
    skip_gain: Linear,
    noise_gate: Conv2d,
    /// `σ_t = sqrt(1 − ᾱ_t)` of the training schedule.
    sigmas: Vec<f64>,
}

impl DNet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, with_temporal: bool) -> Result<Self> {
        let ch = &cfg.channels;
        let c_lat = cfg.latent_channels();
        let mut blocks = Vec::new();
        for (l, &c) in ch.iter().enumerate() {
            let p = format!("dnet.block{l}");
            let c_in = if l == 0 { ch[0] } else { ch[l - 1] };
            blocks.push(DBlock {
                res: ResBlock::new(store, &format!("{p}.res"), c_in, c, cfg.groups, Some(cfg.temb_dim))?,
                spatial: SpatialFusion::new(
                    store,
                    &format!("{p}.spatial"),
                    c,
                    cfg.groups,
                    cfg.head_dim,
                    cfg.attr_fusion,
                )?,
                cross: CrossAttention::new(store, &format!("{p}.cross"), c, cfg.d_emb, cfg.groups, cfg.head_dim)?,
                temporal: with_temporal
                    .then(|| TemporalAttention::new(store, &format!("{p}.temporal"), c, cfg.groups, cfg.head_dim))
                    .transpose()?,
            });
        }
        let mut ups = Vec::new();
        for l in 0..ch.len() - 1 {
            ups.push(ResBlock::new(store, &format!("dnet.up{l}"), ch[l + 1] + ch[l], ch[l], cfg.groups, Some(cfg.temb_dim))?);
        }
        Ok(Self {
            conv_in: Conv2d::new(store, "dnet.conv_in", c_lat, ch[0], 3)?,
            time1: Linear::new(store, "dnet.time1", cfg.time_dim, cfg.temb_dim)?,
            time2: Linear::new(store, "dnet.time2", cfg.temb_dim, cfg.temb_dim)?,
            time_dim: cfg.time_dim,
            blocks,
            ups,
            norm_out: super::layers::GroupNorm::new(store, "dnet.norm_out", ch[0], cfg.groups)?,
            conv_out: Conv2d::new(store, "dnet.conv_out", ch[0], c_lat, 3)?,
            skip_mix: Linear::zeros(store, "dnet.skip_mix", c_lat, c_lat)?,
            skip_gain: Linear::zeros(store, "dnet.skip_gain", cfg.temb_dim, c_lat)?,
            noise_gate: Conv2d::zeros(store, "dnet.noise_gate", ch[0], c_lat, 3)?,
            sigmas: make_schedule(cfg.timesteps)?.alpha_bars.iter().map(|ab| (1.0 - ab).sqrt()).collect(),
        })
    }

    pub fn has_temporal(&self) -> bool {
        self.blocks.iter().all(|b| b.temporal.is_some())
    }

    /// Predicted noise for `z_t` `(B·F, c, s, s)`. `t` holds one timestep per
    /// row, `refs` must already be repeated per frame, and `pose` is the
    /// pose-encoder output. Temporal layers run only when `temporal` is set.
    pub fn forward(
        &self,
        z_t: &Tensor,
        t: &Tensor,
        refs: &References,
        pose: &Tensor,
        frames: usize,
        temporal: bool,
    ) -> Result<Tensor> {
        let bf = z_t.dim(0)?;
        if frames == 0 || bf % frames != 0 {
            return Err(Error::Shape(format!("batch {bf} is not a multiple of {frames} frames")));
        }
        for (what, n) in [("timesteps", t.dim(0)?), ("references", refs.batch()?), ("pose features", pose.dim(0)?)] {
            if n != bf {
                return Err(Error::Shape(format!("{what} batch {n} vs latent batch {bf}")));
            }
        }
        if temporal && !self.has_temporal() {
            return Err(Error::InvalidArgument("temporal layers were not built".into()));
        }
        let temb = self.time2.forward(&self.time1.forward(&timestep_embedding(t, self.time_dim)?)?.silu()?)?;
        let mut h = self.conv_in.forward(&(z_t + pose)?)?;
        let mut skips = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                h = downsample(&h)?;
            }
            h = block.res.forward(&h, Some(&temb))?;
            h = block.spatial.forward(&h, &refs.port[l], &refs.attrs[l])?;
            h = block.cross.forward(&h, &refs.phi_port)?;
            if temporal {
                if let Some(tl) = &block.temporal {
                    h = tl.forward(&h, frames)?;
                }
            }
            skips.push(h.clone());
        }
        for l in (0..self.ups.len()).rev() {
            h = Tensor::cat(&[&upsample(&h)?, &skips[l]], 1)?;
            h = self.ups[l].forward(&h, Some(&temb))?;
        }
        let feat = self.norm_out.forward(&h)?.silu()?;
        let out = self.conv_out.forward(&feat)?;
        let (n, c, hh, ww) = z_t.dims4()?;
        let mixed = (z_t + from_tokens(&self.skip_mix.forward(&to_tokens(z_t)?)?, hh, ww)?)?;
        let last = self.sigmas.len() - 1;
        let inv_sigma: Vec<f64> = t
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?
            .iter()
            .map(|&v| 1.0 / self.sigmas[(v.round().max(0.0) as usize).min(last)])
            .collect();
        let inv_sigma = Tensor::from_vec(inv_sigma, (n, 1, 1, 1), z_t.device())?.to_dtype(z_t.dtype())?;
        let a = self.skip_gain.forward(&temb)?.reshape((n, c, 1, 1))?;
        let b = self.noise_gate.forward(&feat)?.broadcast_mul(&inv_sigma)?;
        Ok(((out + z_t.broadcast_mul(&a)?)? + mixed.broadcast_mul(&b)?)?)
    }
}

/// All networks of the model, built from one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub arnet: ReferenceNet,
    pub prnet: ReferenceNet,
    pub dnet: DNet,
    pub pose: PoseEncoder,
    pub emb_attr: EmbeddingEncoder,
    pub emb_port: EmbeddingEncoder,
    dtype: DType,
}

impl Model {
    /// Fetches (or creates) every parameter. With `with_temporal`, missing
    /// temporal layers are inserted with identity initialization.
    pub fn new(store: &mut ParamStore, config: &ModelConfig, with_temporal: bool) -> Result<Self> {
        config.validate()?;
        let model = Self {
            config: config.clone(),
            arnet: ReferenceNet::new(store, "arnet", config)?,
            prnet: ReferenceNet::new(store, "prnet", config)?,
            dnet: DNet::new(store, config, with_temporal)?,
            pose: PoseEncoder::new(store, config)?,
            emb_attr: EmbeddingEncoder::new(store, "emb_attr", config)?,
            emb_port: EmbeddingEncoder::new(store, "emb_port", config)?,
            dtype: store.dtype(),
        };
        let n = store.num_params();
        if n > config.param_budget {
            return Err(Error::Config(format!("{n} parameters exceed the budget of {}", config.param_budget)));
        }
        Ok(model)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Runs the embedding encoders and both reference nets. All groups share
    /// one attribute embedding, the weighted sum of per-group means, and one
    /// portrait embedding, the weighted sum over group portraits.
    pub fn encode_references(&self, groups: &[AttrGroup], port: &Tensor) -> Result<References> {
        if groups.is_empty() || groups.iter().any(|g| g.latents.is_empty()) {
            return Err(Error::InvalidArgument("every attribute group needs at least one reference".into()));
        }
        let blend = |terms: Vec<(f64, Tensor)>| -> Result<Tensor> {
            let single = terms.len() == 1;
            let mut acc: Option<Tensor> = None;
            for (w, t) in terms {
                let t = if single { t } else { t.affine(w, 0.0)? };
                acc = Some(match acc {
                    None => t,
                    Some(a) => (a + t)?,
                });
            }
            Ok(acc.unwrap())
        };
        let phi_port = if groups.iter().any(|g| g.port.is_some()) {
            let shared = self.emb_port.forward(port)?;
            blend(
                groups
                    .iter()
                    .map(|g| Ok((g.weight, g.port.as_ref().map(|p| self.emb_port.forward(p)).transpose()?.unwrap_or(shared.clone()))))
                    .collect::<Result<_>>()?,
            )?
        } else {
            self.emb_port.forward(port)?
        };
        let mut means = Vec::with_capacity(groups.len());
        for g in groups {
            let mut sum: Option<Tensor> = None;
            for z in &g.latents {
                let e = self.emb_attr.forward(z)?;
                sum = Some(match sum {
                    None => e,
                    Some(s) => (s + e)?,
                });
            }
            let mut mean = sum.unwrap();
            if g.latents.len() > 1 {
                mean = mean.affine(1.0 / g.latents.len() as f64, 0.0)?;
            }
            means.push((g.weight, mean));
        }
        let phi_attr = blend(means)?;

        let levels = self.config.levels();
        let mut attrs: Vec<AttrLevel> = (0..levels).map(|_| AttrLevel { groups: Vec::new() }).collect();
        for g in groups {
            let pyramids = g.latents.iter().map(|z| self.arnet.forward(z, &phi_attr)).collect::<Result<Vec<_>>>()?;
            let own_port = g.port.as_ref().map(|p| self.prnet.forward(p, &phi_port)).transpose()?;
            for (l, lvl) in attrs.iter_mut().enumerate() {
                lvl.groups.push(FusionGroup {
                    weight: g.weight,
                    port: own_port.as_ref().map(|p| p[l].clone()),
                    maps: pyramids.iter().map(|p| p[l].clone()).collect(),
                });
            }
        }
        let port_pyr = self.prnet.forward(port, &phi_port)?;
        Ok(References { port: port_pyr, attrs, phi_port, phi_attr })
    }

    pub fn pose_features(&self, kpt: &Tensor) -> Result<Tensor> {
        self.pose.forward(kpt)
    }
}
