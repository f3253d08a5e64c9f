//! Reconstruction metrics, synthetic attribute and identity fidelity, the
//! self-attribute evaluation protocol, and the command-line interface.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::pipeline::{generate_animation, AttributeSource, Diagnostics, InferenceRequest, RequestFile, SourceImage, Weights};
use crate::raster::{Frame, Mask, Rgb};
use crate::synthworld::{
    list_videos, load_video, render_labels, AttributeSpec, DatasetWriter, FaceParams, Label, Pose, VideoRecord,
};
use crate::trainer::{train_stage, TrainConfig};

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Keying radius of the attribute segmenter, in RGB distance.
pub const KEY_RADIUS: f32 = 0.25;
/// Identity color distance at which identity fidelity reaches zero.
pub const ID_DISTANCE_SCALE: f64 = 0.3;

fn check_pair(pred: &[Frame], gt: &[Frame]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predicted vs {} ground-truth frames", pred.len(), gt.len())));
    }
    pred.iter().zip(gt).try_for_each(|(a, b)| a.ensure_same_shape(b))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

fn frame_l1(a: &Frame, b: &Frame) -> f64 {
    mean(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()))
}

fn frame_psnr(a: &Frame, b: &Frame) -> f64 {
    let mse = mean(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)));
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Mean SSIM over channels and all fully contained 7×7 windows, with the
/// unbiased window covariance.
fn frame_ssim(a: &Frame, b: &Frame) -> f64 {
    let n = a.size();
    let w = SSIM_WINDOW;
    let np = (w * w) as f64;
    let cov_norm = np / (np - 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let px = |f: &Frame, x: usize, y: usize| f.data()[(y * n + x) * 3 + c] as f64;
        for y0 in 0..=n - w {
            for x0 in 0..=n - w {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + w {
                    for x in x0..x0 + w {
                        let (u, v) = (px(a, x, y), px(b, x, y));
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / np, sb / np);
                let va = cov_norm * (saa / np - ma * ma);
                let vb = cov_norm * (sbb / np - mb * mb);
                let vab = cov_norm * (sab / np - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * vab + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn l1(pred: &[Frame], gt: &[Frame]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(mean(pred.iter().zip(gt).map(|(a, b)| frame_l1(a, b))))
}

/// Per-frame PSNR on the [0,1] range, averaged; capped at 99 dB.
pub fn psnr(pred: &[Frame], gt: &[Frame]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(mean(pred.iter().zip(gt).map(|(a, b)| frame_psnr(a, b))))
}

pub fn ssim(pred: &[Frame], gt: &[Frame]) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred[0].size() < SSIM_WINDOW {
        return Err(Error::Shape(format!("frames smaller than the {SSIM_WINDOW}-pixel SSIM window")));
    }
    Ok(mean(pred.iter().zip(gt).map(|(a, b)| frame_ssim(a, b))))
}

fn dist(a: Rgb, b: Rgb) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

fn dilate(m: &Mask) -> Mask {
    let n = m.size() as i64;
    Mask::from_fn(m.size(), |x, y| {
        (-1i64..=1).any(|dy| {
            (-1i64..=1).any(|dx| {
                let (u, v) = (x as i64 + dx, y as i64 + dy);
                (0..n).contains(&u) && (0..n).contains(&v) && m.get(u as usize, v as usize)
            })
        })
    })
}

/// Attribute region of a generated frame: pixels near the expected region
/// whose color keys to the target, or the expected region itself when the
/// keyed area covers less than half of it.
pub fn segment_attribute(frame: &Frame, target: Rgb, expected: &Mask) -> Result<Mask> {
    if frame.size() != expected.size() {
        return Err(Error::Shape(format!("frame side {} vs mask side {}", frame.size(), expected.size())));
    }
    let near = dilate(expected);
    let keyed = Mask::from_fn(frame.size(), |x, y| near.get(x, y) && dist(frame.get(x, y), target) <= KEY_RADIUS as f64);
    Ok(if 2 * keyed.count() >= expected.count() { keyed } else { expected.clone() })
}

/// `1 − |target color − mean color of the attribute region|`, averaged over
/// frames whose expected mask is non-empty.
pub fn attr_fidelity(frames: &[Frame], target: &AttributeSpec, masks: &[Mask]) -> Result<f64> {
    if frames.len() != masks.len() {
        return Err(Error::Shape(format!("{} frames vs {} masks", frames.len(), masks.len())));
    }
    let present: Vec<usize> = (0..frames.len()).filter(|&i| !masks[i].is_empty()).collect();
    if present.is_empty() {
        return Err(Error::AttributeMissing);
    }
    if 2 * present.len() < frames.len() {
        return Err(Error::InvalidArgument(format!(
            "attribute visible in only {} of {} frames",
            present.len(),
            frames.len()
        )));
    }
    let mut total = 0.0;
    for &i in &present {
        let region = segment_attribute(&frames[i], target.color, &masks[i])?;
        let mut sum = [0.0f64; 3];
        for (p, &m) in frames[i].pixels().zip(region.data()) {
            if m != 0 {
                (0..3).for_each(|c| sum[c] += p[c] as f64);
            }
        }
        let k = region.count() as f64;
        let measured = sum.map(|s| (s / k) as f32);
        total += (1.0 - dist(measured, target.color)).clamp(0.0, 1.0);
    }
    Ok(total / present.len() as f64)
}

/// Compares the portrait's skin and eye colors with the mean colors
/// measured on its face and eye pixels (at each frame's pose), excluding
/// `attr_masks`. Distance `ID_DISTANCE_SCALE` maps to zero.
pub fn id_fidelity(
    frames: &[Frame],
    portrait: &FaceParams,
    trajectory: &[(Pose, f32)],
    attr_masks: &[Mask],
) -> Result<f64> {
    if frames.len() != trajectory.len() || frames.len() != attr_masks.len() {
        return Err(Error::Shape(format!(
            "{} frames, {} poses, {} masks",
            frames.len(),
            trajectory.len(),
            attr_masks.len()
        )));
    }
    let mut sums = [[0.0f64; 3]; 2];
    let mut counts = [0usize; 2];
    for ((frame, (pose, open)), excl) in frames.iter().zip(trajectory).zip(attr_masks) {
        let labels = render_labels(portrait, pose, *open)?;
        if labels.size != frame.size() || excl.size() != frame.size() {
            return Err(Error::Shape("frame, label map and mask sizes differ".into()));
        }
        for (i, (p, &m)) in frame.pixels().zip(excl.data()).enumerate() {
            let slot = match labels.labels[i] {
                Label::Face => 0,
                Label::Eye => 1,
                _ => continue,
            };
            if m == 0 {
                (0..3).for_each(|c| sums[slot][c] += p[c] as f64);
                counts[slot] += 1;
            }
        }
    }
    let n = counts[0] + counts[1];
    if n == 0 {
        return Err(Error::EmptyFaceRegion);
    }
    let refs = [portrait.skin_color, portrait.eye_color];
    let d: f64 = (0..2)
        .filter(|&k| counts[k] > 0)
        .map(|k| counts[k] as f64 * dist(sums[k].map(|s| (s / counts[k] as f64) as f32), refs[k]))
        .sum::<f64>()
        / n as f64;
    Ok((1.0 - d / ID_DISTANCE_SCALE).clamp(0.0, 1.0))
}

fn motion_energy(frames: &[Frame]) -> f64 {
    mean(frames.windows(2).map(|w| frame_l1(&w[0], &w[1])))
}

/// Consecutive-frame change of `frames` relative to that of `gt`; a static
/// clip against a static clip scores 1.
pub fn temporal_consistency(frames: &[Frame], gt: &[Frame]) -> Result<f64> {
    check_pair(frames, gt)?;
    if frames.len() < 2 {
        return Err(Error::InvalidArgument("temporal consistency needs at least 2 frames".into()));
    }
    let (num, den) = (motion_energy(frames), motion_energy(gt));
    if den == 0.0 {
        return if num == 0.0 { Ok(1.0) } else { Err(Error::InvalidArgument("ground-truth clip is static".into())) };
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "PSNR")]
    pub psnr: f64,
    #[serde(rename = "SSIM")]
    pub ssim: f64,
    pub attr_fidelity: f64,
    pub id_fidelity: f64,
    pub temporal_consistency: f64,
}

impl Metrics {
    const NAMES: [&'static str; 6] = ["L1", "PSNR", "SSIM", "attr_fidelity", "id_fidelity", "temporal_consistency"];

    fn values(&self) -> [f64; 6] {
        [self.l1, self.psnr, self.ssim, self.attr_fidelity, self.id_fidelity, self.temporal_consistency]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Self { l1: v[0], psnr: v[1], ssim: v[2], attr_fidelity: v[3], id_fidelity: v[4], temporal_consistency: v[5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video_id: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub videos: Vec<VideoMetrics>,
    /// Mean over videos; absent for an empty report.
    pub aggregate: Option<Metrics>,
    pub count: usize,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn new(videos: Vec<VideoMetrics>, config: serde_json::Value) -> Result<Self> {
        for v in &videos {
            if v.metrics.values().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("metrics of {}", v.video_id)));
            }
        }
        let aggregate = (!videos.is_empty()).then(|| {
            let mut acc = [0.0; 6];
            for v in &videos {
                acc.iter_mut().zip(v.metrics.values()).for_each(|(a, x)| *a += x);
            }
            Metrics::from_values(acc.map(|a| a / videos.len() as f64))
        });
        Ok(Self { count: videos.len(), videos, aggregate, config })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<14}", "video");
        for n in Metrics::NAMES {
            out.push_str(&format!(" {n:>20}"));
        }
        out.push('\n');
        let rows = self.videos.iter().map(|v| (v.video_id.as_str(), &v.metrics)).chain(self.aggregate.iter().map(|m| ("mean", m)));
        for (id, m) in rows {
            out.push_str(&format!("{id:<14}"));
            for x in m.values() {
                out.push_str(&format!(" {x:>20.4}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Self-attribute transfer: portrait and attribute images are two frames of
/// the same video and the clip is compared against the video itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub portrait_frame: usize,
    /// Counted from the end of the video.
    pub attribute_frame_from_end: usize,
    pub start_frame: usize,
    pub frames: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { portrait_frame: 0, attribute_frame_from_end: 1, start_frame: 8, frames: 8, steps: 50, seed: 0 }
    }
}

/// Builds the self-attribute request for the video's first present category.
pub fn self_attribute_request(video: &VideoRecord, cfg: &ProtocolConfig) -> Result<InferenceRequest> {
    let category = *video.categories().first().ok_or(Error::NoTransferableAttribute)?;
    let n = video.len();
    if cfg.start_frame + cfg.frames > n || cfg.attribute_frame_from_end == 0 || cfg.attribute_frame_from_end > n || cfg.portrait_frame >= n {
        return Err(Error::InvalidArgument(format!("video of {n} frames is too short for the protocol")));
    }
    let source = |i: usize| {
        let (pose, open) = video.motion.at(i);
        SourceImage { frame: video.frames[i].clone(), params: video.params.clone(), pose, mouth_open: open }
    };
    let mut req = InferenceRequest::new(
        source(cfg.portrait_frame),
        vec![AttributeSource { source: source(n - cfg.attribute_frame_from_end), category }],
        video.motion.clone(),
    );
    req.start_frame = cfg.start_frame;
    req.frames = cfg.frames;
    req.steps = cfg.steps;
    req.seed = cfg.seed;
    Ok(req)
}

/// All six metrics of one generated clip against its ground truth.
pub fn clip_metrics(
    generated: &[Frame],
    gt: &[Frame],
    portrait: &FaceParams,
    trajectory: &[(Pose, f32)],
    target: &AttributeSpec,
    attr_masks: &[Mask],
) -> Result<Metrics> {
    Ok(Metrics {
        l1: l1(generated, gt)?,
        psnr: psnr(generated, gt)?,
        ssim: ssim(generated, gt)?,
        attr_fidelity: attr_fidelity(generated, target, attr_masks)?,
        id_fidelity: id_fidelity(generated, portrait, trajectory, attr_masks)?,
        temporal_consistency: temporal_consistency(generated, gt)?,
    })
}

pub fn evaluate_video(
    video: &VideoRecord,
    weights: &Weights,
    sched: &DiffusionSchedule,
    cfg: &ProtocolConfig,
) -> Result<(Vec<Frame>, Metrics)> {
    let req = self_attribute_request(video, cfg)?;
    let category = req.attributes[0].category;
    let (generated, _) = generate_animation(&req, weights, sched)?;
    let range = req.start_frame..req.start_frame + req.frames;
    let metrics = clip_metrics(
        &generated,
        &video.frames[range.clone()],
        &video.params,
        &video.motion.window(req.start_frame, req.frames),
        video.params.attribute(category).ok_or(Error::AttributeAbsent(category))?,
        &video.masks[&category][range],
    )?;
    Ok((generated, metrics))
}

/// Runs the self-attribute protocol over `videos`; failures name the video.
pub fn evaluate_self_attribute(
    videos: &[(String, VideoRecord)],
    weights: &Weights,
    sched: &DiffusionSchedule,
    cfg: &ProtocolConfig,
) -> Result<MetricReport> {
    let mut rows = Vec::new();
    for (id, video) in videos {
        let (_, metrics) = evaluate_video(video, weights, sched, cfg).map_err(|e| Error::Dataset(format!("{id}: {e}")))?;
        log::info!("{id}: PSNR {:.2} SSIM {:.3}", metrics.psnr, metrics.ssim);
        rows.push(VideoMetrics { video_id: id.clone(), metrics });
    }
    MetricReport::new(rows, serde_json::to_value(cfg)?)
}

#[derive(Debug, Parser)]
#[command(name = "attrport", about = "Attribute-transfer portrait animation on a synthetic world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic video dataset.
    GenData {
        #[arg(long, default_value_t = 32)]
        videos: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Run one training stage from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Animate a portrait with one transferred attribute.
    Animate(GenerateArgs),
    /// Animate with several attributes at once.
    Compose(GenerateArgs),
    /// Blend two attributes of one category.
    Interpolate {
        #[command(flatten)]
        args: GenerateArgs,
        #[arg(long)]
        alpha: f64,
    },
    /// Self-attribute evaluation of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Evaluate only the first N videos.
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    /// TOML request file; relative paths resolve against its directory.
    #[arg(long)]
    pub request: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Skip the pose alignment of attribute masks.
    #[arg(long)]
    pub no_align: bool,
}

/// Writes `frames/%04d.png` and `out.gif` under `dir`.
pub fn write_animation(dir: &Path, frames: &[Frame]) -> Result<()> {
    let fdir = dir.join("frames");
    std::fs::create_dir_all(&fdir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save_png(&fdir.join(format!("{i:04}.png")))?;
    }
    let file = std::fs::File::create(dir.join("out.gif"))?;
    let mut enc = image::codecs::gif::GifEncoder::new(file);
    enc.set_repeat(image::codecs::gif::Repeat::Infinite).map_err(|e| Error::Image(e.to_string()))?;
    for f in frames {
        let n = f.size() as u32;
        let rgba: Vec<u8> = f
            .pixels()
            .flat_map(|p| [p[0], p[1], p[2], 1.0].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        let buf = image::RgbaImage::from_raw(n, n, rgba).ok_or_else(|| Error::Image("frame buffer".into()))?;
        let delay = image::Delay::from_numer_denom_ms(100, 1);
        enc.encode_frame(image::Frame::from_parts(buf, 0, 0, delay)).map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(())
}

fn animate(args: &GenerateArgs, alpha: Option<f64>, min_attributes: usize) -> Result<()> {
    let file = RequestFile::load(&args.request)?;
    let base = args.request.parent().unwrap_or(Path::new("."));
    let mut req = file.resolve(base)?;
    if args.no_align {
        req.align = false;
    }
    if let Some(a) = alpha {
        req.interpolation = Some(crate::pipeline::Interpolation { pair: (0, 1), alpha: a });
    }
    if req.attributes.len() < min_attributes {
        return Err(Error::InvalidArgument(format!("request lists {} attributes, need {min_attributes}", req.attributes.len())));
    }
    req.validate()?;
    let weights = Weights::load(&args.checkpoint)?;
    let sched = make_schedule(weights.model.config.timesteps)?;
    let (frames, diag): (Vec<Frame>, Diagnostics) = generate_animation(&req, &weights, &sched)?;
    write_animation(&args.out, &frames)?;
    diag.save(&args.out.join("diagnostics.json"))?;
    println!("wrote {} frames to {}", frames.len(), args.out.display());
    Ok(())
}

fn eval(data: &Path, checkpoint: &Path, out: &Path, limit: Option<usize>, steps: usize) -> Result<()> {
    let dirs = list_videos(data)?;
    if dirs.is_empty() {
        return Err(Error::Dataset(format!("no videos found in {}", data.display())));
    }
    let mut videos = Vec::new();
    for d in dirs.into_iter().take(limit.unwrap_or(usize::MAX)) {
        let id = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        videos.push((id, load_video(&d)?));
    }
    let weights = Weights::load(checkpoint)?;
    let sched = make_schedule(weights.model.config.timesteps)?;
    let cfg = ProtocolConfig { steps, ..ProtocolConfig::default() };
    let report = evaluate_self_attribute(&videos, &weights, &sched, &cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.json"), report.to_json()?)?;
    print!("{}", report.table());
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { videos, seed, frames, out } => {
            let writer = DatasetWriter { frames, ..DatasetWriter::new(seed) };
            writer.write(&out, videos)?;
            println!("wrote {videos} videos to {}", out.display());
            Ok(())
        }
        Command::Train { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            let outcome = train_stage(&cfg, resume.as_deref())?;
            println!(
                "stage {} finished at step {}; checkpoint {}",
                cfg.stage,
                outcome.step,
                cfg.checkpoint.display()
            );
            Ok(())
        }
        Command::Animate(args) => animate(&args, None, 1),
        Command::Compose(args) => animate(&args, None, 2),
        Command::Interpolate { args, alpha } => animate(&args, Some(alpha), 2),
        Command::Eval { data, checkpoint, out, videos, steps } => eval(&data, &checkpoint, &out, videos, steps),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
