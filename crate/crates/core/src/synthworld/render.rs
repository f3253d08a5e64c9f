use std::collections::BTreeMap;

use super::{AttributeCategory, AttributeShape, FaceParams, MotionSpec, Pose, VideoRecord};
use crate::error::{Error, Result};
use crate::raster::{Frame, KeypointImage, Mask, Rgb, RESOLUTION};

/// Horizontal feature displacement per radian of yaw, in unscaled face pixels.
pub const YAW_SHIFT_PX: f32 = 8.0;

/// Face-ellipse center at the identity pose.
const CENTER: (f32, f32) = (32.0, 33.0);
const EYE_RADIUS: f32 = 2.0;
const LENS_RIM: f32 = 1.3;

pub const LANDMARK_COUNT: usize = 9;

/// Eyes, nose tip, mouth corners, chin, ears, forehead.
pub const KEYPOINT_COLORS: [[f32; 3]; LANDMARK_COUNT] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 128.0 / 255.0, 0.0],
    [128.0 / 255.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
];

/// Topmost visible layer at a pixel, bottom to top in declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Background,
    Face,
    Beard,
    Mouth,
    Eye,
    Eyeglasses,
    Hair,
    Hat,
}

impl Label {
    pub fn attribute(self) -> Option<AttributeCategory> {
        match self {
            Label::Beard => Some(AttributeCategory::Beard),
            Label::Eyeglasses => Some(AttributeCategory::Eyeglasses),
            Label::Hair => Some(AttributeCategory::Hair),
            Label::Hat => Some(AttributeCategory::Hat),
            _ => None,
        }
    }

    fn of(category: AttributeCategory) -> Label {
        match category {
            AttributeCategory::Hair => Label::Hair,
            AttributeCategory::Eyeglasses => Label::Eyeglasses,
            AttributeCategory::Beard => Label::Beard,
            AttributeCategory::Hat => Label::Hat,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub size: usize,
    pub labels: Vec<Label>,
}

impl LabelMap {
    pub fn get(&self, x: usize, y: usize) -> Label {
        self.labels[y * self.size + x]
    }

    pub fn mask_of(&self, label: Label) -> Mask {
        Mask::from_fn(self.size, |x, y| self.get(x, y) == label)
    }
}

/// Derived geometry shared by the rasterizer and the landmark model.
struct FaceGeometry {
    ax: f32,
    ay: f32,
    shift: f32,
    eye_x: f32,
    eye_y: f32,
    mouth_y: f32,
    mouth_half_w: f32,
    mouth_half_h: f32,
}

impl FaceGeometry {
    fn new(params: &FaceParams, pose: &Pose, mouth_open: f32) -> Self {
        let (ax, ay) = params.face_axes;
        let open = mouth_open.clamp(0.0, 1.0);
        Self {
            ax,
            ay,
            shift: YAW_SHIFT_PX * pose.yaw,
            eye_x: 0.4 * ax,
            eye_y: -0.15 * ay,
            mouth_y: 0.45 * ay,
            mouth_half_w: (0.35 - 0.08 * open) * ax,
            mouth_half_h: 0.6 + 2.4 * open,
        }
    }

    /// Label at face-local coordinates (u right, v down).
    fn classify(&self, params: &FaceParams, u: f32, v: f32) -> Label {
        let uf = u - self.shift;
        let au = uf.abs();
        let (ax, ay) = (self.ax, self.ay);
        // Hat sits above hair; BTreeMap order is hair < .. < hat.
        for spec in params.attributes.values().rev() {
            match spec.shape {
                AttributeShape::Hat { width, height } => {
                    let brim = -0.7 * ay;
                    if au <= 0.5 * width && v >= brim - height && v <= brim + 1.5 {
                        return Label::Hat;
                    }
                }
                AttributeShape::Hair { thickness, extent } => {
                    let rho = ((uf / ax).powi(2) + (v / ay).powi(2)).sqrt();
                    let theta = au.atan2(-v);
                    if rho >= 0.82 && rho <= 1.0 + thickness / ay && theta <= extent {
                        return Label::Hair;
                    }
                }
                _ => {}
            }
        }
        if let Some(spec) = params.attribute(AttributeCategory::Eyeglasses) {
            if let AttributeShape::Eyeglasses { lens_radius, bridge_width } = spec.shape {
                let d = ((au - self.eye_x).powi(2) + (v - self.eye_y).powi(2)).sqrt();
                let ring = d <= lens_radius && d >= lens_radius - LENS_RIM;
                let bridge_reach = self.eye_x - lens_radius + 0.6;
                let bridge = bridge_reach > 0.0 && au <= bridge_reach && (v - self.eye_y).abs() <= 0.5 * bridge_width;
                if ring || bridge {
                    return Label::Eyeglasses;
                }
            }
        }
        if (au - self.eye_x).powi(2) + (v - self.eye_y).powi(2) <= EYE_RADIUS * EYE_RADIUS {
            return Label::Eye;
        }
        if (uf / self.mouth_half_w).powi(2) + ((v - self.mouth_y) / self.mouth_half_h).powi(2) <= 1.0 {
            return Label::Mouth;
        }
        let in_face = (u / ax).powi(2) + (v / ay).powi(2) <= 1.0;
        if let Some(spec) = params.attribute(AttributeCategory::Beard) {
            if let AttributeShape::Beard { thickness } = spec.shape {
                let inner = (uf / (ax - thickness)).powi(2) + ((v + 0.25 * thickness) / (ay - thickness)).powi(2);
                if in_face && v >= 0.1 * ay && inner > 1.0 {
                    return Label::Beard;
                }
            }
        }
        if in_face {
            Label::Face
        } else {
            Label::Background
        }
    }

    /// Landmarks in face-local coordinates.
    fn landmarks_local(&self) -> [(f32, f32); LANDMARK_COUNT] {
        let s = self.shift;
        [
            (-self.eye_x + s, self.eye_y),
            (self.eye_x + s, self.eye_y),
            (s, 0.12 * self.ay),
            (-self.mouth_half_w + s, self.mouth_y),
            (self.mouth_half_w + s, self.mouth_y),
            (s, self.mouth_y + self.mouth_half_h + 1.5),
            (-self.ax, 0.0),
            (self.ax, 0.0),
            (s, -0.6 * self.ay),
        ]
    }
}

fn check_pose(pose: &Pose) -> Result<()> {
    pose.validate().map_err(Error::PoseOutOfRange)
}

/// Rasterizes the per-pixel label map. Pixel centers are sampled; no anti-aliasing.
pub fn render_labels(params: &FaceParams, pose: &Pose, mouth_open: f32) -> Result<LabelMap> {
    check_pose(pose)?;
    let geom = FaceGeometry::new(params, pose, mouth_open);
    let (sin_r, cos_r) = pose.roll.sin_cos();
    let mut labels = Vec::with_capacity(RESOLUTION * RESOLUTION);
    for py in 0..RESOLUTION {
        let dy = (py as f32 + 0.5 - CENTER.1) - pose.ty;
        for px in 0..RESOLUTION {
            let dx = (px as f32 + 0.5 - CENTER.0) - pose.tx;
            let u = (cos_r * dx + sin_r * dy) / pose.scale;
            let v = (cos_r * dy - sin_r * dx) / pose.scale;
            labels.push(geom.classify(params, u, v));
        }
    }
    Ok(LabelMap { size: RESOLUTION, labels })
}

fn label_color(params: &FaceParams, label: Label) -> Rgb {
    match label {
        Label::Background => params.background,
        Label::Face => params.skin_color,
        Label::Eye => params.eye_color,
        Label::Mouth => params.mouth_color,
        other => {
            let cat = other.attribute().expect("attribute label");
            params.attributes[&cat].color
        }
    }
}

pub fn frame_from_labels(params: &FaceParams, labels: &LabelMap) -> Frame {
    let mut frame = Frame::black(labels.size);
    for y in 0..labels.size {
        for x in 0..labels.size {
            frame.set(x, y, label_color(params, labels.get(x, y)));
        }
    }
    frame
}

pub fn render_frame(params: &FaceParams, pose: &Pose, mouth_open: f32) -> Result<Frame> {
    let labels = render_labels(params, pose, mouth_open)?;
    Ok(frame_from_labels(params, &labels))
}

/// Visible region of one attribute at the neutral expression; all-zero when
/// the attribute is absent.
pub fn render_attribute_mask(params: &FaceParams, pose: &Pose, category: AttributeCategory) -> Result<Mask> {
    render_attribute_mask_at(params, pose, params.mouth_open, category)
}

/// Like [`render_attribute_mask`] with an explicit expression (the mouth can
/// occlude a beard).
pub fn render_attribute_mask_at(
    params: &FaceParams,
    pose: &Pose,
    mouth_open: f32,
    category: AttributeCategory,
) -> Result<Mask> {
    if params.attribute(category).is_none() {
        check_pose(pose)?;
        return Ok(Mask::zeros(RESOLUTION));
    }
    let labels = render_labels(params, pose, mouth_open)?;
    Ok(labels.mask_of(Label::of(category)))
}

/// Landmark positions in image coordinates (pixels, origin at the top-left corner).
pub fn landmarks(params: &FaceParams, pose: &Pose, mouth_open: f32) -> [(f32, f32); LANDMARK_COUNT] {
    let geom = FaceGeometry::new(params, pose, mouth_open);
    let (sin_r, cos_r) = pose.roll.sin_cos();
    geom.landmarks_local().map(|(u, v)| {
        let dx = pose.scale * (cos_r * u - sin_r * v);
        let dy = pose.scale * (sin_r * u + cos_r * v);
        ((CENTER.0 + pose.tx) + dx, (CENTER.1 + pose.ty) + dy)
    })
}

/// Plus-shaped dots (radius 1 px) on black, one fixed color per landmark.
pub fn render_keypoints(params: &FaceParams, pose: &Pose, mouth_open: f32) -> Result<KeypointImage> {
    check_pose(pose)?;
    let mut img = Frame::black(RESOLUTION);
    for (i, (x, y)) in landmarks(params, pose, mouth_open).into_iter().enumerate() {
        let (cx, cy) = (x.floor() as i64, y.floor() as i64);
        for (ox, oy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (px, py) = (cx + ox, cy + oy);
            if (0..RESOLUTION as i64).contains(&px) && (0..RESOLUTION as i64).contains(&py) {
                img.set(px as usize, py as usize, KEYPOINT_COLORS[i]);
            }
        }
    }
    Ok(img)
}

/// Renders every frame of a clip together with keypoints and per-category masks.
pub fn generate_video(params: &FaceParams, motion: &MotionSpec) -> Result<VideoRecord> {
    if motion.frames < 2 {
        return Err(Error::InvalidArgument(format!("video needs at least 2 frames, got {}", motion.frames)));
    }
    let mut frames = Vec::with_capacity(motion.frames);
    let mut keypoints = Vec::with_capacity(motion.frames);
    let mut masks: BTreeMap<AttributeCategory, Vec<Mask>> =
        params.attributes.keys().map(|&c| (c, Vec::with_capacity(motion.frames))).collect();
    for tau in 0..motion.frames {
        let (pose, open) = motion.at(tau);
        let labels = render_labels(params, &pose, open)?;
        frames.push(frame_from_labels(params, &labels));
        keypoints.push(render_keypoints(params, &pose, open)?);
        for (cat, seq) in masks.iter_mut() {
            seq.push(labels.mask_of(Label::of(*cat)));
        }
    }
    Ok(VideoRecord { params: params.clone(), motion: motion.clone(), frames, keypoints, masks })
}
