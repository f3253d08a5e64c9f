use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Pose;

/// `amplitude · sin(2π · frequency · τ / frames + phase)`; frequency is in
/// cycles per clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f32,
    pub frequency: f32,
    pub phase: f32,
}

impl Sinusoid {
    pub fn constant() -> Self {
        Self::default()
    }

    fn eval(&self, tau: usize, frames: usize) -> f32 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        let t = tau as f32 / frames as f32;
        self.amplitude * (std::f32::consts::TAU * self.frequency * t + self.phase).sin()
    }
}

/// Per-frame pose and expression trajectory around a base pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub frames: usize,
    pub base: Pose,
    pub base_mouth_open: f32,
    pub yaw: Sinusoid,
    pub roll: Sinusoid,
    pub tx: Sinusoid,
    pub ty: Sinusoid,
    pub scale: Sinusoid,
    pub mouth_open: Sinusoid,
}

impl MotionSpec {
    /// Holds `pose` and `mouth_open` for every frame.
    pub fn constant(frames: usize, pose: Pose, mouth_open: f32) -> Self {
        Self {
            frames,
            base: pose,
            base_mouth_open: mouth_open,
            yaw: Sinusoid::constant(),
            roll: Sinusoid::constant(),
            tx: Sinusoid::constant(),
            ty: Sinusoid::constant(),
            scale: Sinusoid::constant(),
            mouth_open: Sinusoid::constant(),
        }
    }

    /// Samples a moderate head motion whose every frame stays inside the pose ranges.
    pub fn sample(seed: u64, frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_7469_6f6e);
        let wave = |rng: &mut ChaCha8Rng, max_amp: f32| Sinusoid {
            amplitude: rng.random_range(0.0..=max_amp),
            frequency: rng.random_range(0.4..=1.2),
            phase: rng.random_range(0.0..std::f32::consts::TAU),
        };
        let yaw = wave(&mut rng, 0.25);
        let roll = wave(&mut rng, 0.1);
        let tx = wave(&mut rng, 1.5);
        let ty = wave(&mut rng, 1.0);
        let scale = wave(&mut rng, 0.03);
        let mouth_open = wave(&mut rng, 0.3);
        let base = Pose {
            yaw: rng.random_range(-0.15..=0.15),
            roll: rng.random_range(-0.08..=0.08),
            tx: rng.random_range(-1.5..=1.5),
            ty: rng.random_range(-1.0..=1.0),
            scale: rng.random_range(0.96..=1.04),
        };
        let base_mouth_open = rng.random_range(0.3..=0.7);
        Self { frames, base, base_mouth_open, yaw, roll, tx, ty, scale, mouth_open }
    }

    /// Pose and mouth opening at frame `tau`.
    pub fn at(&self, tau: usize) -> (Pose, f32) {
        let f = self.frames.max(1);
        let pose = Pose {
            yaw: (self.base.yaw + self.yaw.eval(tau, f)).clamp(-Pose::YAW_RANGE, Pose::YAW_RANGE),
            roll: (self.base.roll + self.roll.eval(tau, f)).clamp(-Pose::ROLL_RANGE, Pose::ROLL_RANGE),
            tx: (self.base.tx + self.tx.eval(tau, f)).clamp(-Pose::TRANSLATION_RANGE, Pose::TRANSLATION_RANGE),
            ty: (self.base.ty + self.ty.eval(tau, f)).clamp(-Pose::TRANSLATION_RANGE, Pose::TRANSLATION_RANGE),
            scale: (self.base.scale + self.scale.eval(tau, f)).clamp(Pose::SCALE_RANGE.0, Pose::SCALE_RANGE.1),
        };
        let open = (self.base_mouth_open + self.mouth_open.eval(tau, f)).clamp(0.0, 1.0);
        (pose, open)
    }

    pub fn trajectory(&self) -> Vec<(Pose, f32)> {
        (0..self.frames).map(|t| self.at(t)).collect()
    }

    /// Same trajectory shifted so that it starts at frame `start` and lasts `frames`.
    pub fn window(&self, start: usize, frames: usize) -> Vec<(Pose, f32)> {
        (start..start + frames).map(|t| self.at(t)).collect()
    }
}
