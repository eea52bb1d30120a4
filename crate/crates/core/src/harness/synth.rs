//! Deterministic synthetic recordings for tests, benches and demos.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::recording::Recording;
use super::HarnessError;
use crate::model::{BodyZone, PoseFrame, Skeleton, UnitQuat};

fn timestamp(start_us: u64, i: usize, fps: f64) -> u64 {
    start_us + (i as f64 * 1e6 / fps).round() as u64
}

/// A fixed, slightly bent rest pose so static joints are not all identity.
fn rest_pose(joint_count: usize) -> Vec<UnitQuat> {
    (0..joint_count)
        .map(|j| {
            if j == 0 {
                UnitQuat::IDENTITY
            } else {
                let a = 0.05 + 0.01 * (j % 7) as f64;
                UnitQuat::from_axis_angle([(j % 3) as f64 + 0.5, 1.0, (j % 5) as f64 - 2.0], a)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwaySpec {
    pub duration_s: f64,
    pub fps: f64,
    pub frequency_hz: f64,
    /// Peak sway angle about x, radians.
    pub amplitude_rad: f64,
    /// Time of the first sway extremum; the next follow every half period.
    pub extremum_s: f64,
    pub joint_count: usize,
    pub start_us: u64,
}

impl Default for SwaySpec {
    fn default() -> Self {
        SwaySpec {
            duration_s: 40.0,
            fps: 30.0,
            frequency_hz: 1.0,
            amplitude_rad: 0.2,
            extremum_s: 0.23,
            joint_count: Skeleton::DEFAULT_JOINT_COUNT,
            start_us: 0,
        }
    }
}

/// Single-axis hip sway: the pelvis rotates as
/// `rot_x(A·cos(2πf(t - extremum_s)))`, the root translates along x in
/// step, every other joint holds its rest pose.
pub fn sway(spec: &SwaySpec) -> Result<Recording, HarnessError> {
    let n = (spec.duration_s * spec.fps).round() as usize;
    let rest = rest_pose(spec.joint_count);
    let frames = (0..n)
        .map(|i| {
            let t = i as f64 / spec.fps;
            let c = (2.0 * PI * spec.frequency_hz * (t - spec.extremum_s)).cos();
            let mut rotations = rest.clone();
            rotations[0] = UnitQuat::rot_x(spec.amplitude_rad * c);
            PoseFrame {
                timestamp_us: timestamp(spec.start_us, i, spec.fps),
                root_translation: [(0.05 * c) as f32, 0.95, 0.0],
                rotations,
            }
        })
        .collect();
    Recording::new(spec.joint_count, spec.fps as f32, frames)
}

/// Every joint jitters independently around its rest pose: no rhythm.
pub fn noise(duration_s: f64, fps: f64, joint_count: usize, seed: u64) -> Result<Recording, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * fps).round() as usize;
    let rest = rest_pose(joint_count);
    let frames = (0..n)
        .map(|i| {
            let rotations = rest
                .iter()
                .map(|r| {
                    let rv = [0.0; 3].map(|_: f64| rng.random_range(-0.1..0.1));
                    r.mul(&UnitQuat::exp(rv)).canonicalize().unwrap_or(*r)
                })
                .collect();
            PoseFrame {
                timestamp_us: timestamp(0, i, fps),
                root_translation: [rng.random_range(-0.02..0.02), 0.95, rng.random_range(-0.02..0.02)],
                rotations,
            }
        })
        .collect();
    Recording::new(joint_count, fps as f32, frames)
}

/// Busier whole-body motion on the BODY34 skeleton: every joint swings on
/// a few tempo-related sinusoids with zone-dependent amplitude.
pub fn dance(duration_s: f64, fps: f64, bpm: f64, seed: u64) -> Result<Recording, HarnessError> {
    let skeleton = Skeleton::body34();
    let jc = skeleton.joint_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beat_hz = bpm / 60.0;
    struct Osc {
        axis: [f64; 3],
        amp: f64,
        hz: f64,
        phase: f64,
    }
    let oscillators: Vec<Vec<Osc>> = (0..jc)
        .map(|j| {
            let scale = match skeleton.zone(j) {
                BodyZone::Hips => 0.25,
                BodyZone::Hands => 0.6,
                BodyZone::Shoulders | BodyZone::Legs => 0.4,
                BodyZone::Head | BodyZone::Spine => 0.15,
                BodyZone::Other => 0.5,
            };
            (0..3)
                .map(|k| Osc {
                    axis: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    amp: scale * rng.random_range(0.3..1.0) / (k + 1) as f64,
                    hz: beat_hz * [0.5, 1.0, 2.0][k],
                    phase: rng.random_range(0.0..2.0 * PI),
                })
                .collect()
        })
        .collect();
    let rest = rest_pose(jc);
    let n = (duration_s * fps).round() as usize;
    let frames = (0..n)
        .map(|i| {
            let t = i as f64 / fps;
            let rotations = oscillators
                .iter()
                .zip(&rest)
                .map(|(oscs, r)| {
                    let mut q = *r;
                    for o in oscs {
                        let norm = (o.axis.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-9);
                        let angle = o.amp * (2.0 * PI * o.hz * t + o.phase).sin();
                        q = q.mul(&UnitQuat::from_axis_angle(o.axis.map(|v| v / norm), angle));
                    }
                    q.canonicalize().unwrap_or(*r)
                })
                .collect();
            PoseFrame {
                timestamp_us: timestamp(0, i, fps),
                root_translation: [
                    (0.1 * (2.0 * PI * beat_hz * 0.5 * t).sin()) as f32,
                    (0.95 + 0.03 * (2.0 * PI * beat_hz * t).sin()) as f32,
                    0.0,
                ],
                rotations,
            }
        })
        .collect();
    Recording::new(jc, fps as f32, frames)
}
