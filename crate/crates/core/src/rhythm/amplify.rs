use std::collections::VecDeque;

use super::{CorrectiveParams, RhythmError};
use crate::model::{geodesic_mean, scale_rotation, BodyZone, ModelError, PoseFrame, Skeleton};

const MEAN_TOLERANCE: f64 = 1e-10;

/// Streaming zone amplification against a trailing reference.
///
/// Each joint is pushed away from the geodesic mean of its last
/// `reference_window` orientations (current frame included) by its zone's
/// gain. The root translation's deviation from its rolling mean is scaled
/// by the hips gain. Frames pass through unchanged until the window fills.
#[derive(Debug, Clone)]
pub struct ZoneAmplifier {
    gains: Vec<f64>,
    root_gain: f64,
    window: usize,
    history: VecDeque<PoseFrame>,
    fallbacks: u64,
}

impl ZoneAmplifier {
    pub fn new(skeleton: &Skeleton, params: &CorrectiveParams, reference_window: usize) -> Result<Self, RhythmError> {
        params.validate()?;
        if reference_window == 0 {
            return Err(RhythmError::InvalidParams("reference_window must be positive".into()));
        }
        Ok(ZoneAmplifier {
            gains: (0..skeleton.joint_count())
                .map(|j| params.zone_gains.get(skeleton.zone(j)))
                .collect(),
            root_gain: params.zone_gains.get(BodyZone::Hips),
            window: reference_window,
            history: VecDeque::with_capacity(reference_window),
            fallbacks: 0,
        })
    }

    /// Joint-frames left unamplified because the reference mean failed to
    /// converge.
    pub fn fallbacks(&self) -> u64 {
        self.fallbacks
    }

    pub fn push(&mut self, frame: &PoseFrame) -> Result<PoseFrame, RhythmError> {
        if frame.joint_count() != self.gains.len() {
            return Err(ModelError::Shape {
                expected: self.gains.len(),
                actual: frame.joint_count(),
            }
            .into());
        }
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(frame.clone());
        let mut out = frame.clone();
        if self.history.len() < self.window {
            return Ok(out);
        }
        let mut column = Vec::with_capacity(self.window);
        for (j, gain) in self.gains.iter().enumerate() {
            if *gain == 1.0 {
                continue;
            }
            column.clear();
            column.extend(self.history.iter().map(|f| f.rotations[j]));
            match geodesic_mean(&column, MEAN_TOLERANCE) {
                Ok(reference) => out.rotations[j] = scale_rotation(&reference, &frame.rotations[j], *gain).rotation,
                Err(_) => self.fallbacks += 1,
            }
        }
        if self.root_gain != 1.0 {
            let n = self.history.len() as f64;
            for k in 0..3 {
                let mean = self.history.iter().map(|f| f.root_translation[k] as f64).sum::<f64>() / n;
                let dev = frame.root_translation[k] as f64 - mean;
                out.root_translation[k] = (mean + self.root_gain * dev) as f32;
            }
        }
        Ok(out)
    }
}

/// Batch form of [`ZoneAmplifier`].
pub fn amplify_zones(
    stream: &[PoseFrame],
    skeleton: &Skeleton,
    params: &CorrectiveParams,
    reference_window: usize,
) -> Result<Vec<PoseFrame>, RhythmError> {
    let mut amp = ZoneAmplifier::new(skeleton, params, reference_window)?;
    stream.iter().map(|f| amp.push(f)).collect()
}
