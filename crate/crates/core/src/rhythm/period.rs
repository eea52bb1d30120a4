use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::RhythmError;
use crate::model::{wrap_two_pi, ModelError, PoseFrame};

/// Search band for the dominant sway frequency, in Hz.
pub const BAND_HZ: (f64, f64) = (0.25, 4.0);

/// Allowed deviation of any frame interval from the window's mean interval.
const MAX_JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    X,
    Y,
    Z,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::X, Component::Y, Component::Z];

    pub fn of(self, q: &crate::model::UnitQuat) -> f64 {
        match self {
            Component::X => q.x,
            Component::Y => q.y,
            Component::Z => q.z,
        }
    }
}

/// One quaternion component of one joint over an analysis window.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    pub joint: usize,
    pub component: Component,
    /// Mean-removed.
    pub samples: Vec<f64>,
    pub fps: f64,
    /// Timestamp of the first sample.
    pub start_us: u64,
}

/// Dominant periodic component of a feature series.
///
/// The series is modelled as `A·cos(2π(t - reference_us)/period + phase_rad)`,
/// so motion extrema sit where the cosine argument is a multiple of π.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodEstimate {
    pub period_us: u64,
    pub phase_rad: f64,
    pub energy_ratio: f64,
    pub joint: usize,
    pub component: Component,
    /// Centre of the analysis window.
    pub reference_us: u64,
}

impl PeriodEstimate {
    pub fn frequency_hz(&self) -> f64 {
        1e6 / self.period_us as f64
    }

    pub fn omega(&self) -> f64 {
        2.0 * PI * self.frequency_hz()
    }

    /// Phase of the model at stream time `t_us`.
    pub fn phase_at(&self, t_us: f64) -> f64 {
        self.omega() * (t_us - self.reference_us as f64) * 1e-6 + self.phase_rad
    }
}

/// Takes the trailing `window_frames` frames of `window` and returns the
/// chosen component of `joint`, mean-removed.
pub fn extract_feature_series(
    window: &[PoseFrame],
    joint: usize,
    component: Component,
    window_frames: usize,
) -> Result<FeatureSeries, RhythmError> {
    if window_frames < 2 || window.len() < window_frames {
        return Err(RhythmError::InsufficientData(format!(
            "{} frames, need {window_frames}",
            window.len()
        )));
    }
    let w = &window[window.len() - window_frames..];
    let first = w[0].timestamp_us;
    let last = w[window_frames - 1].timestamp_us;
    if last <= first {
        return Err(RhythmError::InsufficientData("timestamps not increasing".into()));
    }
    let interval = (last - first) as f64 / (window_frames - 1) as f64;
    for pair in w.windows(2) {
        let d = pair[1].timestamp_us as f64 - pair[0].timestamp_us as f64;
        if (d - interval).abs() > MAX_JITTER * interval {
            return Err(RhythmError::InsufficientData(format!(
                "frame interval {d} us deviates more than 10% from {interval:.1} us"
            )));
        }
    }
    let mut samples = Vec::with_capacity(window_frames);
    for f in w {
        let q = f.rotations.get(joint).ok_or(ModelError::Shape {
            expected: joint + 1,
            actual: f.rotations.len(),
        })?;
        samples.push(component.of(q));
    }
    let mean = samples.iter().sum::<f64>() / window_frames as f64;
    for s in &mut samples {
        *s -= mean;
    }
    Ok(FeatureSeries {
        joint,
        component,
        samples,
        fps: 1e6 / interval,
        start_us: first,
    })
}

/// Hann-windowed periodogram peak in [`BAND_HZ`], refined by a parabola
/// through the log-magnitudes around the peak bin. `None` when the peak
/// and its two neighbours hold less than `threshold` of the non-DC energy.
pub fn detect_dominant_period(series: &FeatureSeries, threshold: f64) -> Option<PeriodEstimate> {
    let n = series.samples.len();
    if n < 8 || !n.is_power_of_two() || !(series.fps > 0.0 && series.fps.is_finite()) {
        return None;
    }
    let denom = (n - 1) as f64;
    let mut spec: Vec<Complex<f64>> = series
        .samples
        .iter()
        .enumerate()
        .map(|(i, v)| Complex::new(v * 0.5 * (1.0 - (2.0 * PI * i as f64 / denom).cos()), 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut spec);

    let power: Vec<f64> = spec[..=n / 2].iter().map(|c| c.norm_sqr()).collect();
    let total: f64 = power[1..].iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    let bin_hz = series.fps / n as f64;
    let lo = ((BAND_HZ.0 / bin_hz).ceil() as usize).max(1);
    let hi = ((BAND_HZ.1 / bin_hz).floor() as usize).min(n / 2 - 1);
    if lo > hi {
        return None;
    }
    let k = (lo..=hi).max_by(|a, b| power[*a].total_cmp(&power[*b]))?;
    let energy_ratio = ((power[k - 1] + power[k] + power[k + 1]) / total).min(1.0);
    if energy_ratio < threshold {
        return None;
    }

    let log_mag = |p: f64| 0.5 * p.max(f64::MIN_POSITIVE).ln();
    let (a, b, c) = (log_mag(power[k - 1]), log_mag(power[k]), log_mag(power[k + 1]));
    let curvature = a - 2.0 * b + c;
    let delta = if curvature < 0.0 {
        (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let freq = (k as f64 + delta) * bin_hz;
    // The symmetric window delays the peak bin's phase by πδ(N-1)/N.
    let start_phase = spec[k].arg() - PI * delta * denom / n as f64;
    // Re-anchor at the window centre, where a small frequency error
    // perturbs the phase least.
    let reference_us = series.start_us + (0.5 * denom * 1e6 / series.fps).round() as u64;
    let phase = start_phase + 2.0 * PI * freq * (reference_us - series.start_us) as f64 * 1e-6;
    Some(PeriodEstimate {
        period_us: (1e6 / freq).round() as u64,
        phase_rad: wrap_two_pi(phase),
        energy_ratio,
        joint: series.joint,
        component: series.component,
        reference_us,
    })
}

/// Fuses per-joint estimates from one window.
///
/// Estimates are clustered greedily (strongest first) with periods agreeing
/// within 10%; the cluster with the largest summed energy wins. Its period
/// is the energy-weighted mean, its energy ratio the energy-weighted mean
/// energy ratio, and its phase the energy-weighted circular mean taken
/// modulo π, since joints can swing in opposite directions while peaking
/// together. The fused phase is therefore only meaningful modulo π.
pub fn aggregate_joint_period(estimates: &[PeriodEstimate], threshold: f64) -> Option<PeriodEstimate> {
    let mut order: Vec<&PeriodEstimate> = estimates.iter().filter(|e| e.period_us > 0).collect();
    order.sort_by(|a, b| b.energy_ratio.total_cmp(&a.energy_ratio));
    let mut clusters: Vec<Vec<&PeriodEstimate>> = Vec::new();
    for e in order {
        let home = clusters.iter_mut().find(|c| {
            let seed = c[0].period_us as f64;
            (e.period_us as f64 - seed).abs() <= 0.1 * seed
        });
        match home {
            Some(c) => c.push(e),
            None => clusters.push(vec![e]),
        }
    }
    let weight = |c: &Vec<&PeriodEstimate>| c.iter().map(|e| e.energy_ratio).sum::<f64>();
    let best = clusters.into_iter().max_by(|a, b| weight(a).total_cmp(&weight(b)))?;
    let w = weight(&best);
    if !(w > 0.0) {
        return None;
    }
    let energy_ratio = best.iter().map(|e| e.energy_ratio * e.energy_ratio).sum::<f64>() / w;
    if energy_ratio < threshold {
        return None;
    }
    let period = best.iter().map(|e| e.energy_ratio * e.period_us as f64).sum::<f64>() / w;
    let (mut s, mut c) = (0.0, 0.0);
    for e in &best {
        // Bring every phase to the common reference first.
        let ph = e.phase_rad + 2.0 * PI * (best[0].reference_us as f64 - e.reference_us as f64) / e.period_us as f64;
        s += e.energy_ratio * (2.0 * ph).sin();
        c += e.energy_ratio * (2.0 * ph).cos();
    }
    Some(PeriodEstimate {
        period_us: period.round() as u64,
        phase_rad: wrap_two_pi(0.5 * s.atan2(c)),
        energy_ratio,
        joint: best[0].joint,
        component: best[0].component,
        reference_us: best[0].reference_us,
    })
}

/// Runs detection on every joint and component of the trailing window and
/// fuses the strongest component of each joint.
pub fn estimate_window(
    window: &[PoseFrame],
    window_frames: usize,
    threshold: f64,
) -> Result<Option<PeriodEstimate>, RhythmError> {
    let joints = window.last().map_or(0, |f| f.joint_count());
    let mut per_joint = Vec::new();
    for joint in 0..joints {
        let mut best: Option<PeriodEstimate> = None;
        for component in Component::ALL {
            let series = extract_feature_series(window, joint, component, window_frames)?;
            if let Some(e) = detect_dominant_period(&series, threshold) {
                if best.is_none_or(|b| e.energy_ratio > b.energy_ratio) {
                    best = Some(e);
                }
            }
        }
        per_joint.extend(best);
    }
    Ok(aggregate_joint_period(&per_joint, threshold))
}
