//! Offline run of the rhythmic corrective, processed as if live.

use std::path::Path;

use serde::Serialize;

use super::recording::Recording;
use super::HarnessError;
use crate::model::Skeleton;
use crate::rhythm::{
    estimate_window, sample_stream, BeatAligner, BeatGrid, Component, CorrectiveParams, PeriodEstimate, RhythmError,
    ZoneAmplifier,
};

/// Frames between causal re-estimates.
pub const ESTIMATE_HOP: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectiveOutcome {
    Corrected,
    NoDominantPeriod,
    /// Rhythm found, but never within `max_rate_ratio` of the grid.
    TempoMismatch,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrectiveReport {
    pub outcome: CorrectiveOutcome,
    pub message: String,
    pub detection: Option<PeriodEstimate>,
    pub estimates: usize,
    pub tempo_mismatches: usize,
    /// Mean |extremum − nearest beat| over the whole input.
    pub pre_error_ms: Option<f64>,
    /// Same over the output once the warp first converged.
    pub post_error_ms: Option<f64>,
    pub settle_time_s: Option<f64>,
    pub pre_extrema: usize,
    pub post_extrema: usize,
    pub final_shift_ms: f64,
    pub rate: f64,
    /// Largest |ΔΔ| between consecutive frames, seconds per second.
    pub max_observed_slew: f64,
    /// RMS of the dominant feature after the first detection, input and output.
    pub amplitude_pre: Option<f64>,
    pub amplitude_post: Option<f64>,
    pub reference_window: Option<usize>,
}

impl CorrectiveReport {
    pub fn amplitude_ratio(&self) -> Option<f64> {
        Some(self.amplitude_post? / self.amplitude_pre?)
    }
}

/// Extremum times (µs) of `values`: samples that are the maximum or
/// minimum of their ±`half_width` neighbourhood, refined by a parabola
/// through the sample and its neighbours.
pub fn find_extrema(values: &[f64], timestamps_us: &[u64], half_width: usize) -> Vec<f64> {
    let h = half_width.max(1);
    let mut out = Vec::new();
    if values.len() < 2 * h + 1 {
        return out;
    }
    for i in h..values.len() - h {
        let v = values[i];
        // Strict on the left, inclusive on the right: a flat top of two
        // equal samples yields exactly one extremum.
        let (left, right) = (&values[i - h..i], &values[i + 1..=i + h]);
        let is_max = left.iter().all(|x| *x < v) && right.iter().all(|x| *x <= v);
        let is_min = left.iter().all(|x| *x > v) && right.iter().all(|x| *x >= v);
        if !(is_max || is_min) {
            continue;
        }
        let (a, c) = (values[i - 1], values[i + 1]);
        let d = a - 2.0 * v + c;
        let offset = if d != 0.0 { (0.5 * (a - c) / d).clamp(-0.5, 0.5) } else { 0.0 };
        let dt = if offset >= 0.0 {
            (timestamps_us[i + 1] - timestamps_us[i]) as f64
        } else {
            (timestamps_us[i] - timestamps_us[i - 1]) as f64
        };
        out.push(timestamps_us[i] as f64 + offset * dt);
    }
    out
}

fn mean_beat_error_ms(extrema_us: &[f64], grid: &BeatGrid) -> Option<f64> {
    if extrema_us.is_empty() {
        return None;
    }
    let sum: f64 = extrema_us.iter().map(|t| grid.offset_from_beat_us(*t).abs()).sum();
    Some(sum / extrema_us.len() as f64 * 1e-3)
}

fn feature(frames: &[crate::model::PoseFrame], joint: usize, component: Component) -> Vec<f64> {
    frames.iter().map(|f| component.of(&f.rotations[joint])).collect()
}

fn rms(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Some((v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt())
}

/// Runs detection causally (every [`ESTIMATE_HOP`] frames over the trailing
/// window), amplifies zones against a reference spanning whole detected
/// cycles, and retimes onto `grid`. Writes the result to `output` when
/// given.
pub fn corrective_experiment(
    recording: &Recording,
    skeleton: &Skeleton,
    grid: &BeatGrid,
    params: &CorrectiveParams,
    output: Option<&Path>,
) -> Result<(Recording, CorrectiveReport), HarnessError> {
    params.validate()?;
    grid.validate()?;
    recording.validate()?;
    if skeleton.joint_count() != recording.joint_count() {
        return Err(HarnessError::Format(format!(
            "skeleton has {} joints, recording {}",
            skeleton.joint_count(),
            recording.joint_count()
        )));
    }
    let frames = &recording.frames;
    let w = params.window_frames;
    if frames.len() < w {
        return Err(RhythmError::InsufficientData(format!("{} frames, one analysis window needs {w}", frames.len())).into());
    }
    let fps = crate::rhythm::nominal_fps(frames)?;

    let mut estimates: Vec<(usize, Option<PeriodEstimate>)> = Vec::new();
    let mut i = w - 1;
    while i < frames.len() {
        estimates.push((i, estimate_window(&frames[..=i], w, params.detection_threshold)?));
        i += ESTIMATE_HOP;
    }
    let first = estimates.iter().find_map(|(i, e)| e.map(|e| (*i, e)));
    let mut report = CorrectiveReport {
        outcome: CorrectiveOutcome::NoDominantPeriod,
        message: "no dominant period".into(),
        detection: None,
        estimates: estimates.iter().filter(|(_, e)| e.is_some()).count(),
        tempo_mismatches: 0,
        pre_error_ms: None,
        post_error_ms: None,
        settle_time_s: None,
        pre_extrema: 0,
        post_extrema: 0,
        final_shift_ms: 0.0,
        rate: 1.0,
        max_observed_slew: 0.0,
        amplitude_pre: None,
        amplitude_post: None,
        reference_window: None,
    };
    let Some((first_index, first_det)) = first else {
        let out = recording.clone();
        if let Some(p) = output {
            out.save(p)?;
        }
        return Ok((out, report));
    };
    report.detection = estimates.iter().rev().find_map(|(_, e)| *e);

    // Amplify against a reference spanning whole cycles so the rolling
    // mean does not ripple at the sway frequency.
    let amplified = if params.zone_gains.is_identity() {
        frames.clone()
    } else {
        let period_frames = first_det.period_us as f64 * 1e-6 * fps;
        let cycles = (w as f64 / period_frames).floor().max(1.0);
        let reference = ((cycles * period_frames).round() as usize).clamp(1, w);
        report.reference_window = Some(reference);
        let mut amp = ZoneAmplifier::new(skeleton, params, reference)?;
        frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let a = amp.push(f)?;
                Ok(if i < first_index { f.clone() } else { a })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?
    };

    let mut aligner = BeatAligner::new(*grid, params, frames[0].timestamp_us, fps)?;
    let mut next_estimate = estimates.iter().peekable();
    let mut out_frames = Vec::with_capacity(frames.len());
    let mut settle_index = None;
    let mut was_tracking = false;
    let mut last_delta = 0.0f64;
    let mut any_match = false;
    for (i, f) in frames.iter().enumerate() {
        while let Some((at, e)) = next_estimate.peek() {
            if *at != i {
                break;
            }
            if let Some(e) = e {
                match aligner.update(e) {
                    Ok(_) => any_match = true,
                    Err(_) => report.tempo_mismatches += 1,
                }
            }
            next_estimate.next();
        }
        let s = aligner.step(f.timestamp_us);
        report.max_observed_slew = report.max_observed_slew.max((s.delta_s - last_delta).abs() * fps);
        last_delta = s.delta_s;
        if settle_index.is_none() && i >= first_index && !aligner.is_tracking() && any_match {
            // First frame after the warp stops moving, or the first
            // detection if it never had to move.
            if was_tracking || i == first_index {
                settle_index = Some(i);
            }
        }
        was_tracking = aligner.is_tracking();
        let mut o = sample_stream(&amplified, s.source_index);
        o.timestamp_us = f.timestamp_us;
        out_frames.push(o);
    }
    report.final_shift_ms = aligner.delta_s() * 1e3;
    report.rate = aligner.rate();
    report.outcome = if any_match {
        report.message = "corrected".into();
        CorrectiveOutcome::Corrected
    } else {
        report.message = "dominant period does not match the beat grid; passed through".into();
        CorrectiveOutcome::TempoMismatch
    };

    // Alignment and amplitude are measured on the first detection's feature.
    let ts: Vec<u64> = frames.iter().map(|f| f.timestamp_us).collect();
    let (joint, component) = (first_det.joint, first_det.component);
    let input = feature(frames, joint, component);
    let output_feature = feature(&out_frames, joint, component);
    let half_width = |period_us: f64| ((period_us * 1e-6 * fps / 4.0).floor() as usize).max(1);
    let pre = find_extrema(&input, &ts, half_width(first_det.period_us as f64));
    report.pre_extrema = pre.len();
    report.pre_error_ms = mean_beat_error_ms(&pre, grid);
    if let Some(settle) = settle_index.filter(|_| any_match) {
        let settle_us = ts[settle] as f64;
        report.settle_time_s = Some((ts[settle] - ts[0]) as f64 * 1e-6);
        let post: Vec<f64> = find_extrema(&output_feature, &ts, half_width(first_det.period_us as f64 / report.rate))
            .into_iter()
            .filter(|t| *t >= settle_us)
            .collect();
        report.post_extrema = post.len();
        report.post_error_ms = mean_beat_error_ms(&post, grid);
    }
    report.amplitude_pre = rms(&input[first_index..]);
    report.amplitude_post = rms(&output_feature[first_index..]);

    let out = Recording::new(recording.joint_count(), recording.header.nominal_fps, out_frames)?;
    if let Some(p) = output {
        out.save(p)?;
    }
    Ok((out, report))
}
