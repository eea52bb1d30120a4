use super::{BeatGrid, CorrectiveParams, PeriodEstimate, RhythmError};
use crate::model::{ModelError, PoseFrame};

/// Tempo ratios within this distance of 1 are treated as exactly 1, so a
/// stream already in tempo is never resampled by estimation noise.
pub const RATE_DEADBAND: f64 = 0.02;

/// Furthest extrapolation past the last source frame, in frames.
const MAX_EXTRAPOLATION: f64 = 2.0;

/// Wraps `x` into `[-m/2, m/2)`.
pub fn wrap_symmetric(x: f64, m: f64) -> f64 {
    let r = (x + 0.5 * m).rem_euclid(m) - 0.5 * m;
    if r >= 0.5 * m {
        r - m
    } else {
        r
    }
}

/// How the detected motion relates to the beat.
///
/// A sway of period P has extrema every P/2; that interval is matched
/// against the beat period times a power of two (`level`), so a 1 s sway
/// peaks on every beat of a 120 bpm grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TempoMatch {
    pub level: i32,
    /// `(P/2) / (beat · 2^level)` before the deadband.
    pub ratio: f64,
    /// Playback rate applied to the source.
    pub rate: f64,
}

/// Picks the metrical level closest to the motion's extremum interval.
/// `Err` carries the closest ratio when it is outside `[1/max, max]`.
pub fn match_tempo(period_us: f64, beat_period_us: f64, max_rate_ratio: f64) -> Result<TempoMatch, f64> {
    let half = 0.5 * period_us;
    let center = (half / beat_period_us).log2().round() as i32;
    let (level, ratio) = (center - 1..=center + 1)
        .filter(|j| (-3..=3).contains(j))
        .map(|j| (j, half / (beat_period_us * 2f64.powi(j))))
        .min_by(|a, b| a.1.ln().abs().total_cmp(&b.1.ln().abs()))
        .unwrap_or((0, half / beat_period_us));
    if !(ratio >= 1.0 / max_rate_ratio && ratio <= max_rate_ratio) {
        return Err(ratio);
    }
    let rate = if (ratio - 1.0).abs() <= RATE_DEADBAND { 1.0 } else { ratio };
    Ok(TempoMatch { level, ratio, rate })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PhaseTarget {
    /// Source angular frequency, rad/s.
    omega: f64,
    estimate: PeriodEstimate,
    /// Angular frequency of extrema-on-beat output, rad/s.
    omega_out: f64,
    /// Output phases congruent modulo this put an extremum on a beat.
    modulus: f64,
}

/// One output frame's position in the source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpSample {
    /// Fractional source frame index.
    pub source_index: f64,
    /// Current phase shift Δ, seconds.
    pub delta_s: f64,
    pub rate: f64,
}

/// Streaming time warp `s(t) = b(t) + Δ(t)`: `b` advances at the tempo
/// rate and Δ slews toward the nearest shift that puts extrema on beats.
///
/// Δ starts moving only once the target is more than half a frame away and
/// then runs all the way to it, so an on-beat stream stays untouched while
/// an off-beat one converges exactly.
#[derive(Debug, Clone)]
pub struct BeatAligner {
    grid: BeatGrid,
    max_step_s: f64,
    max_rate_ratio: f64,
    origin_us: f64,
    interval_us: f64,
    base: f64,
    delta_s: f64,
    tracking: bool,
    rate: f64,
    target: Option<PhaseTarget>,
}

impl BeatAligner {
    /// `origin_us` is the timestamp of source frame 0, `fps` the source rate.
    pub fn new(grid: BeatGrid, params: &CorrectiveParams, origin_us: u64, fps: f64) -> Result<Self, RhythmError> {
        grid.validate()?;
        params.validate()?;
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(RhythmError::InvalidParams(format!("fps {fps}")));
        }
        Ok(BeatAligner {
            grid,
            max_step_s: params.max_warp_slew / fps,
            max_rate_ratio: params.max_rate_ratio,
            origin_us: origin_us as f64,
            interval_us: 1e6 / fps,
            base: 0.0,
            delta_s: 0.0,
            tracking: false,
            rate: 1.0,
            target: None,
        })
    }

    /// Installs a new detection. On a tempo mismatch the aligner stops
    /// correcting phase and plays at rate 1, holding its current shift.
    pub fn update(&mut self, detected: &PeriodEstimate) -> Result<TempoMatch, f64> {
        let beat = self.grid.beat_period_us();
        match match_tempo(detected.period_us as f64, beat, self.max_rate_ratio) {
            Ok(m) => {
                self.rate = m.rate;
                let omega_out = std::f64::consts::PI / (beat * 1e-6 * 2f64.powi(m.level));
                self.target = Some(PhaseTarget {
                    // The source is modelled as exactly in tempo at the
                    // chosen rate, so a deadbanded rate does not leave a
                    // residual phase drift.
                    omega: omega_out / m.rate,
                    estimate: *detected,
                    omega_out,
                    modulus: std::f64::consts::PI / 2f64.powi(m.level.max(0)),
                });
                Ok(m)
            }
            Err(ratio) => {
                self.clear();
                Err(ratio)
            }
        }
    }

    pub fn clear(&mut self) {
        self.target = None;
        self.rate = 1.0;
        self.tracking = false;
    }

    pub fn delta_s(&self) -> f64 {
        self.delta_s
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    /// Advances one output frame stamped `out_us`.
    pub fn step(&mut self, out_us: u64) -> WarpSample {
        if let Some(t) = self.target {
            let interval_s = self.interval_us * 1e-6;
            let source_us = self.origin_us + (self.base + self.delta_s / interval_s) * self.interval_us;
            let beat_phase = t.omega_out * (out_us as f64 - self.grid.phase_offset_us as f64) * 1e-6;
            let source_phase =
                t.estimate.phase_rad + t.omega * (source_us - t.estimate.reference_us as f64) * 1e-6;
            let err = wrap_symmetric(source_phase - beat_phase, t.modulus);
            let diff = -err / t.omega;
            if !self.tracking && diff.abs() > 0.5 * interval_s {
                self.tracking = true;
            }
            if self.tracking {
                if diff.abs() <= self.max_step_s {
                    self.delta_s += diff;
                    self.tracking = false;
                } else {
                    self.delta_s += self.max_step_s.copysign(diff);
                }
            }
        }
        let source_index = self.base + self.delta_s * 1e6 / self.interval_us;
        self.base += self.rate;
        WarpSample {
            source_index,
            delta_s: self.delta_s,
            rate: self.rate,
        }
    }
}

/// Pose at fractional source index `u`: slerp between the bracketing
/// frames, extrapolating up to two frames past the end, then holding.
/// The returned timestamp is the bracketing frame's; callers restamp.
pub fn sample_stream(frames: &[PoseFrame], u: f64) -> PoseFrame {
    let last = frames.len() - 1;
    if u <= 0.0 || last == 0 {
        return frames[0].clone();
    }
    if u >= last as f64 {
        let over = u - last as f64;
        if over == 0.0 || over > MAX_EXTRAPOLATION {
            return frames[last].clone();
        }
        return interpolate(&frames[last - 1], &frames[last], 1.0 + over);
    }
    let i = u.floor() as usize;
    let f = u - i as f64;
    if f == 0.0 {
        return frames[i].clone();
    }
    interpolate(&frames[i], &frames[i + 1], f)
}

fn interpolate(a: &PoseFrame, b: &PoseFrame, t: f64) -> PoseFrame {
    let root: [f32; 3] = std::array::from_fn(|k| {
        let (ra, rb) = (a.root_translation[k] as f64, b.root_translation[k] as f64);
        (ra + t * (rb - ra)) as f32
    });
    PoseFrame {
        timestamp_us: a.timestamp_us,
        root_translation: root,
        rotations: a.rotations.iter().zip(&b.rotations).map(|(qa, qb)| qa.slerp(qb, t)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RemapStatus {
    Aligned(TempoMatch),
    /// Motion does not dance to this tempo; the stream is passed through.
    TempoMismatch { ratio: f64 },
}

#[derive(Debug, Clone)]
pub struct RemapResult {
    pub frames: Vec<PoseFrame>,
    pub status: RemapStatus,
    /// One entry per output frame; empty on a tempo mismatch.
    pub trace: Vec<WarpSample>,
}

impl RemapResult {
    pub fn corrected(&self) -> bool {
        matches!(self.status, RemapStatus::Aligned(_))
    }
}

pub(crate) fn nominal_fps(stream: &[PoseFrame]) -> Result<f64, RhythmError> {
    let (first, last) = match stream {
        [a, .., b] => (a.timestamp_us, b.timestamp_us),
        _ => return Err(RhythmError::InsufficientData("need at least two frames".into())),
    };
    if last <= first {
        return Err(RhythmError::InsufficientData("timestamps not increasing".into()));
    }
    Ok(1e6 * (stream.len() - 1) as f64 / (last - first) as f64)
}

/// Retimes `stream` with one detection so that motion extrema converge
/// onto the grid's beats. Output keeps the input's timestamps.
pub fn beat_align_remap(
    stream: &[PoseFrame],
    detected: &PeriodEstimate,
    grid: &BeatGrid,
    params: &CorrectiveParams,
) -> Result<RemapResult, RhythmError> {
    params.validate()?;
    grid.validate()?;
    if detected.energy_ratio < params.detection_threshold || detected.period_us == 0 {
        return Err(RhythmError::InvalidDetection(detected.energy_ratio));
    }
    let fps = nominal_fps(stream)?;
    let joints = stream[0].joint_count();
    if let Some(f) = stream.iter().find(|f| f.joint_count() != joints) {
        return Err(ModelError::Shape {
            expected: joints,
            actual: f.joint_count(),
        }
        .into());
    }
    let mut aligner = BeatAligner::new(*grid, params, stream[0].timestamp_us, fps)?;
    let tempo = match aligner.update(detected) {
        Ok(m) => m,
        Err(ratio) => {
            return Ok(RemapResult {
                frames: stream.to_vec(),
                status: RemapStatus::TempoMismatch { ratio },
                trace: Vec::new(),
            })
        }
    };
    let mut frames = Vec::with_capacity(stream.len());
    let mut trace = Vec::with_capacity(stream.len());
    for f in stream {
        let w = aligner.step(f.timestamp_us);
        let mut out = sample_stream(stream, w.source_index);
        out.timestamp_us = f.timestamp_us;
        frames.push(out);
        trace.push(w);
    }
    Ok(RemapResult {
        frames,
        status: RemapStatus::Aligned(tempo),
        trace,
    })
}
