//! Rhythmic correctives: find the dominant sway period of a pose stream,
//! retime the stream so motion extrema land on a beat grid, and exaggerate
//! motion per body zone.

mod amplify;
mod period;
mod warp;

pub(crate) use warp::nominal_fps;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BodyZone, ModelError};

pub use amplify::{amplify_zones, ZoneAmplifier};
pub use period::{
    aggregate_joint_period, detect_dominant_period, estimate_window, extract_feature_series, Component,
    FeatureSeries, PeriodEstimate, BAND_HZ,
};
pub use warp::{
    beat_align_remap, match_tempo, sample_stream, wrap_symmetric, BeatAligner, RemapResult, RemapStatus,
    TempoMatch, WarpSample, RATE_DEADBAND,
};

#[derive(Debug, Error)]
pub enum RhythmError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("detection below threshold (energy ratio {0:.3})")]
    InvalidDetection(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("config: {0}")]
    Config(String),
}

/// The local music's beat timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeatGrid {
    pub bpm: f64,
    /// Stream-clock time of beat 0.
    pub phase_offset_us: i64,
    pub beats_per_bar: u32,
}

impl BeatGrid {
    pub fn new(bpm: f64, phase_offset_us: i64) -> Result<Self, RhythmError> {
        let g = BeatGrid {
            bpm,
            phase_offset_us,
            beats_per_bar: 4,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), RhythmError> {
        if !(30.0..=300.0).contains(&self.bpm) {
            return Err(RhythmError::InvalidParams(format!("bpm {} outside [30, 300]", self.bpm)));
        }
        if self.beats_per_bar == 0 {
            return Err(RhythmError::InvalidParams("beats_per_bar must be positive".into()));
        }
        Ok(())
    }

    pub fn beat_period_us(&self) -> f64 {
        60e6 / self.bpm
    }

    /// Signed distance from `t_us` to the nearest beat, in microseconds.
    pub fn offset_from_beat_us(&self, t_us: f64) -> f64 {
        wrap_symmetric(t_us - self.phase_offset_us as f64, self.beat_period_us())
    }
}

/// Per-zone stylization gains, 1.0 meaning untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoneGains([f64; 7]);

impl Default for ZoneGains {
    fn default() -> Self {
        ZoneGains([1.0; 7])
    }
}

impl ZoneGains {
    pub fn get(&self, zone: BodyZone) -> f64 {
        self.0[zone.index()]
    }

    pub fn set(&mut self, zone: BodyZone, gain: f64) {
        self.0[zone.index()] = gain;
    }

    pub fn with(mut self, zone: BodyZone, gain: f64) -> Self {
        self.set(zone, gain);
        self
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().all(|g| *g == 1.0)
    }

    /// Parses `hips=2.0,hands=0` style lists.
    pub fn parse_list(s: &str) -> Result<Self, RhythmError> {
        let mut gains = ZoneGains::default();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (name, value) = item
                .split_once('=')
                .ok_or_else(|| RhythmError::Config(format!("expected zone=gain, got {item:?}")))?;
            let zone = BodyZone::from_name(name.trim())
                .ok_or_else(|| RhythmError::Config(format!("unknown body zone {name:?}")))?;
            let gain: f64 = value
                .trim()
                .parse()
                .map_err(|_| RhythmError::Config(format!("bad gain {value:?}")))?;
            gains.set(zone, gain);
        }
        Ok(gains)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectiveParams {
    pub window_frames: usize,
    pub detection_threshold: f64,
    /// Seconds of warp change per second of stream.
    pub max_warp_slew: f64,
    pub max_rate_ratio: f64,
    pub zone_gains: ZoneGains,
}

impl Default for CorrectiveParams {
    fn default() -> Self {
        CorrectiveParams {
            window_frames: 256,
            detection_threshold: 0.2,
            max_warp_slew: 0.03,
            max_rate_ratio: 1.1,
            zone_gains: ZoneGains::default(),
        }
    }
}

impl CorrectiveParams {
    pub fn validate(&self) -> Result<(), RhythmError> {
        let bad = |m: String| Err(RhythmError::InvalidParams(m));
        if self.window_frames < 16 || !self.window_frames.is_power_of_two() {
            return bad(format!("window_frames {} must be a power of two >= 16", self.window_frames));
        }
        if !(self.detection_threshold > 0.0 && self.detection_threshold <= 1.0) {
            return bad(format!("detection_threshold {} outside (0, 1]", self.detection_threshold));
        }
        if !(self.max_rate_ratio >= 1.0 && self.max_rate_ratio.is_finite()) {
            return bad(format!("max_rate_ratio {} must be >= 1", self.max_rate_ratio));
        }
        // Keeps the warp strictly increasing: rate - slew > 0.
        if !(self.max_warp_slew >= 0.0 && self.max_warp_slew < 1.0 / self.max_rate_ratio) {
            return bad(format!(
                "max_warp_slew {} must lie in [0, 1/max_rate_ratio)",
                self.max_warp_slew
            ));
        }
        if let Some(g) = self.zone_gains.0.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return bad(format!("zone gain {g} must be finite and >= 0"));
        }
        Ok(())
    }
}

/// On-disk corrective configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectiveConfig {
    pub bpm: f64,
    pub phase_offset_ms: f64,
    pub zone_gains: std::collections::BTreeMap<BodyZone, f64>,
    pub max_warp_slew: f64,
    pub max_rate_ratio: f64,
    pub window_frames: usize,
    pub detection_threshold: f64,
}

impl Default for CorrectiveConfig {
    fn default() -> Self {
        let p = CorrectiveParams::default();
        CorrectiveConfig {
            bpm: 120.0,
            phase_offset_ms: 0.0,
            zone_gains: Default::default(),
            max_warp_slew: p.max_warp_slew,
            max_rate_ratio: p.max_rate_ratio,
            window_frames: p.window_frames,
            detection_threshold: p.detection_threshold,
        }
    }
}

impl CorrectiveConfig {
    pub fn from_json(s: &str) -> Result<Self, RhythmError> {
        serde_json::from_str(s).map_err(|e| RhythmError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RhythmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RhythmError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn grid(&self) -> Result<BeatGrid, RhythmError> {
        BeatGrid::new(self.bpm, (self.phase_offset_ms * 1e3).round() as i64)
    }

    pub fn params(&self) -> Result<CorrectiveParams, RhythmError> {
        let mut zone_gains = ZoneGains::default();
        for (zone, gain) in &self.zone_gains {
            zone_gains.set(*zone, *gain);
        }
        let p = CorrectiveParams {
            window_frames: self.window_frames,
            detection_threshold: self.detection_threshold,
            max_warp_slew: self.max_warp_slew,
            max_rate_ratio: self.max_rate_ratio,
            zone_gains,
        };
        p.validate()?;
        Ok(p)
    }
}
