//! Fixed-point pose codec.
//!
//! Each joint rotation travels as its (x, y, z) components only; `w` is
//! rebuilt on decode from the unit-norm constraint, which works because
//! frames are canonicalized to `w >= 0` at ingestion. Every component is
//! quantized over a per-joint range learned from a motion corpus
//! ([`analyze_bounds`]) rather than over the full `[-1, 1]`.
//!
//! Wire layout of an [`EncodedFrame`] (little-endian):
//!
//! ```text
//! u64 timestamp_us | f32 root[3] | payload: joint_count * 3 * bits, LSB-first, zero-padded
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{PoseFrame, Skeleton, UnitQuat};

pub const MIN_BITS: u8 = 8;
pub const MAX_BITS: u8 = 24;
pub const DEFAULT_BITS: u8 = 16;

/// Smallest `w` the error bound covers. Rebuilding `w` amplifies component
/// error by roughly `1/w`, so quaternions far from the `w`-dominant regime
/// still round-trip but without the [`max_angular_error`] guarantee.
pub const W_FLOOR: f64 = 0.2;

/// Minimum width given to a component whose observed range collapsed.
pub const DEGENERATE_RANGE: f64 = 1e-3;

const FRAME_HEADER_LEN: usize = 8 + 12;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("empty corpus")]
    EmptyInput,
    #[error("shape mismatch: expected {expected} joints, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("corrupt frame: {0}")]
    FrameCorrupt(String),
    #[error("invalid bounds table: {0}")]
    InvalidTable(String),
    #[error("bounds table i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bounds table json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Quantization range of one quaternion component. Serialized as `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ComponentBounds {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for ComponentBounds {
    fn from(v: [f64; 2]) -> Self {
        ComponentBounds { lo: v[0], hi: v[1] }
    }
}

impl From<ComponentBounds> for [f64; 2] {
    fn from(b: ComponentBounds) -> Self {
        [b.lo, b.hi]
    }
}

impl ComponentBounds {
    pub const FULL: ComponentBounds = ComponentBounds { lo: -1.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Self {
        ComponentBounds { lo, hi }
    }

    pub fn range(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn max_abs(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointBounds {
    pub name: String,
    pub x: ComponentBounds,
    pub y: ComponentBounds,
    pub z: ComponentBounds,
}

impl JointBounds {
    pub fn components(&self) -> [ComponentBounds; 3] {
        [self.x, self.y, self.z]
    }

    pub fn contains(&self, q: &UnitQuat) -> bool {
        self.x.contains(q.x) && self.y.contains(q.y) && self.z.contains(q.z)
    }
}

/// Per-joint, per-component quantization ranges plus the bit width.
///
/// Distributed out-of-band as JSON; `version` lets peers notice they were
/// handed different tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsTable {
    pub version: u32,
    pub bits: u8,
    pub joints: Vec<JointBounds>,
}

impl BoundsTable {
    /// Table with the same range on every component of every joint.
    pub fn uniform(skeleton: &Skeleton, bounds: ComponentBounds, bits: u8) -> Result<Self, CodecError> {
        let joints = skeleton
            .joint_names()
            .iter()
            .map(|name| JointBounds {
                name: name.clone(),
                x: bounds,
                y: bounds,
                z: bounds,
            })
            .collect();
        let t = BoundsTable {
            version: 1,
            bits,
            joints,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Largest quantized integer, `2^bits - 1`.
    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(CodecError::InvalidTable(format!(
                "bits {} outside [{MIN_BITS}, {MAX_BITS}]",
                self.bits
            )));
        }
        if self.joints.is_empty() {
            return Err(CodecError::InvalidTable("no joints".into()));
        }
        for (j, jb) in self.joints.iter().enumerate() {
            for (c, b) in ["x", "y", "z"].iter().zip(jb.components()) {
                if !(b.lo < b.hi) || b.lo < -1.0 || b.hi > 1.0 {
                    return Err(CodecError::InvalidTable(format!(
                        "joint {j} ({}) {c}: [{}, {}]",
                        jb.name, b.lo, b.hi
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, CodecError> {
        let t: BoundsTable = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bounds table serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Bytes of packed joint payload per frame.
    pub fn payload_len(&self) -> usize {
        payload_len(self.joint_count(), self.bits)
    }

    /// Full encoded frame size: timestamp, root translation and payload.
    pub fn frame_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload_len()
    }

    fn check_joints(&self, actual: usize) -> Result<(), CodecError> {
        if actual != self.joint_count() {
            return Err(CodecError::Shape {
                expected: self.joint_count(),
                actual,
            });
        }
        Ok(())
    }
}

pub fn payload_len(joint_count: usize, bits: u8) -> usize {
    (joint_count * 3 * bits as usize).div_ceil(8)
}

/// Size of the same frame stored raw: u64 timestamp, 3 × f32 root and
/// 4 × f32 per joint.
pub fn raw_frame_len(joint_count: usize) -> usize {
    FRAME_HEADER_LEN + joint_count * 16
}

/// Learns per-joint component ranges from a corpus of pose streams.
///
/// Each range is the observed `[min, max]` widened by `margin × range` on
/// both sides and clamped to `[-1, 1]`. Components that never moved (range
/// below 1e-6) get a [`DEGENERATE_RANGE`]-wide window centred on the value.
pub fn analyze_bounds(
    corpus: &[Vec<PoseFrame>],
    skeleton: &Skeleton,
    margin: f64,
    bits: u8,
) -> Result<BoundsTable, CodecError> {
    if !(0.0..=0.5).contains(&margin) {
        return Err(CodecError::InvalidTable(format!("margin {margin} outside [0, 0.5]")));
    }
    let n = skeleton.joint_count();
    let mut lo = vec![[f64::INFINITY; 3]; n];
    let mut hi = vec![[f64::NEG_INFINITY; 3]; n];
    let mut seen = 0usize;
    for frame in corpus.iter().flatten() {
        if frame.rotations.len() != n {
            return Err(CodecError::Shape {
                expected: n,
                actual: frame.rotations.len(),
            });
        }
        for (j, q) in frame.rotations.iter().enumerate() {
            let q = q
                .canonicalize()
                .map_err(|e| CodecError::FrameCorrupt(e.to_string()))?;
            for (c, v) in [q.x, q.y, q.z].into_iter().enumerate() {
                lo[j][c] = lo[j][c].min(v);
                hi[j][c] = hi[j][c].max(v);
            }
        }
        seen += 1;
    }
    if seen == 0 {
        return Err(CodecError::EmptyInput);
    }

    let widen = |min: f64, max: f64| -> ComponentBounds {
        let range = max - min;
        let (l, h) = if range < 1e-6 {
            let mid = 0.5 * (min + max);
            (mid - 0.5 * DEGENERATE_RANGE, mid + 0.5 * DEGENERATE_RANGE)
        } else {
            (min - margin * range, max + margin * range)
        };
        ComponentBounds::new(l.max(-1.0), h.min(1.0))
    };
    let joints = skeleton
        .joint_names()
        .iter()
        .enumerate()
        .map(|(j, name)| JointBounds {
            name: name.clone(),
            x: widen(lo[j][0], hi[j][0]),
            y: widen(lo[j][1], hi[j][1]),
            z: widen(lo[j][2], hi[j][2]),
        })
        .collect();
    let table = BoundsTable {
        version: 1,
        bits,
        joints,
    };
    table.validate()?;
    Ok(table)
}

/// Encoder-side telemetry; one record per encoding activity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncoderStats {
    pub frames: u64,
    /// Components that fell outside their range and were clamped.
    pub clamped: u64,
    /// Joints encoded with `w` below [`W_FLOOR`].
    pub below_w_floor: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub timestamp_us: u64,
    pub root_translation: [f32; 3],
    pub payload: Vec<u8>,
}

impl EncodedFrame {
    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        self.write_to(&mut out);
        out
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.timestamp_us.to_le_bytes());
        for v in self.root_translation {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
    }

    /// Parses the wire layout; the payload length must match `table` exactly.
    pub fn from_bytes(bytes: &[u8], table: &BoundsTable) -> Result<Self, CodecError> {
        let expected = table.frame_len();
        if bytes.len() != expected {
            return Err(CodecError::FrameCorrupt(format!(
                "frame is {} bytes, table expects {expected}",
                bytes.len()
            )));
        }
        let timestamp_us = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let mut root_translation = [0f32; 3];
        for (i, r) in root_translation.iter_mut().enumerate() {
            let at = 8 + 4 * i;
            *r = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        }
        Ok(EncodedFrame {
            timestamp_us,
            root_translation,
            payload: bytes[FRAME_HEADER_LEN..].to_vec(),
        })
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    nbits: u32,
}

impl BitWriter {
    fn with_capacity(bytes: usize) -> Self {
        BitWriter {
            out: Vec::with_capacity(bytes),
            acc: 0,
            nbits: 0,
        }
    }

    fn push(&mut self, value: u32, bits: u32) {
        self.acc |= (value as u64) << self.nbits;
        self.nbits += bits;
        while self.nbits >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.nbits -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.out.push(self.acc as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    nbits: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader {
            bytes,
            pos: 0,
            acc: 0,
            nbits: 0,
        }
    }

    fn pull(&mut self, bits: u32) -> u32 {
        while self.nbits < bits {
            self.acc |= (self.bytes[self.pos] as u64) << self.nbits;
            self.pos += 1;
            self.nbits += 8;
        }
        let v = (self.acc & ((1u64 << bits) - 1)) as u32;
        self.acc >>= bits;
        self.nbits -= bits;
        v
    }

    fn remainder(&self) -> u64 {
        self.acc
    }
}

fn quantize(v: f64, b: ComponentBounds, levels: u32) -> (u32, bool) {
    let t = (v - b.lo) / b.range() * levels as f64;
    // f64::round is round-half-away-from-zero on every platform.
    let r = t.round();
    if r.is_nan() || r < 0.0 {
        (0, true)
    } else if r > levels as f64 {
        (levels, true)
    } else {
        (r as u32, false)
    }
}

fn dequantize(q: u32, b: ComponentBounds, levels: u32) -> f64 {
    b.lo + q as f64 / levels as f64 * b.range()
}

/// Drops `w`, quantizes x, y, z of every joint and bit-packs them in joint
/// order. Out-of-range components are clamped and counted in `stats`.
pub fn encode_frame(
    frame: &PoseFrame,
    table: &BoundsTable,
    stats: &mut EncoderStats,
) -> Result<EncodedFrame, CodecError> {
    table.check_joints(frame.rotations.len())?;
    let levels = table.levels();
    let bits = table.bits as u32;
    let mut w = BitWriter::with_capacity(table.payload_len());
    for (q, jb) in frame.rotations.iter().zip(&table.joints) {
        if q.w < W_FLOOR {
            stats.below_w_floor += 1;
        }
        for (v, b) in [q.x, q.y, q.z].into_iter().zip(jb.components()) {
            let (qi, clamped) = quantize(v, b, levels);
            stats.clamped += clamped as u64;
            w.push(qi, bits);
        }
    }
    stats.frames += 1;
    Ok(EncodedFrame {
        timestamp_us: frame.timestamp_us,
        root_translation: frame.root_translation,
        payload: w.finish(),
    })
}

/// Inverse of [`encode_frame`]: dequantizes x, y, z and rebuilds
/// `w = sqrt(max(0, 1 - x² - y² - z²))`.
pub fn decode_frame(
    enc: &EncodedFrame,
    table: &BoundsTable,
    skeleton: &Skeleton,
) -> Result<PoseFrame, CodecError> {
    table.check_joints(skeleton.joint_count())?;
    if enc.payload.len() != table.payload_len() {
        return Err(CodecError::FrameCorrupt(format!(
            "payload is {} bytes, table expects {}",
            enc.payload.len(),
            table.payload_len()
        )));
    }
    let levels = table.levels();
    let bits = table.bits as u32;
    let mut r = BitReader::new(&enc.payload);
    let mut rotations = Vec::with_capacity(table.joint_count());
    for jb in &table.joints {
        let [bx, by, bz] = jb.components();
        let x = dequantize(r.pull(bits), bx, levels);
        let y = dequantize(r.pull(bits), by, levels);
        let z = dequantize(r.pull(bits), bz, levels);
        let w = (1.0 - x * x - y * y - z * z).max(0.0).sqrt();
        let q = UnitQuat::new(x, y, z, w)
            .canonicalize()
            .map_err(|e| CodecError::FrameCorrupt(e.to_string()))?;
        rotations.push(q);
    }
    if r.remainder() != 0 {
        return Err(CodecError::FrameCorrupt("nonzero padding bits".into()));
    }
    Ok(PoseFrame {
        timestamp_us: enc.timestamp_us,
        root_translation: enc.root_translation,
        rotations,
    })
}

/// Upper bound, in radians, on the geodesic error of one joint after an
/// encode/decode round trip, for quaternions inside the table's ranges with
/// `w >= W_FLOOR`.
///
/// Per joint: the quantization step `s_c = (hi - lo) / (2^bits - 1)` leaves
/// an (x, y, z) error of at most `e = sqrt(Σ (s_c / 2)²)`. Rebuilding `w`
/// adds at most `e · v / sqrt(1 - v²)` with `v = |xyz|max + e`, where
/// `|xyz|max = sqrt(1 - w_lo²)` and `w_lo` is the larger of [`W_FLOOR`] and
/// the smallest `w` the ranges allow. The chord `c` between the quaternions
/// then bounds the rotation angle by `4 · asin(c / 2)`. The worst joint wins.
pub fn max_angular_error(table: &BoundsTable) -> f64 {
    let levels = table.levels() as f64;
    table
        .joints
        .iter()
        .map(|jb| {
            let comps = jb.components();
            let e = comps
                .iter()
                .map(|b| {
                    let half_step = 0.5 * b.range() / levels;
                    half_step * half_step
                })
                .sum::<f64>()
                .sqrt();
            let reach: f64 = comps.iter().map(|b| b.max_abs() * b.max_abs()).sum();
            let w_min = (1.0 - reach).max(0.0).sqrt();
            let w_lo = w_min.max(W_FLOOR);
            let v = (1.0 - w_lo * w_lo).sqrt() + e;
            if v >= 1.0 {
                return std::f64::consts::PI;
            }
            let dw = e * v / (1.0 - v * v).sqrt();
            let chord = (e * e + dw * dw).sqrt();
            4.0 * (0.5 * chord).min(1.0).asin()
        })
        .fold(0.0, f64::max)
}
