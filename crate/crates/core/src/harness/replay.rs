//! Timed replay of a recording into a packet sink.

use std::sync::atomic::{AtomicBool, Ordering};

use super::recording::Recording;
use super::HarnessError;
use crate::clock;
use crate::codec::{encode_frame, BoundsTable, EncoderStats};
use crate::router::ProducerHandle;
use crate::transport::{Client, SignalPacket, SignalType};

/// Destination of replayed pose payloads.
pub trait PacketSink {
    /// Emits one encoded frame; `t_produce_us` becomes the packet's send
    /// timestamp.
    fn emit(&mut self, payload: &[u8], t_produce_us: u64) -> Result<(), HarnessError>;
}

impl PacketSink for Client {
    fn emit(&mut self, payload: &[u8], t_produce_us: u64) -> Result<(), HarnessError> {
        self.send_at(payload, SignalType::Pose, t_produce_us)?;
        Ok(())
    }
}

/// Publishes straight into a local router stream.
pub struct LocalSink {
    producer: ProducerHandle,
    seq: u32,
}

impl LocalSink {
    pub fn new(producer: ProducerHandle) -> Self {
        LocalSink { producer, seq: 0 }
    }
}

impl PacketSink for LocalSink {
    fn emit(&mut self, payload: &[u8], t_produce_us: u64) -> Result<(), HarnessError> {
        self.seq += 1;
        let d = self.producer.descriptor();
        self.producer
            .publish(&SignalPacket::new(d.signal_type, d.user_id, self.seq, t_produce_us, payload.to_vec()))?;
        Ok(())
    }
}

/// Keeps every payload; for tests and dry runs.
impl PacketSink for Vec<Vec<u8>> {
    fn emit(&mut self, payload: &[u8], _t_produce_us: u64) -> Result<(), HarnessError> {
        self.push(payload.to_vec());
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReplayOptions {
    /// Emission rate; defaults to the recording's nominal rate. Frames are
    /// never resampled, only emitted faster or slower.
    pub fps: Option<f64>,
    pub looped: bool,
    /// Stop after this much wall time.
    pub max_duration_us: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct ReplayStats {
    pub emitted: u64,
    pub loops: u64,
    pub encoder: EncoderStats,
    /// Wall-clock emission time of every packet.
    pub emit_us: Vec<u64>,
}

impl ReplayStats {
    /// Absolute deviation of each inter-emit interval from the nominal one.
    pub fn interval_jitter_us(&self, fps: f64) -> Vec<u64> {
        let nominal = 1e6 / fps;
        self.emit_us
            .windows(2)
            .map(|w| ((w[1] - w[0]) as f64 - nominal).abs().round() as u64)
            .collect()
    }
}

/// Emits every frame of `recording` on an absolute-deadline timer, encoded
/// with `table`. When looping, each pass shifts frame timestamps by the
/// recording's span plus one interval so they keep increasing.
pub fn replay_producer(
    recording: &Recording,
    table: &BoundsTable,
    sink: &mut dyn PacketSink,
    options: &ReplayOptions,
    stop: &AtomicBool,
) -> Result<ReplayStats, HarnessError> {
    recording.validate()?;
    table.validate()?;
    let fps = options.fps.unwrap_or(recording.header.nominal_fps as f64);
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(HarnessError::Format(format!("fps {fps}")));
    }
    let mut stats = ReplayStats::default();
    let n = recording.frames.len();
    if n == 0 {
        return Ok(stats);
    }
    let loop_shift = recording.duration_us() + if n > 1 { recording.duration_us() / (n as u64 - 1) } else { 1 };
    let interval = 1e6 / fps;
    let start = clock::now_us();
    let end = options.max_duration_us.map(|d| start + d);
    let mut buf = Vec::with_capacity(table.frame_len());
    let mut k: u64 = 0;
    'outer: loop {
        for frame in &recording.frames {
            let deadline = start + (k as f64 * interval).round() as u64;
            if stop.load(Ordering::Relaxed) || end.is_some_and(|e| deadline >= e) {
                break 'outer;
            }
            clock::sleep_until_us(deadline);
            let mut enc = encode_frame(frame, table, &mut stats.encoder)?;
            enc.timestamp_us += stats.loops * loop_shift;
            buf.clear();
            enc.write_to(&mut buf);
            let now = clock::now_us();
            sink.emit(&buf, now)?;
            stats.emit_us.push(now);
            stats.emitted += 1;
            k += 1;
        }
        if !options.looped {
            break;
        }
        stats.loops += 1;
    }
    Ok(stats)
}
