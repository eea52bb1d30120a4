//! Recording sink: subscribes to pose streams and writes decoded frames.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use log::debug;

use super::recording::{RecordingWriter, Truncate};
use super::HarnessError;
use crate::clock;
use crate::codec::{decode_frame, BoundsTable, EncodedFrame};
use crate::model::Skeleton;
use crate::router::{ConsumerHandle, ConsumerMode, Poll};
use crate::transport::SignalType;

#[derive(Debug, Clone, Default)]
pub struct RecordOptions {
    /// Stop after this much wall time.
    pub max_duration_us: Option<u64>,
    /// Stop once nothing has arrived for this long (after the first frame).
    pub idle_timeout_us: Option<u64>,
    /// Stop after this many frames.
    pub max_frames: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct RecordStats {
    pub frames: u64,
    pub gaps: u64,
    pub undecodable: u64,
    /// Frames whose timestamp did not advance (other streams, repeats).
    pub out_of_order: u64,
}

/// Drains `consumer` into `writer` in arrival order until `stop` is set or
/// an option limit is hit. Non-pose packets are ignored.
pub fn record_sink<W: Write + Truncate>(
    consumer: &mut ConsumerHandle,
    table: &BoundsTable,
    skeleton: &Skeleton,
    writer: &mut RecordingWriter<W>,
    options: &RecordOptions,
    stop: &AtomicBool,
) -> Result<RecordStats, HarnessError> {
    if consumer.mode() != ConsumerMode::Every {
        return Err(HarnessError::Format("record sink needs an Every-mode consumer".into()));
    }
    let mut stats = RecordStats::default();
    let start = clock::now_us();
    let mut last_arrival = None;
    let mut last_ts = None;
    let mut poll = Poll::default();
    loop {
        let stopping = stop.load(Ordering::Relaxed);
        consumer.poll_into(256, &mut poll);
        stats.gaps += poll.gap;
        let now = clock::now_us();
        if !poll.packets.is_empty() {
            last_arrival = Some(now);
        }
        for p in &poll.packets {
            if p.signal_type != SignalType::Pose {
                continue;
            }
            let frame = match EncodedFrame::from_bytes(&p.payload, table).and_then(|e| decode_frame(&e, table, skeleton)) {
                Ok(f) => f,
                Err(e) => {
                    debug!("undecodable frame from user {}: {e}", p.user_id);
                    stats.undecodable += 1;
                    continue;
                }
            };
            if last_ts.is_some_and(|t| frame.timestamp_us <= t) {
                stats.out_of_order += 1;
                continue;
            }
            last_ts = Some(frame.timestamp_us);
            writer.write_frame(&frame)?;
            stats.frames += 1;
            if options.max_frames.is_some_and(|m| stats.frames >= m) {
                return Ok(stats);
            }
        }
        if stopping
            || options.max_duration_us.is_some_and(|d| now - start >= d)
            || options.idle_timeout_us.is_some_and(|d| last_arrival.is_some_and(|t| now - t >= d))
        {
            return Ok(stats);
        }
        if poll.packets.is_empty() {
            std::thread::sleep(Duration::from_millis(2));
        }
    }
}
