//! Replay producers, recording sinks, latency benches, the offline
//! corrective run and synthetic motion.

mod corrective;
mod latency;
mod record;
mod recording;
mod replay;
pub mod synth;

use thiserror::Error;

pub use corrective::{corrective_experiment, find_extrema, CorrectiveOutcome, CorrectiveReport, ESTIMATE_HOP};
pub use latency::{
    percentile, run_latency_experiment, BenchParams, FlowReport, LatencyCollector, LatencyProbe, LatencyReport,
    Scenario, StageStats, PRODUCE_TO_CONSUME,
};
pub use record::{record_sink, RecordOptions, RecordStats};
pub use recording::{frame_len, BufferedFile, Recording, RecordingHeader, RecordingWriter, Truncate, HEADER_LEN, MAGIC};
pub use replay::{replay_producer, LocalSink, PacketSink, ReplayOptions, ReplayStats};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("recording format: {0}")]
    Format(String),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error(transparent)]
    Router(#[from] crate::router::RouterError),
    #[error(transparent)]
    Rhythm(#[from] crate::rhythm::RhythmError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("worker thread panicked")]
    Thread,
}
