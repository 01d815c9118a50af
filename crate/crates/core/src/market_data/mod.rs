//! Snapshot types, file formats, the depth-stream collector and the
//! synthetic book generator.

pub mod io;
pub mod snapshot;
pub mod stream;
pub mod synth;

pub use io::{read_snapshots, write_snapshots, Format};
pub use snapshot::{BookViolation, Level, LobSnapshot, Side, TickSeries, DEPTH};
pub use stream::{collect_stream, FileSink, IngestReport, ReplayServer, SnapshotSink, StreamConfig};
pub use synth::{synth_lob, Regime, SynthConfig};

#[derive(Debug, thiserror::Error)]
pub enum MarketDataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: {violation}")]
    Invariant { line: usize, violation: BookViolation },
    #[error("input contains no snapshots")]
    Empty,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("connection: {0}")]
    Connection(String),
}
