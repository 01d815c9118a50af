//! Line-protocol depth-stream collector and a local replay server.
//!
//! The transport reader runs on its own thread and hands parsed events to
//! the caller's thread through a bounded channel; the caller writes to the
//! sink in arrival order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::io::{csv_header, csv_row, json_line, parse_json_line, Format};
use super::snapshot::LobSnapshot;
use super::MarketDataError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Keep reconnecting after EOF (live feed). When false, EOF ends the run.
    pub follow: bool,
    /// Consecutive failed connection attempts tolerated before giving up.
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub queue_capacity: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            follow: false,
            max_retries: 5,
            initial_backoff_ms: 100,
            max_backoff_ms: 5_000,
            queue_capacity: 1024,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    /// Out-of-order drops plus successful reconnects.
    pub gaps: usize,
    pub out_of_order: usize,
    pub protocol_violations: usize,
    pub reconnects: usize,
}

pub trait SnapshotSink {
    fn write(&mut self, snap: &LobSnapshot) -> Result<(), MarketDataError>;

    fn finish(&mut self) -> Result<(), MarketDataError> {
        Ok(())
    }
}

impl SnapshotSink for Vec<LobSnapshot> {
    fn write(&mut self, snap: &LobSnapshot) -> Result<(), MarketDataError> {
        self.push(snap.clone());
        Ok(())
    }
}

/// Streams snapshots into a CSV or JSONL file.
pub struct FileSink {
    out: BufWriter<File>,
    format: Format,
}

impl FileSink {
    pub fn create(path: &Path, format: Format) -> Result<Self, MarketDataError> {
        let mut out = BufWriter::new(File::create(path)?);
        if format == Format::Csv {
            writeln!(out, "{}", csv_header())?;
        }
        Ok(Self { out, format })
    }
}

impl SnapshotSink for FileSink {
    fn write(&mut self, snap: &LobSnapshot) -> Result<(), MarketDataError> {
        match self.format {
            Format::Csv => writeln!(self.out, "{}", csv_row(snap))?,
            Format::Jsonl => writeln!(self.out, "{}", json_line(snap))?,
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), MarketDataError> {
        self.out.flush()?;
        Ok(())
    }
}

enum Event {
    Snapshot(Box<LobSnapshot>),
    Violation,
    Reconnected,
    Failed(String),
}

fn backoff(cfg: &StreamConfig, attempt: u32) -> Duration {
    let ms = cfg.initial_backoff_ms.saturating_mul(1u64 << attempt.min(20));
    Duration::from_millis(ms.min(cfg.max_backoff_ms))
}

fn connect_with_retry(addr: &str, cfg: &StreamConfig) -> Result<TcpStream, String> {
    let mut last = String::new();
    for attempt in 0..=cfg.max_retries {
        if attempt > 0 {
            thread::sleep(backoff(cfg, attempt - 1));
        }
        let addrs = match addr.to_socket_addrs() {
            Ok(a) => a.collect::<Vec<_>>(),
            Err(e) => return Err(format!("cannot resolve {addr}: {e}")),
        };
        match TcpStream::connect(&addrs[..]) {
            Ok(s) => return Ok(s),
            Err(e) => {
                log::warn!("connect to {addr} failed (attempt {}): {e}", attempt + 1);
                last = e.to_string();
            }
        }
    }
    Err(format!("giving up on {addr} after {} attempts: {last}", cfg.max_retries + 1))
}

fn reader_loop(addr: String, cfg: StreamConfig, tx: SyncSender<Event>) {
    let mut line_no = 0usize;
    let mut connected_once = false;
    loop {
        let stream = match connect_with_retry(&addr, &cfg) {
            Ok(s) => s,
            Err(e) => {
                // A follow-mode feed that disappears for good ends the run
                // normally once anything was received.
                if !connected_once {
                    let _ = tx.send(Event::Failed(e));
                }
                return;
            }
        };
        if connected_once && tx.send(Event::Reconnected).is_err() {
            return;
        }
        connected_once = true;
        let mut broken = false;
        for line in BufReader::new(stream).lines() {
            let text = match line {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("read error on {addr}: {e}");
                    broken = true;
                    break;
                }
            };
            line_no += 1;
            if text.trim().is_empty() {
                continue;
            }
            let ev = match parse_json_line(&text, line_no) {
                Ok(s) => Event::Snapshot(Box::new(s)),
                Err(e) => {
                    log::warn!("skipping message: {e}");
                    Event::Violation
                }
            };
            if tx.send(ev).is_err() {
                return;
            }
        }
        if !broken && !cfg.follow {
            return;
        }
    }
}

/// Connects to `addr` (`host:port`, optionally prefixed `tcp://`) and
/// appends every well-formed depth message to `sink`.
///
/// Messages sharing a timestamp collapse to the last one; a message older
/// than the last accepted one is dropped and counted as a gap.
pub fn collect_stream<S: SnapshotSink + ?Sized>(
    addr: &str,
    sink: &mut S,
    cfg: &StreamConfig,
) -> Result<IngestReport, MarketDataError> {
    if cfg.queue_capacity == 0 {
        return Err(MarketDataError::InvalidConfig("queue_capacity must be >= 1".into()));
    }
    let addr = addr.strip_prefix("tcp://").unwrap_or(addr).to_string();
    let (tx, rx) = sync_channel(cfg.queue_capacity);
    let reader = {
        let cfg = cfg.clone();
        thread::spawn(move || reader_loop(addr, cfg, tx))
    };

    let mut report = IngestReport::default();
    let mut pending: Option<LobSnapshot> = None;
    let mut failure = None;
    for ev in rx {
        match ev {
            Event::Snapshot(snap) => match &mut pending {
                Some(p) if snap.ts == p.ts => *p = *snap,
                Some(p) if snap.ts < p.ts => {
                    log::warn!("dropping out-of-order message ts={} < {}", snap.ts, p.ts);
                    report.out_of_order += 1;
                    report.gaps += 1;
                }
                _ => {
                    if let Some(prev) = pending.replace(*snap) {
                        sink.write(&prev)?;
                        report.rows += 1;
                    }
                }
            },
            Event::Violation => report.protocol_violations += 1,
            Event::Reconnected => {
                report.reconnects += 1;
                report.gaps += 1;
            }
            Event::Failed(e) => failure = Some(e),
        }
    }
    reader
        .join()
        .map_err(|_| MarketDataError::Connection("reader thread panicked".into()))?;
    if let Some(e) = failure {
        return Err(MarketDataError::Connection(e));
    }
    if let Some(last) = pending {
        sink.write(&last)?;
        report.rows += 1;
    }
    sink.finish()?;
    Ok(report)
}

/// Serves a fixed list of lines over TCP on 127.0.0.1, one client at a time,
/// in order. With `drop_after = Some(n)` each connection is closed after `n`
/// lines and the next connection resumes where it stopped. Once every line
/// has been sent the listener shuts down.
pub struct ReplayServer {
    addr: String,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl ReplayServer {
    pub fn start(lines: Vec<String>, drop_after: Option<usize>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?.to_string();
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = Arc::clone(&stop);
        let handle = thread::spawn(move || {
            let mut next = 0usize;
            while next < lines.len() && !stop_flag.load(Ordering::Relaxed) {
                let stream = match listener.accept() {
                    Ok((s, _)) => s,
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(2));
                        continue;
                    }
                    Err(_) => return,
                };
                let _ = stream.set_nonblocking(false);
                let mut out = BufWriter::new(stream);
                let end = drop_after.map_or(lines.len(), |n| (next + n).min(lines.len()));
                for line in &lines[next..end] {
                    if writeln!(out, "{line}").is_err() {
                        break;
                    }
                }
                let _ = out.flush();
                next = end;
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    /// Serves the lines of a file.
    pub fn from_file(path: &Path, drop_after: Option<usize>) -> std::io::Result<Self> {
        let lines = BufReader::new(File::open(path)?).lines().collect::<Result<Vec<_>, _>>()?;
        Self::start(lines, drop_after)
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }
}

impl Drop for ReplayServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
