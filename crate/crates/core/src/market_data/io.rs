//! CSV and JSONL snapshot files.
//!
//! CSV: header `ts_ms,ap1,av1,bp1,bv1,...,ap10,av10,bp10,bv10`, one row per
//! tick. JSONL: one `{"ts":..,"asks":[[p,v]×10],"bids":[[p,v]×10]}` per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::snapshot::{Level, LobSnapshot, TickSeries, DEPTH};
use super::MarketDataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guesses from the file extension; anything but `.jsonl`/`.json` is CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(format!("unknown format {other:?} (expected csv or jsonl)")),
        }
    }
}

pub fn csv_header() -> String {
    let mut cols = vec!["ts_ms".to_string()];
    for i in 1..=DEPTH {
        cols.extend([format!("ap{i}"), format!("av{i}"), format!("bp{i}"), format!("bv{i}")]);
    }
    cols.join(",")
}

pub fn csv_row(s: &LobSnapshot) -> String {
    let mut out = s.ts.to_string();
    for i in 0..DEPTH {
        for v in [s.asks[i].price, s.asks[i].volume, s.bids[i].price, s.bids[i].volume] {
            out.push(',');
            out.push_str(&v.to_string());
        }
    }
    out
}

/// Wire/JSONL form; levels kept as raw vectors so a wrong count surfaces as
/// a book violation rather than a serde error.
#[derive(Debug, Serialize, Deserialize)]
struct WireSnapshot {
    ts: i64,
    asks: Vec<Level>,
    bids: Vec<Level>,
}

pub fn json_line(s: &LobSnapshot) -> String {
    serde_json::to_string(s).expect("snapshot serializes")
}

/// Parses one JSONL/wire line. `line` is the 1-based position for errors.
pub fn parse_json_line(text: &str, line: usize) -> Result<LobSnapshot, MarketDataError> {
    let wire: WireSnapshot = serde_json::from_str(text).map_err(|e| MarketDataError::Malformed {
        line,
        reason: e.to_string(),
    })?;
    LobSnapshot::new(wire.ts, &wire.asks, &wire.bids).map_err(|violation| MarketDataError::Invariant { line, violation })
}

pub fn parse_csv_row(text: &str, line: usize) -> Result<LobSnapshot, MarketDataError> {
    let fields: Vec<&str> = text.trim_end_matches('\r').split(',').collect();
    if fields.len() != 1 + 4 * DEPTH {
        return Err(MarketDataError::Malformed {
            line,
            reason: format!("expected {} fields, found {}", 1 + 4 * DEPTH, fields.len()),
        });
    }
    let ts = fields[0].trim().parse::<i64>().map_err(|e| MarketDataError::Malformed {
        line,
        reason: format!("ts_ms: {e}"),
    })?;
    let mut nums = Vec::with_capacity(4 * DEPTH);
    for (col, f) in fields[1..].iter().enumerate() {
        let v = f.trim().parse::<f64>().map_err(|e| MarketDataError::Malformed {
            line,
            reason: format!("column {}: {e}", col + 2),
        })?;
        nums.push(v);
    }
    let mut asks = Vec::with_capacity(DEPTH);
    let mut bids = Vec::with_capacity(DEPTH);
    for chunk in nums.chunks_exact(4) {
        asks.push(Level { price: chunk[0], volume: chunk[1] });
        bids.push(Level { price: chunk[2], volume: chunk[3] });
    }
    LobSnapshot::new(ts, &asks, &bids).map_err(|violation| MarketDataError::Invariant { line, violation })
}

/// Reads a whole snapshot stream. Equal timestamps keep the last row;
/// a timestamp regression is an error.
pub fn read_from<R: BufRead>(reader: R, format: Format) -> Result<TickSeries, MarketDataError> {
    let mut series = TickSeries::new("", format!("{format:?}").to_lowercase());
    let mut lines = reader.lines().enumerate();
    if format == Format::Csv {
        match lines.next() {
            None => return Err(MarketDataError::Empty),
            Some((_, header)) => {
                let header = header?;
                if header.trim_end_matches('\r') != csv_header() {
                    return Err(MarketDataError::Malformed {
                        line: 1,
                        reason: "unexpected CSV header".into(),
                    });
                }
            }
        }
    }
    for (idx, text) in lines {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let line = idx + 1;
        let snap = match format {
            Format::Csv => parse_csv_row(&text, line)?,
            Format::Jsonl => parse_json_line(&text, line)?,
        };
        let ts = snap.ts;
        if !series.push(snap) {
            return Err(MarketDataError::Malformed {
                line,
                reason: format!("timestamp {ts} precedes the previous row"),
            });
        }
    }
    if series.is_empty() {
        return Err(MarketDataError::Empty);
    }
    Ok(series)
}

pub fn read_snapshots(path: &Path, format: Format) -> Result<TickSeries, MarketDataError> {
    let mut series = read_from(BufReader::new(File::open(path)?), format)?;
    series.source = path.display().to_string();
    Ok(series)
}

pub fn write_to<W: Write>(mut w: W, series: &TickSeries, format: Format) -> Result<(), MarketDataError> {
    if format == Format::Csv {
        writeln!(w, "{}", csv_header())?;
    }
    for s in &series.snapshots {
        match format {
            Format::Csv => writeln!(w, "{}", csv_row(s))?,
            Format::Jsonl => writeln!(w, "{}", json_line(s))?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_snapshots(path: &Path, series: &TickSeries, format: Format) -> Result<(), MarketDataError> {
    write_to(BufWriter::new(File::create(path)?), series, format)
}
