use lobforge_core::market_data::{
    collect_stream, read_snapshots, synth_lob, write_snapshots, Format, LobSnapshot, MarketDataError, ReplayServer,
    StreamConfig, SynthConfig,
};

fn stream(lines: Vec<String>, drop_after: Option<usize>) -> (Vec<LobSnapshot>, lobforge_core::market_data::IngestReport) {
    let server = ReplayServer::start(lines, drop_after).unwrap();
    let cfg = StreamConfig { follow: drop_after.is_some(), max_retries: 2, ..Default::default() };
    let mut sink = Vec::new();
    let report = collect_stream(server.addr(), &mut sink, &cfg).unwrap();
    (sink, report)
}

fn malformed_line(e: MarketDataError) -> usize {
    match e {
        MarketDataError::Malformed { line, .. } => line,
        e => panic!("expected a malformed-row error, got {e}"),
    }
}

pub fn ingestion() -> String {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let series = synth_lob(&SynthConfig { n_ticks: 10_000, seed: 77, ..Default::default() }).unwrap();

    // Round trips in both formats, and across them.
    write_snapshots(&d.join("a.csv"), &series, Format::Csv).unwrap();
    write_snapshots(&d.join("a.jsonl"), &series, Format::Jsonl).unwrap();
    let from_csv = read_snapshots(&d.join("a.csv"), Format::Csv).unwrap();
    let from_jsonl = read_snapshots(&d.join("a.jsonl"), Format::Jsonl).unwrap();
    assert!(from_csv.snapshots == series.snapshots, "CSV round trip lost data");
    assert!(from_jsonl.snapshots == series.snapshots, "JSONL round trip lost data");
    write_snapshots(&d.join("b.jsonl"), &from_csv, Format::Jsonl).unwrap();
    write_snapshots(&d.join("b.csv"), &read_snapshots(&d.join("b.jsonl"), Format::Jsonl).unwrap(), Format::Csv).unwrap();
    assert!(std::fs::read(d.join("a.csv")).unwrap() == std::fs::read(d.join("b.csv")).unwrap());

    let lines: Vec<String> = std::fs::read_to_string(d.join("a.jsonl")).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 10_000);

    // Clean replay, in one connection and across dropped connections.
    let (got, report) = stream(lines.clone(), None);
    assert!(got == from_jsonl.snapshots, "replayed stream differs from file ingestion");
    assert_eq!((report.rows, report.gaps), (10_000, 0));
    let (got, report) = stream(lines.clone(), Some(3_000));
    assert!(got == from_jsonl.snapshots, "stream with reconnects differs from file ingestion");
    assert_eq!((report.rows, report.reconnects), (10_000, 3));

    // An old message injected mid-stream is dropped and counted.
    let mut injected = lines.clone();
    injected.insert(5_000, lines[100].clone());
    let (got, report) = stream(injected.clone(), None);
    assert!(got == from_jsonl.snapshots);
    assert_eq!((report.rows, report.gaps, report.out_of_order), (10_000, 1, 1));
    std::fs::write(d.join("injected.jsonl"), injected.join("\n")).unwrap();
    assert_eq!(malformed_line(read_snapshots(&d.join("injected.jsonl"), Format::Jsonl).unwrap_err()), 5_001);

    // A truncated message is skipped as a protocol violation.
    let mut truncated = lines.clone();
    let cut = truncated[6_000].len() / 2;
    truncated[6_000].truncate(cut);
    let (got, report) = stream(truncated.clone(), None);
    let mut expected = from_jsonl.snapshots.clone();
    expected.remove(6_000);
    assert!(got == expected);
    assert_eq!((report.rows, report.protocol_violations, report.gaps), (9_999, 1, 0));
    std::fs::write(d.join("truncated.jsonl"), truncated.join("\n")).unwrap();
    assert_eq!(malformed_line(read_snapshots(&d.join("truncated.jsonl"), Format::Jsonl).unwrap_err()), 6_001);

    "10^4 snapshots: lossless round trips, stream equals file, injected line dropped (gap 1), truncated line skipped (1 violation)".into()
}
