use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::{BehaviorRecord, Corpus, VocabSizes};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Jsonl,
    Csv,
}

impl LogFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(LogFormat::Jsonl),
            "csv" => Some(LogFormat::Csv),
            _ => None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    user: u64,
    day: u32,
    slot: u32,
    loc: u32,
    event: u32,
    behavior: u32,
    pos: u64,
    #[serde(default)]
    date: Option<u32>,
    #[serde(default)]
    generated: Option<bool>,
}

impl From<Row> for BehaviorRecord {
    fn from(r: Row) -> Self {
        let _ = r.generated;
        BehaviorRecord {
            user_id: r.user,
            day: r.day,
            slot: r.slot,
            location: r.loc,
            event: r.event,
            behavior: r.behavior,
            seq_pos: r.pos,
            date: r.date,
        }
    }
}

/// Reads a behavior log and returns it grouped by user and ordered by
/// position. Every index is checked against `sizes`.
pub fn ingest_logs(path: &Path, format: LogFormat, sizes: &VocabSizes) -> Result<Corpus> {
    sizes.validate()?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut numbered = Vec::new();
    match format {
        LogFormat::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line_no = i + 1;
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: Row = serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
                    line: line_no,
                    reason: e.to_string(),
                })?;
                let rec = BehaviorRecord::from(row);
                sizes.check_record(&rec, line_no)?;
                numbered.push((line_no, rec));
            }
        }
        LogFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
            let headers = reader
                .headers()
                .map_err(|e| Error::MalformedRow { line: 1, reason: e.to_string() })?
                .clone();
            let expected = ["user", "day", "slot", "loc", "event", "behavior", "pos"];
            if headers.len() < expected.len() || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
                return Err(Error::MalformedRow {
                    line: 1,
                    reason: format!("header must start with {}", expected.join(",")),
                });
            }
            for (i, row) in reader.deserialize::<Row>().enumerate() {
                let line_no = i + 2;
                let row = row.map_err(|e| Error::MalformedRow {
                    line: line_no,
                    reason: e.to_string(),
                })?;
                let rec = BehaviorRecord::from(row);
                sizes.check_record(&rec, line_no)?;
                numbered.push((line_no, rec));
            }
        }
    }
    Corpus::from_numbered(numbered)
}

pub fn write_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in corpus.records() {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let with_date = corpus.records().any(|r| r.date.is_some());
    let io = |e| Error::io(path, e);
    if with_date {
        writeln!(w, "user,day,slot,loc,event,behavior,pos,date").map_err(io)?;
    } else {
        writeln!(w, "user,day,slot,loc,event,behavior,pos").map_err(io)?;
    }
    for r in corpus.records() {
        write!(
            w,
            "{},{},{},{},{},{},{}",
            r.user_id, r.day, r.slot, r.location, r.event, r.behavior, r.seq_pos
        )
        .map_err(io)?;
        if with_date {
            match r.date {
                Some(d) => write!(w, ",{d}").map_err(io)?,
                None => write!(w, ",").map_err(io)?,
            }
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}
