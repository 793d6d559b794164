//! Line-delimited JSON trace files.
//!
//! One event per line with the fields `kind`, `stage`, `module_id`,
//! `item_id`, `t_start_s`, `t_end_s`. Times are written as decimal seconds
//! with nine fractional digits.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use super::{EventKind, ExecutionTrace, TraceEvent};
use crate::ExecutionMode;

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

pub fn write_trace_events<W: Write>(mut out: W, events: &[TraceEvent]) -> io::Result<()> {
    for e in events {
        let kind = match e.kind {
            EventKind::Load => "load",
            EventKind::Exec => "exec",
        };
        let item = e
            .item_id
            .as_deref()
            .map(quoted)
            .unwrap_or_else(|| "null".to_string());
        writeln!(
            out,
            "{{\"kind\":\"{kind}\",\"stage\":{},\"module_id\":{},\"item_id\":{item},\"t_start_s\":{:.9},\"t_end_s\":{:.9}}}",
            quoted(&e.stage),
            quoted(&e.module_id),
            e.t_start_s,
            e.t_end_s,
        )?;
    }
    Ok(())
}

pub fn read_trace_events<R: BufRead>(input: R) -> Result<Vec<TraceEvent>, TraceIoError> {
    let mut events = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line).map_err(|source| TraceIoError::Parse {
            line: n + 1,
            source,
        })?;
        events.push(event);
    }
    Ok(events)
}

pub fn write_trace(path: &Path, trace: &ExecutionTrace) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_trace_events(&mut out, &trace.events)?;
    out.flush()
}

/// Reads a trace file; the mode is not stored in the file.
pub fn read_trace(path: &Path, mode: ExecutionMode) -> Result<ExecutionTrace, TraceIoError> {
    let events = read_trace_events(BufReader::new(File::open(path)?))?;
    Ok(ExecutionTrace::new(mode, events))
}
