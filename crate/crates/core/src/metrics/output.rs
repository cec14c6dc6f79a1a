use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{MetricsTrace, StrategySummary};
use crate::error::{Error, Result};

pub const TRACE_HEADER: [&str; 7] = ["run", "frame", "u", "of_events", "trained", "A", "CTB"];

#[derive(Serialize)]
struct Row {
    run: usize,
    frame: usize,
    u: u8,
    of_events: u32,
    trained: u8,
    #[serde(rename = "A")]
    a: f64,
    #[serde(rename = "CTB")]
    ctb: Option<f64>,
}

/// Writes one run as CSV. Frame 0 carries `A_0` and an empty CTB.
pub fn write_trace_csv<W: Write>(trace: &MetricsTrace, out: W) -> Result<()> {
    trace.validate()?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.serialize(Row {
        run: trace.run,
        frame: 0,
        u: 0,
        of_events: 0,
        trained: 0,
        a: trace.a(0),
        ctb: None,
    })
    .map_err(csv_error)?;
    for i in 1..=trace.n() {
        w.serialize(Row {
            run: trace.run,
            frame: i,
            u: trace.u[i - 1],
            of_events: trace.of_events[i - 1],
            trained: trace.trained[i - 1] as u8,
            a: trace.a(i),
            ctb: Some(trace.ctb_frame(i)?),
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Validation(format!("csv: {other:?}")),
    }
}

pub fn write_summary_json(summary: &StrategySummary, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}
