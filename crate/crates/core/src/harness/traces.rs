//! Gaze traces: per-user head orientation time series.
//!
//! File format: CSV with header `user_id,timestamp_s,alpha,beta,gamma`,
//! angles in radians. Rows may appear in any order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sphere::{euler_to_latlon, EulerOrientation, LatLon};

pub const TRACE_HEADER: [&str; 5] = ["user_id", "timestamp_s", "alpha", "beta", "gamma"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GazeSample {
    pub t: f64,
    pub orientation: EulerOrientation,
}

/// One user's samples with strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeTrace {
    pub user: u32,
    samples: Vec<GazeSample>,
}

impl GazeTrace {
    /// Sorts `samples` by time; equal or non-finite timestamps are rejected.
    pub fn new(user: u32, mut samples: Vec<GazeSample>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| !s.t.is_finite()) {
            return Err(Error::domain(format!("user {user}: non-finite timestamp {}", s.t)));
        }
        samples.sort_by(|a, b| a.t.total_cmp(&b.t));
        if let Some(w) = samples.windows(2).find(|w| w[1].t <= w[0].t) {
            return Err(Error::domain(format!(
                "user {user}: timestamps not strictly increasing at t = {}",
                w[1].t
            )));
        }
        Ok(GazeTrace { user, samples })
    }

    pub fn samples(&self) -> &[GazeSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Latest sample taken at or before `t`.
    pub fn at_or_before(&self, t: f64) -> Option<&GazeSample> {
        let n = self.samples.partition_point(|s| s.t <= t);
        n.checked_sub(1).map(|i| &self.samples[i])
    }

    /// Gaze directions in sample order.
    pub fn path(&self) -> Result<Vec<LatLon>> {
        self.samples.iter().map(|s| euler_to_latlon(s.orientation)).collect()
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads traces from CSV text. `origin` only labels diagnostics.
pub fn parse_traces<R: Read>(reader: R, origin: &Path) -> Result<Vec<GazeTrace>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(origin, 1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(parse_err(origin, 1, format!("expected header {}", TRACE_HEADER.join(","))));
    }
    let mut users: BTreeMap<u32, Vec<(u64, GazeSample)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(origin, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<f64> {
            let v: f64 = rec[i]
                .parse()
                .map_err(|_| parse_err(origin, line, format!("bad {} {:?}", TRACE_HEADER[i], &rec[i])))?;
            if !v.is_finite() {
                return Err(parse_err(origin, line, format!("non-finite {}", TRACE_HEADER[i])));
            }
            Ok(v)
        };
        let user: u32 = rec[0]
            .parse()
            .map_err(|_| parse_err(origin, line, format!("bad user_id {:?}", &rec[0])))?;
        let sample = GazeSample {
            t: field(1)?,
            orientation: EulerOrientation {
                alpha: field(2)?,
                beta: field(3)?,
                gamma: field(4)?,
            },
        };
        users.entry(user).or_default().push((line, sample));
    }
    users
        .into_iter()
        .map(|(user, mut rows)| {
            rows.sort_by(|a, b| a.1.t.total_cmp(&b.1.t));
            if let Some(w) = rows.windows(2).find(|w| w[1].1.t <= w[0].1.t) {
                return Err(parse_err(
                    origin,
                    w[1].0,
                    format!(
                        "user {user}: timestamp {} repeats the sample on line {}",
                        w[1].1.t, w[0].0
                    ),
                ));
            }
            GazeTrace::new(user, rows.into_iter().map(|(_, s)| s).collect())
        })
        .collect()
}

pub fn ingest_traces(path: &Path) -> Result<Vec<GazeTrace>> {
    let file = std::fs::File::open(path)?;
    parse_traces(std::io::BufReader::new(file), path)
}

/// Writes traces in user order, samples in time order.
pub fn write_traces<W: Write>(writer: W, traces: &[GazeTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRACE_HEADER)?;
    for tr in traces {
        for s in tr.samples() {
            let o = s.orientation;
            w.write_record([
                tr.user.to_string(),
                s.t.to_string(),
                o.alpha.to_string(),
                o.beta.to_string(),
                o.gamma.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_traces(path: &Path, traces: &[GazeTrace]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_traces(std::io::BufWriter::new(file), traces)
}

/// Placeholder origin for in-memory parsing.
pub fn memory_origin() -> PathBuf {
    PathBuf::from("<memory>")
}
