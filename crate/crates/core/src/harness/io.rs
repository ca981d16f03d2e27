//! File formats: netpbm images, raw heatmaps, frame manifests, metric CSVs
//! and run manifests.

use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sphere::ErpMap;

/// Magic of the raw heatmap format: 8 bytes, then `V` and `U` as `u32` LE,
/// then `V * U` little-endian `f64` values in row-major order.
pub const RAW_MAGIC: &[u8; 8] = b"ERPMAP64";

pub fn raw_bytes(map: &ErpMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * map.values().len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn raw_from_bytes(bytes: &[u8]) -> Result<ErpMap> {
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        return Err(Error::Format("not a raw heatmap (bad magic)".into()));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != h * w * 8 {
        return Err(Error::Format(format!(
            "raw heatmap {h}x{w} needs {} value bytes, found {}",
            h * w * 8,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ErpMap::new(h, w, values)
}

pub fn write_raw(path: &Path, map: &ErpMap) -> Result<()> {
    std::fs::write(path, raw_bytes(map))?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<ErpMap> {
    raw_from_bytes(&std::fs::read(path)?)
}

/// 8-bit binary graymap; values are clamped to `[0, 1]`.
pub fn pgm_bytes(map: &ErpMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.values().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: &Path, map: &ErpMap) -> Result<()> {
    std::fs::write(path, pgm_bytes(map))?;
    Ok(())
}

/// 8-bit binary pixmap from a `[3, H, W]` tensor in `[0, 1]`.
pub fn ppm_bytes(frame: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = frame.chw()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape("ppm_bytes", format!("{c} channels"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for ch in 0..c {
            out.push((frame.channel(ch)[i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_image(path: &Path, frame: &Tensor) -> Result<()> {
    std::fs::write(path, ppm_bytes(frame)?)?;
    Ok(())
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad netpbm header at byte {start}")))
}

/// Decodes binary PGM (`P5`) or PPM (`P6`) with maxval up to 255 into a
/// `[C, H, W]` tensor scaled to `[0, 1]`.
pub fn decode_netpbm(bytes: &[u8]) -> Result<Tensor> {
    let c = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("only binary P5/P6 images are supported".into())),
    };
    let mut pos = 2;
    let w = header_token(bytes, &mut pos)?;
    let h = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    pos += 1;
    let body = bytes.get(pos..pos + c * h * w).ok_or_else(|| Error::Format("truncated image".into()))?;
    let mut data = vec![0.0; c * h * w];
    for (i, px) in body.chunks_exact(c).enumerate() {
        for (ch, &b) in px.iter().enumerate() {
            data[ch * h * w + i] = b as f64 / maxval as f64;
        }
    }
    Tensor::new(&[c, h, w], data)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_netpbm(&std::fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// One line of a frame manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEntry {
    pub index: usize,
    pub timestamp_s: f64,
    pub image: PathBuf,
}

/// Frame list with its rate. Lines are `index,timestamp_s,image_path`; a
/// `# fps = <rate>` comment sets the rate, which otherwise is estimated from
/// the mean timestamp step. Relative image paths are resolved against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameManifest {
    pub fps: f64,
    pub frames: Vec<FrameEntry>,
}

impl FrameManifest {
    pub fn parse<R: BufRead>(reader: R, origin: &Path) -> Result<Self> {
        let base = origin.parent().unwrap_or(Path::new("")).to_path_buf();
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: line as u64,
            msg,
        };
        let mut fps = None;
        let mut frames: Vec<FrameEntry> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let n = i + 1;
            let t = line.trim();
            if let Some(comment) = t.strip_prefix('#') {
                if let Some((k, v)) = comment.split_once('=') {
                    if k.trim() == "fps" {
                        let rate: f64 = v.trim().parse().map_err(|_| err(n, format!("bad fps {v:?}")))?;
                        if !(rate > 0.0) {
                            return Err(err(n, "fps must be positive".into()));
                        }
                        fps = Some(rate);
                    }
                }
                continue;
            }
            if t.is_empty() {
                continue;
            }
            let parts: Vec<&str> = t.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(err(n, format!("expected index,timestamp_s,image_path, got {t:?}")));
            }
            let index: usize = parts[0].parse().map_err(|_| err(n, format!("bad index {:?}", parts[0])))?;
            let timestamp_s: f64 = parts[1].parse().map_err(|_| err(n, format!("bad timestamp {:?}", parts[1])))?;
            if index != frames.len() {
                return Err(err(n, format!("expected frame index {}, got {index}", frames.len())));
            }
            if let Some(prev) = frames.last() {
                if !(timestamp_s > prev.timestamp_s) {
                    return Err(err(n, format!("timestamp {timestamp_s} does not increase")));
                }
            }
            frames.push(FrameEntry {
                index,
                timestamp_s,
                image: base.join(parts[2]),
            });
        }
        let fps = match fps {
            Some(f) => f,
            None if frames.len() >= 2 => {
                let span = frames[frames.len() - 1].timestamp_s - frames[0].timestamp_s;
                (frames.len() - 1) as f64 / span
            }
            None => return Err(err(0, "cannot infer fps from fewer than two frames".into())),
        };
        Ok(FrameManifest { fps, frames })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::parse(std::io::BufReader::new(f), path)
    }

    /// Text with paths written relative to `dir` where possible.
    pub fn to_text(&self, dir: &Path) -> String {
        let mut out = format!("# fps = {}\n", self.fps);
        for f in &self.frames {
            let p = f.image.strip_prefix(dir).unwrap_or(&f.image);
            let _ = writeln!(out, "{},{},{}", f.index, f.timestamp_s, p.display());
        }
        out
    }

    pub fn read_frames(&self) -> Result<Vec<Tensor>> {
        self.frames.iter().map(|f| read_image(&f.image)).collect()
    }
}

/// One evaluated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub frame: usize,
    pub timestamp_s: f64,
    pub interval_s: f64,
    pub offset_frames: usize,
    pub feedback_users: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub nss: f64,
    pub cc: f64,
    pub auc: f64,
    pub loss: f64,
}

pub const METRIC_HEADER: [&str; 12] = [
    "frame",
    "timestamp_s",
    "interval_s",
    "offset_frames",
    "feedback_users",
    "accuracy",
    "precision",
    "recall",
    "nss",
    "cc",
    "auc",
    "loss",
];

/// Undefined metrics are written as `NaN`.
pub fn write_metrics<W: Write>(writer: W, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRIC_HEADER)?;
    for r in records {
        w.write_record([
            r.frame.to_string(),
            r.timestamp_s.to_string(),
            r.interval_s.to_string(),
            r.offset_frames.to_string(),
            r.feedback_users.to_string(),
            r.accuracy.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.nss.to_string(),
            r.cc.to_string(),
            r.auc.to_string(),
            r.loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_metrics(std::io::BufWriter::new(f), records)
}

pub fn read_metrics<R: Read>(reader: R) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    if rdr.headers()?.iter().collect::<Vec<_>>() != METRIC_HEADER {
        return Err(Error::Format("unexpected metrics header".into()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad {} {:?}", METRIC_HEADER[i], &rec[i])))
        };
        let u = |i: usize| -> Result<usize> {
            rec[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad {} {:?}", METRIC_HEADER[i], &rec[i])))
        };
        out.push(MetricRecord {
            frame: u(0)?,
            timestamp_s: f(1)?,
            interval_s: f(2)?,
            offset_frames: u(3)?,
            feedback_users: u(4)?,
            accuracy: f(5)?,
            precision: f(6)?,
            recall: f(7)?,
            nss: f(8)?,
            cc: f(9)?,
            auc: f(10)?,
            loss: f(11)?,
        });
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// `key = value` record of a run: verb, configuration, and hashes of inputs,
/// checkpoints and outputs. Only the `created_unix` line varies between
/// identical runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(verb: &str) -> Self {
        let mut m = RunManifest::default();
        m.push("verb", verb);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.push((key.into(), value.into()));
    }

    pub fn push_config(&mut self, entries: &[(&str, String)]) {
        for (k, v) in entries {
            self.push(format!("config.{k}"), v.clone());
        }
    }

    /// Adds `<kind>.<path> = sha256`.
    pub fn push_file(&mut self, kind: &str, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.push(format!("{kind}.{}", path.display()), h);
        Ok(())
    }

    pub fn to_text(&self, created_unix: u64) -> String {
        let mut out = format!("created_unix = {created_unix}\n");
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        std::fs::write(path, self.to_text(now))?;
        Ok(())
    }
}
