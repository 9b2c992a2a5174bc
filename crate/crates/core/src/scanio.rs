//! Scan files and dataset manifests.
//!
//! Scan format, little-endian: magic "HLLS", format version u32, scan_id
//! u64, point count u32, pose (3 x f64 translation, 4 x f64 quaternion
//! w,x,y,z), then count x 3 x f64 points. Manifests are UTF-8 text, one
//! record per line: scan path, 3 translation floats, 4 quaternion floats,
//! tab-separated, floats printed with 17 significant digits.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pose::PoseSE3;
use crate::projection::LidarScan;
use crate::scalar::Scalar;

pub const SCAN_MAGIC: [u8; 4] = *b"HLLS";
pub const SCAN_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 7 * 8;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

pub fn write_scan<S: Scalar>(path: &Path, scan: &LidarScan<S>) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + scan.points.len() * 24);
    buf.extend_from_slice(&SCAN_MAGIC);
    buf.extend_from_slice(&SCAN_VERSION.to_le_bytes());
    buf.extend_from_slice(&scan.scan_id.to_le_bytes());
    buf.extend_from_slice(&(scan.points.len() as u32).to_le_bytes());
    for v in scan.pose.t {
        buf.extend_from_slice(&v.to_f64().to_le_bytes());
    }
    for v in scan.pose.q {
        buf.extend_from_slice(&v.to_f64().to_le_bytes());
    }
    for p in &scan.points {
        for v in p {
            buf.extend_from_slice(&(*v).to_f64().to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path_str(path), e))
}

/// Byte reader that reports the exact offset of whatever is missing.
pub(crate) struct Cursor<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
    pub(crate) path: String,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptFile {
                path: self.path.clone(),
                offset: self.pos as u64,
                detail: format!(
                    "truncated: need {n} bytes for {what}, only {} remain (bytes {}..{} missing)",
                    self.buf.len() - self.pos,
                    self.buf.len(),
                    self.pos + n
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn corrupt(&self, offset: u64, detail: String) -> Error {
        Error::CorruptFile { path: self.path.clone(), offset, detail }
    }
}

pub fn read_scan<S: Scalar>(path: &Path) -> Result<LidarScan<S>> {
    let buf = fs::read(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut cur = Cursor { buf: &buf, pos: 0, path: path_str(path) };

    // header is fully validated before any point storage is allocated
    let magic = cur.take(4, "magic")?;
    if magic != SCAN_MAGIC {
        return Err(cur.corrupt(0, format!("bad magic {magic:?}, expected {SCAN_MAGIC:?}")));
    }
    let version = cur.u32("format version")?;
    if version != SCAN_VERSION {
        return Err(cur.corrupt(4, format!("unsupported version {version}, expected {SCAN_VERSION}")));
    }
    let scan_id = cur.u64("scan id")?;
    let count = cur.u32("point count")? as usize;
    let expected = HEADER_LEN + count * 24;
    if buf.len() != expected {
        let detail = if buf.len() < expected {
            format!(
                "truncated: {count} points need {expected} bytes total, file has {} (bytes {}..{expected} missing)",
                buf.len(),
                buf.len()
            )
        } else {
            format!("{} trailing bytes after {count} points", buf.len() - expected)
        };
        return Err(cur.corrupt(buf.len().min(expected) as u64, detail));
    }

    let mut t = [S::zero(); 3];
    for v in &mut t {
        *v = S::from_f64(cur.f64("translation")?);
    }
    let mut q = [S::zero(); 4];
    for v in &mut q {
        *v = S::from_f64(cur.f64("quaternion")?);
    }
    let pose = PoseSE3::from_normalized(t, q)
        .map_err(|e| cur.corrupt(16, format!("invalid stored pose: {e}")))?;

    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = S::from_f64(cur.f64("point")?);
        let y = S::from_f64(cur.f64("point")?);
        let z = S::from_f64(cur.f64("point")?);
        points.push([x, y, z]);
    }
    LidarScan::new(points, pose, scan_id)
        .map_err(|e| cur.corrupt(HEADER_LEN as u64, format!("invalid point data: {e}")))
}

// ── %.17g-style float text ──────────────────────────────────────────────

/// 17-significant-digit decimal rendering (fixed or exponent notation,
/// trailing zeros trimmed), enough digits to round-trip any f64.
pub fn fmt_g17(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.16e}", v);
    let epos = sci.find('e').expect("scientific notation");
    let exp: i32 = sci[epos + 1..].parse().expect("exponent");
    if (-4..17).contains(&exp) {
        let prec = (16 - exp).max(0) as usize;
        let mut s = format!("{:.*}", prec, v);
        if s.contains('.') {
            while s.ends_with('0') {
                s.pop();
            }
            if s.ends_with('.') {
                s.pop();
            }
        }
        s
    } else {
        let mut mant = sci[..epos].to_string();
        if mant.contains('.') {
            while mant.ends_with('0') {
                mant.pop();
            }
            if mant.ends_with('.') {
                mant.pop();
            }
        }
        format!("{mant}e{exp}")
    }
}

// ── Manifests ───────────────────────────────────────────────────────────

/// One manifest record: a scan path (relative to the manifest's parent
/// directory) and its ground-truth pose.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry<S: Scalar> {
    pub path: String,
    pub pose: PoseSE3<S>,
}

pub fn write_manifest<S: Scalar>(path: &Path, entries: &[ManifestEntry<S>]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let t = &e.pose.t;
        let q = &e.pose.q;
        out.push_str(&format!(
            "{}\t{} {} {}\t{} {} {} {}\n",
            e.path,
            fmt_g17(t[0].to_f64()),
            fmt_g17(t[1].to_f64()),
            fmt_g17(t[2].to_f64()),
            fmt_g17(q[0].to_f64()),
            fmt_g17(q[1].to_f64()),
            fmt_g17(q[2].to_f64()),
            fmt_g17(q[3].to_f64()),
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path_str(path), e))
}

pub fn read_manifest<S: Scalar>(path: &Path) -> Result<Vec<ManifestEntry<S>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in text.lines().enumerate() {
        let corrupt = |detail: String| Error::CorruptFile {
            path: path_str(path),
            offset,
            detail: format!("line {}: {detail}", lineno + 1),
        };
        if line.is_empty() {
            return Err(corrupt("empty record".into()));
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(corrupt(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let floats = |s: &str, n: usize, what: &str| -> Result<Vec<f64>> {
            let vals: Vec<f64> = s
                .split_whitespace()
                .map(|tok| tok.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| corrupt(format!("bad {what} float: {e}")))?;
            if vals.len() != n {
                return Err(corrupt(format!("expected {n} {what} floats, got {}", vals.len())));
            }
            Ok(vals)
        };
        let t = floats(fields[1], 3, "translation")?;
        let q = floats(fields[2], 4, "quaternion")?;
        let pose = PoseSE3::from_normalized(
            [S::from_f64(t[0]), S::from_f64(t[1]), S::from_f64(t[2])],
            [S::from_f64(q[0]), S::from_f64(q[1]), S::from_f64(q[2]), S::from_f64(q[3])],
        )
        .map_err(|e| corrupt(format!("invalid pose: {e}")))?;
        entries.push(ManifestEntry { path: fields[0].to_string(), pose });
        offset += line.len() as u64 + 1;
    }
    if entries.is_empty() {
        return Err(Error::EmptyInput("read_manifest"));
    }
    Ok(entries)
}
