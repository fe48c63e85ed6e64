//! Low-level file format helpers shared by the session loader and exporters.
//!
//! Text formats use a fixed numeric discipline so that re-running a pipeline
//! step reproduces byte-identical files: timestamps are printed as fixed-point
//! seconds with 9 decimal places, other reals in scientific notation with
//! 9 significant digits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Timestamp formatting: fixed-point seconds, 9 decimal places.
///
/// On-grid times (k/250) have an exact decimal expansion well within 9
/// places, so print-then-parse is bit-exact for them.
pub fn fmt_time(t: f64) -> String {
    format!("{t:.9}")
}

/// Value formatting: scientific notation, 9 significant digits.
pub fn fmt_val(v: f64) -> String {
    format!("{v:.8e}")
}

pub(crate) fn parse_f64(path: &Path, line: usize, field: &str, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(path, line, format!("bad {field} value {s:?}")))
}

pub(crate) fn parse_usize(path: &Path, line: usize, field: &str, s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| Error::parse(path, line, format!("bad {field} value {s:?}")))
}

pub(crate) fn parse_flag(path: &Path, line: usize, field: &str, s: &str) -> Result<bool> {
    match s.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::parse(path, line, format!("bad {field} flag {other:?}, want 0 or 1"))),
    }
}

pub(crate) fn open_reader(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

/// Strict line-oriented CSV reader for the numeric tables this crate owns.
/// No quoting or escaping; fields are split on commas.
pub(crate) struct CsvTable {
    pub path: PathBuf,
    pub rows: Vec<(usize, Vec<String>)>, // (1-based file line, fields)
}

pub(crate) fn read_csv(path: &Path, expected_header: &str) -> Result<CsvTable> {
    let reader = open_reader(path)?;
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => return Err(Error::io(path, e)),
        None => return Err(Error::parse(path, 1, "empty file, expected header")),
    };
    if header.trim_end() != expected_header {
        return Err(Error::parse(
            path,
            1,
            format!("unexpected header {:?}, want {:?}", header.trim_end(), expected_header),
        ));
    }
    let n_fields = expected_header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if fields.len() != n_fields {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected {n_fields} fields, got {}", fields.len()),
            ));
        }
        rows.push((i + 1, fields));
    }
    Ok(CsvTable { path: path.to_path_buf(), rows })
}

// ---------------------------------------------------------------------------
// PGM (binary, 8-bit grayscale)
// ---------------------------------------------------------------------------

pub(crate) fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    debug_assert_eq!(data.len(), width * height);
    let mut w = create_writer(path)?;
    write!(w, "P5\n{width} {height}\n255\n").map_err(|e| write_err(path, e))?;
    w.write_all(data).map_err(|e| write_err(path, e))?;
    w.flush().map_err(|e| write_err(path, e))
}

pub(crate) fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;

    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // then a single whitespace byte before the raster.
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, 1, format!("truncated PGM header, missing {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token("magic")?;
    if magic != "P5" {
        return Err(Error::parse(path, 1, format!("not a binary PGM (magic {magic:?})")));
    }
    let width: usize = token("width")?
        .parse()
        .map_err(|_| Error::parse(path, 1, "bad PGM width"))?;
    let height: usize = token("height")?
        .parse()
        .map_err(|_| Error::parse(path, 1, "bad PGM height"))?;
    let maxval: usize = token("maxval")?
        .parse()
        .map_err(|_| Error::parse(path, 1, "bad PGM maxval"))?;
    if maxval != 255 {
        return Err(Error::parse(path, 1, format!("unsupported PGM maxval {maxval}, want 255")));
    }
    pos += 1; // single whitespace separator
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::parse(
            path,
            1,
            format!("PGM raster truncated: need {need} bytes, have {}", bytes.len().saturating_sub(pos)),
        ));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

// ---------------------------------------------------------------------------
// Thermal binary stream: u32 W, u32 H, u32 N, then N x (f64 t + W*H f32),
// all little-endian, row-major.
// ---------------------------------------------------------------------------

pub(crate) fn write_thermal_bin(
    path: &Path,
    width: usize,
    height: usize,
    frames: &[(f64, Vec<f32>)],
) -> Result<()> {
    let mut w = create_writer(path)?;
    w.write_all(&(width as u32).to_le_bytes()).map_err(|e| write_err(path, e))?;
    w.write_all(&(height as u32).to_le_bytes()).map_err(|e| write_err(path, e))?;
    w.write_all(&(frames.len() as u32).to_le_bytes()).map_err(|e| write_err(path, e))?;
    for (t, grid) in frames {
        debug_assert_eq!(grid.len(), width * height);
        w.write_all(&t.to_le_bytes()).map_err(|e| write_err(path, e))?;
        for v in grid {
            w.write_all(&v.to_le_bytes()).map_err(|e| write_err(path, e))?;
        }
    }
    w.flush().map_err(|e| write_err(path, e))
}

pub(crate) fn read_thermal_bin(path: &Path) -> Result<(usize, usize, Vec<(f64, Vec<f32>)>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() < pos + n {
            return Err(Error::parse(path, 0, "truncated thermal stream"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let width = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if width == 0 || height == 0 {
        return Err(Error::parse(path, 0, format!("bad thermal dims {width}x{height}")));
    }
    let cells = width * height;
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let t = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let raw = take(cells * 4)?;
        let grid: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push((t, grid));
    }
    Ok((width, height, frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_format_roundtrips_grid_ticks() {
        for k in [0u32, 1, 17, 250, 14999, 15000] {
            let t = f64::from(k) / 250.0;
            let s = fmt_time(t);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), t.to_bits(), "tick {k} printed as {s}");
        }
    }

    #[test]
    fn value_format_keeps_nine_digits() {
        for v in [1.0, -3.14159265358979, 1e-12, 2.5625e8, 0.0] {
            let back: f64 = fmt_val(v).parse().unwrap();
            let err = if v == 0.0 { back.abs() } else { ((back - v) / v).abs() };
            assert!(err <= 1e-9, "{v} -> {} -> {back}", fmt_val(v));
        }
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let data: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_pgm(&p, 4, 3, &data).unwrap();
        let (w, h, back) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, data);
    }

    #[test]
    fn thermal_bin_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let frames = vec![(0.0, vec![300.0f32; 6]), (1.0 / 120.0, vec![301.5f32; 6])];
        write_thermal_bin(&p, 3, 2, &frames).unwrap();
        let (w, h, back) = read_thermal_bin(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].1, frames[1].1);
    }
}
