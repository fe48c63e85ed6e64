//! Recorded/simulated build sessions: the on-disk directory layout, validated
//! loading of all five sensor streams, and fused-dataset CSV round-trips.
//!
//! Directory layout:
//! - `manifest.json` - rates, image dims, build box, layer height, emissivity
//! - `audio.wav` - PCM signed 16-bit mono
//! - `meltpool/index.csv` + `meltpool/frame_NNNNNN.pgm` (binary PGM)
//! - `thermal.bin` - `u32 W, u32 H, u32 N`, then N x (`f64 t` + W*H `f32` K)
//! - `robot.csv` - `t,x,y,z,laser_on,feed`
//! - `scans/index.csv` + `scans/scan_NNN.xyz` (ASCII `x y z`, mm)

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustic::AudioSignal;
use crate::error::{Error, Result};
use crate::fusion::{FusedDataset, FusedRecord, channel_names};
use crate::io::{
    create_writer, fmt_time, fmt_val, parse_f64, parse_flag, parse_usize, read_csv, read_pgm,
    read_thermal_bin, write_err, write_pgm, write_thermal_bin,
};
use crate::meltpool::{GrayImage, MeltPoolFrame};
use crate::surface::{BuildBox, PointCloud, ScanRecord};
use crate::thermal::{ThermalConfig, ThermalFrame};

/// Declared stream rates and geometry of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub audio_hz: f64,
    pub meltpool_hz: f64,
    pub thermal_hz: f64,
    pub robot_hz: f64,
    pub meltpool_width: usize,
    pub meltpool_height: usize,
    pub thermal_width: usize,
    pub thermal_height: usize,
    pub build_min: [f64; 3],
    pub build_max: [f64; 3],
    pub layer_height_mm: f64,
    pub emissivity_melt: f64,
    pub emissivity_haz: f64,
    /// Apparent-temperature segmentation thresholds used on this material.
    pub melt_threshold_k: f64,
    pub haz_threshold_k: f64,
}

impl Manifest {
    pub fn build_box(&self) -> BuildBox {
        BuildBox { min: self.build_min, max: self.build_max }
    }

    pub fn thermal_config(&self) -> ThermalConfig {
        ThermalConfig {
            melt_threshold_k: self.melt_threshold_k,
            haz_threshold_k: self.haz_threshold_k,
            emissivity_melt: self.emissivity_melt,
            emissivity_haz: self.emissivity_haz,
        }
    }
}

/// One robot TCP sample from the 250 Hz controller stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub laser_on: bool,
    pub feed: f64,
}

/// A fully loaded session; immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub manifest: Manifest,
    pub audio: AudioSignal,
    pub meltpool_frames: Vec<MeltPoolFrame>,
    pub thermal_frames: Vec<ThermalFrame>,
    pub robot: Vec<RobotSample>,
    pub scans: Vec<ScanRecord>,
}

impl Session {
    /// Session duration: the last robot timestamp.
    pub fn duration_s(&self) -> f64 {
        self.robot.last().map_or(0.0, |r| r.t)
    }

    /// Audio from the first laser-off interval of at least `min_s` seconds,
    /// for use as a denoising noise profile.
    pub fn laser_off_audio(&self, min_s: f64) -> Option<AudioSignal> {
        let mut run_start: Option<f64> = None;
        let mut check = |start: f64, end: f64| -> Option<AudioSignal> {
            if end - start >= min_s {
                let a = (start * self.audio.rate_hz).round() as usize;
                let b = ((end * self.audio.rate_hz).round() as usize).min(self.audio.samples.len());
                if b > a {
                    return Some(AudioSignal {
                        samples: self.audio.samples[a..b].to_vec(),
                        rate_hz: self.audio.rate_hz,
                    });
                }
            }
            None
        };
        for (i, r) in self.robot.iter().enumerate() {
            match (r.laser_on, run_start) {
                (false, None) => run_start = Some(r.t),
                (true, Some(start)) => {
                    let end = self.robot[i - 1].t;
                    if let Some(sig) = check(start, end) {
                        return Some(sig);
                    }
                    run_start = None;
                }
                _ => {}
            }
        }
        if let Some(start) = run_start {
            return check(start, self.duration_s());
        }
        None
    }
}

fn check_monotonic(stream: &str, times: impl Iterator<Item = f64>) -> Result<()> {
    let mut prev: Option<f64> = None;
    for (i, t) in times.enumerate() {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::NonMonotonic { stream: stream.into(), index: i });
        }
        if let Some(p) = prev {
            if t <= p {
                return Err(Error::NonMonotonic { stream: stream.into(), index: i });
            }
        }
        prev = Some(t);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

pub const ROBOT_CSV_HEADER: &str = "t,x,y,z,laser_on,feed";
pub const MELTPOOL_INDEX_HEADER: &str = "t,filename";
pub const SCAN_INDEX_HEADER: &str = "t,layer,filename";

/// Parses and structurally validates a session directory. Hard errors:
/// missing files, malformed records, non-monotonic timestamps, an empty
/// robot stream. Soft checks (rates, durations) live in [`validate_session`].
pub fn load_session(dir: &Path) -> Result<Session> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::parse(&manifest_path, e.line(), format!("bad manifest: {e}")))?;

    let audio = read_wav(&dir.join("audio.wav"), manifest.audio_hz)?;

    let mp_index = read_csv(&dir.join("meltpool").join("index.csv"), MELTPOOL_INDEX_HEADER)?;
    let mut meltpool_frames = Vec::with_capacity(mp_index.rows.len());
    for (line, fields) in &mp_index.rows {
        let t = parse_f64(&mp_index.path, *line, "t", &fields[0])?;
        let frame_path = dir.join("meltpool").join(fields[1].trim());
        let (w, h, data) = read_pgm(&frame_path)?;
        if w != manifest.meltpool_width || h != manifest.meltpool_height {
            return Err(Error::DimensionMismatch(format!(
                "{}: {w}x{h} vs manifest {}x{}",
                frame_path.display(),
                manifest.meltpool_width,
                manifest.meltpool_height
            )));
        }
        meltpool_frames.push(MeltPoolFrame { t, image: GrayImage::new(w, h, data)? });
    }
    check_monotonic("meltpool", meltpool_frames.iter().map(|f| f.t))?;

    let thermal_path = dir.join("thermal.bin");
    let (tw, th, raw_frames) = read_thermal_bin(&thermal_path)?;
    if tw != manifest.thermal_width || th != manifest.thermal_height {
        return Err(Error::DimensionMismatch(format!(
            "thermal.bin: {tw}x{th} vs manifest {}x{}",
            manifest.thermal_width, manifest.thermal_height
        )));
    }
    let mut thermal_frames = Vec::with_capacity(raw_frames.len());
    for (t, grid) in raw_frames {
        if grid.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::parse(
                &thermal_path,
                0,
                format!("non-physical temperature in frame at t={t}"),
            ));
        }
        let kelvin: Vec<f64> = grid.into_iter().map(f64::from).collect();
        thermal_frames.push(ThermalFrame::new(t, tw, th, kelvin)?);
    }
    check_monotonic("thermal", thermal_frames.iter().map(|f| f.t))?;

    let robot_path = dir.join("robot.csv");
    let robot_table = read_csv(&robot_path, ROBOT_CSV_HEADER)?;
    let mut robot = Vec::with_capacity(robot_table.rows.len());
    for (line, fields) in &robot_table.rows {
        robot.push(RobotSample {
            t: parse_f64(&robot_path, *line, "t", &fields[0])?,
            x: parse_f64(&robot_path, *line, "x", &fields[1])?,
            y: parse_f64(&robot_path, *line, "y", &fields[2])?,
            z: parse_f64(&robot_path, *line, "z", &fields[3])?,
            laser_on: parse_flag(&robot_path, *line, "laser_on", &fields[4])?,
            feed: parse_f64(&robot_path, *line, "feed", &fields[5])?,
        });
    }
    if robot.is_empty() {
        return Err(Error::EmptyStream { stream: "robot".into() });
    }
    check_monotonic("robot", robot.iter().map(|r| r.t))?;

    let scan_index = read_csv(&dir.join("scans").join("index.csv"), SCAN_INDEX_HEADER)?;
    let mut scans = Vec::with_capacity(scan_index.rows.len());
    for (line, fields) in &scan_index.rows {
        let t = parse_f64(&scan_index.path, *line, "t", &fields[0])?;
        let layer = parse_usize(&scan_index.path, *line, "layer", &fields[1])?;
        let cloud = read_xyz(&dir.join("scans").join(fields[2].trim()))?;
        scans.push(ScanRecord { t, layer, cloud });
    }
    check_monotonic("scans", scans.iter().map(|s| s.t))?;

    Ok(Session { manifest, audio, meltpool_frames, thermal_frames, robot, scans })
}

fn read_wav(path: &Path, expected_hz: f64) -> Result<AudioSignal> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::parse(path, 0, format!("bad WAV: {other}")),
    })?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::parse(
            path,
            0,
            format!(
                "expected mono 16-bit PCM, got {} ch / {} bit",
                spec.channels, spec.bits_per_sample
            ),
        ));
    }
    if (spec.sample_rate as f64 - expected_hz).abs() > 0.5 {
        return Err(Error::parse(
            path,
            0,
            format!("WAV rate {} vs manifest {expected_hz}", spec.sample_rate),
        ));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let samples = samples.map_err(|e| Error::parse(path, 0, format!("bad WAV data: {e}")))?;
    Ok(AudioSignal {
        samples: samples.into_iter().map(|s| f64::from(s) / 32768.0).collect(),
        rate_hz: expected_hz,
    })
}

fn read_xyz(path: &Path) -> Result<PointCloud> {
    let reader = crate::io::open_reader(path)?;
    use std::io::BufRead;
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_ascii_whitespace();
        let mut coord = [0.0; 3];
        for (axis, slot) in coord.iter_mut().enumerate() {
            let tok = it
                .next()
                .ok_or_else(|| Error::parse(path, i + 1, format!("missing coordinate {axis}")))?;
            *slot = parse_f64(path, i + 1, "coordinate", tok)?;
        }
        if it.next().is_some() {
            return Err(Error::parse(path, i + 1, "trailing fields in xyz line"));
        }
        points.push(coord);
    }
    Ok(PointCloud { points })
}

// ---------------------------------------------------------------------------
// Writing (used by the simulator and exporters)
// ---------------------------------------------------------------------------

pub fn write_session(session: &Session, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&session.manifest)
        .map_err(|e| Error::InvalidArgument(format!("manifest serialization: {e}")))?;
    std::fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    write_wav(&dir.join("audio.wav"), &session.audio)?;

    let mp_dir = dir.join("meltpool");
    std::fs::create_dir_all(&mp_dir).map_err(|e| Error::io(&mp_dir, e))?;
    let index_path = mp_dir.join("index.csv");
    let mut index = create_writer(&index_path)?;
    writeln!(index, "{MELTPOOL_INDEX_HEADER}").map_err(|e| write_err(&index_path, e))?;
    for (i, frame) in session.meltpool_frames.iter().enumerate() {
        let name = format!("frame_{i:06}.pgm");
        writeln!(index, "{},{name}", fmt_time(frame.t)).map_err(|e| write_err(&index_path, e))?;
        write_pgm(
            &mp_dir.join(&name),
            frame.image.width(),
            frame.image.height(),
            frame.image.data(),
        )?;
    }
    index.flush().map_err(|e| write_err(&index_path, e))?;

    let frames: Vec<(f64, Vec<f32>)> = session
        .thermal_frames
        .iter()
        .map(|f| (f.t, f.values().iter().map(|&v| v as f32).collect()))
        .collect();
    write_thermal_bin(
        &dir.join("thermal.bin"),
        session.manifest.thermal_width,
        session.manifest.thermal_height,
        &frames,
    )?;

    let robot_path = dir.join("robot.csv");
    let mut w = create_writer(&robot_path)?;
    writeln!(w, "{ROBOT_CSV_HEADER}").map_err(|e| write_err(&robot_path, e))?;
    for r in &session.robot {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt_time(r.t),
            fmt_val(r.x),
            fmt_val(r.y),
            fmt_val(r.z),
            r.laser_on as u8,
            fmt_val(r.feed)
        )
        .map_err(|e| write_err(&robot_path, e))?;
    }
    w.flush().map_err(|e| write_err(&robot_path, e))?;

    let scan_dir = dir.join("scans");
    std::fs::create_dir_all(&scan_dir).map_err(|e| Error::io(&scan_dir, e))?;
    let scan_index_path = scan_dir.join("index.csv");
    let mut index = create_writer(&scan_index_path)?;
    writeln!(index, "{SCAN_INDEX_HEADER}").map_err(|e| write_err(&scan_index_path, e))?;
    for (i, scan) in session.scans.iter().enumerate() {
        let name = format!("scan_{i:03}.xyz");
        writeln!(index, "{},{},{name}", fmt_time(scan.t), scan.layer)
            .map_err(|e| write_err(&scan_index_path, e))?;
        let path = scan_dir.join(&name);
        let mut w = create_writer(&path)?;
        for p in &scan.cloud.points {
            writeln!(w, "{} {} {}", fmt_val(p[0]), fmt_val(p[1]), fmt_val(p[2]))
                .map_err(|e| write_err(&path, e))?;
        }
        w.flush().map_err(|e| write_err(&path, e))?;
    }
    index.flush().map_err(|e| write_err(&scan_index_path, e))
}

fn write_wav(path: &Path, audio: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.rate_hz.round() as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("WAV create: {other}")),
    })?;
    for &s in &audio.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::InvalidArgument(format!("WAV write: {e}")))?;
    }
    writer.finalize().map_err(|e| Error::InvalidArgument(format!("WAV finalize: {e}")))
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RateMismatch { stream: String, declared_hz: f64, observed_hz: f64 },
    DurationMismatch { stream: String, expected_s: f64, observed_s: f64 },
    NonMonotonic { stream: String, index: usize },
    EmptyStream { stream: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RateMismatch { stream, declared_hz, observed_hz } => write!(
                f,
                "{stream}: declared {declared_hz} Hz but observed {observed_hz:.3} Hz"
            ),
            Violation::DurationMismatch { stream, expected_s, observed_s } => write!(
                f,
                "{stream}: covers {observed_s:.3} s but the session lasts {expected_s:.3} s"
            ),
            Violation::NonMonotonic { stream, index } => {
                write!(f, "{stream}: non-monotonic timestamp at index {index}")
            }
            Violation::EmptyStream { stream } => write!(f, "{stream}: stream is empty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "session valid");
        }
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        Ok(())
    }
}

/// Declared rate vs observed spacing within 1%.
const RATE_TOLERANCE: f64 = 0.01;
/// Audio length vs session duration within one default analysis frame.
const AUDIO_SLACK_SAMPLES: f64 = 2048.0;

/// Soft invariant checks; never mutates or rejects, just reports.
pub fn validate_session(session: &Session) -> ValidationReport {
    let mut violations = Vec::new();

    let mut monotonic = |stream: &str, times: &[f64]| {
        for (i, pair) in times.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                violations.push(Violation::NonMonotonic { stream: stream.into(), index: i + 1 });
                return false;
            }
        }
        true
    };

    let mp_times: Vec<f64> = session.meltpool_frames.iter().map(|f| f.t).collect();
    let th_times: Vec<f64> = session.thermal_frames.iter().map(|f| f.t).collect();
    let robot_times: Vec<f64> = session.robot.iter().map(|r| r.t).collect();
    let scan_times: Vec<f64> = session.scans.iter().map(|s| s.t).collect();

    let mp_sorted = monotonic("meltpool", &mp_times);
    let th_sorted = monotonic("thermal", &th_times);
    let robot_sorted = monotonic("robot", &robot_times);
    monotonic("scans", &scan_times);

    if session.robot.is_empty() {
        violations.push(Violation::EmptyStream { stream: "robot".into() });
    }

    let mut rate_check = |stream: &str, times: &[f64], declared: f64, sorted: bool| {
        if !sorted || times.len() < 2 {
            return;
        }
        let span = times[times.len() - 1] - times[0];
        if span <= 0.0 {
            return;
        }
        let observed = (times.len() - 1) as f64 / span;
        if (observed - declared).abs() > RATE_TOLERANCE * declared {
            violations.push(Violation::RateMismatch {
                stream: stream.into(),
                declared_hz: declared,
                observed_hz: observed,
            });
        }
    };
    rate_check("meltpool", &mp_times, session.manifest.meltpool_hz, mp_sorted);
    rate_check("thermal", &th_times, session.manifest.thermal_hz, th_sorted);
    rate_check("robot", &robot_times, session.manifest.robot_hz, robot_sorted);

    if let Some(robot_end) = robot_times.last().copied() {
        let audio_end = session.audio.samples.len() as f64 / session.audio.rate_hz;
        let slack = AUDIO_SLACK_SAMPLES / session.audio.rate_hz;
        if (audio_end - robot_end).abs() > slack {
            violations.push(Violation::DurationMismatch {
                stream: "audio".into(),
                expected_s: robot_end,
                observed_s: audio_end,
            });
        }
    }

    ValidationReport { violations }
}

// ---------------------------------------------------------------------------
// Fused dataset CSV
// ---------------------------------------------------------------------------

pub fn fused_csv_header() -> String {
    let mut h = String::from("t,x,y,z,laser_on");
    for name in channel_names() {
        h.push(',');
        h.push_str(&name);
    }
    h.push_str(",valid_mp,valid_ac,valid_th");
    h
}

/// Writes a fused dataset; invalid channel blocks are stored as zeros and
/// their validity flag clears. Timestamps round-trip bit-exactly, features to
/// the printed 9 significant digits.
pub fn write_fused(dataset: &FusedDataset, path: &Path) -> Result<()> {
    let mut w = create_writer(path)?;
    writeln!(w, "{}", fused_csv_header()).map_err(|e| write_err(path, e))?;
    for r in &dataset.records {
        write!(
            w,
            "{},{},{},{},{}",
            fmt_time(r.t),
            fmt_val(r.x),
            fmt_val(r.y),
            fmt_val(r.z),
            r.laser_on as u8
        )
        .map_err(|e| write_err(path, e))?;
        let mut dump = |values: &[f64]| -> Result<()> {
            for v in values {
                write!(w, ",{}", fmt_val(*v)).map_err(|e| write_err(path, e))?;
            }
            Ok(())
        };
        match &r.mp {
            Some(v) => dump(v)?,
            None => dump(&[0.0; crate::fusion::MP_CHANNELS])?,
        }
        match &r.ac {
            Some(v) => dump(v)?,
            None => dump(&[0.0; crate::fusion::AC_CHANNELS])?,
        }
        match &r.th {
            Some(v) => dump(v)?,
            None => dump(&[0.0; crate::fusion::TH_CHANNELS])?,
        }
        writeln!(
            w,
            ",{},{},{}",
            r.mp.is_some() as u8,
            r.ac.is_some() as u8,
            r.th.is_some() as u8
        )
        .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

pub fn load_fused(path: &Path) -> Result<FusedDataset> {
    let table = read_csv(path, &fused_csv_header())?;
    let mut records = Vec::with_capacity(table.rows.len());
    const MP: usize = crate::fusion::MP_CHANNELS;
    const AC: usize = crate::fusion::AC_CHANNELS;
    const TH: usize = crate::fusion::TH_CHANNELS;
    for (line, fields) in &table.rows {
        let t = parse_f64(path, *line, "t", &fields[0])?;
        let x = parse_f64(path, *line, "x", &fields[1])?;
        let y = parse_f64(path, *line, "y", &fields[2])?;
        let z = parse_f64(path, *line, "z", &fields[3])?;
        let laser_on = parse_flag(path, *line, "laser_on", &fields[4])?;
        let base = 5;
        let nch = MP + AC + TH;
        let valid_mp = parse_flag(path, *line, "valid_mp", &fields[base + nch])?;
        let valid_ac = parse_flag(path, *line, "valid_ac", &fields[base + nch + 1])?;
        let valid_th = parse_flag(path, *line, "valid_th", &fields[base + nch + 2])?;
        let mut block = |offset: usize, len: usize| -> Result<Vec<f64>> {
            (0..len)
                .map(|i| parse_f64(path, *line, "feature", &fields[base + offset + i]))
                .collect()
        };
        let mp_vals = block(0, MP)?;
        let ac_vals = block(MP, AC)?;
        let th_vals = block(MP + AC, TH)?;
        records.push(FusedRecord {
            t,
            x,
            y,
            z,
            laser_on,
            mp: valid_mp.then(|| mp_vals.try_into().unwrap()),
            ac: valid_ac.then(|| ac_vals.try_into().unwrap()),
            th: valid_th.then(|| th_vals.try_into().unwrap()),
        });
    }
    Ok(FusedDataset { records })
}

/// Ground-truth sidecar filename inside a session directory.
pub fn ground_truth_path(session_dir: &Path) -> PathBuf {
    session_dir.join("ground_truth.json")
}
