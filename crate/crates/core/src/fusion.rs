//! Spatiotemporal fusion: feature streams are resampled onto the 250 Hz
//! robot-position grid, attached to TCP positions, and aggregated into a
//! voxel digital twin of the deposited volume.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticFeatures;
use crate::error::{Error, Result};
use crate::io::{create_writer, fmt_val, write_err};
use crate::meltpool::MeltPoolFeatures;
use crate::quality::QualityLabel;
use crate::session::RobotSample;
use crate::thermal::ThermalFeatures;

/// The fusion grid rate: robot TCP samples arrive at 250 Hz and every other
/// stream is resampled up to this axis.
pub const GRID_HZ: f64 = 250.0;

pub const MP_CHANNELS: usize = 7;
pub const AC_CHANNELS: usize = 24;
pub const TH_CHANNELS: usize = 4;
pub const FEATURE_CHANNELS: usize = MP_CHANNELS + AC_CHANNELS + TH_CHANNELS;

pub const CH_MP_AREA: usize = 0;
pub const CH_MP_WIDTH: usize = 5;
pub const CH_MP_LENGTH: usize = 6;
pub const CH_TH_PEAK: usize = 31;

/// Column names of the 35 fused feature channels, in record order.
pub fn channel_names() -> Vec<String> {
    let mut names = vec![
        "mp_area".to_string(),
        "mp_mu20".to_string(),
        "mp_mu02".to_string(),
        "mp_mu11".to_string(),
        "mp_hull_area".to_string(),
        "mp_width".to_string(),
        "mp_length".to_string(),
        "ac_ae".to_string(),
        "ac_sc".to_string(),
        "ac_sbw".to_string(),
        "ac_sr".to_string(),
    ];
    for i in 0..20 {
        names.push(format!("ac_mfcc{i:02}"));
    }
    names.extend(["th_peak", "th_mean", "th_variance", "th_kurtosis"].map(String::from));
    debug_assert_eq!(names.len(), FEATURE_CHANNELS);
    names
}

// ---------------------------------------------------------------------------
// Feature series and resampling
// ---------------------------------------------------------------------------

/// One timestamped sample of a feature vector; `None` marks a sample the
/// extractor produced but flagged invalid (e.g. laser-off frames).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSample {
    pub t: f64,
    pub values: Option<Vec<f64>>,
}

/// A strictly increasing timestamped feature-vector stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    dim: usize,
    samples: Vec<SeriesSample>,
}

impl FeatureSeries {
    pub fn new(dim: usize, samples: Vec<SeriesSample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if i > 0 && s.t <= samples[i - 1].t {
                return Err(Error::UnsortedSeries(i));
            }
            if let Some(v) = &s.values {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "series sample {i} has {} values, series dim is {dim}",
                        v.len()
                    )));
                }
            }
        }
        Ok(Self { dim, samples })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[SeriesSample] {
        &self.samples
    }

    pub fn from_meltpool(features: &[MeltPoolFeatures]) -> Result<Self> {
        Self::new(
            MP_CHANNELS,
            features
                .iter()
                .map(|f| SeriesSample {
                    t: f.t,
                    values: f.valid.then(|| f.channel_values().to_vec()),
                })
                .collect(),
        )
    }

    pub fn from_acoustic(features: &[AcousticFeatures]) -> Result<Self> {
        Self::new(
            AC_CHANNELS,
            features
                .iter()
                .map(|f| SeriesSample {
                    t: f.t,
                    values: f.valid.then(|| f.channel_values().to_vec()),
                })
                .collect(),
        )
    }

    pub fn from_thermal(features: &[ThermalFeatures]) -> Result<Self> {
        Self::new(
            TH_CHANNELS,
            features
                .iter()
                .map(|f| SeriesSample {
                    t: f.t,
                    values: f.channel_values().map(|v| v.to_vec()),
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    Linear,
    Hold,
}

/// Resamples a series onto arbitrary grid ticks.
///
/// Ticks outside the series time span are invalid (`None`). Inside the span,
/// linear mode interpolates between the bracketing samples and hold mode
/// repeats the latest sample. A tick whose bracketing sample is invalid falls
/// back to the nearest valid sample if it lies within `max_gap_s`, otherwise
/// the tick is invalid.
pub fn resample_to_grid(
    series: &FeatureSeries,
    grid: &[f64],
    mode: ResampleMode,
    max_gap_s: f64,
) -> Vec<Option<Vec<f64>>> {
    let samples = &series.samples;
    if samples.is_empty() {
        return vec![None; grid.len()];
    }
    let first = samples[0].t;
    let last = samples[samples.len() - 1].t;

    // `around` is the last index with sample.t <= t, so distance grows
    // monotonically scanning outward; the earlier sample wins ties.
    let nearest_valid = |t: f64, around: usize| -> Option<&SeriesSample> {
        let left = samples[..=around].iter().rev().find(|s| s.values.is_some());
        let right = samples[around + 1..].iter().find(|s| s.values.is_some());
        let best = match (left, right) {
            (Some(l), Some(r)) => {
                if (t - l.t).abs() <= (r.t - t).abs() {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => return None,
        };
        ((best.t - t).abs() <= max_gap_s).then_some(best)
    };

    grid.iter()
        .map(|&t| {
            if t < first || t > last {
                return None;
            }
            // Index of the last sample with sample.t <= t.
            let prev_idx = samples.partition_point(|s| s.t <= t) - 1;
            let prev = &samples[prev_idx];
            match mode {
                ResampleMode::Hold => match &prev.values {
                    Some(v) => Some(v.clone()),
                    None => nearest_valid(t, prev_idx).map(|s| s.values.clone().unwrap()),
                },
                ResampleMode::Linear => {
                    if prev.t == t {
                        return match &prev.values {
                            Some(v) => Some(v.clone()),
                            None => nearest_valid(t, prev_idx).map(|s| s.values.clone().unwrap()),
                        };
                    }
                    let next = &samples[prev_idx + 1]; // exists: t < last
                    match (&prev.values, &next.values) {
                        (Some(a), Some(b)) => {
                            let w = (t - prev.t) / (next.t - prev.t);
                            Some(
                                a.iter()
                                    .zip(b)
                                    .map(|(&va, &vb)| va + (vb - va) * w)
                                    .collect(),
                            )
                        }
                        _ => nearest_valid(t, prev_idx).map(|s| s.values.clone().unwrap()),
                    }
                }
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Fused records
// ---------------------------------------------------------------------------

/// One grid tick: TCP position and laser state copied verbatim from the robot
/// stream, plus the three per-modality channel blocks with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRecord {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub laser_on: bool,
    pub mp: Option<[f64; MP_CHANNELS]>,
    pub ac: Option<[f64; AC_CHANNELS]>,
    pub th: Option<[f64; TH_CHANNELS]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusedDataset {
    pub records: Vec<FusedRecord>,
}

fn to_array<const N: usize>(v: Option<Vec<f64>>) -> Result<Option<[f64; N]>> {
    match v {
        None => Ok(None),
        Some(vec) => {
            let len = vec.len();
            let arr: [f64; N] = vec
                .try_into()
                .map_err(|_| Error::DimensionMismatch(format!("channel block {len} != {N}")))?;
            Ok(Some(arr))
        }
    }
}

/// Assembles fused records: one per robot sample, in robot order. The robot
/// stream must lie exactly on the 250 Hz grid; positions are copied, never
/// interpolated. Each resampled stream must already be aligned to the grid.
pub fn fuse(
    mp: Vec<Option<Vec<f64>>>,
    ac: Vec<Option<Vec<f64>>>,
    th: Vec<Option<Vec<f64>>>,
    robot: &[RobotSample],
) -> Result<FusedDataset> {
    for (name, stream) in [("meltpool", &mp), ("acoustic", &ac), ("thermal", &th)] {
        if stream.len() != robot.len() {
            return Err(Error::GridMismatch(format!(
                "{name} resampled length {} != robot samples {}",
                stream.len(),
                robot.len()
            )));
        }
    }
    let mut records = Vec::with_capacity(robot.len());
    let mut last_tick: Option<i64> = None;
    for (i, ((r, mp_v), (ac_v, th_v))) in
        robot.iter().zip(mp).zip(ac.into_iter().zip(th)).enumerate()
    {
        let tick = (r.t * GRID_HZ).round() as i64;
        let on_grid = tick as f64 / GRID_HZ;
        if (r.t - on_grid).abs() > 1e-9 {
            return Err(Error::GridMismatch(format!(
                "robot sample {i} at t={} is off the {GRID_HZ} Hz grid",
                r.t
            )));
        }
        if let Some(prev) = last_tick {
            if tick <= prev {
                return Err(Error::GridMismatch(format!(
                    "robot sample {i} repeats grid tick {tick}"
                )));
            }
        }
        last_tick = Some(tick);
        records.push(FusedRecord {
            t: on_grid,
            x: r.x,
            y: r.y,
            z: r.z,
            laser_on: r.laser_on,
            mp: to_array::<MP_CHANNELS>(mp_v)?,
            ac: to_array::<AC_CHANNELS>(ac_v)?,
            th: to_array::<TH_CHANNELS>(th_v)?,
        });
    }
    Ok(FusedDataset { records })
}

// ---------------------------------------------------------------------------
// Digital twin
// ---------------------------------------------------------------------------

/// Finalized per-channel aggregate of a voxel. `n` counts the records whose
/// channel was valid; `mean`/`var`/`max` are zero when `n` is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub n: usize,
    pub mean: f64,
    pub var: f64,
    pub max: f64,
}

impl ChannelStats {
    fn empty() -> Self {
        Self { n: 0, mean: 0.0, var: 0.0, max: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelStats {
    /// Laser-on fused records mapped into this voxel.
    pub count: usize,
    pub channels: Vec<ChannelStats>,
    pub label: QualityLabel,
}

/// Voxel key is `(iz, iy, ix)` so iteration groups by layer.
pub type VoxelKey = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct DigitalTwin {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub voxels: BTreeMap<VoxelKey, VoxelStats>,
    /// Laser-on records whose position fell outside the declared dims.
    pub out_of_bounds: usize,
}

impl DigitalTwin {
    pub fn voxel_center(&self, key: VoxelKey) -> [f64; 3] {
        let (iz, iy, ix) = key;
        [
            self.origin[0] + (ix as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (iy as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (iz as f64 + 0.5) * self.voxel_size,
        ]
    }

    /// Sorted distinct occupied layer indices (z voxel indices).
    pub fn occupied_layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.voxels.keys().map(|k| k.0).collect();
        layers.dedup();
        layers
    }

    pub fn total_count(&self) -> usize {
        self.voxels.values().map(|v| v.count).sum()
    }
}

// Welford-style streaming accumulator, finalized into ChannelStats.
#[derive(Clone, Copy)]
struct ChannelAccum {
    n: usize,
    mean: f64,
    m2: f64,
    max: f64,
}

impl ChannelAccum {
    fn new() -> Self {
        Self { n: 0, mean: 0.0, m2: 0.0, max: f64::NEG_INFINITY }
    }

    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
        self.max = self.max.max(x);
    }

    fn finalize(self) -> ChannelStats {
        if self.n == 0 {
            ChannelStats::empty()
        } else {
            ChannelStats {
                n: self.n,
                mean: self.mean,
                var: self.m2 / self.n as f64,
                max: self.max,
            }
        }
    }
}

/// Maps every laser-on record to the voxel containing its TCP position and
/// accumulates count plus per-channel mean/variance/max, honoring validity
/// flags. Laser-off records are skipped; in-bounds counts plus
/// `out_of_bounds` always equal the laser-on record total.
pub fn voxelize(
    dataset: &FusedDataset,
    origin: [f64; 3],
    voxel_size: f64,
    dims: [usize; 3],
) -> Result<DigitalTwin> {
    if !(voxel_size > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel_size {voxel_size} must be > 0")));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("twin dims {dims:?} must all be >= 1")));
    }
    let mut accum: BTreeMap<VoxelKey, (usize, Vec<ChannelAccum>)> = BTreeMap::new();
    let mut out_of_bounds = 0usize;
    for rec in &dataset.records {
        if !rec.laser_on {
            continue;
        }
        let idx = |p: f64, o: f64| ((p - o) / voxel_size).floor();
        let (fx, fy, fz) = (idx(rec.x, origin[0]), idx(rec.y, origin[1]), idx(rec.z, origin[2]));
        if fx < 0.0
            || fy < 0.0
            || fz < 0.0
            || fx >= dims[0] as f64
            || fy >= dims[1] as f64
            || fz >= dims[2] as f64
        {
            out_of_bounds += 1;
            continue;
        }
        let key = (fz as usize, fy as usize, fx as usize);
        let entry = accum
            .entry(key)
            .or_insert_with(|| (0, vec![ChannelAccum::new(); FEATURE_CHANNELS]));
        entry.0 += 1;
        if let Some(mp) = &rec.mp {
            for (c, &v) in mp.iter().enumerate() {
                entry.1[c].push(v);
            }
        }
        if let Some(ac) = &rec.ac {
            for (c, &v) in ac.iter().enumerate() {
                entry.1[MP_CHANNELS + c].push(v);
            }
        }
        if let Some(th) = &rec.th {
            for (c, &v) in th.iter().enumerate() {
                entry.1[MP_CHANNELS + AC_CHANNELS + c].push(v);
            }
        }
    }
    let voxels = accum
        .into_iter()
        .map(|(key, (count, chans))| {
            let channels = chans.into_iter().map(ChannelAccum::finalize).collect();
            (key, VoxelStats { count, channels, label: QualityLabel::Ok })
        })
        .collect();
    Ok(DigitalTwin { origin, voxel_size, dims, voxels, out_of_bounds })
}

// ---------------------------------------------------------------------------
// Twin export / import
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinMeta {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub out_of_bounds: usize,
}

pub fn twin_csv_header() -> String {
    let mut h = String::from("ix,iy,iz,cx,cy,cz,count");
    for name in channel_names() {
        h.push_str(&format!(",mean_{name},max_{name},var_{name}"));
    }
    h.push_str(",label");
    h
}

/// Path of the metadata sidecar next to a twin CSV.
pub fn twin_meta_path(csv_path: &Path) -> std::path::PathBuf {
    let stem = csv_path.file_stem().and_then(|s| s.to_str()).unwrap_or("twin");
    csv_path.with_file_name(format!("{stem}_meta.json"))
}

pub fn export_twin(twin: &DigitalTwin, csv_path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = create_writer(csv_path)?;
    writeln!(w, "{}", twin_csv_header()).map_err(|e| write_err(csv_path, e))?;
    for (&key, stats) in &twin.voxels {
        let (iz, iy, ix) = key;
        let c = twin.voxel_center(key);
        write!(
            w,
            "{ix},{iy},{iz},{},{},{},{}",
            fmt_val(c[0]),
            fmt_val(c[1]),
            fmt_val(c[2]),
            stats.count
        )
        .map_err(|e| write_err(csv_path, e))?;
        for ch in &stats.channels {
            write!(w, ",{},{},{}", fmt_val(ch.mean), fmt_val(ch.max), fmt_val(ch.var))
                .map_err(|e| write_err(csv_path, e))?;
        }
        writeln!(w, ",{}", stats.label.as_str()).map_err(|e| write_err(csv_path, e))?;
    }
    w.flush().map_err(|e| write_err(csv_path, e))?;

    let meta = TwinMeta {
        origin: twin.origin,
        voxel_size: twin.voxel_size,
        dims: twin.dims,
        out_of_bounds: twin.out_of_bounds,
    };
    let meta_path = twin_meta_path(csv_path);
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::InvalidArgument(format!("twin meta serialization: {e}")))?;
    std::fs::write(&meta_path, json + "\n").map_err(|e| Error::io(meta_path, e))
}

/// Reloads an exported twin. Per-channel record counts are not stored in the
/// file, so reloaded channel `n` mirrors the voxel count; the printed
/// statistics round-trip exactly.
pub fn load_twin(csv_path: &Path) -> Result<DigitalTwin> {
    let meta_path = twin_meta_path(csv_path);
    let meta_text =
        std::fs::read_to_string(&meta_path).map_err(|e| Error::io(meta_path.clone(), e))?;
    let meta: TwinMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::parse(&meta_path, 1, format!("bad twin metadata: {e}")))?;

    let table = crate::io::read_csv(csv_path, &twin_csv_header())?;
    let mut voxels = BTreeMap::new();
    for (line, fields) in &table.rows {
        let ix = crate::io::parse_usize(csv_path, *line, "ix", &fields[0])?;
        let iy = crate::io::parse_usize(csv_path, *line, "iy", &fields[1])?;
        let iz = crate::io::parse_usize(csv_path, *line, "iz", &fields[2])?;
        let count = crate::io::parse_usize(csv_path, *line, "count", &fields[6])?;
        let mut channels = Vec::with_capacity(FEATURE_CHANNELS);
        for c in 0..FEATURE_CHANNELS {
            let base = 7 + 3 * c;
            let mean = crate::io::parse_f64(csv_path, *line, "mean", &fields[base])?;
            let max = crate::io::parse_f64(csv_path, *line, "max", &fields[base + 1])?;
            let var = crate::io::parse_f64(csv_path, *line, "var", &fields[base + 2])?;
            channels.push(ChannelStats { n: count, mean, var, max });
        }
        let label = QualityLabel::parse(&fields[7 + 3 * FEATURE_CHANNELS]).ok_or_else(|| {
            Error::parse(csv_path, *line, format!("unknown label {:?}", fields.last().unwrap()))
        })?;
        voxels.insert((iz, iy, ix), VoxelStats { count, channels, label });
    }
    Ok(DigitalTwin {
        origin: meta.origin,
        voxel_size: meta.voxel_size,
        dims: meta.dims,
        voxels,
        out_of_bounds: meta.out_of_bounds,
    })
}
