//! Temperature-field features from the IR camera.
//!
//! Frames arrive as apparent (unity-emissivity) readings. Each frame is
//! segmented into molten pool / heat-affected zone by apparent-temperature
//! thresholds, corrected with the graybody total-radiance model
//! `T = T_apparent * eps^(-1/4)`, and reduced to peak / mean / variance /
//! kurtosis over the region of interest.

use serde::{Deserialize, Serialize};

use crate::components::{largest_component_2d, Connectivity};
use crate::error::{Error, Result};
use crate::exec;
use crate::io::{create_writer, fmt_time, fmt_val, write_err};
use crate::meltpool::BinaryMask;

/// One radiometric frame, kelvin, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalFrame {
    pub t: f64,
    width: usize,
    height: usize,
    kelvin: Vec<f64>,
}

impl ThermalFrame {
    pub fn new(t: f64, width: usize, height: usize, kelvin: Vec<f64>) -> Result<Self> {
        if kelvin.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "thermal grid length {} != {width}x{height}",
                kelvin.len()
            )));
        }
        Ok(Self { t, width, height, kelvin })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.kelvin
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.kelvin[y * self.width + x]
    }
}

/// Per-cell emissivity, each value in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EmissivityMap {
    width: usize,
    height: usize,
    eps: Vec<f64>,
}

impl EmissivityMap {
    pub fn values(&self) -> &[f64] {
        &self.eps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalConfig {
    /// Apparent temperature at or above which a cell is molten.
    pub melt_threshold_k: f64,
    /// Apparent temperature at or above which a cell belongs to the ROI.
    pub haz_threshold_k: f64,
    pub emissivity_melt: f64,
    pub emissivity_haz: f64,
}

impl Default for ThermalConfig {
    fn default() -> Self {
        Self {
            melt_threshold_k: 1300.0,
            haz_threshold_k: 600.0,
            emissivity_melt: 0.3,
            emissivity_haz: 0.5,
        }
    }
}

/// ROI = largest 8-connected component of cells at or above the threshold;
/// empty when nothing is hot.
pub fn segment_roi(frame: &ThermalFrame, haz_threshold_k: f64) -> BinaryMask {
    let hot: Vec<bool> = frame.kelvin.iter().map(|&t| t >= haz_threshold_k).collect();
    let mut bits = vec![false; hot.len()];
    if let Some(comp) = largest_component_2d(frame.width, frame.height, &hot, Connectivity::Eight) {
        for idx in comp {
            bits[idx] = true;
        }
    }
    BinaryMask::new(frame.width, frame.height, bits).expect("mask dims match frame")
}

/// Emissivity assignment: molten cells (apparent T >= melt threshold) get the
/// molten-pool value, other ROI cells the HAZ value, background 1.0.
/// The ROI is re-segmented from this frame's apparent readings.
pub fn build_emissivity_map(frame: &ThermalFrame, cfg: &ThermalConfig) -> EmissivityMap {
    let roi = segment_roi(frame, cfg.haz_threshold_k);
    let eps = frame
        .kelvin
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let x = i % frame.width;
            let y = i / frame.width;
            if t >= cfg.melt_threshold_k {
                cfg.emissivity_melt
            } else if roi.get(x, y) {
                cfg.emissivity_haz
            } else {
                1.0
            }
        })
        .collect();
    EmissivityMap { width: frame.width, height: frame.height, eps }
}

/// Graybody correction `T = T_apparent * eps^(-1/4)` per cell. Exact identity
/// where eps = 1.
pub fn correct_emissivity(frame: &ThermalFrame, eps: &EmissivityMap) -> Result<ThermalFrame> {
    if frame.width != eps.width || frame.height != eps.height {
        return Err(Error::DimensionMismatch(format!(
            "thermal {}x{} vs emissivity {}x{}",
            frame.width, frame.height, eps.width, eps.height
        )));
    }
    if let Some(bad) = eps.eps.iter().find(|&&e| !(e > 0.0 && e <= 1.0)) {
        return Err(Error::InvalidArgument(format!("emissivity {bad} outside (0, 1]")));
    }
    let kelvin = frame
        .kelvin
        .iter()
        .zip(&eps.eps)
        .map(|(&t, &e)| t * e.powf(-0.25))
        .collect();
    Ok(ThermalFrame { t: frame.t, width: frame.width, height: frame.height, kelvin })
}

/// Per-frame temperature statistics. `kurtosis` is `None` when the ROI has
/// zero variance; `valid` is false when the ROI is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalFeatures {
    pub t: f64,
    pub valid: bool,
    pub peak: f64,
    pub mean: f64,
    pub variance: f64,
    pub kurtosis: Option<f64>,
    pub roi_pixels: usize,
}

impl ThermalFeatures {
    pub fn invalid(t: f64) -> Self {
        Self { t, valid: false, peak: 0.0, mean: 0.0, variance: 0.0, kurtosis: None, roi_pixels: 0 }
    }

    /// Fused channel vector; only meaningful when `valid` and the kurtosis is
    /// defined.
    pub fn channel_values(&self) -> Option<[f64; 4]> {
        match (self.valid, self.kurtosis) {
            (true, Some(k)) => Some([self.peak, self.mean, self.variance, k]),
            _ => None,
        }
    }
}

/// Population moments over the ROI cells: peak, mean, central variance, and
/// kurtosis `m4 / m2^2` (a normal population gives 3).
pub fn thermal_stats(frame: &ThermalFrame, roi: &BinaryMask) -> ThermalFeatures {
    if roi.width() != frame.width || roi.height() != frame.height {
        return ThermalFeatures::invalid(frame.t);
    }
    let mut values = Vec::new();
    for y in 0..frame.height {
        for x in 0..frame.width {
            if roi.get(x, y) {
                values.push(frame.get(x, y));
            }
        }
    }
    stats_of(frame.t, &values)
}

pub(crate) fn stats_of(t: f64, values: &[f64]) -> ThermalFeatures {
    if values.is_empty() {
        return ThermalFeatures::invalid(t);
    }
    let n = values.len() as f64;
    let peak = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let m4 = values.iter().map(|&v| (v - mean).powi(4)).sum::<f64>() / n;
    let kurtosis = if m2 > 0.0 { Some(m4 / (m2 * m2)) } else { None };
    ThermalFeatures {
        t,
        valid: true,
        peak,
        mean,
        variance: m2,
        kurtosis,
        roi_pixels: values.len(),
    }
}

/// Full per-frame chain: segment on apparent readings, correct emissivity,
/// reduce over the ROI.
pub fn extract_thermal_features(frame: &ThermalFrame, cfg: &ThermalConfig) -> ThermalFeatures {
    let roi = segment_roi(frame, cfg.haz_threshold_k);
    if roi.count() == 0 {
        return ThermalFeatures::invalid(frame.t);
    }
    let eps = build_emissivity_map(frame, cfg);
    match correct_emissivity(frame, &eps) {
        Ok(corrected) => thermal_stats(&corrected, &roi),
        Err(_) => ThermalFeatures::invalid(frame.t),
    }
}

/// Batch extraction; parallel per frame, order preserved.
pub fn extract_thermal_series(frames: &[ThermalFrame], cfg: &ThermalConfig) -> Vec<ThermalFeatures> {
    exec::map_ordered(frames, |f| extract_thermal_features(f, cfg))
}

pub const THERMAL_CSV_HEADER: &str = "t,peak,mean,variance,kurtosis,roi_pixels,valid";

pub fn write_thermal_csv(features: &[ThermalFeatures], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = create_writer(path)?;
    writeln!(w, "{THERMAL_CSV_HEADER}").map_err(|e| write_err(path, e))?;
    for f in features {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            fmt_time(f.t),
            fmt_val(f.peak),
            fmt_val(f.mean),
            fmt_val(f.variance),
            fmt_val(f.kurtosis.unwrap_or(f64::NAN)),
            f.roi_pixels,
            f.valid as u8
        )
        .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}
