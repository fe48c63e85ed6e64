//! Frame-level acoustic features from the process microphone.
//!
//! The signal is denoised by spectral gating against a laser-off noise
//! profile, split into fixed-size frames, and each frame yields the amplitude
//! envelope, magnitude spectrum descriptors (centroid, bandwidth, roll-off)
//! and 20 mel-cepstral coefficients.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::io::{create_writer, fmt_time, fmt_val, write_err};

/// Number of mel filters and retained cepstral coefficients.
pub const MFCC_COUNT: usize = 20;

/// Mono audio in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub rate_hz: f64,
}

impl AudioSignal {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz
    }
}

/// One analysis frame; frames past the signal end are zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFrame {
    pub start_sample: usize,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hann,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Bin center frequencies, Hz, k * rate / N for k = 0..=N/2.
    pub freqs: Vec<f64>,
    /// One-sided magnitudes |X_k|.
    pub mags: Vec<f64>,
}

/// Per-frame acoustic feature record; `t` is the frame center time.
/// `valid` is false when the frame spectrum is identically zero and the
/// spectral descriptors are undefined (they are NaN in that case).
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeatures {
    pub t: f64,
    pub valid: bool,
    pub ae: f64,
    pub sc: f64,
    pub sbw: f64,
    pub sr: f64,
    pub mfcc: [f64; MFCC_COUNT],
}

impl AcousticFeatures {
    pub fn channel_values(&self) -> [f64; 24] {
        let mut v = [0.0; 24];
        v[0] = self.ae;
        v[1] = self.sc;
        v[2] = self.sbw;
        v[3] = self.sr;
        v[4..].copy_from_slice(&self.mfcc);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub frame_size: usize,
    pub hop: usize,
    /// Cumulative-energy fraction for the roll-off frequency.
    pub rolloff_pct: f64,
    /// Compute features on the denoised signal (a raw-signal escape hatch
    /// exists for diagnostics).
    pub denoise: bool,
    /// Gate threshold = noise mean + gate_k * noise stddev, per bin.
    pub gate_k: f64,
    /// Attenuation applied to gated bins, dB.
    pub gate_attenuation_db: f64,
    /// Frames of temporal magnitude smoothing before the gate decision.
    pub gate_smooth_frames: usize,
    /// Minimum noise-profile length, seconds.
    pub min_noise_s: f64,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            frame_size: 2048,
            hop: 512,
            rolloff_pct: 0.85,
            denoise: true,
            gate_k: 1.5,
            gate_attenuation_db: 20.0,
            gate_smooth_frames: 5,
            min_noise_s: 0.5,
        }
    }
}

// ---------------------------------------------------------------------------
// Framing and elementary features
// ---------------------------------------------------------------------------

/// Splits a signal into `ceil(len / hop)` frames starting at k*hop,
/// zero-padding the tail frames to `frame_size`.
pub fn frame_signal(sig: &AudioSignal, frame_size: usize, hop: usize) -> Result<Vec<AudioFrame>> {
    if frame_size < 2 {
        return Err(Error::InvalidArgument(format!("frame_size {frame_size} < 2")));
    }
    if hop == 0 || hop > frame_size {
        return Err(Error::InvalidArgument(format!(
            "hop {hop} must be in 1..=frame_size ({frame_size})"
        )));
    }
    let n = sig.samples.len();
    let count = n.div_ceil(hop);
    let mut frames = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * hop;
        let mut samples = vec![0.0; frame_size];
        let end = (start + frame_size).min(n);
        samples[..end - start].copy_from_slice(&sig.samples[start..end]);
        frames.push(AudioFrame { start_sample: start, samples });
    }
    Ok(frames)
}

/// Maximum absolute sample value in the frame.
pub fn amplitude_envelope(frame: &AudioFrame) -> f64 {
    frame.samples.iter().fold(0.0, |m, &s| m.max(s.abs()))
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = std::f64::consts::PI * i as f64 / n as f64;
            x.sin() * x.sin()
        })
        .collect()
}

fn fft_forward(fft: &Arc<dyn Fft<f64>>, samples: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    fft.process(&mut buf);
    buf
}

/// One-sided magnitude spectrum of a frame, optionally Hann-windowed.
pub fn magnitude_spectrum(frame: &AudioFrame, window: Window, rate_hz: f64) -> Spectrum {
    let n = frame.samples.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    magnitude_spectrum_with(&fft, frame, window, rate_hz)
}

fn magnitude_spectrum_with(
    fft: &Arc<dyn Fft<f64>>,
    frame: &AudioFrame,
    window: Window,
    rate_hz: f64,
) -> Spectrum {
    let n = frame.samples.len();
    let spectrum = match window {
        Window::None => fft_forward(fft, &frame.samples),
        Window::Hann => {
            let w = hann(n);
            let windowed: Vec<f64> =
                frame.samples.iter().zip(&w).map(|(&s, &wv)| s * wv).collect();
            fft_forward(fft, &windowed)
        }
    };
    let half = n / 2;
    let freqs = (0..=half).map(|k| k as f64 * rate_hz / n as f64).collect();
    let mags = spectrum[..=half].iter().map(|c| c.norm()).collect();
    Spectrum { freqs, mags }
}

/// Magnitude-weighted mean frequency; `None` for an all-zero spectrum.
pub fn spectral_centroid(spec: &Spectrum) -> Option<f64> {
    let total: f64 = spec.mags.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let weighted: f64 = spec.freqs.iter().zip(&spec.mags).map(|(f, m)| f * m).sum();
    Some(weighted / total)
}

/// Magnitude-weighted standard deviation of frequency about the centroid.
pub fn spectral_bandwidth(spec: &Spectrum, centroid: f64) -> Option<f64> {
    let total: f64 = spec.mags.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let var: f64 = spec
        .freqs
        .iter()
        .zip(&spec.mags)
        .map(|(f, m)| m * (f - centroid) * (f - centroid))
        .sum::<f64>()
        / total;
    Some(var.sqrt())
}

/// Smallest frequency below which at least `pct` of the spectral energy
/// (squared magnitude) lies.
pub fn spectral_rolloff(spec: &Spectrum, pct: f64) -> Option<f64> {
    debug_assert!(pct > 0.0 && pct <= 1.0, "roll-off fraction out of range");
    let total: f64 = spec.mags.iter().map(|m| m * m).sum();
    if total <= 0.0 {
        return None;
    }
    let target = pct * total;
    let mut cum = 0.0;
    for (f, m) in spec.freqs.iter().zip(&spec.mags) {
        cum += m * m;
        if cum >= target {
            return Some(*f);
        }
    }
    Some(*spec.freqs.last().unwrap())
}

// ---------------------------------------------------------------------------
// MFCC
// ---------------------------------------------------------------------------

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters as sparse (bin, weight) lists; `n_filters` bands
/// equally spaced on the mel axis over 0..rate/2.
fn mel_filterbank(n_filters: usize, n_fft: usize, rate_hz: f64) -> Vec<Vec<(usize, f64)>> {
    let mel_max = hz_to_mel(rate_hz / 2.0);
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_filters + 1) as f64))
        .collect();
    let half = n_fft / 2;
    (0..n_filters)
        .map(|i| {
            let (lo, mid, hi) = (edges[i], edges[i + 1], edges[i + 2]);
            let mut taps = Vec::new();
            for k in 0..=half {
                let f = k as f64 * rate_hz / n_fft as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    taps.push((k, w));
                }
            }
            taps
        })
        .collect()
}

/// Orthonormal DCT-II of the log mel band energies.
fn dct_ortho(values: &[f64]) -> Vec<f64> {
    let m = values.len() as f64;
    (0..values.len())
        .map(|j| {
            let scale = if j == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            let sum: f64 = values
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    v * (std::f64::consts::PI * j as f64 * (2.0 * i as f64 + 1.0) / (2.0 * m))
                        .cos()
                })
                .sum();
            scale * sum
        })
        .collect()
}

const LOG_FLOOR: f64 = 1e-10;

/// 20 mel-cepstral coefficients: Hann window, power spectrum, triangular mel
/// bands, natural log with a 1e-10 floor, orthonormal DCT-II.
pub fn mfcc(frame: &AudioFrame, rate_hz: f64) -> [f64; MFCC_COUNT] {
    let n = frame.samples.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let bank = mel_filterbank(MFCC_COUNT, n, rate_hz);
    mfcc_with(&fft, &bank, frame, rate_hz)
}

fn mfcc_with(
    fft: &Arc<dyn Fft<f64>>,
    bank: &[Vec<(usize, f64)>],
    frame: &AudioFrame,
    rate_hz: f64,
) -> [f64; MFCC_COUNT] {
    let spec = magnitude_spectrum_with(fft, frame, Window::Hann, rate_hz);
    let power: Vec<f64> = spec.mags.iter().map(|m| m * m).collect();
    let log_energies: Vec<f64> = bank
        .iter()
        .map(|taps| {
            let e: f64 = taps.iter().map(|&(k, w)| w * power[k]).sum();
            e.max(LOG_FLOOR).ln()
        })
        .collect();
    let coeffs = dct_ortho(&log_energies);
    let mut out = [0.0; MFCC_COUNT];
    out.copy_from_slice(&coeffs);
    out
}

// ---------------------------------------------------------------------------
// Spectral-gate denoising
// ---------------------------------------------------------------------------

/// Attenuates time-frequency bins whose (temporally smoothed) magnitude stays
/// below a per-bin threshold learned from a laser-off noise profile.
/// Reconstruction is windowed overlap-add; output length equals input length.
pub fn denoise_spectral_gate(
    sig: &AudioSignal,
    noise_profile: &AudioSignal,
    cfg: &AcousticConfig,
) -> Result<AudioSignal> {
    let got_s = noise_profile.duration_s();
    if got_s < cfg.min_noise_s {
        return Err(Error::NoiseProfileTooShort { got_s, need_s: cfg.min_noise_s });
    }
    let n = cfg.frame_size;
    let hop = cfg.hop;
    let half = n / 2;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let window = hann(n);

    // Per-bin gate threshold from the noise profile.
    let noise_mags = analysis_mags(&fft, &window, &noise_profile.samples, n, hop);
    let frames = noise_mags.len().max(1) as f64;
    let mut mean = vec![0.0; half + 1];
    let mut sq = vec![0.0; half + 1];
    for row in &noise_mags {
        for k in 0..=half {
            mean[k] += row[k];
            sq[k] += row[k] * row[k];
        }
    }
    let threshold: Vec<f64> = (0..=half)
        .map(|k| {
            let mu = mean[k] / frames;
            let var = (sq[k] / frames - mu * mu).max(0.0);
            mu + cfg.gate_k * var.sqrt()
        })
        .collect();

    // Pad so every input sample has full window coverage, then gate per frame.
    let len = sig.samples.len();
    let mut padded = vec![0.0; len + 2 * n];
    padded[n..n + len].copy_from_slice(&sig.samples);
    let n_frames = (padded.len() - n) / hop + 1;

    let mags: Vec<Vec<f64>> = exec::map_indices(n_frames, |m| {
        let start = m * hop;
        let windowed: Vec<f64> =
            (0..n).map(|i| padded[start + i] * window[i]).collect();
        let spec = fft_forward(&fft, &windowed);
        spec[..=half].iter().map(|c| c.norm()).collect()
    });

    let gain = 10f64.powf(-cfg.gate_attenuation_db / 20.0);
    let radius = cfg.gate_smooth_frames / 2;
    let gated: Vec<Vec<f64>> = exec::map_indices(n_frames, |m| {
        let start = m * hop;
        let windowed: Vec<f64> =
            (0..n).map(|i| padded[start + i] * window[i]).collect();
        let mut spec = fft_forward(&fft, &windowed);
        let lo = m.saturating_sub(radius);
        let hi = (m + radius).min(n_frames - 1);
        for k in 0..=half {
            let mut acc = 0.0;
            for row in &mags[lo..=hi] {
                acc += row[k];
            }
            let smoothed = acc / (hi - lo + 1) as f64;
            if smoothed <= threshold[k] {
                spec[k] *= gain;
                if k != 0 && k != half {
                    spec[n - k] *= gain;
                }
            }
        }
        ifft.process(&mut spec);
        // rustfft leaves the inverse unscaled; fold 1/N into the synthesis.
        (0..n).map(|i| spec[i].re / n as f64 * window[i]).collect()
    });

    let mut out = vec![0.0; padded.len()];
    let mut weight = vec![0.0; padded.len()];
    for (m, chunk) in gated.iter().enumerate() {
        let start = m * hop;
        for i in 0..n {
            out[start + i] += chunk[i];
            weight[start + i] += window[i] * window[i];
        }
    }
    let samples = (n..n + len)
        .map(|i| if weight[i] > 1e-12 { out[i] / weight[i] } else { 0.0 })
        .collect();
    Ok(AudioSignal { samples, rate_hz: sig.rate_hz })
}

fn analysis_mags(
    fft: &Arc<dyn Fft<f64>>,
    window: &[f64],
    samples: &[f64],
    n: usize,
    hop: usize,
) -> Vec<Vec<f64>> {
    let half = n / 2;
    if samples.len() < n {
        let mut frame = vec![0.0; n];
        frame[..samples.len()].copy_from_slice(samples);
        let windowed: Vec<f64> = frame.iter().zip(window).map(|(&s, &w)| s * w).collect();
        let spec = fft_forward(fft, &windowed);
        return vec![spec[..=half].iter().map(|c| c.norm()).collect()];
    }
    let count = (samples.len() - n) / hop + 1;
    (0..count)
        .map(|m| {
            let start = m * hop;
            let windowed: Vec<f64> =
                (0..n).map(|i| samples[start + i] * window[i]).collect();
            let spec = fft_forward(fft, &windowed);
            spec[..=half].iter().map(|c| c.norm()).collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Batch extraction
// ---------------------------------------------------------------------------

/// Features for every frame of `sig`; parallel per frame, ordered by time.
pub fn extract_acoustic_features(
    sig: &AudioSignal,
    cfg: &AcousticConfig,
) -> Result<Vec<AcousticFeatures>> {
    let frames = frame_signal(sig, cfg.frame_size, cfg.hop)?;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.frame_size);
    let bank = mel_filterbank(MFCC_COUNT, cfg.frame_size, sig.rate_hz);
    let rate = sig.rate_hz;
    let rolloff_pct = cfg.rolloff_pct;
    let half_frame = cfg.frame_size as f64 / 2.0;
    Ok(exec::map_ordered(&frames, |frame| {
        let t = (frame.start_sample as f64 + half_frame) / rate;
        let ae = amplitude_envelope(frame);
        let spec = magnitude_spectrum_with(&fft, frame, Window::Hann, rate);
        let mfcc = mfcc_with(&fft, &bank, frame, rate);
        match spectral_centroid(&spec) {
            Some(sc) => {
                let sbw = spectral_bandwidth(&spec, sc).unwrap_or(0.0);
                let sr = spectral_rolloff(&spec, rolloff_pct).unwrap_or(0.0);
                AcousticFeatures { t, valid: true, ae, sc, sbw, sr, mfcc }
            }
            None => AcousticFeatures {
                t,
                valid: false,
                ae,
                sc: f64::NAN,
                sbw: f64::NAN,
                sr: f64::NAN,
                mfcc,
            },
        }
    }))
}

pub fn acoustic_csv_header() -> String {
    let mut h = String::from("t,ae,sc,sbw,sr");
    for i in 0..MFCC_COUNT {
        h.push_str(&format!(",mfcc{i:02}"));
    }
    h
}

pub fn write_acoustic_csv(features: &[AcousticFeatures], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = create_writer(path)?;
    writeln!(w, "{}", acoustic_csv_header()).map_err(|e| write_err(path, e))?;
    for f in features {
        write!(
            w,
            "{},{},{},{},{}",
            fmt_time(f.t),
            fmt_val(f.ae),
            fmt_val(f.sc),
            fmt_val(f.sbw),
            fmt_val(f.sr)
        )
        .map_err(|e| write_err(path, e))?;
        for c in &f.mfcc {
            write!(w, ",{}", fmt_val(*c)).map_err(|e| write_err(path, e))?;
        }
        writeln!(w).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}
