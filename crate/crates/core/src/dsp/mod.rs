//! Acoustic feature extraction: mel / linear filterbank energies and MFCCs,
//! plus resampling and speed-perturbation augmentation.

mod resample;
mod wav;

pub use resample::{resample, speed_perturb};
pub use wav::{read_wav, write_wav, AudioClip};

use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which feature family to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    Mel,
    Linear,
    Mfcc,
}

/// Feature extraction parameters.
///
/// `n_bins` counts mel filters, linear bands, or cepstra depending on the
/// family. `deltas` and `cmvn` only apply to MFCCs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSpec {
    pub family: FeatureFamily,
    pub n_bins: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub log_floor: f64,
    pub deltas: bool,
    pub cmvn: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            family: FeatureFamily::Mel,
            n_bins: 80,
            frame_len: 2048,
            hop: 512,
            sample_rate: 44_100,
            log_floor: 1e-10,
            deltas: false,
            cmvn: false,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::Feature("n_bins must be at least 1".into()));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::Feature(format!(
                "hop {} must be in 1..={}",
                self.hop, self.frame_len
            )));
        }
        if !self.frame_len.is_power_of_two() {
            return Err(Error::Feature(format!(
                "frame_len {} must be a power of two",
                self.frame_len
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Feature("log_floor must be positive".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Feature("sample_rate must be positive".into()));
        }
        Ok(())
    }

    /// Number of frames produced for a clip of `n_samples`.
    pub fn frame_count(&self, n_samples: usize) -> Result<usize> {
        if n_samples < self.frame_len {
            return Err(Error::Feature(format!(
                "clip of {n_samples} samples is shorter than one frame; need at least {}",
                self.frame_len
            )));
        }
        Ok(1 + (n_samples - self.frame_len) / self.hop)
    }

    /// Width of the produced feature matrix (deltas triple MFCC width).
    pub fn output_width(&self) -> usize {
        match self.family {
            FeatureFamily::Mfcc if self.deltas => self.n_bins * 3,
            _ => self.n_bins,
        }
    }

    pub fn frame_period_s(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }
}

/// Frames-by-bins feature matrix with bin-axis metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    n_frames: usize,
    n_bins: usize,
    /// Center frequency per bin in Hz; empty for cepstral features.
    bin_centers: Vec<f64>,
    pub spec: FeatureSpec,
}

impl FeatureMatrix {
    pub fn new(
        values: Vec<f64>,
        n_frames: usize,
        n_bins: usize,
        bin_centers: Vec<f64>,
        spec: FeatureSpec,
    ) -> Result<Self> {
        if n_frames == 0 || n_bins == 0 {
            return Err(Error::Feature("feature matrix cannot be empty".into()));
        }
        if values.len() != n_frames * n_bins {
            return Err(Error::Feature(format!(
                "{} values for {n_frames}x{n_bins} matrix",
                values.len()
            )));
        }
        if !bin_centers.is_empty() && bin_centers.len() != n_bins {
            return Err(Error::Feature("bin_centers length mismatch".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Feature("non-finite feature value".into()));
        }
        Ok(FeatureMatrix {
            values,
            n_frames,
            n_bins,
            bin_centers,
            spec,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bin_centers(&self) -> &[f64] {
        &self.bin_centers
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_bins..(i + 1) * self.n_bins]
    }

    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.n_bins + bin]
    }

    /// Keep only the given bins (used by sequential forward search).
    /// Frame count and per-bin metadata alignment are preserved.
    pub fn restrict_bins(&self, bins: &[usize]) -> Result<FeatureMatrix> {
        if bins.is_empty() {
            return Err(Error::Feature("empty bin subset".into()));
        }
        for &b in bins {
            if b >= self.n_bins {
                return Err(Error::Feature(format!(
                    "bin {b} out of range 0..{}",
                    self.n_bins
                )));
            }
        }
        let mut values = Vec::with_capacity(self.n_frames * bins.len());
        for f in 0..self.n_frames {
            for &b in bins {
                values.push(self.at(f, b));
            }
        }
        let bin_centers = if self.bin_centers.is_empty() {
            vec![]
        } else {
            bins.iter().map(|&b| self.bin_centers[b]).collect()
        };
        FeatureMatrix::new(
            values,
            self.n_frames,
            bins.len(),
            bin_centers,
            self.spec.clone(),
        )
    }

    /// Dump as CSV: one header row of bin centers, one row per frame.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = if self.bin_centers.is_empty() {
            (0..self.n_bins).map(|i| format!("c{i}")).collect()
        } else {
            self.bin_centers.iter().map(|c| format!("{c:.3}")).collect()
        };
        writeln!(w, "{}", header.join(","))?;
        for f in 0..self.n_frames {
            let row: Vec<String> = self.frame(f).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// HTK mel scale.
fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank rows over one-sided FFT bins.
///
/// `edges` must be strictly increasing with two extra points: `edges[0]` is
/// the lower edge of the first filter, `edges[n+1]` the upper edge of the
/// last, and `edges[1..=n]` the filter peaks.
fn triangular_bank(edges: &[f64], n_fft: usize, sample_rate: u32) -> (Vec<f64>, Vec<f64>) {
    let n_filters = edges.len() - 2;
    let n_half = n_fft / 2 + 1;
    let hz_per_bin = sample_rate as f64 / n_fft as f64;
    let mut bank = vec![0.0; n_filters * n_half];
    for i in 0..n_filters {
        let (lo, mid, hi) = (edges[i], edges[i + 1], edges[i + 2]);
        for k in 0..n_half {
            let f = k as f64 * hz_per_bin;
            let w = if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            if w > 0.0 {
                bank[i * n_half + k] = w;
            }
        }
        // A filter narrower than the FFT grid gets its nearest bin, so no
        // filter is silently empty.
        if bank[i * n_half..(i + 1) * n_half].iter().all(|&w| w == 0.0) {
            let k = ((mid / hz_per_bin).round() as usize).min(n_half - 1);
            bank[i * n_half + k] = 1.0;
        }
    }
    let centers = edges[1..=n_filters].to_vec();
    (bank, centers)
}

/// Mel filterbank: `n_mels x (n_fft/2 + 1)` triangular filters with peaks
/// equally spaced on the HTK mel scale from 0 Hz to Nyquist.
///
/// Returns `(weights, center_frequencies_hz)`.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_half = n_fft / 2 + 1;
    if n_mels == 0 {
        return Err(Error::Feature("n_mels must be at least 1".into()));
    }
    if n_mels > n_half {
        return Err(Error::Feature(format!(
            "n_mels {n_mels} exceeds FFT bin count {n_half}"
        )));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    Ok(triangular_bank(&edges, n_fft, sample_rate))
}

/// Linearly spaced triangular filterbank from 0 Hz to Nyquist.
pub fn linear_filterbank(
    n_bands: usize,
    n_fft: usize,
    sample_rate: u32,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_half = n_fft / 2 + 1;
    if n_bands == 0 {
        return Err(Error::Feature("n_bands must be at least 1".into()));
    }
    if n_bands > n_half {
        return Err(Error::Feature(format!(
            "n_bands {n_bands} exceeds FFT bin count {n_half}"
        )));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let edges: Vec<f64> = (0..n_bands + 2)
        .map(|i| nyquist * i as f64 / (n_bands + 1) as f64)
        .collect();
    Ok(triangular_bank(&edges, n_fft, sample_rate))
}

/// One-sided power spectrogram of Hann-windowed frames.
/// Returns row-major `n_frames x (frame_len/2 + 1)`.
fn power_spectrogram(samples: &[f32], spec: &FeatureSpec) -> Result<(Vec<f64>, usize)> {
    let n_frames = spec.frame_count(samples.len())?;
    let n_fft = spec.frame_len;
    let n_half = n_fft / 2 + 1;

    let window: Vec<f64> = (0..n_fft)
        .map(|i| {
            let phase = std::f64::consts::TAU * i as f64 / n_fft as f64;
            0.5 * (1.0 - phase.cos())
        })
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let mut power = vec![0.0; n_frames * n_half];
    for fi in 0..n_frames {
        let start = fi * spec.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(samples[start + i] as f64 * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..n_half {
            power[fi * n_half + k] = buf[k].norm_sqr();
        }
    }
    Ok((power, n_frames))
}

/// Apply a filterbank to the power spectrogram and log-compress.
fn log_filterbank_energies(
    power: &[f64],
    n_frames: usize,
    n_half: usize,
    bank: &[f64],
    n_filters: usize,
    log_floor: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; n_frames * n_filters];
    // energies = power [n_frames, n_half] . bank^T [n_half, n_filters]
    unsafe {
        matrixmultiply::dgemm(
            n_frames,
            n_half,
            n_filters,
            1.0,
            power.as_ptr(),
            n_half as isize,
            1,
            bank.as_ptr(),
            1,
            n_half as isize,
            0.0,
            out.as_mut_ptr(),
            n_filters as isize,
            1,
        );
    }
    for v in &mut out {
        // Filterbank weights and powers are nonnegative; clamp any residual
        // rounding noise before the log.
        *v = (v.max(0.0) + log_floor).ln();
    }
    out
}

/// Orthonormal DCT-II over the filter axis, keeping `n_out` coefficients.
fn dct2(values: &[f64], n_frames: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_frames * n_out];
    let norm0 = (1.0 / n_in as f64).sqrt();
    let norm = (2.0 / n_in as f64).sqrt();
    for f in 0..n_frames {
        let row = &values[f * n_in..(f + 1) * n_in];
        for k in 0..n_out {
            let mut acc = 0.0;
            for (m, &x) in row.iter().enumerate() {
                acc += x
                    * (std::f64::consts::PI * k as f64 * (2.0 * m as f64 + 1.0)
                        / (2.0 * n_in as f64))
                        .cos();
            }
            out[f * n_out + k] = acc * if k == 0 { norm0 } else { norm };
        }
    }
    out
}

/// Regression deltas over a +/-2 frame window, edge frames clamped.
fn deltas(values: &[f64], n_frames: usize, n_bins: usize) -> Vec<f64> {
    const W: isize = 2;
    let denom: f64 = 2.0 * (1..=W).map(|k| (k * k) as f64).sum::<f64>();
    let mut out = vec![0.0; n_frames * n_bins];
    let clamp = |t: isize| -> usize { t.clamp(0, n_frames as isize - 1) as usize };
    for t in 0..n_frames as isize {
        for b in 0..n_bins {
            let mut acc = 0.0;
            for k in 1..=W {
                let fwd = values[clamp(t + k) * n_bins + b];
                let bwd = values[clamp(t - k) * n_bins + b];
                acc += k as f64 * (fwd - bwd);
            }
            out[t as usize * n_bins + b] = acc / denom;
        }
    }
    out
}

/// Per-clip mean/variance normalization of every column.
fn cmvn_in_place(values: &mut [f64], n_frames: usize, n_bins: usize) {
    for b in 0..n_bins {
        let mut mean = 0.0;
        for f in 0..n_frames {
            mean += values[f * n_bins + b];
        }
        mean /= n_frames as f64;
        let mut var = 0.0;
        for f in 0..n_frames {
            let d = values[f * n_bins + b] - mean;
            var += d * d;
        }
        var /= n_frames as f64;
        let sd = var.sqrt().max(1e-10);
        for f in 0..n_frames {
            let v = &mut values[f * n_bins + b];
            *v = (*v - mean) / sd;
        }
    }
}

/// Extract a feature matrix from a clip.
///
/// The clip is first brought to `spec.sample_rate` (in either direction),
/// then framed (`frame_len` samples every `hop`), Hann-windowed and
/// transformed. Mel and linear families yield `log(power + log_floor)`
/// filterbank energies; MFCCs apply a DCT to log mel energies with optional
/// delta/acceleration appending and per-clip CMVN.
pub fn extract_features(clip: &AudioClip, spec: &FeatureSpec) -> Result<FeatureMatrix> {
    spec.validate()?;
    let clip = resample(clip, spec.sample_rate)?;
    let n_half = spec.frame_len / 2 + 1;
    let (power, n_frames) = power_spectrogram(&clip.samples, spec)?;

    match spec.family {
        FeatureFamily::Mel | FeatureFamily::Linear => {
            let (bank, centers) = match spec.family {
                FeatureFamily::Mel => {
                    mel_filterbank(spec.n_bins, spec.frame_len, spec.sample_rate)?
                }
                _ => linear_filterbank(spec.n_bins, spec.frame_len, spec.sample_rate)?,
            };
            let values = log_filterbank_energies(
                &power,
                n_frames,
                n_half,
                &bank,
                spec.n_bins,
                spec.log_floor,
            );
            FeatureMatrix::new(values, n_frames, spec.n_bins, centers, spec.clone())
        }
        FeatureFamily::Mfcc => {
            let n_mels = spec.n_bins.max(40);
            let (bank, _) = mel_filterbank(n_mels, spec.frame_len, spec.sample_rate)?;
            let log_mel =
                log_filterbank_energies(&power, n_frames, n_half, &bank, n_mels, spec.log_floor);
            let mut values = dct2(&log_mel, n_frames, n_mels, spec.n_bins);
            let mut width = spec.n_bins;
            if spec.deltas {
                let d1 = deltas(&values, n_frames, spec.n_bins);
                let d2 = deltas(&d1, n_frames, spec.n_bins);
                let mut joined = Vec::with_capacity(n_frames * spec.n_bins * 3);
                for f in 0..n_frames {
                    joined.extend_from_slice(&values[f * spec.n_bins..(f + 1) * spec.n_bins]);
                    joined.extend_from_slice(&d1[f * spec.n_bins..(f + 1) * spec.n_bins]);
                    joined.extend_from_slice(&d2[f * spec.n_bins..(f + 1) * spec.n_bins]);
                }
                values = joined;
                width = spec.n_bins * 3;
            }
            if spec.cmvn {
                cmvn_in_place(&mut values, n_frames, width);
            }
            FeatureMatrix::new(values, n_frames, width, vec![], spec.clone())
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// A sine tone test clip.
    pub fn sine_clip(freq: f64, sample_rate: u32, n: usize) -> AudioClip {
        let samples = (0..n)
            .map(|i| {
                (std::f64::consts::TAU * freq * i as f64 / sample_rate as f64).sin() as f32 * 0.5
            })
            .collect();
        AudioClip::new(samples, sample_rate).unwrap()
    }

    /// Independent FFT-peak oracle: dominant frequency of a whole clip.
    pub fn dominant_freq_hz(clip: &AudioClip) -> f64 {
        let n = clip.len();
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex<f64>> = clip
            .samples
            .iter()
            .map(|&s| Complex::new(s as f64, 0.0))
            .collect();
        fft.process(&mut buf);
        let half = n / 2 + 1;
        let (mut best_k, mut best_p) = (0usize, -1.0);
        // Skip DC.
        for (k, v) in buf.iter().enumerate().take(half).skip(1) {
            let p = v.norm_sqr();
            if p > best_p {
                best_p = p;
                best_k = k;
            }
        }
        best_k as f64 * clip.sample_rate as f64 / n as f64
    }

    fn noise_clip(n: usize, seed: u64) -> AudioClip {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, "dsp-test", 0);
        let samples = (0..n).map(|_| rng.gen_range(-0.5f32..0.5f32)).collect();
        AudioClip::new(samples, 44_100).unwrap()
    }

    #[test]
    fn frame_count_matches_formula_for_mean_cough_length() {
        // 0.62 s at 44.1 kHz -> 27342 samples -> 50 frames.
        let spec = FeatureSpec::default();
        let n = (0.62f64 * 44_100.0).round() as usize;
        assert_eq!(spec.frame_count(n).unwrap(), 50);
    }

    #[test]
    fn short_clip_error_names_required_length() {
        let spec = FeatureSpec::default();
        let clip = noise_clip(1000, 1);
        let err = extract_features(&clip, &spec).unwrap_err();
        assert!(err.to_string().contains("2048"), "{err}");
    }

    #[test]
    fn silent_clip_hits_log_floor() {
        let spec = FeatureSpec::default();
        let clip = AudioClip::new(vec![0.0; 4096], 44_100).unwrap();
        let feats = extract_features(&clip, &spec).unwrap();
        let expect = spec.log_floor.ln();
        for &v in feats.values() {
            assert!((v - expect).abs() < 1e-12, "silent value {v} vs {expect}");
        }
    }

    #[test]
    fn mel_filter_peaks_increase_and_cover_spectrum() {
        let (bank, centers) = mel_filterbank(80, 2048, 44_100).unwrap();
        let n_half = 2048 / 2 + 1;
        for w in centers.windows(2) {
            assert!(w[1] > w[0], "centers not strictly increasing: {w:?}");
        }
        assert!(centers[0] >= 0.0);
        assert!(*centers.last().unwrap() <= 22_050.0);
        // Contiguous support per filter.
        for i in 0..80 {
            let row = &bank[i * n_half..(i + 1) * n_half];
            let first = row.iter().position(|&w| w > 0.0).unwrap();
            let last = n_half - 1 - row.iter().rev().position(|&w| w > 0.0).unwrap();
            for k in first..=last {
                assert!(row[k] > 0.0, "filter {i} has a hole at bin {k}");
            }
        }
        // Every FFT bin between the first and last center is touched.
        let hz_per_bin = 44_100.0 / 2048.0;
        let lo_bin = (centers[0] / hz_per_bin).ceil() as usize;
        let hi_bin = (centers[79] / hz_per_bin).floor() as usize;
        for k in lo_bin..=hi_bin {
            let covered = (0..80).any(|i| bank[i * n_half + k] > 0.0);
            assert!(covered, "fft bin {k} uncovered");
        }
    }

    #[test]
    fn filterbank_rejects_more_filters_than_bins() {
        assert!(mel_filterbank(2000, 2048, 44_100).is_err());
    }

    #[test]
    fn gain_shifts_log_power_by_two_log_gain() {
        let clip = noise_clip(6000, 2);
        let spec = FeatureSpec::default();
        let base = extract_features(&clip, &spec).unwrap();
        let g = 1.7f32;
        let louder = AudioClip::new(
            clip.samples.iter().map(|s| s * g).collect(),
            clip.sample_rate,
        )
        .unwrap();
        let shifted = extract_features(&louder, &spec).unwrap();
        let expect = 2.0 * (g as f64).ln();
        for (a, b) in base.values().iter().zip(shifted.values()) {
            assert!(
                ((b - a) - expect).abs() < 1e-6,
                "log shift {} vs {expect}",
                b - a
            );
        }
    }

    #[test]
    fn cmvn_standardizes_every_column() {
        let clip = noise_clip(8192, 3);
        let spec = FeatureSpec {
            family: FeatureFamily::Mfcc,
            n_bins: 13,
            deltas: true,
            cmvn: true,
            ..FeatureSpec::default()
        };
        let feats = extract_features(&clip, &spec).unwrap();
        assert_eq!(feats.n_bins(), 39);
        let n = feats.n_frames() as f64;
        for b in 0..feats.n_bins() {
            let mean: f64 = (0..feats.n_frames()).map(|f| feats.at(f, b)).sum::<f64>() / n;
            let var: f64 = (0..feats.n_frames())
                .map(|f| (feats.at(f, b) - mean).powi(2))
                .sum::<f64>()
                / n;
            assert!(mean.abs() < 1e-6, "column {b} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "column {b} variance {var}");
        }
    }

    #[test]
    fn perturb_round_trip_recovers_length() {
        let clip = noise_clip(30_000, 4);
        for f in [0.9, 1.1] {
            let warped = speed_perturb(&clip, f).unwrap();
            let back = speed_perturb(&warped, 1.0 / f).unwrap();
            assert!(
                (back.len() as isize - clip.len() as isize).unsigned_abs() <= 2,
                "round trip {} -> {}",
                clip.len(),
                back.len()
            );
        }
    }

    #[test]
    fn restrict_bins_keeps_frames_and_metadata() {
        let clip = noise_clip(6000, 5);
        let feats = extract_features(&clip, &FeatureSpec::default()).unwrap();
        let sub = feats.restrict_bins(&[3, 10, 41]).unwrap();
        assert_eq!(sub.n_frames(), feats.n_frames());
        assert_eq!(sub.n_bins(), 3);
        assert_eq!(sub.bin_centers()[1], feats.bin_centers()[10]);
        assert_eq!(sub.at(2, 2), feats.at(2, 41));
        assert!(feats.restrict_bins(&[99]).is_err());
        assert!(feats.restrict_bins(&[]).is_err());
    }
}
