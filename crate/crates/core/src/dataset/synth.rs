//! Synthetic cough corpus with planted, recoverable class signal.
//!
//! Each clip is an exponentially decaying noise burst (duration statistics
//! roughly matching real coughs) shaped by two controlled factors:
//!
//! * a class signal: TB clips carry extra band-limited noise inside the
//!   frequency ranges of chosen mel bins, at a configurable dB elevation;
//! * a patient nuisance: every patient gets a fixed resonance peak at a
//!   patient-specific frequency, so patient identity is a real confounder
//!   that the patient-invariance objective has to suppress.
//!
//! Generation is fully deterministic per seed, down to the WAV bytes.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{mel_filterbank, write_wav, AudioClip};
use crate::error::{Error, Result};
use crate::rng;

use super::{CorpusTag, Label};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub coughs_per_patient: usize,
    /// Fraction of patients labeled TB (28/74 by default).
    pub tb_fraction: f64,
    pub sample_rate: u32,
    pub duration_mean_s: f64,
    pub duration_std_s: f64,
    pub duration_min_s: f64,
    pub duration_max_s: f64,
    /// Mel geometry used to map `signal_bins` to frequency ranges.
    pub n_bins: usize,
    pub frame_len: usize,
    /// Feature bins (mel indices) carrying the planted class signal.
    pub signal_bins: Vec<usize>,
    /// In-band power elevation of TB clips, in dB. Zero plants no signal.
    pub signal_strength_db: f64,
    /// Per-clip, per-bin lognormal jitter of the elevation, in dB.
    pub signal_jitter_db: f64,
    /// Strength of the per-patient resonance peak, in dB. Zero disables.
    pub patient_resonance_db: f64,
    /// Fraction of the clip over which the burst onset may be delayed
    /// (0 keeps every burst at the start, cough-like).
    pub burst_jitter: f64,
    /// Background noise level relative to the burst, in dB.
    pub noise_floor_db: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 74,
            coughs_per_patient: 4,
            tb_fraction: 28.0 / 74.0,
            sample_rate: 44_100,
            duration_mean_s: 0.62,
            duration_std_s: 0.32,
            duration_min_s: 0.28,
            duration_max_s: 1.40,
            n_bins: 80,
            frame_len: 2048,
            signal_bins: vec![10, 11, 12, 13, 14],
            signal_strength_db: 10.0,
            signal_jitter_db: 0.0,
            patient_resonance_db: 6.0,
            burst_jitter: 0.0,
            noise_floor_db: -34.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 8 {
            return Err(Error::Corpus(format!(
                "need at least 8 patients, got {}",
                self.n_patients
            )));
        }
        if self.coughs_per_patient == 0 {
            return Err(Error::Corpus("coughs_per_patient must be positive".into()));
        }
        if !(self.tb_fraction > 0.0 && self.tb_fraction < 1.0) {
            return Err(Error::Corpus(format!(
                "tb_fraction {} must lie in (0,1)",
                self.tb_fraction
            )));
        }
        if self.signal_bins.iter().any(|&b| b >= self.n_bins) {
            return Err(Error::Corpus(format!(
                "signal_bins {:?} outside feature bin range 0..{}",
                self.signal_bins, self.n_bins
            )));
        }
        if !(self.duration_min_s > 0.0 && self.duration_min_s <= self.duration_max_s) {
            return Err(Error::Corpus("inconsistent duration bounds".into()));
        }
        if (self.duration_min_s * self.sample_rate as f64) < self.frame_len as f64 {
            return Err(Error::Corpus(format!(
                "duration_min_s {} is shorter than one {}-sample frame",
                self.duration_min_s, self.frame_len
            )));
        }
        if !(0.0..=1.0).contains(&self.burst_jitter) {
            return Err(Error::Corpus("burst_jitter must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientMeta {
    pub id: String,
    pub label: Label,
    pub corpus: CorpusTag,
    pub resonance_hz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipMeta {
    pub path: String,
    pub patient_id: String,
    pub label: Label,
    pub corpus: CorpusTag,
    pub n_samples: usize,
    pub burst_start_s: f64,
    /// Frame index (at the configured frame geometry, hop = frame_len/4)
    /// closest to the burst onset.
    pub burst_frame: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthMeta {
    pub config: SynthConfig,
    pub patients: Vec<PatientMeta>,
    pub clips: Vec<ClipMeta>,
    /// Frequency range (Hz) of each planted signal bin.
    pub signal_bands_hz: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub meta_path: PathBuf,
    pub meta: SynthMeta,
}

fn gauss(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller; u1 bounded away from zero.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// RBJ peaking EQ biquad, applied forward.
fn peaking_filter(x: &mut [f64], f0: f64, q: f64, gain_db: f64, sample_rate: f64) {
    let a = 10f64.powf(gain_db / 40.0);
    let w0 = std::f64::consts::TAU * f0 / sample_rate;
    let alpha = w0.sin() / (2.0 * q);
    let cos_w0 = w0.cos();
    let b0 = 1.0 + alpha * a;
    let b1 = -2.0 * cos_w0;
    let b2 = 1.0 - alpha * a;
    let a0 = 1.0 + alpha / a;
    let a1 = -2.0 * cos_w0;
    let a2 = 1.0 - alpha / a;
    let (b0, b1, b2, a1, a2) = (b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let x0 = *v;
        let y0 = b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x0;
        y2 = y1;
        y1 = y0;
        *v = y0;
    }
}

/// Unit-variance noise confined to `[lo_hz, hi_hz]`, built in the frequency
/// domain.
fn bandpass_noise(
    n: usize,
    lo_hz: f64,
    hi_hz: f64,
    sample_rate: f64,
    rng: &mut ChaCha20Rng,
    planner: &mut FftPlanner<f64>,
) -> Vec<f64> {
    let hz_per_bin = sample_rate / n as f64;
    let lo = (lo_hz / hz_per_bin).ceil() as usize;
    let hi = ((hi_hz / hz_per_bin).floor() as usize).min(n / 2);
    let mut spectrum = vec![Complex::new(0.0, 0.0); n];
    for k in lo.max(1)..=hi {
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let c = Complex::from_polar(1.0, phase);
        spectrum[k] = c;
        spectrum[n - k] = c.conj();
    }
    let ifft = planner.plan_fft_inverse(n);
    ifft.process(&mut spectrum);
    let mut out: Vec<f64> = spectrum.into_iter().map(|c| c.re / n as f64).collect();
    let var = out.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var > 0.0 {
        let s = 1.0 / var.sqrt();
        for v in &mut out {
            *v *= s;
        }
    }
    out
}

/// Generate a corpus on disk: `clips/*.wav`, `manifest.csv` and
/// `synth_meta.json` under `out_dir`. Byte-identical for identical configs.
pub fn synth_corpus(config: &SynthConfig, out_dir: &Path) -> Result<SynthOutput> {
    config.validate()?;
    let clips_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clips_dir)?;

    let sr = config.sample_rate as f64;
    let (_, centers) = mel_filterbank(config.n_bins, config.frame_len, config.sample_rate)?;
    // Signal band per bin: between the neighboring filter centers, the
    // support of that bin's triangular filter.
    let band_of = |b: usize| -> (f64, f64) {
        let lo = if b == 0 { 0.0 } else { centers[b - 1] };
        let hi = if b + 1 < centers.len() {
            centers[b + 1]
        } else {
            sr / 2.0
        };
        (lo, hi)
    };
    let signal_bands: Vec<(f64, f64)> = config.signal_bins.iter().map(|&b| band_of(b)).collect();

    let n_tb = ((config.n_patients as f64 * config.tb_fraction).round() as usize)
        .clamp(2, config.n_patients - 2);

    let mut patients = Vec::with_capacity(config.n_patients);
    for p in 0..config.n_patients {
        let label = if p < n_tb { Label::Tb } else { Label::NotTb };
        let within = if p < n_tb { p } else { p - n_tb };
        let corpus = if within % 2 == 0 { CorpusTag::A } else { CorpusTag::B };
        // Patient resonance frequency, kept clear of the signal bands.
        let mut rng = rng::stream(config.seed, "synth-patient", p as u64);
        let mut resonance_hz = 0.0;
        for _ in 0..64 {
            let f = rng.gen_range(250.0..(sr / 2.0 * 0.8));
            let clear = signal_bands
                .iter()
                .all(|&(lo, hi)| f < lo - 150.0 || f > hi + 150.0);
            resonance_hz = f;
            if clear {
                break;
            }
        }
        patients.push(PatientMeta {
            id: format!("p{p:03}"),
            label,
            corpus,
            resonance_hz,
        });
    }

    let hop = config.frame_len / 4;
    let mut planner = FftPlanner::<f64>::new();
    let mut clip_meta = Vec::new();
    let mut manifest_rows = Vec::new();

    for (p, patient) in patients.iter().enumerate() {
        for c in 0..config.coughs_per_patient {
            let mut rng = rng::stream(
                config.seed,
                "synth-clip",
                ((p as u64) << 20) | c as u64,
            );
            let dur = (config.duration_mean_s + config.duration_std_s * gauss(&mut rng))
                .clamp(config.duration_min_s, config.duration_max_s);
            let n = ((dur * sr).round() as usize).max(config.frame_len);

            // Burst envelope: silence, 6 ms attack, exponential decay.
            let attack = (0.006 * sr) as usize;
            let tau = (0.050 * sr).max(dur * sr / 6.0);
            let max_start = ((n as f64 * 0.6) as usize).saturating_sub(attack);
            let start =
                (rng.gen::<f64>() * config.burst_jitter * max_start as f64).round() as usize;
            let floor = 10f64.powf(config.noise_floor_db / 20.0);
            let envelope: Vec<f64> = (0..n)
                .map(|i| {
                    let e = if i < start {
                        0.0
                    } else if i < start + attack {
                        (i - start) as f64 / attack as f64
                    } else {
                        (-((i - start - attack) as f64) / tau).exp()
                    };
                    e.max(floor)
                })
                .collect();

            // Wideband body.
            let mut body: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();

            // Planted class signal for TB clips.
            if patient.label == Label::Tb && config.signal_strength_db > 0.0 {
                let ratio = 10f64.powf(config.signal_strength_db / 10.0);
                for &(lo, hi) in &signal_bands {
                    let band = bandpass_noise(n, lo, hi, sr, &mut rng, &mut planner);
                    // White-noise power inside the band scales with its
                    // bandwidth share; add enough band power for the target
                    // elevation.
                    let bw_frac = (hi - lo) / (sr / 2.0);
                    let jitter = 10f64.powf(config.signal_jitter_db * gauss(&mut rng) / 10.0);
                    let amp = ((ratio - 1.0) * bw_frac * jitter).sqrt();
                    for (b, v) in body.iter_mut().zip(&band) {
                        *b += amp * v;
                    }
                }
            }

            if config.patient_resonance_db != 0.0 {
                peaking_filter(
                    &mut body,
                    patient.resonance_hz,
                    5.0,
                    config.patient_resonance_db,
                    sr,
                );
            }

            let mut samples: Vec<f64> =
                body.iter().zip(&envelope).map(|(b, e)| b * e).collect();
            let peak = samples
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .max(1e-9);
            let scale = 0.5 / peak;
            for v in &mut samples {
                *v *= scale;
            }

            let name = format!("clips/{}_c{c:02}.wav", patient.id);
            let clip = AudioClip::new(samples.iter().map(|&v| v as f32).collect(), config.sample_rate)?;
            write_wav(&out_dir.join(&name), &clip)?;

            clip_meta.push(ClipMeta {
                path: name.clone(),
                patient_id: patient.id.clone(),
                label: patient.label,
                corpus: patient.corpus,
                n_samples: n,
                burst_start_s: start as f64 / sr,
                burst_frame: start / hop,
            });
            manifest_rows.push(format!(
                "{name},{},{},{}",
                patient.id, patient.label, patient.corpus
            ));
        }
    }

    let manifest_path = out_dir.join("manifest.csv");
    let mut manifest = String::from("clip_path,patient_id,label,corpus\n");
    for row in &manifest_rows {
        manifest.push_str(row);
        manifest.push('\n');
    }
    std::fs::write(&manifest_path, manifest)?;

    let meta = SynthMeta {
        config: config.clone(),
        patients,
        clips: clip_meta,
        signal_bands_hz: signal_bands,
    };
    let meta_path = out_dir.join("synth_meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;

    Ok(SynthOutput {
        manifest_path,
        meta_path,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_clips, summarize};
    use crate::dsp::{extract_features, FeatureSpec};

    fn small_config(seed: u64, strength_db: f64) -> SynthConfig {
        SynthConfig {
            n_patients: 12,
            coughs_per_patient: 3,
            tb_fraction: 0.5,
            duration_mean_s: 0.4,
            duration_std_s: 0.1,
            n_bins: 40,
            signal_bins: vec![10, 11, 12, 13, 14],
            signal_strength_db: strength_db,
            seed,
            ..SynthConfig::default()
        }
    }

    fn mean_band_power(manifest: &Path, bins: &[usize], n_bins: usize) -> (f64, f64) {
        let spec = FeatureSpec {
            n_bins,
            ..FeatureSpec::default()
        };
        let clips = load_clips(manifest).unwrap();
        let (mut tb, mut ntb) = (vec![], vec![]);
        for c in &clips {
            let feats = extract_features(&c.clip, &spec).unwrap();
            let mut acc = 0.0;
            for f in 0..feats.n_frames() {
                for &b in bins {
                    acc += feats.at(f, b);
                }
            }
            let mean = acc / (feats.n_frames() * bins.len()) as f64;
            match c.label {
                Label::Tb => tb.push(mean),
                Label::NotTb => ntb.push(mean),
            }
        }
        (
            tb.iter().sum::<f64>() / tb.len() as f64,
            ntb.iter().sum::<f64>() / ntb.len() as f64,
        )
    }

    #[test]
    fn strong_signal_separates_class_band_power_by_3db() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(42, 10.0);
        let out = synth_corpus(&cfg, dir.path()).unwrap();
        let (tb, ntb) = mean_band_power(&out.manifest_path, &cfg.signal_bins, cfg.n_bins);
        // Log-power features are natural-log; 3 dB = 0.69 nats.
        let diff_db = (tb - ntb) * 10.0 / std::f64::consts::LN_10;
        assert!(diff_db > 3.0, "class band-power gap {diff_db:.2} dB");
    }

    #[test]
    fn zero_signal_gives_statistically_identical_classes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(43, 0.0);
        let out = synth_corpus(&cfg, dir.path()).unwrap();
        let (tb, ntb) = mean_band_power(&out.manifest_path, &cfg.signal_bins, cfg.n_bins);
        let diff_db = ((tb - ntb) * 10.0 / std::f64::consts::LN_10).abs();
        assert!(diff_db < 1.0, "unexpected class gap {diff_db:.2} dB");
    }

    #[test]
    fn same_seed_gives_byte_identical_wavs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = small_config(7, 6.0);
        synth_corpus(&cfg, d1.path()).unwrap();
        synth_corpus(&cfg, d2.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(d1.path().join("clips"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            let a = std::fs::read(d1.path().join("clips").join(&name)).unwrap();
            let b = std::fs::read(d2.path().join("clips").join(&name)).unwrap();
            assert_eq!(a, b, "clip {name:?} differs between runs");
        }
    }

    #[test]
    fn generated_manifest_loads_and_matches_proportions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_patients: 74,
            coughs_per_patient: 1,
            duration_mean_s: 0.3,
            duration_std_s: 0.05,
            signal_strength_db: 0.0,
            patient_resonance_db: 0.0,
            seed: 3,
            ..SynthConfig::default()
        };
        let out = synth_corpus(&cfg, dir.path()).unwrap();
        let clips = load_clips(&out.manifest_path).unwrap();
        let s = summarize(&clips);
        assert_eq!(s.patients_tb, 28);
        assert_eq!(s.patients_not_tb, 46);
    }

    #[test]
    fn out_of_range_signal_bins_are_rejected() {
        let cfg = SynthConfig {
            signal_bins: vec![200],
            n_bins: 80,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
