//! Windowed-sinc (Kaiser) resampling and speed perturbation.

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

/// Half-width of the sinc kernel in zero crossings at the lower of the two
/// rates.
const KERNEL_HALF_WIDTH: f64 = 24.0;
/// Kaiser window shape; ~80 dB stopband.
const KAISER_BETA: f64 = 9.0;

/// Resample a clip to `target_rate` with a Kaiser-windowed sinc kernel.
///
/// A clip already at the target rate passes through bit-identically. All
/// clips are brought to the pipeline rate regardless of whether that means
/// down- or up-sampling. Kernel weights are normalized per output sample, so
/// a constant signal stays constant.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if clip.samples.is_empty() {
        return Err(Error::Audio("cannot resample an empty clip".into()));
    }
    if target_rate == 0 {
        return Err(Error::Audio("target rate must be positive".into()));
    }
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }

    let ratio = target_rate as f64 / clip.sample_rate as f64;
    let out_len = ((clip.samples.len() as f64) * ratio).round().max(1.0) as usize;

    // Low-pass at the smaller Nyquist; widen the kernel when downsampling.
    let cutoff = ratio.min(1.0);
    let half_width = KERNEL_HALF_WIDTH / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);

    let n_in = clip.samples.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        // Input-time position of this output sample.
        let t = m as f64 / ratio;
        let lo = (t - half_width).ceil() as isize;
        let hi = (t + half_width).floor() as isize;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for k in lo..=hi {
            let d = t - k as f64;
            let w = sinc(cutoff * d) * kaiser(d / half_width, i0_beta);
            wsum += w;
            if k >= 0 && k < n_in {
                acc += w * clip.samples[k as usize] as f64;
            }
        }
        out.push(if wsum != 0.0 { (acc / wsum) as f32 } else { 0.0 });
    }
    AudioClip::new(out, target_rate)
}

/// Speed-perturb a clip by `factor`: duration scales by `1/factor` and all
/// frequencies scale by `factor`. Realized by resampling the waveform and
/// relabeling the rate, so pitch and tempo change together.
pub fn speed_perturb(clip: &AudioClip, factor: f64) -> Result<AudioClip> {
    if !(factor > 0.0) {
        return Err(Error::Audio(format!(
            "speed perturbation factor {factor} must be positive"
        )));
    }
    if factor == 1.0 {
        return Ok(clip.clone());
    }
    // Pretend the clip was recorded at rate*factor, then bring it back to the
    // original rate.
    let virtual_rate = (clip.sample_rate as f64 * factor).round() as u32;
    let virtual_clip = AudioClip {
        samples: clip.samples.clone(),
        sample_rate: virtual_rate,
    };
    let mut out = resample(&virtual_clip, clip.sample_rate)?;
    out.sample_rate = clip.sample_rate;
    Ok(out)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser window on normalized position `u` in [-1, 1].
fn kaiser(u: f64, i0_beta: f64) -> f64 {
    let t = 1.0 - u * u;
    if t <= 0.0 {
        0.0
    } else {
        bessel_i0(KAISER_BETA * t.sqrt()) / i0_beta
    }
}

/// Modified Bessel function of the first kind, order zero (series form).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x = x / 2.0;
    for k in 1..40 {
        term *= (half_x / k as f64) * (half_x / k as f64);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::tests::{dominant_freq_hz, sine_clip};

    #[test]
    fn same_rate_passes_through_bit_identically() {
        let clip = sine_clip(1000.0, 44_100, 44_100);
        let out = resample(&clip, 44_100).unwrap();
        assert_eq!(out, clip);
    }

    #[test]
    fn downsampling_preserves_tone_frequency() {
        let clip = sine_clip(1000.0, 88_200, 88_200);
        let out = resample(&clip, 44_100).unwrap();
        assert_eq!(out.sample_rate, 44_100);
        // Duration preserved within one sample period.
        assert!((out.duration_s() - clip.duration_s()).abs() <= 1.0 / 44_100.0);
        let peak = dominant_freq_hz(&out);
        let bin = 44_100.0 / out.len() as f64;
        assert!(
            (peak - 1000.0).abs() <= bin + 1e-9,
            "peak {peak} Hz, bin width {bin}"
        );
    }

    #[test]
    fn dc_signal_stays_constant() {
        let clip = AudioClip::new(vec![0.25; 48_000], 48_000).unwrap();
        let out = resample(&clip, 44_100).unwrap();
        // Ignore kernel-width edge effects.
        let guard = 64;
        for &v in &out.samples[guard..out.len() - guard] {
            assert!((v - 0.25).abs() < 1e-6, "dc drifted to {v}");
        }
    }

    #[test]
    fn unit_factor_is_identity() {
        let clip = sine_clip(500.0, 44_100, 22_050);
        let out = speed_perturb(&clip, 1.0).unwrap();
        assert_eq!(out, clip);
    }

    #[test]
    fn perturbation_scales_length() {
        let clip = sine_clip(500.0, 44_100, 44_100);
        let out = speed_perturb(&clip, 1.1).unwrap();
        let expect = 44_100.0 / 1.1;
        assert!(
            (out.len() as f64 - expect).abs() <= 1.0,
            "got {} samples, expected {expect}",
            out.len()
        );
        assert_eq!(out.sample_rate, 44_100);
    }

    #[test]
    fn perturbation_scales_frequency() {
        let clip = sine_clip(1000.0, 44_100, 44_100);
        let out = speed_perturb(&clip, 0.9).unwrap();
        let peak = dominant_freq_hz(&out);
        let bin = 44_100.0 / out.len() as f64;
        assert!(
            (peak - 900.0).abs() <= bin + 1e-9,
            "peak {peak} Hz after 0.9 warp"
        );
    }

    #[test]
    fn nonpositive_factor_is_rejected() {
        let clip = sine_clip(500.0, 44_100, 4_410);
        assert!(speed_perturb(&clip, 0.0).is_err());
        assert!(speed_perturb(&clip, -1.0).is_err());
    }
}
