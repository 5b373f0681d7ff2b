//! Stochastic waveform transformations producing correlated views for
//! contrastive pre-training.
//!
//! Each transform fires independently with its configured probability, with
//! parameters drawn uniformly from its range, in a fixed order:
//! pitch shift, frequency filter, delay-based reverb, gaussian noise.
//! Output length always equals input length and the final signal is clipped
//! to [-1, 1].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{resample, AudioWaveform};

/// Per-transform apply probabilities and parameter ranges. Defaults follow
/// common contrastive-audio practice: the transform families are fixed, the
/// values are overridable config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentChainConfig {
    pub pitch_shift_p: f64,
    /// semitone range, inclusive, symmetric ranges expressed as [lo, hi]
    pub pitch_shift_semitones: [f64; 2],
    pub gaussian_noise_p: f64,
    /// signal-to-noise ratio range in dB
    pub gaussian_noise_snr_db: [f64; 2],
    pub reverb_p: f64,
    pub reverb_delay_ms: [f64; 2],
    pub reverb_decay: [f64; 2],
    pub frequency_filter_p: f64,
    pub frequency_filter_cutoff_hz: [f64; 2],
    pub rng_seed: u64,
}

impl Default for AugmentChainConfig {
    fn default() -> Self {
        AugmentChainConfig {
            pitch_shift_p: 0.6,
            pitch_shift_semitones: [-7.0, 7.0],
            gaussian_noise_p: 0.5,
            gaussian_noise_snr_db: [10.0, 30.0],
            reverb_p: 0.4,
            reverb_delay_ms: [200.0, 500.0],
            reverb_decay: [0.3, 0.6],
            frequency_filter_p: 0.6,
            frequency_filter_cutoff_hz: [200.0, 4000.0],
            rng_seed: 0,
        }
    }
}

impl AugmentChainConfig {
    /// All probabilities zero: the chain becomes the identity on crops.
    pub fn disabled() -> Self {
        AugmentChainConfig {
            pitch_shift_p: 0.0,
            gaussian_noise_p: 0.0,
            reverb_p: 0.0,
            frequency_filter_p: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("pitch_shift_p", self.pitch_shift_p),
            ("gaussian_noise_p", self.gaussian_noise_p),
            ("reverb_p", self.reverb_p),
            ("frequency_filter_p", self.frequency_filter_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, r) in [
            ("pitch_shift_semitones", self.pitch_shift_semitones),
            ("gaussian_noise_snr_db", self.gaussian_noise_snr_db),
            ("reverb_delay_ms", self.reverb_delay_ms),
            ("reverb_decay", self.reverb_decay),
            ("frequency_filter_cutoff_hz", self.frequency_filter_cutoff_hz),
        ] {
            if r[0] > r[1] {
                return Err(Error::Config(format!("{name} range {r:?} is not ordered")));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Two independently positioned contiguous crops of exactly
/// `segment_samples`, uniform over valid start positions. A waveform shorter
/// than one segment is zero-padded first, leaving a single valid position.
pub fn random_crop_pair(
    w: &AudioWaveform,
    segment_samples: usize,
    rng: &mut impl Rng,
) -> Result<(AudioWaveform, AudioWaveform)> {
    if segment_samples == 0 {
        return Err(Error::InvalidInput("segment_samples must be positive".into()));
    }
    let mut padded;
    let samples: &[f64] = if w.samples.len() < segment_samples {
        padded = w.samples.clone();
        padded.resize(segment_samples, 0.0);
        &padded
    } else {
        &w.samples
    };
    let max_start = samples.len() - segment_samples;
    let crop = |rng: &mut dyn rand::RngCore| -> AudioWaveform {
        let start = if max_start == 0 { 0 } else { rng.gen_range(0..=max_start) };
        AudioWaveform {
            samples: samples[start..start + segment_samples].to_vec(),
            sample_rate_hz: w.sample_rate_hz,
            track_id: w.track_id.clone(),
        }
    };
    let a = crop(rng);
    let b = crop(rng);
    Ok((a, b))
}

/// Pitch shift by resampling and fitting back to the original length. A
/// shift of 0 semitones is the identity up to resampler tolerance.
fn pitch_shift(samples: &[f64], sample_rate_hz: u32, semitones: f64) -> Vec<f64> {
    if semitones == 0.0 {
        return samples.to_vec();
    }
    let factor = 2f64.powf(semitones / 12.0);
    // resampling to rate/factor then replaying at the original rate raises
    // the pitch by `factor`
    let inner_rate = ((sample_rate_hz as f64 / factor).round() as u32).max(1);
    let mut out = resample(samples, sample_rate_hz, inner_rate);
    out.resize(samples.len(), 0.0);
    out
}

/// Single-pole high- or low-pass filter at the given cutoff.
fn frequency_filter(samples: &[f64], sample_rate_hz: u32, cutoff_hz: f64, high_pass: bool) -> Vec<f64> {
    let alpha = 1.0 - (-2.0 * std::f64::consts::PI * cutoff_hz / sample_rate_hz as f64).exp();
    let alpha = alpha.clamp(0.0, 1.0);
    let mut low = Vec::with_capacity(samples.len());
    let mut state = 0.0;
    for &x in samples {
        state += alpha * (x - state);
        low.push(state);
    }
    if high_pass {
        samples.iter().zip(low.iter()).map(|(x, l)| x - l).collect()
    } else {
        low
    }
}

/// Feedback comb filter approximating reverb with a single delayed echo tail.
fn reverb(samples: &[f64], sample_rate_hz: u32, delay_ms: f64, decay: f64) -> Vec<f64> {
    let delay = ((delay_ms / 1000.0 * sample_rate_hz as f64).round() as usize).max(1);
    let mut out = samples.to_vec();
    for i in delay..out.len() {
        out[i] += decay * out[i - delay];
    }
    out
}

/// Additive white gaussian noise scaled to the requested SNR relative to the
/// input signal power.
fn gaussian_noise(samples: &[f64], snr_db: f64, rng: &mut impl Rng) -> Vec<f64> {
    let signal_power = samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64;
    if signal_power <= 0.0 {
        // silent input: inject unit-variance noise scaled well below clipping
        return samples.iter().map(|s| s + 0.05 * gaussian(rng)).collect();
    }
    let noise_power = signal_power / 10f64.powf(snr_db / 10.0);
    let scale = noise_power.sqrt();
    samples.iter().map(|s| s + scale * gaussian(rng)).collect()
}

/// Apply the chain in fixed order with independent per-transform coin flips.
/// Output length equals input length; output clipped to [-1, 1].
pub fn apply_chain(w: &AudioWaveform, cfg: &AugmentChainConfig, rng: &mut impl Rng) -> Result<AudioWaveform> {
    cfg.validate()?;
    let mut samples = w.samples.clone();
    if rng.gen_bool(cfg.pitch_shift_p) {
        let semitones = uniform(rng, cfg.pitch_shift_semitones);
        samples = pitch_shift(&samples, w.sample_rate_hz, semitones);
    }
    if rng.gen_bool(cfg.frequency_filter_p) {
        let cutoff = uniform(rng, cfg.frequency_filter_cutoff_hz);
        let high_pass = rng.gen_bool(0.5);
        samples = frequency_filter(&samples, w.sample_rate_hz, cutoff, high_pass);
    }
    if rng.gen_bool(cfg.reverb_p) {
        let delay_ms = uniform(rng, cfg.reverb_delay_ms);
        let decay = uniform(rng, cfg.reverb_decay);
        samples = reverb(&samples, w.sample_rate_hz, delay_ms, decay);
    }
    if rng.gen_bool(cfg.gaussian_noise_p) {
        let snr_db = uniform(rng, cfg.gaussian_noise_snr_db);
        samples = gaussian_noise(&samples, snr_db, rng);
    }
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }
    debug_assert_eq!(samples.len(), w.samples.len());
    AudioWaveform::new(samples, w.sample_rate_hz, w.track_id.clone())
}

/// Crop two random sub-segments, then augment each independently.
pub fn make_training_pair(
    w: &AudioWaveform,
    segment_samples: usize,
    cfg: &AugmentChainConfig,
    rng: &mut impl Rng,
) -> Result<(AudioWaveform, AudioWaveform)> {
    let (a, b) = random_crop_pair(w, segment_samples, rng)?;
    Ok((apply_chain(&a, cfg, rng)?, apply_chain(&b, cfg, rng)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::AUDIO_SAMPLE_RATE_HZ;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(n: usize, freq: f64, amp: f64) -> AudioWaveform {
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / AUDIO_SAMPLE_RATE_HZ as f64).sin())
            .collect();
        AudioWaveform::new(samples, AUDIO_SAMPLE_RATE_HZ, "t").unwrap()
    }

    #[test]
    fn crop_pair_exact_length_is_identity() {
        let w = sine(1000, 440.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = random_crop_pair(&w, 1000, &mut rng).unwrap();
        assert_eq!(a.samples, w.samples);
        assert_eq!(b.samples, w.samples);
    }

    #[test]
    fn crop_pair_is_seed_deterministic() {
        let w = sine(5000, 440.0, 0.5);
        let crop = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_crop_pair(&w, 1000, &mut rng).unwrap()
        };
        let (a1, b1) = crop(9);
        let (a2, b2) = crop(9);
        assert_eq!(a1.samples, a2.samples);
        assert_eq!(b1.samples, b2.samples);
    }

    #[test]
    fn crop_pair_pads_short_input() {
        let w = sine(100, 440.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, _) = random_crop_pair(&w, 300, &mut rng).unwrap();
        assert_eq!(a.samples.len(), 300);
        assert!(a.samples[100..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn disabled_chain_is_identity() {
        let w = sine(2000, 440.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = apply_chain(&w, &AugmentChainConfig::disabled(), &mut rng).unwrap();
        assert_eq!(out.samples, w.samples);
    }

    #[test]
    fn noise_only_chain_hits_requested_snr() {
        let w = sine(98415, 440.0, 0.5);
        let cfg = AugmentChainConfig {
            pitch_shift_p: 0.0,
            frequency_filter_p: 0.0,
            reverb_p: 0.0,
            gaussian_noise_p: 1.0,
            gaussian_noise_snr_db: [20.0, 20.0],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = apply_chain(&w, &cfg, &mut rng).unwrap();
        let signal_power = w.samples.iter().map(|s| s * s).sum::<f64>() / w.samples.len() as f64;
        let noise_power = w
            .samples
            .iter()
            .zip(out.samples.iter())
            .map(|(x, y)| (y - x) * (y - x))
            .sum::<f64>()
            / w.samples.len() as f64;
        let snr_db = 10.0 * (signal_power / noise_power).log10();
        assert!((snr_db - 20.0).abs() < 0.5, "measured SNR {snr_db} dB");
    }

    #[test]
    fn zero_semitone_pitch_shift_is_near_identity() {
        let w = sine(2000, 440.0, 0.5);
        let cfg = AugmentChainConfig {
            pitch_shift_p: 1.0,
            pitch_shift_semitones: [0.0, 0.0],
            frequency_filter_p: 0.0,
            reverb_p: 0.0,
            gaussian_noise_p: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = apply_chain(&w, &cfg, &mut rng).unwrap();
        for (a, b) in w.samples.iter().zip(out.samples.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn chain_preserves_length_and_range() {
        let w = sine(4000, 440.0, 0.9);
        let cfg = AugmentChainConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = apply_chain(&w, &cfg, &mut rng).unwrap();
            assert_eq!(out.samples.len(), w.samples.len());
            assert!(out.samples.iter().all(|s| (-1.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn training_pair_is_seed_deterministic() {
        let w = sine(20000, 330.0, 0.7);
        let cfg = AugmentChainConfig::default();
        let make = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_training_pair(&w, 4000, &cfg, &mut rng).unwrap()
        };
        let (a1, b1) = make(11);
        let (a2, b2) = make(11);
        assert_eq!(a1.samples, a2.samples);
        assert_eq!(b1.samples, b2.samples);
    }

    #[test]
    fn silent_input_noise_views_are_uncorrelated() {
        let w = AudioWaveform::new(vec![0.0; 98415], AUDIO_SAMPLE_RATE_HZ, "silent").unwrap();
        let cfg = AugmentChainConfig {
            pitch_shift_p: 0.0,
            frequency_filter_p: 0.0,
            reverb_p: 0.0,
            gaussian_noise_p: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = make_training_pair(&w, 98415, &cfg, &mut rng).unwrap();
        let n = a.samples.len() as f64;
        let dot: f64 = a.samples.iter().zip(b.samples.iter()).map(|(x, y)| x * y).sum();
        let pa: f64 = a.samples.iter().map(|x| x * x).sum();
        let pb: f64 = b.samples.iter().map(|x| x * x).sum();
        let corr = dot / (pa.sqrt() * pb.sqrt()).max(1e-12);
        assert!(pa / n > 0.0 && pb / n > 0.0, "noise should be injected");
        assert!(corr.abs() < 0.1, "correlation {corr}");
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let cfg = AugmentChainConfig { pitch_shift_p: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = AugmentChainConfig { reverb_decay: [0.9, 0.2], ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
