//! Synthetic log-mel spectrograms built from per-phoneme spectral templates.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{PhonemeSeq, INVENTORY, LOG_FLOOR, N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const TEMPLATE_MASTER_SEED: u64 = 0x5eed_5eec_4000;
const MAGIC: &[u8; 4] = b"PHTM";
const VERSION: u32 = 1;

static TEMPLATE_BYTES: &[u8] = include_bytes!("../../data/phoneme_templates.bin");

/// `80 × |inventory|` matrix; column `p` is the log-mel template of phoneme `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeTemplates {
    pub table: Mat,
}

impl PhonemeTemplates {
    pub fn shipped() -> &'static PhonemeTemplates {
        static T: OnceLock<PhonemeTemplates> = OnceLock::new();
        T.get_or_init(|| PhonemeTemplates::decode(TEMPLATE_BYTES).expect("shipped templates decode"))
    }

    pub fn column(&self, phoneme: usize) -> Vec<f64> {
        (0..self.table.rows).map(|r| self.table.get(r, phoneme)).collect()
    }

    /// 16-byte header (magic, version, rows, cols; little-endian u32) followed
    /// by row-major f64 values.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.table.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.table.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.table.cols as u32).to_le_bytes());
        for v in &self.table.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Asset(format!("phoneme_templates.bin: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        if word(4) != VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let (rows, cols) = (word(8), word(12));
        if rows != N_MELS || cols != INVENTORY.len() || bytes.len() != 16 + 8 * rows * cols {
            return Err(bad("unexpected dimensions"));
        }
        let data = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { table: Mat::from_vec(rows, cols, data) })
    }
}

/// Smooth random spectra: spectral tilt plus three Gaussian formant bumps plus
/// small per-channel texture.
pub fn generate_templates(master_seed: u64) -> PhonemeTemplates {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let texture = Normal::new(0.0, 0.3).expect("valid std");
    let mut table = Mat::zeros(N_MELS, INVENTORY.len());
    for p in 0..INVENTORY.len() {
        let tilt = rng.gen_range(-0.03..0.0);
        let bumps: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(0.0..N_MELS as f64), rng.gen_range(3.0..10.0), rng.gen_range(1.0..3.0)))
            .collect();
        for ch in 0..N_MELS {
            let x = ch as f64;
            let mut v = tilt * x;
            for &(pos, width, amp) in &bumps {
                v += amp * (-0.5 * ((x - pos) / width).powi(2)).exp();
            }
            table.set(ch, p, v + texture.sample(&mut rng));
        }
    }
    PhonemeTemplates { table }
}

/// Log-mel spectrogram, `80 × L`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub bins: Mat,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.bins.cols
    }
}

/// Concatenates phoneme templates, each held for `Uniform(3,6)/rate_scale`
/// frames (rounded, at least one), then adds Gaussian noise.
pub fn synth_spectrogram(phonemes: &PhonemeSeq, rate_scale: f64, noise_level: f64, seed: u64) -> MelSpectrogram {
    synth_with(PhonemeTemplates::shipped(), phonemes, rate_scale, noise_level, seed)
}

pub fn synth_with(
    templates: &PhonemeTemplates,
    phonemes: &PhonemeSeq,
    rate_scale: f64,
    noise_level: f64,
    seed: u64,
) -> MelSpectrogram {
    assert!((0.5..=2.0).contains(&rate_scale), "rate_scale {rate_scale} outside [0.5, 2]");
    assert!(noise_level >= 0.0, "negative noise level");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames: Vec<usize> = Vec::new();
    for &p in &phonemes.0 {
        let dur = (rng.gen_range(3.0..6.0) / rate_scale).round().max(1.0) as usize;
        frames.extend(std::iter::repeat_n(p as usize, dur));
    }
    let mut bins = Mat::zeros(N_MELS, frames.len());
    let noise = Normal::new(0.0, noise_level.max(f64::MIN_POSITIVE)).expect("valid std");
    for (t, &p) in frames.iter().enumerate() {
        for ch in 0..N_MELS {
            let mut v = templates.table.get(ch, p);
            if noise_level > 0.0 {
                v += noise.sample(&mut rng);
            }
            bins.set(ch, t, v.max(LOG_FLOOR));
        }
    }
    MelSpectrogram { bins, sample_rate: SAMPLE_RATE }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phonetics::{g2p, utterance_phonemes};

    fn time_mean(m: &MelSpectrogram) -> Vec<f64> {
        (0..N_MELS).map(|r| m.bins.row(r).iter().sum::<f64>() / m.frames() as f64).collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn shipped_templates_match_generator() {
        assert_eq!(PhonemeTemplates::shipped(), &generate_templates(TEMPLATE_MASTER_SEED));
        let t = PhonemeTemplates::shipped();
        assert_eq!(PhonemeTemplates::decode(&t.encode()).unwrap(), *t);
        assert!(PhonemeTemplates::decode(&t.encode()[..100]).is_err());
    }

    #[test]
    fn deterministic_and_floored() {
        let p = g2p("grey").unwrap();
        let a = synth_spectrogram(&p, 1.0, 0.0, 4);
        assert_eq!(a, synth_spectrogram(&p, 1.0, 0.0, 4));
        assert_eq!(a.bins.rows, 80);
        let noisy = synth_spectrogram(&p, 1.0, 50.0, 4);
        assert!(noisy.bins.data.iter().all(|&v| v >= LOG_FLOOR));
    }

    #[test]
    fn faster_rate_halves_frame_count() {
        let p = utterance_phonemes(&["the".into(), "grey".into(), "chair".into()]).unwrap();
        let mean = |rate: f64| (0..1000).map(|s| synth_spectrogram(&p, rate, 0.0, s).frames() as f64).sum::<f64>() / 1000.0;
        let ratio = mean(2.0) / mean(1.0);
        assert!((ratio - 0.5).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn confusable_words_sound_alike() {
        let mean_of = |w: &str| time_mean(&synth_spectrogram(&g2p(w).unwrap(), 1.0, 0.0, 7));
        let (grey, grain, door) = (mean_of("grey"), mean_of("grain"), mean_of("door"));
        assert!(cosine(&grey, &grain) > cosine(&grey, &door));
    }
}
