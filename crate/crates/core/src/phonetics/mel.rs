//! Real-audio front end: STFT magnitude → 80 triangular mel filters → natural log.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::speech::MelSpectrogram;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms at 16 kHz.
pub const WINDOW: usize = 400;
/// 10 ms at 16 kHz.
pub const HOP: usize = 160;
pub const N_FFT: usize = WINDOW;
pub const N_MELS: usize = 80;
pub const MAG_FLOOR: f64 = 1e-10;
pub const LOG_FLOOR: f64 = -23.025_850_929_940_457; // ln(1e-10)

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn logstep() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale (linear below 1 kHz, logarithmic above).
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / logstep()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (logstep() * (mel - MIN_LOG_MEL)).exp()
    } else {
        F_SP * mel
    }
}

/// `80 × (N_FFT/2 + 1)` peak-normalized triangles spanning 0–8000 Hz.
pub fn mel_filterbank() -> Mat {
    let n_bins = N_FFT / 2 + 1;
    let top = hz_to_mel(f64::from(SAMPLE_RATE) / 2.0);
    let edges: Vec<f64> = (0..N_MELS + 2).map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64)).collect();
    let mut fb = Mat::zeros(N_MELS, n_bins);
    for m in 0..N_MELS {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * f64::from(SAMPLE_RATE) / N_FFT as f64;
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            fb.set(m, k, rising.min(falling).max(0.0));
        }
    }
    fb
}

fn hann() -> Vec<f64> {
    // periodic Hann
    (0..WINDOW).map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos()).collect()
}

/// Log-magnitude mel spectrogram of 16 kHz audio. `L = 1 + (len - 400) / 160`.
pub fn mel_spectrogram(waveform: &[f64]) -> Result<MelSpectrogram> {
    if waveform.len() < WINDOW {
        return Err(Error::WaveformTooShort(waveform.len()));
    }
    let frames = 1 + (waveform.len() - WINDOW) / HOP;
    let window = hann();
    let fb = mel_filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let n_bins = N_FFT / 2 + 1;
    let mut mags = Mat::zeros(n_bins, frames);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for t in 0..frames {
        let start = t * HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(waveform[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            mags.set(k, t, buf[k].norm());
        }
    }
    let mut bins = fb.matmul(&mags);
    bins.data.iter_mut().for_each(|v| *v = v.max(MAG_FLOOR).ln());
    Ok(MelSpectrogram { bins, sample_rate: SAMPLE_RATE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_is_floor_with_closed_form_length() {
        let m = mel_spectrogram(&vec![0.0; 16_000]).unwrap();
        assert_eq!(m.bins.shape(), (80, 98));
        assert!(m.bins.data.iter().all(|&v| v == (1e-10f64).ln()));
        assert_eq!(LOG_FLOOR, (1e-10f64).ln());
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(matches!(mel_spectrogram(&[0.0; 399]), Err(Error::WaveformTooShort(399))));
        assert_eq!(mel_spectrogram(&[0.0; 400]).unwrap().frames(), 1);
    }

    #[test]
    fn scaling_shifts_log_energies() {
        let wave: Vec<f64> = (0..4000).map(|n| (n as f64 * 0.37).sin() + 0.3 * (n as f64 * 0.05).cos()).collect();
        let loud: Vec<f64> = wave.iter().map(|x| 10.0 * x).collect();
        let (a, b) = (mel_spectrogram(&wave).unwrap(), mel_spectrogram(&loud).unwrap());
        for (x, y) in a.bins.data.iter().zip(&b.bins.data) {
            if *x > LOG_FLOOR + 1.0 {
                assert!((y - x - 10f64.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 440.0, 999.0, 1000.0, 4321.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }
}
