use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub window_s: f64,
    pub shift_s: f64,
    pub n_mels: usize,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_s: 0.032,
            shift_s: 0.010,
            n_mels: 128,
        }
    }
}

impl LogMelConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_s * f64::from(self.sample_rate)).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.shift_s * f64::from(self.sample_rate)).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular filters.
pub fn mel_centers(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(f64::from(sample_rate) / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// `n_mels × (fft_size/2 + 1)` triangular weights on the HTK mel scale.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> Mat {
    let n_bins = fft_size / 2 + 1;
    let top = hz_to_mel(f64::from(sample_rate) / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| top * i as f64 / (n_mels + 1) as f64)
        .collect();
    let mut fb = Mat::zeros(n_mels, n_bins);
    for k in 0..n_bins {
        let mel = hz_to_mel(k as f64 * f64::from(sample_rate) / fft_size as f64);
        for m in 0..n_mels {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if mel > lo && mel <= c {
                (mel - lo) / (c - lo)
            } else if mel > c && mel < hi {
                (hi - mel) / (hi - c)
            } else {
                0.0
            };
            fb.set(m, k, w);
        }
    }
    fb
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// |FFT|² of a windowed frame zero-padded to `fft_size`; `fft_size/2 + 1` bins.
pub fn power_spectrum(frame: &[f64], fft_size: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(fft_size)
        .collect();
    fft.process(&mut buf);
    buf[..fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

pub fn logmel(waveform: &[f64], cfg: &LogMelConfig) -> Result<FeatureMatrix> {
    if cfg.sample_rate < 8_000 {
        return Err(Error::InvalidConfig(format!(
            "sample rate {} below 8 kHz",
            cfg.sample_rate
        )));
    }
    let win = cfg.window_samples();
    let shift = cfg.shift_samples();
    if win == 0 || shift == 0 {
        return Err(Error::InvalidConfig("zero window or shift".into()));
    }
    if waveform.len() < win {
        return Err(Error::WaveformTooShort {
            samples: waveform.len(),
            window: win,
        });
    }
    let n_fft = cfg.fft_size();
    let fb = mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate);
    let window = hann(win);
    let n_frames = (waveform.len() - win) / shift + 1;
    let mut planner = FftPlanner::new();
    let mut out = Mat::zeros(n_frames, cfg.n_mels);
    let mut frame = vec![0.0; win];
    for t in 0..n_frames {
        let src = &waveform[t * shift..t * shift + win];
        for ((f, s), w) in frame.iter_mut().zip(src).zip(&window) {
            *f = s * w;
        }
        let power = power_spectrum(&frame, n_fft, &mut planner);
        let row = out.row_mut(t);
        for (m, v) in row.iter_mut().enumerate() {
            let energy = crate::tensor::dot(fb.row(m), &power);
            *v = (energy + LOG_FLOOR).ln();
        }
    }
    FeatureMatrix::new(out, cfg.shift_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, sr: u32) -> Vec<f64> {
        let n = (secs * f64::from(sr)) as usize;
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / f64::from(sr)).sin())
            .collect()
    }

    /// Direct O(N²) DFT power spectrum.
    fn dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, x) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn silence_is_log_floor() {
        let f = logmel(&vec![0.0; 4000], &LogMelConfig::default()).unwrap();
        assert!(f.data().data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn one_second_is_97_frames() {
        let f = logmel(&vec![0.1; 16_000], &LogMelConfig::default()).unwrap();
        assert_eq!(f.n_frames(), 97);
        assert_eq!(f.dim(), 128);
    }

    #[test]
    fn too_short_waveform_errors() {
        assert!(matches!(
            logmel(&[0.0; 100], &LogMelConfig::default()),
            Err(Error::WaveformTooShort { .. })
        ));
    }

    #[test]
    fn fft_matches_direct_dft() {
        let cfg = LogMelConfig::default();
        let w = hann(cfg.window_samples());
        let frame: Vec<f64> = sine(1000.0, 0.032, 16_000)
            .iter()
            .zip(&w)
            .map(|(a, b)| a * b)
            .collect();
        let fast = power_spectrum(&frame, cfg.fft_size(), &mut FftPlanner::new());
        let slow = dft_power(&frame, cfg.fft_size());
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn sine_peaks_at_nearest_center() {
        let cfg = LogMelConfig::default();
        let f = logmel(&sine(1000.0, 0.5, 16_000), &cfg).unwrap();
        let centers = mel_centers(cfg.n_mels, cfg.sample_rate);
        let nearest = crate::tensor::argmax(
            &centers.iter().map(|c| -(c - 1000.0).abs()).collect::<Vec<_>>(),
        );
        // Oracle energies from the direct DFT of one interior frame.
        let w = hann(cfg.window_samples());
        let frame: Vec<f64> = sine(1000.0, 0.5, 16_000)[1600..1600 + 512]
            .iter()
            .zip(&w)
            .map(|(a, b)| a * b)
            .collect();
        let power = dft_power(&frame, cfg.fft_size());
        let fb = mel_filterbank(cfg.n_mels, cfg.fft_size(), cfg.sample_rate);
        let oracle: Vec<f64> = (0..cfg.n_mels)
            .map(|m| crate::tensor::dot(fb.row(m), &power))
            .collect();
        assert_eq!(crate::tensor::argmax(&oracle), nearest);
        for t in 0..f.n_frames() {
            assert_eq!(crate::tensor::argmax(f.data().row(t)), nearest, "frame {t}");
        }
    }

    #[test]
    fn shifting_by_whole_frames_shifts_output() {
        let cfg = LogMelConfig::default();
        let base: Vec<f64> = (0..8000)
            .map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5)
            .collect();
        let k = 3;
        let shifted: Vec<f64> = std::iter::repeat(0.0)
            .take(k * cfg.shift_samples())
            .chain(base.iter().copied())
            .collect();
        let a = logmel(&base, &cfg).unwrap();
        let b = logmel(&shifted, &cfg).unwrap();
        for t in 0..a.n_frames() {
            for (x, y) in a.data().row(t).iter().zip(b.data().row(t + k)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
