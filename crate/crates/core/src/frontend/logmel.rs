use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use u2kws_nn::Tensor;

use crate::error::{KwsError, Result};

/// `T×F` log-mel frames plus the analysis parameters that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Tensor<f32>,
    pub frame_shift_ms: f32,
    pub frame_length_ms: f32,
    pub sample_rate: u32,
}

impl FeatureMatrix {
    pub fn new(frames: Tensor<f32>) -> Self {
        FeatureMatrix {
            frames,
            frame_shift_ms: 10.0,
            frame_length_ms: 25.0,
            sample_rate: 16_000,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn duration_secs(&self) -> f64 {
        self.num_frames() as f64 * self.frame_shift_ms as f64 / 1000.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f32,
    pub frame_shift_ms: f32,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f32,
    /// Defaults to the Nyquist frequency.
    pub f_max: Option<f32>,
    pub log_floor: f64,
    /// Per-utterance mean/variance normalization of each bin.
    pub normalize: bool,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig {
            sample_rate: 16_000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            n_fft: 512,
            n_mels: 80,
            f_min: 0.0,
            f_max: None,
            log_floor: 1e-10,
            normalize: false,
        }
    }
}

impl LogMelConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_length_ms as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_shift_ms as f64 / 1000.0).round() as usize
    }

    pub fn num_frames(&self, samples: usize) -> usize {
        let w = self.window_samples();
        if samples < w {
            0
        } else {
            1 + (samples - w) / self.hop_samples()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sample_rate < 8_000 {
            return Err(KwsError::Config(format!(
                "sample rate {} below 8 kHz",
                self.sample_rate
            )));
        }
        if self.window_samples() > self.n_fft || self.hop_samples() == 0 || self.n_mels == 0 {
            return Err(KwsError::Config(
                "frame geometry does not fit the FFT size".into(),
            ));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular mel filters.
pub fn mel_centers(config: &LogMelConfig) -> Vec<f64> {
    let (lo, hi) = mel_edges(config);
    let step = (hi - lo) / (config.n_mels + 1) as f64;
    (1..=config.n_mels)
        .map(|m| mel_to_hz(lo + step * m as f64))
        .collect()
}

fn mel_edges(config: &LogMelConfig) -> (f64, f64) {
    let f_max = config.f_max.unwrap_or(config.sample_rate as f32 / 2.0) as f64;
    (hz_to_mel(config.f_min as f64), hz_to_mel(f_max))
}

/// `n_mels × (n_fft/2 + 1)` HTK-style triangular filterbank.
pub fn mel_filterbank(config: &LogMelConfig) -> Vec<Vec<f64>> {
    let (lo, hi) = mel_edges(config);
    let step = (hi - lo) / (config.n_mels + 1) as f64;
    let bins = config.n_fft / 2 + 1;
    let bin_hz = config.sample_rate as f64 / config.n_fft as f64;
    (0..config.n_mels)
        .map(|m| {
            let (l, c, r) = (
                lo + step * m as f64,
                lo + step * (m + 1) as f64,
                lo + step * (m + 2) as f64,
            );
            (0..bins)
                .map(|k| {
                    let mel = hz_to_mel(k as f64 * bin_hz);
                    if mel <= l || mel >= r {
                        0.0
                    } else if mel <= c {
                        (mel - l) / (c - l)
                    } else {
                        (r - mel) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Hamming-windowed power spectrum → mel filterbank → `ln(max(p, floor))`.
pub fn logmel(samples: &[f32], config: &LogMelConfig) -> Result<FeatureMatrix> {
    config.validate()?;
    if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
        return Err(KwsError::NonFiniteSample(i));
    }
    let (w, hop) = (config.window_samples(), config.hop_samples());
    if samples.len() < w {
        return Err(KwsError::AudioTooShort {
            got: samples.len(),
            need: w,
        });
    }
    let n_frames = config.num_frames(samples.len());
    let window: Vec<f64> = (0..w)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (w - 1) as f64).cos())
        .collect();
    let bank = mel_filterbank(config);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(config.n_fft);
    let bins = config.n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); config.n_fft];
    let mut power = vec![0.0f64; bins];
    let mut out = Tensor::zeros(n_frames, config.n_mels);
    for t in 0..n_frames {
        let frame = &samples[t * hop..t * hop + w];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < w {
                Complex::new(frame[i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for (m, filt) in bank.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(f, p)| f * p).sum();
            out.set(t, m, e.max(config.log_floor).ln() as f32);
        }
    }
    if config.normalize {
        normalize_bins(&mut out);
    }
    Ok(FeatureMatrix {
        frames: out,
        frame_shift_ms: config.frame_shift_ms,
        frame_length_ms: config.frame_length_ms,
        sample_rate: config.sample_rate,
    })
}

/// Zero-mean, unit-variance per column.
pub fn normalize_bins(x: &mut Tensor<f32>) {
    let (rows, cols) = (x.rows(), x.cols());
    if rows == 0 {
        return;
    }
    for c in 0..cols {
        let mean = (0..rows).map(|r| x.get(r, c) as f64).sum::<f64>() / rows as f64;
        let var = (0..rows)
            .map(|r| (x.get(r, c) as f64 - mean).powi(2))
            .sum::<f64>()
            / rows as f64;
        let inv = 1.0 / var.sqrt().max(1e-5);
        for r in 0..rows {
            let v = (x.get(r, c) as f64 - mean) * inv;
            x.set(r, c, v as f32);
        }
    }
}
