//! Differentiable waveform -> log-mel filterbank front end.
//!
//! Waveforms stay in raw 16-bit sample units (so the attack's max-norm
//! budget is expressed literally in PCM counts); normalization to
//! [-1, 1] happens inside the pipeline. The recipe is: scale by 2^-15,
//! frame with a periodic Hann window, radix-2 real FFT, power spectrum,
//! mel filterbank, log with an additive floor. No pre-emphasis and no
//! mean-variance normalization.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::fft_in_place;
use crate::scalar::Scalar;
use crate::tape::{CustomVjp, Tape};
use crate::tensor::Tensor;

pub const MEL_BREAK_HZ: f64 = 700.0;
pub const MEL_SCALE: f64 = 2595.0;

pub fn hz_to_mel(hz: f64) -> f64 {
    MEL_SCALE * (1.0 + hz / MEL_BREAK_HZ).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    MEL_BREAK_HZ * (10f64.powf(mel / MEL_SCALE) - 1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub num_mels: usize,
    /// DFT length in samples; power of two, at least one window.
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            num_mels: 80,
            fft_size: 512,
            log_floor: 1e-6,
        }
    }
}

impl FeatureConfig {
    /// Cheap profile for CI-sized runs: 4 kHz audio, 20 mel channels.
    pub fn fast_4khz() -> Self {
        FeatureConfig {
            sample_rate: 4_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            num_mels: 20,
            fft_size: 128,
            log_floor: 1e-6,
        }
    }

    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        if !(self.hop_ms > 0.0) || self.hop_ms > self.window_ms {
            return Err(Error::config("hop must be positive and at most the window length"));
        }
        if self.num_mels < 2 {
            return Err(Error::config("num_mels must be at least 2"));
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < self.window_samples() {
            return Err(Error::config(format!(
                "fft_size {} must be a power of two covering the {}-sample window",
                self.fft_size,
                self.window_samples()
            )));
        }
        if self.window_samples() < 2 || self.hop_samples() < 1 {
            return Err(Error::config("window/hop too short at this sample rate"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("log_floor must be positive"));
        }
        Ok(())
    }

    /// Frames produced for a waveform of `len` samples.
    pub fn frame_count(&self, len: usize) -> Result<usize> {
        let win = self.window_samples();
        if len < win {
            return Err(Error::contract(format!(
                "waveform of {len} samples is shorter than one {win}-sample window"
            )));
        }
        Ok((len - win) / self.hop_samples() + 1)
    }
}

/// Triangular mel filterbank, rows = mel channels, columns = FFT bins
/// (`fft_size/2 + 1`). Triangles are laid out in Hz over mel-spaced
/// breakpoints from 0 Hz to Nyquist; adjacent filters overlap, so each
/// bin lands under at most two of them.
pub fn mel_filterbank_matrix<S: Scalar>(cfg: &FeatureConfig) -> Result<Tensor<S>> {
    cfg.validate()?;
    let bins = cfg.num_bins();
    let m = cfg.num_mels;
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let breakpoints: Vec<f64> = (0..m + 2)
        .map(|i| mel_to_hz(hz_to_mel(nyquist) * i as f64 / (m + 1) as f64))
        .collect();
    let hz_per_bin = cfg.sample_rate as f64 / cfg.fft_size as f64;

    let mut data = vec![S::zero(); m * bins];
    for row in 0..m {
        let (lo, mid, hi) = (breakpoints[row], breakpoints[row + 1], breakpoints[row + 2]);
        let mut any = false;
        for b in 0..bins {
            let f = b as f64 * hz_per_bin;
            let rising = (f - lo) / (mid - lo);
            let falling = (hi - f) / (hi - mid);
            let w = rising.min(falling).max(0.0);
            if w > 0.0 {
                any = true;
                data[row * bins + b] = S::of(w);
            }
        }
        if !any {
            return Err(Error::config(format!(
                "mel filter {row} is empty: num_mels {} exceeds the resolution of fft_size {}",
                m, cfg.fft_size
            )));
        }
    }
    Tensor::new(vec![m, bins], data)
}

/// Hz centers of the mel filters (peak of each triangle).
pub fn mel_filter_centers(cfg: &FeatureConfig) -> Vec<f64> {
    let nyquist = cfg.sample_rate as f64 / 2.0;
    (1..=cfg.num_mels)
        .map(|i| mel_to_hz(hz_to_mel(nyquist) * i as f64 / (cfg.num_mels + 1) as f64))
        .collect()
}

fn hann_window<S: Scalar>(len: usize) -> Vec<S> {
    (0..len)
        .map(|n| S::of(0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()))
        .collect()
}

struct SpectrogramVjp<S: Scalar> {
    window: Vec<S>,
    hop: usize,
    fft: usize,
    frames: usize,
    input_len: usize,
    /// One-sided spectra per frame, re/im interleaved: frames x bins x 2.
    spectra: Arc<Vec<S>>,
}

impl<S: Scalar> CustomVjp<S> for SpectrogramVjp<S> {
    fn input_grad(&self, upstream: &[S]) -> Vec<S> {
        let bins = self.fft / 2 + 1;
        let two = S::of(2.0);
        let mut d = vec![S::zero(); self.input_len];
        let mut zre = vec![S::zero(); self.fft];
        let mut zim = vec![S::zero(); self.fft];
        for f in 0..self.frames {
            // Z_k = g_k * conj(X_k) on the one-sided bins, zero elsewhere;
            // d(frame)_n = 2 Re(FFT(Z)_n), then unwindow and scatter.
            for v in zre.iter_mut() {
                *v = S::zero();
            }
            for v in zim.iter_mut() {
                *v = S::zero();
            }
            for k in 0..bins {
                let g = upstream[f * bins + k];
                let xr = self.spectra[(f * bins + k) * 2];
                let xi = self.spectra[(f * bins + k) * 2 + 1];
                zre[k] = g * xr;
                zim[k] = -(g * xi);
            }
            fft_in_place(&mut zre, &mut zim);
            let base = f * self.hop;
            for (n, &w) in self.window.iter().enumerate() {
                d[base + n] += w * two * zre[n];
            }
        }
        d
    }
}

/// Power spectrogram of a framed waveform as one fused differentiable op:
/// frame, Hann-window, zero-pad to `fft_size`, FFT, squared magnitude of
/// the one-sided bins. Output is frames x (fft_size/2 + 1).
pub fn power_spectrogram<S: Scalar>(
    tape: &mut Tape<S>,
    waveform: &Tensor<S>,
    cfg: &FeatureConfig,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    if waveform.rank() != 1 {
        return Err(Error::shape(
            "power-spectrogram",
            format!("waveform must be rank 1, got {:?}", waveform.shape()),
        ));
    }
    let frames = cfg.frame_count(waveform.len())?;
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    let fft = cfg.fft_size;
    let bins = cfg.num_bins();
    let window = hann_window::<S>(win);

    let mut power = vec![S::zero(); frames * bins];
    let mut spectra = vec![S::zero(); frames * bins * 2];
    let mut re = vec![S::zero(); fft];
    let mut im = vec![S::zero(); fft];
    let x = waveform.data();
    for f in 0..frames {
        for v in re.iter_mut() {
            *v = S::zero();
        }
        for v in im.iter_mut() {
            *v = S::zero();
        }
        let base = f * hop;
        for n in 0..win {
            re[n] = x[base + n] * window[n];
        }
        fft_in_place(&mut re, &mut im);
        for k in 0..bins {
            spectra[(f * bins + k) * 2] = re[k];
            spectra[(f * bins + k) * 2 + 1] = im[k];
            power[f * bins + k] = re[k] * re[k] + im[k] * im[k];
        }
    }

    let spectra = Arc::new(spectra);
    let input_len = waveform.len();
    Ok(tape.record_custom(waveform, vec![frames, bins], power, move || {
        Box::new(SpectrogramVjp {
            window,
            hop,
            fft,
            frames,
            input_len,
            spectra,
        })
    }))
}

/// Precomputed state for repeated feature extraction with one config.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<S: Scalar> {
    cfg: FeatureConfig,
    /// Filterbank already transposed to bins x mels for the matmul.
    mel_t: Tensor<S>,
}

impl<S: Scalar> FeatureExtractor<S> {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        let fb = mel_filterbank_matrix::<S>(&cfg)?;
        let bins = cfg.num_bins();
        let m = cfg.num_mels;
        let mut t = vec![S::zero(); bins * m];
        for row in 0..m {
            for b in 0..bins {
                t[b * m + row] = fb.data()[row * bins + b];
            }
        }
        Ok(FeatureExtractor {
            cfg,
            mel_t: Tensor::new(vec![bins, m], t)?,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Log-mel features, frames x num_mels, differentiable back to the
    /// waveform samples when the waveform is tracked.
    pub fn extract(&self, tape: &mut Tape<S>, waveform: &Tensor<S>) -> Result<Tensor<S>> {
        let scaled = tape.scalar_mul(waveform, S::of(1.0 / 32768.0))?;
        let power = power_spectrogram(tape, &scaled, &self.cfg)?;
        let mel = tape.matmul(&power, &self.mel_t)?;
        let floor = Tensor::filled(mel.shape(), S::of(self.cfg.log_floor));
        let shifted = tape.add(&mel, &floor)?;
        tape.log(&shifted)
    }
}

/// One-shot convenience over [`FeatureExtractor`].
pub fn extract_features<S: Scalar>(
    tape: &mut Tape<S>,
    waveform: &Tensor<S>,
    cfg: &FeatureConfig,
) -> Result<Tensor<S>> {
    FeatureExtractor::new(cfg.clone())?.extract(tape, waveform)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_waveform_single_frame_hits_log_floor() {
        let cfg = FeatureConfig::fast_4khz();
        let win = cfg.window_samples();
        let mut tape = Tape::new();
        let w = Tensor::<f64>::zeros(&[win]);
        let feats = extract_features(&mut tape, &w, &cfg).unwrap();
        assert_eq!(feats.shape(), &[1, cfg.num_mels]);
        let expect = (1e-6f64).ln();
        for &v in feats.data() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_count_window_plus_hop_is_two() {
        let cfg = FeatureConfig::fast_4khz();
        let n = cfg.window_samples() + cfg.hop_samples();
        assert_eq!(cfg.frame_count(n).unwrap(), 2);
        assert!(cfg.frame_count(cfg.window_samples() - 1).is_err());
    }

    #[test]
    fn sine_peaks_in_nearest_mel_channel() {
        let cfg = FeatureConfig::default();
        let sr = cfg.sample_rate as f64;
        let n = cfg.window_samples() * 4;
        let vals: Vec<f64> = (0..n)
            .map(|i| 32767.0 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr).sin())
            .collect();
        let w = Tensor::new(vec![n], vals).unwrap();
        let mut tape = Tape::new();
        let feats = extract_features(&mut tape, &w, &cfg).unwrap();
        // average over frames, take the strongest channel
        let mels = cfg.num_mels;
        let frames = feats.shape()[0];
        let mut avg = vec![0.0f64; mels];
        for f in 0..frames {
            for m in 0..mels {
                avg[m] += feats.data()[f * mels + m];
            }
        }
        let argmax = (0..mels).max_by(|&a, &b| avg[a].total_cmp(&avg[b])).unwrap();
        let centers = mel_filter_centers(&cfg);
        let nearest = (0..mels)
            .min_by(|&a, &b| {
                (centers[a] - 440.0).abs().total_cmp(&(centers[b] - 440.0).abs())
            })
            .unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn filterbank_rows_nonempty_and_nonnegative() {
        let mut cfg = FeatureConfig::fast_4khz();
        cfg.num_mels = 2;
        cfg.fft_size = 128;
        let fb = mel_filterbank_matrix::<f64>(&cfg).unwrap();
        let bins = cfg.num_bins();
        for row in 0..cfg.num_mels {
            let sum: f64 = (0..bins).map(|b| fb.data()[row * bins + b]).sum();
            assert!(sum > 0.0);
        }
        assert!(fb.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn overfine_filterbank_is_rejected() {
        let mut cfg = FeatureConfig::fast_4khz();
        cfg.num_mels = 120; // far beyond 128-point fft resolution
        assert!(mel_filterbank_matrix::<f64>(&cfg).is_err());
    }

    #[test]
    fn bins_covered_by_at_most_two_filters() {
        let cfg = FeatureConfig::fast_4khz();
        let fb = mel_filterbank_matrix::<f64>(&cfg).unwrap();
        let bins = cfg.num_bins();
        for b in 0..bins {
            let covering = (0..cfg.num_mels)
                .filter(|&row| fb.data()[row * bins + b] > 0.0)
                .count();
            assert!(covering <= 2, "bin {b} covered by {covering} filters");
        }
    }

    // Independent reconstruction of the triangle weights, bin-major and in
    // terms of the enclosing breakpoint segment rather than per-filter
    // slopes.
    fn filterbank_oracle(cfg: &FeatureConfig) -> Vec<f64> {
        let bins = cfg.num_bins();
        let m = cfg.num_mels;
        let nyq = cfg.sample_rate as f64 / 2.0;
        let pts: Vec<f64> = (0..m + 2)
            .map(|i| mel_to_hz(hz_to_mel(nyq) * i as f64 / (m + 1) as f64))
            .collect();
        let mut out = vec![0.0f64; m * bins];
        for b in 0..bins {
            let f = b as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
            // locate the segment [pts[j], pts[j+1]) containing f
            for j in 0..m + 1 {
                if f >= pts[j] && f < pts[j + 1] {
                    let frac = (f - pts[j]) / (pts[j + 1] - pts[j]);
                    // rising edge of filter j (peak at pts[j+1]) unless j == m
                    if j < m {
                        out[j * bins + b] += frac;
                    }
                    // falling edge of filter j-1 (peak at pts[j])
                    if j >= 1 {
                        out[(j - 1) * bins + b] += 1.0 - frac;
                    }
                    break;
                }
            }
        }
        out
    }

    #[test]
    fn matches_independent_triangle_construction() {
        let mut cfg = FeatureConfig::default();
        cfg.num_mels = 20;
        cfg.fft_size = 256;
        cfg.window_ms = 16.0; // 16 ms at 16 kHz = 256 samples, fits the fft
        cfg.hop_ms = 8.0;
        let fb = mel_filterbank_matrix::<f64>(&cfg).unwrap();
        let oracle = filterbank_oracle(&cfg);
        for (a, b) in fb.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
