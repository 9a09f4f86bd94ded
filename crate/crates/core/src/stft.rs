//! Hann-windowed STFT with 50% overlap and weighted overlap-add synthesis.
//!
//! Signals are centred by zero-padding `window - hop` samples at the front
//! and enough at the back that every input sample is covered by two frames.
//! Synthesis divides by the summed squared window, so `istft(stft(x))`
//! reproduces `x` up to rounding.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Floor applied to the synthesis normalizer.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    window_length: usize,
}

impl StftConfig {
    /// Hann window of `window_length` samples, hop of half a window.
    pub fn new(window_length: usize) -> Result<Self> {
        if window_length < 4 || window_length % 2 != 0 {
            return Err(Error::Config(format!(
                "STFT window must be even and at least 4 samples, got {window_length}"
            )));
        }
        Ok(Self { window_length })
    }

    /// 32 ms window: 512 samples at 16 kHz, 256 at 8 kHz.
    pub fn for_sample_rate(sample_rate: u32) -> Result<Self> {
        let samples = (sample_rate as usize * 32) / 1000;
        Self::new(samples + samples % 2)
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    pub fn hop(&self) -> usize {
        self.window_length / 2
    }

    pub fn freqs(&self) -> usize {
        self.window_length / 2 + 1
    }

    /// Frames produced for a signal of `samples` samples.
    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop()) + 1
    }

    /// Samples produced by synthesis from `frames` frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        frames.saturating_sub(1) * self.hop()
    }

    /// Periodic Hann window.
    pub fn window<S: Scalar>(&self) -> Vec<S> {
        let n = self.window_length as f64;
        (0..self.window_length)
            .map(|i| S::from_f64_lossy(0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()))
            .collect()
    }
}

/// Multichannel complex spectrogram stored `[F][T][C]`, each coefficient an
/// interleaved `(re, im)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub freqs: usize,
    pub frames: usize,
    pub channels: usize,
    pub data: Vec<Complex<f64>>,
    pub sample_rate: u32,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn zeros(config: StftConfig, frames: usize, channels: usize, sample_rate: u32) -> Self {
        let freqs = config.freqs();
        Self {
            freqs,
            frames,
            channels,
            data: vec![Complex::new(0.0, 0.0); freqs * frames * channels],
            sample_rate,
            config,
        }
    }

    #[inline]
    pub fn index(&self, f: usize, t: usize, c: usize) -> usize {
        (f * self.frames + t) * self.channels + c
    }

    pub fn get(&self, f: usize, t: usize, c: usize) -> Complex<f64> {
        self.data[self.index(f, t, c)]
    }

    pub fn set(&mut self, f: usize, t: usize, c: usize, v: Complex<f64>) {
        let i = self.index(f, t, c);
        self.data[i] = v;
    }

    /// Single channel as a new spectrogram.
    pub fn channel(&self, c: usize) -> Self {
        let mut out = Self::zeros(self.config, self.frames, 1, self.sample_rate);
        for f in 0..self.freqs {
            for t in 0..self.frames {
                out.set(f, t, 0, self.get(f, t, c));
            }
        }
        out
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= k);
        out
    }
}

/// Planned forward/inverse transforms for one configuration and precision.
pub struct StftEngine<S: Scalar> {
    config: StftConfig,
    window: Vec<S>,
    forward: Arc<dyn Fft<S>>,
    inverse: Arc<dyn Fft<S>>,
}

impl<S: Scalar> StftEngine<S> {
    pub fn new(config: StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            config,
            window: config.window(),
            forward: planner.plan_fft_forward(config.window_length),
            inverse: planner.plan_fft_inverse(config.window_length),
        }
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    /// Analysis of one channel; returns `[T][F]` coefficients.
    pub fn analyze(&self, x: &[S]) -> Result<Vec<Complex<S>>> {
        let (w, h, nf) = (self.config.window_length, self.config.hop(), self.config.freqs());
        if x.is_empty() {
            return Err(Error::InvalidArgument("cannot transform an empty signal".into()));
        }
        if x.len() < w {
            return Err(Error::InvalidArgument(format!(
                "signal of {} samples is shorter than the {w}-sample window",
                x.len()
            )));
        }
        let frames = self.config.frames_for(x.len());
        let front = w - h;
        let mut out = Vec::with_capacity(frames * nf);
        let mut buf = vec![Complex::new(S::zero(), S::zero()); w];
        for t in 0..frames {
            for (n, b) in buf.iter_mut().enumerate() {
                let pos = (t * h + n) as isize - front as isize;
                let v = if pos >= 0 && (pos as usize) < x.len() { x[pos as usize] } else { S::zero() };
                *b = Complex::new(v * self.window[n], S::zero());
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..nf]);
        }
        Ok(out)
    }

    fn norm_envelope(&self, frames: usize) -> Vec<S> {
        let (w, h) = (self.config.window_length, self.config.hop());
        let mut norm = vec![S::zero(); (frames.max(1) - 1) * h + w];
        for t in 0..frames {
            for n in 0..w {
                norm[t * h + n] += self.window[n] * self.window[n];
            }
        }
        let floor = S::from_f64_lossy(NORM_FLOOR);
        norm.iter_mut().for_each(|v| *v = v.max(floor));
        norm
    }

    fn inverse_frame(&self, bins: &[Complex<S>], buf: &mut [Complex<S>]) {
        let w = self.config.window_length;
        let nf = self.config.freqs();
        buf[..nf].copy_from_slice(bins);
        for f in 1..nf - 1 {
            buf[w - f] = bins[f].conj();
        }
        self.inverse.process(buf);
    }

    /// Weighted overlap-add of `[T][F]` coefficients; output has
    /// `(T - 1) * hop` samples.
    pub fn synthesize(&self, spec: &[Complex<S>], frames: usize) -> Vec<S> {
        let (w, h, nf) = (self.config.window_length, self.config.hop(), self.config.freqs());
        debug_assert_eq!(spec.len(), frames * nf);
        let norm = self.norm_envelope(frames);
        let mut acc = vec![S::zero(); norm.len()];
        let mut buf = vec![Complex::new(S::zero(), S::zero()); w];
        let inv_n = S::one() / S::from_usize(w).expect("window");
        for t in 0..frames {
            self.inverse_frame(&spec[t * nf..(t + 1) * nf], &mut buf);
            for n in 0..w {
                acc[t * h + n] += self.window[n] * buf[n].re * inv_n;
            }
        }
        let front = w - h;
        (0..self.config.samples_for(frames)).map(|i| acc[i + front] / norm[i + front]).collect()
    }

    /// Adjoint of [`Self::synthesize`]: maps a gradient on the output
    /// samples to a gradient on the real and imaginary parts of every
    /// coefficient (returned as complex numbers).
    pub fn synthesize_adjoint(&self, grad: &[S], frames: usize) -> Vec<Complex<S>> {
        let (w, h, nf) = (self.config.window_length, self.config.hop(), self.config.freqs());
        let norm = self.norm_envelope(frames);
        let front = w - h;
        let mut gp = vec![S::zero(); norm.len()];
        for (i, g) in grad.iter().enumerate() {
            gp[i + front] = *g / norm[i + front];
        }
        let inv_n = S::one() / S::from_usize(w).expect("window");
        let two = S::one() + S::one();
        let mut out = Vec::with_capacity(frames * nf);
        let mut buf = vec![Complex::new(S::zero(), S::zero()); w];
        for t in 0..frames {
            for n in 0..w {
                buf[n] = Complex::new(self.window[n] * gp[t * h + n], S::zero());
            }
            self.forward.process(&mut buf);
            for (f, b) in buf[..nf].iter().enumerate() {
                let c = if f == 0 || f == nf - 1 { inv_n } else { two * inv_n };
                out.push(*b * c);
            }
        }
        out
    }
}

/// Planar multichannel waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct Wave {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
}

impl Wave {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidArgument("waveform needs at least one channel".into()));
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument("channels differ in length".into()));
        }
        Ok(Self { sample_rate, channels })
    }

    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self { sample_rate, channels: vec![samples] }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Multichannel analysis.
pub fn stft(wave: &Wave, config: StftConfig) -> Result<ComplexSpectrogram> {
    if wave.channels.is_empty() || wave.is_empty() {
        return Err(Error::InvalidArgument("cannot transform an empty signal".into()));
    }
    let engine = StftEngine::<f64>::new(config);
    let frames = config.frames_for(wave.len());
    let mut spec = ComplexSpectrogram::zeros(config, frames, wave.num_channels(), wave.sample_rate);
    for (c, x) in wave.channels.iter().enumerate() {
        let coeffs = engine.analyze(x)?;
        for t in 0..frames {
            for f in 0..spec.freqs {
                spec.set(f, t, c, coeffs[t * spec.freqs + f]);
            }
        }
    }
    Ok(spec)
}

/// Multichannel synthesis; output has `(T - 1) * hop` samples per channel.
pub fn istft(spec: &ComplexSpectrogram, config: StftConfig) -> Result<Wave> {
    if spec.config != config {
        return Err(Error::Config(format!(
            "spectrogram built with window {} cannot be inverted with window {}",
            spec.config.window_length, config.window_length
        )));
    }
    let engine = StftEngine::<f64>::new(config);
    let mut channels = Vec::with_capacity(spec.channels);
    let mut frames = vec![Complex::new(0.0, 0.0); spec.frames * spec.freqs];
    for c in 0..spec.channels {
        for t in 0..spec.frames {
            for f in 0..spec.freqs {
                frames[t * spec.freqs + f] = spec.get(f, t, c);
            }
        }
        channels.push(engine.synthesize(&frames, spec.frames));
    }
    Ok(Wave { sample_rate: spec.sample_rate, channels })
}

/// Synthesis trimmed (or zero-extended) to `samples` samples.
pub fn istft_with_length(spec: &ComplexSpectrogram, config: StftConfig, samples: usize) -> Result<Wave> {
    let mut wave = istft(spec, config)?;
    for ch in &mut wave.channels {
        ch.resize(samples, 0.0);
    }
    Ok(wave)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_presets() {
        assert_eq!(StftConfig::for_sample_rate(16_000).unwrap().window_length(), 512);
        assert_eq!(StftConfig::for_sample_rate(8_000).unwrap().window_length(), 256);
        let c = StftConfig::new(128).unwrap();
        assert_eq!((c.hop(), c.freqs()), (64, 65));
        assert_eq!(c.frames_for(8000), 126);
        assert!(StftConfig::new(127).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let cfg = StftConfig::new(16).unwrap();
        let wave = Wave::mono(8000, vec![0.0; 40]);
        let spec = stft(&wave, cfg).unwrap();
        assert!(spec.data.iter().all(|v| v.norm() == 0.0));
        let back = istft(&spec, cfg).unwrap();
        assert!(back.channels[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_and_mismatched_inputs_rejected() {
        let cfg = StftConfig::new(16).unwrap();
        assert!(stft(&Wave::mono(8000, vec![]), cfg).is_err());
        let spec = stft(&Wave::mono(8000, vec![1.0; 32]), cfg).unwrap();
        assert!(istft(&spec, StftConfig::new(32).unwrap()).is_err());
    }
}
