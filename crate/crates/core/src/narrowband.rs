//! Per-frequency sequences for the shared network and the inverse binding
//! of its outputs into full-band speaker spectra.

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::stft::ComplexSpectrogram;

/// Lower bound on a frequency's mean reference magnitude.
pub const SCALE_FLOOR: f64 = 1e-10;

/// `U x F x T x 2C` real sequences plus the `U x F` magnitude scales.
///
/// Channel `c` occupies features `2c` (real part) and `2c + 1` (imaginary
/// part); the same packing is used for network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct NarrowbandBatch {
    pub utterances: usize,
    pub freqs: usize,
    pub frames: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub scales: Vec<f64>,
    pub reference_channel: usize,
}

impl NarrowbandBatch {
    pub fn width(&self) -> usize {
        2 * self.channels
    }

    pub fn rows(&self) -> usize {
        self.utterances * self.freqs * self.frames
    }

    /// Stacks single- or multi-utterance batches along the utterance axis.
    pub fn concat(parts: &[NarrowbandBatch]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("no batches to stack".into()))?;
        let mut out = NarrowbandBatch { utterances: 0, data: Vec::new(), scales: Vec::new(), ..first.clone() };
        for p in parts {
            if (p.freqs, p.frames, p.channels, p.reference_channel)
                != (first.freqs, first.frames, first.channels, first.reference_channel)
            {
                return Err(Error::shape(
                    "NarrowbandBatch::concat",
                    format!(
                        "F={} T={} C={} vs F={} T={} C={}",
                        p.freqs, p.frames, p.channels, first.freqs, first.frames, first.channels
                    ),
                ));
            }
            out.utterances += p.utterances;
            out.data.extend_from_slice(&p.data);
            out.scales.extend_from_slice(&p.scales);
        }
        Ok(out)
    }
}

/// Splits a spectrogram into per-frequency sequences normalized by the mean
/// reference-channel magnitude of each frequency.
pub fn extract_and_normalize(spec: &ComplexSpectrogram, reference_channel: usize) -> Result<NarrowbandBatch> {
    if spec.frames == 0 {
        return Err(Error::InvalidArgument("spectrogram has no frames".into()));
    }
    if reference_channel >= spec.channels {
        return Err(Error::InvalidArgument(format!(
            "reference channel {reference_channel} out of range for {} channels",
            spec.channels
        )));
    }
    let (nf, nt, nc) = (spec.freqs, spec.frames, spec.channels);
    let mut data = Vec::with_capacity(nf * nt * 2 * nc);
    let mut scales = Vec::with_capacity(nf);
    for f in 0..nf {
        let mean: f64 = (0..nt).map(|t| spec.get(f, t, reference_channel).norm()).sum::<f64>() / nt as f64;
        let scale = mean.max(SCALE_FLOOR);
        scales.push(scale);
        for t in 0..nt {
            for c in 0..nc {
                let v = spec.get(f, t, c) / scale;
                data.push(v.re);
                data.push(v.im);
            }
        }
    }
    Ok(NarrowbandBatch {
        utterances: 1,
        freqs: nf,
        frames: nt,
        channels: nc,
        data,
        scales,
        reference_channel,
    })
}

/// Network prediction bound by output position: `[U][N][F][T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundPrediction {
    pub utterances: usize,
    pub speakers: usize,
    pub freqs: usize,
    pub frames: usize,
    pub data: Vec<Complex<f64>>,
}

impl BoundPrediction {
    #[inline]
    pub fn index(&self, u: usize, n: usize, f: usize, t: usize) -> usize {
        ((u * self.speakers + n) * self.freqs + f) * self.frames + t
    }

    pub fn get(&self, u: usize, n: usize, f: usize, t: usize) -> Complex<f64> {
        self.data[self.index(u, n, f, t)]
    }

    /// Output position `n` of utterance `u` as a one-channel spectrogram.
    pub fn speaker_spectrogram(&self, u: usize, n: usize, template: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
        if template.freqs != self.freqs || template.frames != self.frames {
            return Err(Error::shape(
                "BoundPrediction::speaker_spectrogram",
                format!("F={} T={} vs template F={} T={}", self.freqs, self.frames, template.freqs, template.frames),
            ));
        }
        let mut out = ComplexSpectrogram::zeros(template.config, self.frames, 1, template.sample_rate);
        for f in 0..self.freqs {
            for t in 0..self.frames {
                out.set(f, t, 0, self.get(u, n, f, t));
            }
        }
        Ok(out)
    }
}

/// Undoes the magnitude normalization and gathers output position `n` of
/// every frequency into speaker `n`'s spectrum. No reordering across
/// frequencies takes place.
pub fn inverse_normalize_and_bind(
    net_out: &[f64],
    scales: &[f64],
    utterances: usize,
    freqs: usize,
    frames: usize,
    speakers: usize,
) -> Result<BoundPrediction> {
    let width = 2 * speakers;
    if net_out.len() != utterances * freqs * frames * width || scales.len() != utterances * freqs {
        return Err(Error::shape(
            "inverse_normalize_and_bind",
            format!(
                "{} outputs and {} scales for U={utterances} F={freqs} T={frames} N={speakers}",
                net_out.len(),
                scales.len()
            ),
        ));
    }
    let mut pred = BoundPrediction {
        utterances,
        speakers,
        freqs,
        frames,
        data: vec![Complex::new(0.0, 0.0); utterances * speakers * freqs * frames],
    };
    for u in 0..utterances {
        for f in 0..freqs {
            let scale = scales[u * freqs + f];
            for t in 0..frames {
                let row = &net_out[((u * freqs + f) * frames + t) * width..][..width];
                for n in 0..speakers {
                    let i = pred.index(u, n, f, t);
                    pred.data[i] = Complex::new(row[2 * n], row[2 * n + 1]) * scale;
                }
            }
        }
    }
    Ok(pred)
}
