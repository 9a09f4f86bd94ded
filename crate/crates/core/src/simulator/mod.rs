//! Synthetic anechoic multichannel mixtures.
//!
//! Dry sources are delayed onto a microphone array under a far-field
//! plane-wave model and two such spatial images are overlapped in one of
//! four temporal patterns at a given overlap ratio and SNR.

mod dataset;
mod sources;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stft::Wave;

pub use dataset::{
    write_dataset, DirectoryDataset, ManifestEntry, MixtureDistribution, MixtureSource, Split, SyntheticDataset,
    MANIFEST_NAME,
};
pub use sources::{
    normalize_rms, synth_source, AmNoise, FileSource, Multitone, SourceFactory, SourceGenerator, SourceRegistry,
    SourceSettings, MIN_SECONDS,
};

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Microphone positions in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayGeometry {
    positions: Vec<[f64; 3]>,
}

impl ArrayGeometry {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("an array needs at least one microphone".into()));
        }
        for (i, a) in positions.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("microphone {i} has a non-finite coordinate")));
            }
            if positions[..i].contains(a) {
                return Err(Error::InvalidArgument(format!("microphone {i} duplicates an earlier position")));
            }
        }
        Ok(Self { positions })
    }

    /// `channels` microphones evenly spaced on a horizontal circle, the
    /// first on the x axis. A single microphone sits at the center.
    pub fn circular(channels: usize, radius: f64) -> Result<Self> {
        if channels == 1 {
            return Self::new(vec![[0.0; 3]]);
        }
        Self::new(
            (0..channels)
                .map(|c| {
                    let phi = 2.0 * std::f64::consts::PI * c as f64 / channels as f64;
                    [radius * phi.cos(), radius * phi.sin(), 0.0]
                })
                .collect(),
        )
    }

    pub fn channels(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    /// Arrival delay of each microphone relative to the array origin, in
    /// seconds, for a far-field source in direction `azimuth` (radians).
    pub fn delays(&self, azimuth: f64) -> Vec<f64> {
        let u = [azimuth.cos(), azimuth.sin(), 0.0];
        self.positions.iter().map(|p| -(p[0] * u[0] + p[1] * u[1] + p[2] * u[2]) / SPEED_OF_SOUND).collect()
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser shape parameter of the fractional-delay interpolator.
pub const KAISER_BETA: f64 = 8.0;

/// Delays `x` by `delay` samples (any sign) with a `taps`-tap
/// Kaiser-windowed sinc; integer delays are exact shifts. The output keeps
/// the input length.
pub fn fractional_delay(x: &[f64], delay: f64, taps: usize) -> Vec<f64> {
    let whole = delay.floor();
    let frac = delay - whole;
    let shift = whole as isize;
    let n = x.len() as isize;
    let at = |i: isize| if (0..n).contains(&i) { x[i as usize] } else { 0.0 };
    if frac.abs() < 1e-12 {
        return (0..n).map(|i| at(i - shift)).collect();
    }
    let half = (taps / 2) as isize;
    let norm = bessel_i0(KAISER_BETA);
    // y[i] = sum_j h[j] x[i - shift - j], h[j] = sinc(j - frac) w(j - frac)
    let kernel: Vec<(isize, f64)> = (1 - half..=half)
        .map(|j| {
            let u = j as f64 - frac;
            let r = u / half as f64;
            let w = if r.abs() < 1.0 { bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm } else { 0.0 };
            let pu = std::f64::consts::PI * u;
            (j, w * pu.sin() / pu)
        })
        .collect();
    (0..n).map(|i| kernel.iter().map(|&(j, h)| h * at(i - shift - j)).sum()).collect()
}

/// Spatial image of a dry source on every microphone.
pub fn propagate(source: &[f64], geometry: &ArrayGeometry, azimuth: f64, sample_rate: u32, taps: usize) -> Wave {
    let channels = geometry
        .delays(azimuth)
        .into_iter()
        .map(|tau| fractional_delay(source, tau * f64::from(sample_rate), taps))
        .collect();
    Wave { sample_rate, channels }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OverlapWay {
    /// Each speaker has an exclusive end; they overlap in the middle.
    HeadTail,
    /// One speaker talks throughout, the other inside.
    Middle,
    /// Both aligned at the start or at the end of the mixture.
    StartOrEnd,
    /// Complete overlap.
    Full,
}

impl OverlapWay {
    pub const ALL: [OverlapWay; 4] = [OverlapWay::HeadTail, OverlapWay::Middle, OverlapWay::StartOrEnd, OverlapWay::Full];

    pub fn name(self) -> &'static str {
        match self {
            OverlapWay::HeadTail => "head-tail",
            OverlapWay::Middle => "middle",
            OverlapWay::StartOrEnd => "start-or-end",
            OverlapWay::Full => "full",
        }
    }
}

impl fmt::Display for OverlapWay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OverlapWay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown overlap way '{s}'")))
    }
}

pub const RATIO_RANGE: (f64, f64) = (0.10, 1.00);
pub const SNR_RANGE: (f64, f64) = (-5.0, 5.0);

/// Everything that determines one mixture apart from its sources.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub way: OverlapWay,
    pub overlap_ratio: f64,
    pub snr_db: f64,
    /// Source directions in radians.
    pub azimuths: [f64; 2],
    pub seconds: f64,
    pub sample_rate: u32,
    /// Drives placement choices (which speaker is longer, offsets).
    pub seed: u64,
}

impl MixtureSpec {
    pub fn samples(&self) -> usize {
        (self.seconds * f64::from(self.sample_rate)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = RATIO_RANGE;
        if !(lo..=hi).contains(&self.overlap_ratio) {
            return Err(Error::InvalidArgument(format!("overlap ratio {} outside [{lo}, {hi}]", self.overlap_ratio)));
        }
        if !(SNR_RANGE.0..=SNR_RANGE.1).contains(&self.snr_db) {
            return Err(Error::InvalidArgument(format!("SNR {} dB outside [-5, 5]", self.snr_db)));
        }
        match (self.way, self.overlap_ratio == 1.0) {
            (OverlapWay::Full, false) => {
                Err(Error::InvalidArgument(format!("full overlap needs ratio 1, got {}", self.overlap_ratio)))
            }
            (OverlapWay::HeadTail | OverlapWay::Middle | OverlapWay::StartOrEnd, true) => Err(
                Error::InvalidArgument(format!("{} overlap needs a ratio below 1 (ratio 1 is full overlap)", self.way)),
            ),
            _ => Ok(()),
        }
    }

    /// Active `[start, end)` sample ranges of the two speakers.
    pub fn segments(&self) -> Result<[(usize, usize); 2]> {
        self.validate()?;
        let m = self.samples();
        let o = ((self.overlap_ratio * m as f64).round() as usize).clamp(1, m);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let swap: bool = rng.random();
        let (long, short) = match self.way {
            OverlapWay::Full => ((0, m), (0, m)),
            OverlapWay::HeadTail => {
                let a = (m + o).div_ceil(2);
                ((0, a), (a - o, m))
            }
            OverlapWay::Middle => {
                let start = rng.random_range(0..=m - o);
                ((0, m), (start, start + o))
            }
            OverlapWay::StartOrEnd => {
                if rng.random::<bool>() {
                    ((0, m), (0, o))
                } else {
                    ((0, m), (m - o, m))
                }
            }
        };
        Ok(if swap { [short, long] } else { [long, short] })
    }
}

/// One mixture with its parts.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    pub mixture: Wave,
    /// Placed, rescaled multichannel images; they sum to `mixture` exactly.
    /// Empty for examples read back from disk.
    pub images: Vec<Wave>,
    /// Reference-channel rows of `images`.
    pub targets: Vec<Vec<f64>>,
    pub reference_channel: usize,
    pub spec: MixtureSpec,
}

fn region_energy(w: &Wave, range: (usize, usize)) -> f64 {
    w.channels.iter().map(|ch| ch[range.0..range.1].iter().map(|v| v * v).sum::<f64>()).sum()
}

/// Places two spatial images according to `spec` and mixes them.
///
/// Image `n` is cut to the length of its active segment (its leading
/// samples are used) and zero elsewhere. The second image is rescaled so
/// that the energy ratio of the two over the overlapped region, summed
/// over all microphones, equals `spec.snr_db`.
pub fn overlap_mix(img1: &Wave, img2: &Wave, spec: &MixtureSpec, reference_channel: usize) -> Result<MixtureExample> {
    let m = spec.samples();
    let channels = img1.num_channels();
    if img2.num_channels() != channels || img1.sample_rate != spec.sample_rate || img2.sample_rate != spec.sample_rate {
        return Err(Error::InvalidArgument("images differ in channel count or sample rate".into()));
    }
    if reference_channel >= channels {
        return Err(Error::InvalidArgument(format!("reference channel {reference_channel} of {channels}")));
    }
    let segments = spec.segments()?;
    let mut placed = Vec::with_capacity(2);
    for (img, &(start, end)) in [img1, img2].into_iter().zip(&segments) {
        if img.len() < end - start {
            return Err(Error::InvalidArgument(format!(
                "image of {} samples is shorter than its {}-sample segment",
                img.len(),
                end - start
            )));
        }
        let channels = img
            .channels
            .iter()
            .map(|ch| {
                let mut out = vec![0.0; m];
                out[start..end].copy_from_slice(&ch[..end - start]);
                out
            })
            .collect();
        placed.push(Wave { sample_rate: spec.sample_rate, channels });
    }
    let overlap = (segments[0].0.max(segments[1].0), segments[0].1.min(segments[1].1));
    let (e1, e2) = (region_energy(&placed[0], overlap), region_energy(&placed[1], overlap));
    if e1 <= 0.0 || e2 <= 0.0 {
        return Err(Error::Data("a source is silent over the overlapped region".into()));
    }
    let gain = (e1 / e2 * 10f64.powf(-spec.snr_db / 10.0)).sqrt();
    placed[1].channels.iter_mut().flatten().for_each(|v| *v *= gain);
    let mixture = Wave {
        sample_rate: spec.sample_rate,
        channels: (0..channels)
            .map(|c| placed[0].channels[c].iter().zip(&placed[1].channels[c]).map(|(a, b)| a + b).collect())
            .collect(),
    };
    let targets = placed.iter().map(|w| w.channels[reference_channel].clone()).collect();
    Ok(MixtureExample { mixture, images: placed, targets, reference_channel, spec: spec.clone() })
}
