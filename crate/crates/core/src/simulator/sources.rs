//! Pluggable dry-source generators, looked up by name.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::wav::read_wav;

/// Shortest source a generator will produce, in seconds.
pub const MIN_SECONDS: f64 = 0.25;

/// Options shared by every generator factory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SourceSettings {
    /// WAV files drawn from by the `file` generator.
    pub files: Vec<PathBuf>,
    /// Fixed tone frequencies for `multitone`; random when empty.
    pub tones: Vec<f64>,
}

/// A mono dry-signal generator, deterministic in `seed`.
pub trait SourceGenerator: Send + Sync {
    fn name(&self) -> &'static str;
    fn generate(&self, samples: usize, sample_rate: u32, seed: u64) -> Result<Vec<f64>>;
}

pub type SourceFactory = fn(&SourceSettings) -> Result<Box<dyn SourceGenerator>>;

pub struct SourceRegistry {
    factories: BTreeMap<&'static str, SourceFactory>,
}

impl SourceRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register("am-noise", |_| Ok(Box::new(AmNoise)));
        r.register("multitone", |s| Ok(Box::new(Multitone { tones: s.tones.clone() })));
        r.register("file", |s| FileSource::new(s.files.clone()).map(|f| Box::new(f) as Box<dyn SourceGenerator>));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: SourceFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn create(&self, name: &str, settings: &SourceSettings) -> Result<Box<dyn SourceGenerator>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!("unknown source kind '{name}' (known: {})", self.names().join(", ")))
        })?;
        factory(settings)
    }
}

impl Default for SourceRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}

/// One source signal of `seconds` seconds from the named generator.
pub fn synth_source(kind: &str, seconds: f64, sample_rate: u32, seed: u64, settings: &SourceSettings) -> Result<Vec<f64>> {
    if !(seconds >= MIN_SECONDS) {
        return Err(Error::InvalidArgument(format!("source length {seconds} s is below {MIN_SECONDS} s")));
    }
    let samples = (seconds * f64::from(sample_rate)).round() as usize;
    SourceRegistry::with_builtin().create(kind, settings)?.generate(samples, sample_rate, seed)
}

fn check_length(samples: usize, sample_rate: u32) -> Result<()> {
    if (samples as f64) < MIN_SECONDS * f64::from(sample_rate) - 0.5 {
        return Err(Error::InvalidArgument(format!(
            "{samples} samples at {sample_rate} Hz is shorter than {MIN_SECONDS} s"
        )));
    }
    Ok(())
}

/// Scales to unit RMS; a silent signal is left silent.
pub fn normalize_rms(x: &mut [f64]) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
}

/// Gaussian noise band-limited to 100 Hz .. 0.45 fs with a random spectral
/// tilt, amplitude-modulated by a 2-8 Hz raised sinusoid.
pub struct AmNoise;

impl SourceGenerator for AmNoise {
    fn name(&self) -> &'static str {
        "am-noise"
    }

    fn generate(&self, samples: usize, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
        check_length(samples, sample_rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs = f64::from(sample_rate);
        let mut buf: Vec<Complex<f64>> =
            (0..samples).map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0)).collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(samples).process(&mut buf);
        let (lo, hi) = (100.0, 0.45 * fs);
        // dB per octave above 100 Hz
        let tilt: f64 = rng.random_range(-6.0..0.0);
        for (k, b) in buf.iter_mut().enumerate() {
            let freq = k.min(samples - k) as f64 * fs / samples as f64;
            *b *= if (lo..=hi).contains(&freq) { 10f64.powf(tilt * (freq / lo).log2() / 20.0) } else { 0.0 };
        }
        planner.plan_fft_inverse(samples).process(&mut buf);
        let rate: f64 = rng.random_range(2.0..8.0);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        let mut x: Vec<f64> = buf
            .iter()
            .enumerate()
            .map(|(n, b)| {
                let env = 0.5 + 0.5 * (2.0 * PI * rate * n as f64 / fs + phase).sin();
                b.re * (0.05 + 0.95 * env)
            })
            .collect();
        normalize_rms(&mut x);
        Ok(x)
    }
}

/// Sum of equal-amplitude sinusoids with random phases. Without fixed
/// tones, 4 to 12 frequencies are drawn uniformly from 100 Hz .. 0.45 fs.
pub struct Multitone {
    pub tones: Vec<f64>,
}

impl SourceGenerator for Multitone {
    fn name(&self) -> &'static str {
        "multitone"
    }

    fn generate(&self, samples: usize, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
        check_length(samples, sample_rate)?;
        let fs = f64::from(sample_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tones = if self.tones.is_empty() {
            let count = rng.random_range(4..=12);
            (0..count).map(|_| rng.random_range(100.0..0.45 * fs)).collect()
        } else {
            self.tones.clone()
        };
        if let Some(bad) = tones.iter().find(|f| !(**f > 0.0 && **f < fs / 2.0)) {
            return Err(Error::InvalidArgument(format!("tone {bad} Hz outside (0, {}) Hz", fs / 2.0)));
        }
        let phases: Vec<f64> = tones.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let mut x: Vec<f64> = (0..samples)
            .map(|n| {
                let t = n as f64 / fs;
                tones.iter().zip(&phases).map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum()
            })
            .collect();
        normalize_rms(&mut x);
        Ok(x)
    }
}

/// Segments of mono WAV files; the seed picks the file and the offset.
pub struct FileSource {
    files: Vec<PathBuf>,
}

impl FileSource {
    pub fn new(files: Vec<PathBuf>) -> Result<Self> {
        if files.is_empty() {
            return Err(Error::Config("the file source needs at least one WAV file".into()));
        }
        if let Some(bad) = files.iter().find(|p| !p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))) {
            return Err(Error::Data(format!("{}: unsupported source format (only WAV is read)", bad.display())));
        }
        Ok(Self { files })
    }
}

impl SourceGenerator for FileSource {
    fn name(&self) -> &'static str {
        "file"
    }

    fn generate(&self, samples: usize, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
        check_length(samples, sample_rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = &self.files[rng.random_range(0..self.files.len())];
        let wave = read_wav(path)?;
        if wave.sample_rate != sample_rate {
            return Err(Error::Data(format!(
                "{}: sample rate {} Hz, expected {sample_rate} Hz",
                path.display(),
                wave.sample_rate
            )));
        }
        let src = &wave.channels[0];
        if src.is_empty() {
            return Err(Error::Data(format!("{}: no samples", path.display())));
        }
        let mut x: Vec<f64> = if src.len() > samples {
            let start = rng.random_range(0..=src.len() - samples);
            src[start..start + samples].to_vec()
        } else {
            src.iter().cycle().take(samples).copied().collect()
        };
        normalize_rms(&mut x);
        Ok(x)
    }
}
