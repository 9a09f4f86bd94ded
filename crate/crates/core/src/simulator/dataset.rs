use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{overlap_mix, propagate, ArrayGeometry, MixtureExample, MixtureSpec, OverlapWay, SourceRegistry, SourceSettings};
use crate::error::{Error, Result};
use crate::network::mix_seed;
use crate::stft::Wave;
use crate::wav::{read_wav, write_wav};

/// Random mixture conditions and the fixed recording setup.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDistribution {
    pub sample_rate: u32,
    pub seconds: f64,
    pub geometry: ArrayGeometry,
    pub source_kind: String,
    pub source_settings: SourceSettings,
    /// Fractional-delay filter length.
    pub taps: usize,
    pub reference_channel: usize,
}

impl MixtureDistribution {
    /// Circular 5 cm array with AM-noise sources.
    pub fn new(channels: usize, sample_rate: u32, seconds: f64) -> Result<Self> {
        Ok(Self {
            sample_rate,
            seconds,
            geometry: ArrayGeometry::circular(channels, 0.05)?,
            source_kind: "am-noise".into(),
            source_settings: SourceSettings::default(),
            taps: 32,
            reference_channel: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.geometry.channels()
    }

    /// Conditions of example `index`: the overlap way cycles with the index
    /// so that every source pair (four consecutive examples) appears in all
    /// four ways.
    pub fn sample_spec(&self, index: u64, seed: u64) -> MixtureSpec {
        let way = OverlapWay::ALL[(index % 4) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index));
        let overlap_ratio = if way == OverlapWay::Full { 1.0 } else { rng.random_range(super::RATIO_RANGE.0..1.0) };
        let snr_db = rng.random_range(super::SNR_RANGE.0..=super::SNR_RANGE.1);
        let az1 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let diff = rng.random_range(0.0..=std::f64::consts::PI);
        MixtureSpec {
            way,
            overlap_ratio,
            snr_db,
            azimuths: [az1, (az1 + diff) % (2.0 * std::f64::consts::PI)],
            seconds: self.seconds,
            sample_rate: self.sample_rate,
            seed: rng.random(),
        }
    }

    pub fn example(&self, index: u64, seed: u64) -> Result<MixtureExample> {
        let spec = self.sample_spec(index, seed);
        let pair = mix_seed(seed ^ 0x5eed_5eed, index / 4);
        let generator = SourceRegistry::with_builtin().create(&self.source_kind, &self.source_settings)?;
        let m = spec.samples();
        let mut images = Vec::with_capacity(2);
        for (n, az) in spec.azimuths.iter().enumerate() {
            let dry = generator.generate(m, self.sample_rate, mix_seed(pair, n as u64 + 1))?;
            images.push(propagate(&dry, &self.geometry, *az, self.sample_rate, self.taps));
        }
        overlap_mix(&images[0], &images[1], &spec, self.reference_channel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    /// First example index of the split; splits never share an index and
    /// therefore never share a seed.
    pub fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1 << 40,
            Split::Test => 2 << 40,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

/// Indexed collection of mixtures.
pub trait MixtureSource: Send + Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<MixtureExample>;
    fn sample_rate(&self) -> u32;
    fn channels(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, index: usize) -> String {
        format!("{index:05}")
    }
}

/// Mixtures generated on demand from a distribution and a seed.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub distribution: MixtureDistribution,
    pub seed: u64,
    pub split: Split,
    pub count: usize,
}

impl SyntheticDataset {
    pub fn new(distribution: MixtureDistribution, seed: u64, split: Split, count: usize) -> Self {
        Self { distribution, seed, split, count }
    }
}

impl MixtureSource for SyntheticDataset {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<MixtureExample> {
        if index >= self.count {
            return Err(Error::InvalidArgument(format!("example {index} of {}", self.count)));
        }
        self.distribution.example(self.split.offset() + index as u64, self.seed)
    }

    fn sample_rate(&self) -> u32 {
        self.distribution.sample_rate
    }

    fn channels(&self) -> usize {
        self.distribution.channels()
    }

    fn id(&self, index: usize) -> String {
        format!("{}-{index:05}", self.split.name())
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture: PathBuf,
    pub targets: Vec<PathBuf>,
    pub way: OverlapWay,
    pub overlap_ratio: f64,
    pub snr_db: f64,
    pub azimuths_deg: [f64; 2],
    pub seed: u64,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "# id\tmixture\ttarget1\ttarget2\tway\toverlap_ratio\tsnr_db\tazimuth1_deg\tazimuth2_deg\tseed";

impl ManifestEntry {
    fn to_line(&self) -> String {
        let mut s = format!("{}\t{}", self.id, self.mixture.display());
        for t in &self.targets {
            let _ = write!(s, "\t{}", t.display());
        }
        let _ = write!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t{}",
            self.way, self.overlap_ratio, self.snr_db, self.azimuths_deg[0], self.azimuths_deg[1], self.seed
        );
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Data(format!("manifest line '{line}': {what}"));
        if f.len() != 10 {
            return Err(bad(&format!("expected 10 fields, found {}", f.len())));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(&format!("field {} is not a number", i + 1)));
        Ok(Self {
            id: f[0].to_string(),
            mixture: f[1].into(),
            targets: vec![f[2].into(), f[3].into()],
            way: f[4].parse().map_err(|_| bad("unknown overlap way"))?,
            overlap_ratio: num(5)?,
            snr_db: num(6)?,
            azimuths_deg: [num(7)?, num(8)?],
            seed: f[9].parse().map_err(|_| bad("bad seed"))?,
        })
    }
}

/// Writes every example of `source` as 32-bit float WAVs (mixture plus one
/// file per target) under `dir`, followed by the manifest. Returns the
/// manifest path.
pub fn write_dataset(dir: &Path, source: &dyn MixtureSource) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<ManifestEntry> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let ex = source.get(i)?;
            let id = source.id(i);
            let mixture = PathBuf::from(format!("{id}_mix.wav"));
            write_wav(&dir.join(&mixture), &ex.mixture)?;
            let mut targets = Vec::new();
            for (n, t) in ex.targets.iter().enumerate() {
                let name = PathBuf::from(format!("{id}_s{}.wav", n + 1));
                write_wav(&dir.join(&name), &Wave::mono(ex.mixture.sample_rate, t.clone()))?;
                targets.push(name);
            }
            Ok(ManifestEntry {
                id,
                mixture,
                targets,
                way: ex.spec.way,
                overlap_ratio: ex.spec.overlap_ratio,
                snr_db: ex.spec.snr_db,
                azimuths_deg: ex.spec.azimuths.map(f64::to_degrees),
                seed: ex.spec.seed,
            })
        })
        .collect::<Result<_>>()?;
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in &entries {
        text.push_str(&e.to_line());
        text.push('\n');
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Mixtures read back from a directory written by [`write_dataset`].
#[derive(Clone, Debug)]
pub struct DirectoryDataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    sample_rate: u32,
    channels: usize,
    pub reference_channel: usize,
}

impl DirectoryDataset {
    /// Opens `dir/manifest.tsv`; the first mixture fixes the sample rate and
    /// channel count.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries: Vec<ManifestEntry> = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(ManifestEntry::parse)
            .collect::<Result<_>>()?;
        let (sample_rate, channels) = match entries.first() {
            Some(e) => {
                let w = read_wav(&dir.join(&e.mixture))?;
                (w.sample_rate, w.num_channels())
            }
            None => (0, 0),
        };
        Ok(Self { root: dir.to_path_buf(), entries, sample_rate, channels, reference_channel: 0 })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl MixtureSource for DirectoryDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    /// The example carries no per-microphone images; only the mixture and
    /// the reference-channel targets are stored on disk.
    fn get(&self, index: usize) -> Result<MixtureExample> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("example {index} of {}", self.entries.len())))?;
        let mixture = read_wav(&self.root.join(&e.mixture))?;
        if mixture.sample_rate != self.sample_rate || mixture.num_channels() != self.channels {
            return Err(Error::Data(format!(
                "{}: {} Hz x {} channels, expected {} Hz x {}",
                e.mixture.display(),
                mixture.sample_rate,
                mixture.num_channels(),
                self.sample_rate,
                self.channels
            )));
        }
        let mut targets = Vec::new();
        for t in &e.targets {
            let w = read_wav(&self.root.join(t))?;
            if w.len() != mixture.len() {
                return Err(Error::Data(format!(
                    "{}: {} samples, mixture has {}",
                    t.display(),
                    w.len(),
                    mixture.len()
                )));
            }
            targets.push(w.channels.into_iter().next().expect("one channel"));
        }
        let spec = MixtureSpec {
            way: e.way,
            overlap_ratio: e.overlap_ratio,
            snr_db: e.snr_db,
            azimuths: e.azimuths_deg.map(f64::to_radians),
            seconds: mixture.len() as f64 / f64::from(mixture.sample_rate),
            sample_rate: mixture.sample_rate,
            seed: e.seed,
        };
        Ok(MixtureExample { mixture, images: Vec::new(), targets, reference_channel: self.reference_channel, spec })
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn id(&self, index: usize) -> String {
        self.entries.get(index).map_or_else(|| format!("{index:05}"), |e| e.id.clone())
    }
}
