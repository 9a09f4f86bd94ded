//! Flat `key = value` run configuration.
//!
//! Grammar: one `key = value` pair per line, keys are `section.name` with
//! section one of `model`, `data`, `stft`, `train`; blank lines and lines
//! starting with `#` are ignored; surrounding whitespace is trimmed; a
//! later assignment of the same key wins. Lists are comma separated.
//! Unknown keys are errors.
//!
//! Precedence is defaults, then file, then command-line overrides. The
//! `model.preset` key selects the size preset first; explicit size keys
//! override it regardless of their position.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::normalization::NormKind;
use crate::simulator::{ArrayGeometry, MixtureDistribution, SourceSettings};
use crate::stft::StftConfig;
use crate::trainer::{Precision, TrainConfig};

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.preset", "small", "size preset: small, large, tiny or gradcheck"),
    ("model.blocks", "", "number of blocks (preset when empty)"),
    ("model.heads", "", "attention heads (preset when empty)"),
    ("model.hidden", "", "attention width H1 (preset when empty)"),
    ("model.ffn_hidden", "", "feed-forward width H2 (preset when empty)"),
    ("model.conv_groups", "", "groups of the feed-forward convolutions (preset when empty)"),
    ("model.input_kernel", "", "input convolution kernel (preset when empty)"),
    ("model.conv_kernel", "", "feed-forward convolution kernel (preset when empty)"),
    ("model.speakers", "2", "number of output speakers N"),
    ("model.dropout", "", "dropout rate (preset when empty)"),
    ("model.norm", "gbn", "feed-forward normalization: gbn, bn, ln or gn"),
    ("model.norm_eps", "1e-5", "normalization epsilon"),
    ("model.norm_momentum", "0.1", "batch-norm running-statistics momentum"),
    ("model.norm_groups", "8", "group-norm groups"),
    ("data.channels", "8", "microphones C"),
    ("data.sample_rate", "16000", "sample rate in Hz"),
    ("data.seconds", "4", "mixture length in seconds"),
    ("data.train_count", "20000", "training mixtures"),
    ("data.val_count", "200", "validation mixtures"),
    ("data.test_count", "200", "test mixtures"),
    ("data.source", "am-noise", "source generator: am-noise, multitone or file"),
    ("data.source_files", "", "WAV files for the file source"),
    ("data.tones", "", "fixed multitone frequencies in Hz"),
    ("data.radius", "0.05", "circular array radius in meters"),
    ("data.taps", "32", "fractional-delay filter taps"),
    ("data.reference_channel", "0", "reference microphone"),
    ("data.seed", "0", "dataset seed"),
    ("data.dir", "", "dataset directory (synthetic on the fly when empty)"),
    ("stft.window", "auto", "window length in samples; auto means 32 ms"),
    ("train.lr", "0.001", "initial learning rate"),
    ("train.decay", "0.99", "learning-rate decay per epoch"),
    ("train.clip_norm", "5", "global gradient-norm threshold"),
    ("train.utterances_per_batch", "2", "utterances per mini-batch"),
    ("train.epochs", "100", "training epochs"),
    ("train.seed", "0", "initialization, shuffling and dropout seed"),
    ("train.precision", "f32", "training precision: f32 or f64"),
    ("train.adam_beta1", "0.9", "Adam first-moment decay"),
    ("train.adam_beta2", "0.999", "Adam second-moment decay"),
    ("train.adam_eps", "1e-8", "Adam epsilon"),
];

/// Raw assignments, before resolution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            map.set_pair(line).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if !KEYS.iter().any(|(k, _, _)| *k == key) {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        self.entries.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies one `key=value` string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))?;
        self.set(k, v)
    }

    pub fn merge(&mut self, other: &ConfigMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    fn raw(&self, key: &str) -> &str {
        self.entries
            .get(key)
            .map(String::as_str)
            .or_else(|| KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d))
            .expect("known key")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
    }

    fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{s}'"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub channels: usize,
    pub sample_rate: u32,
    pub seconds: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub source: String,
    pub source_files: Vec<PathBuf>,
    pub tones: Vec<f64>,
    pub radius: f64,
    pub taps: usize,
    pub reference_channel: usize,
    pub seed: u64,
    pub dir: Option<PathBuf>,
}

/// Fully resolved settings of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model_preset: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// `None` selects a 32 ms window.
    pub stft_window: Option<usize>,
    pub train: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self::resolve(&ConfigMap::default()).expect("defaults are valid")
    }
}

impl Settings {
    pub fn resolve(map: &ConfigMap) -> Result<Self> {
        let data = DataConfig {
            channels: map.get("data.channels")?,
            sample_rate: map.get("data.sample_rate")?,
            seconds: map.get("data.seconds")?,
            train_count: map.get("data.train_count")?,
            val_count: map.get("data.val_count")?,
            test_count: map.get("data.test_count")?,
            source: map.get("data.source")?,
            source_files: map.list("data.source_files")?,
            tones: map.list("data.tones")?,
            radius: map.get("data.radius")?,
            taps: map.get("data.taps")?,
            reference_channel: map.get("data.reference_channel")?,
            seed: map.get("data.seed")?,
            dir: map.get_opt("data.dir")?,
        };
        let preset: String = map.get("model.preset")?;
        let mut model = ModelConfig::by_name(&preset, data.channels, map.get("model.speakers")?)?;
        macro_rules! size {
            ($field:ident, $key:literal) => {
                if let Some(v) = map.get_opt($key)? {
                    model.$field = v;
                }
            };
        }
        size!(num_blocks, "model.blocks");
        size!(num_heads, "model.heads");
        size!(hidden, "model.hidden");
        size!(ffn_hidden, "model.ffn_hidden");
        size!(conv_groups, "model.conv_groups");
        size!(input_kernel, "model.input_kernel");
        size!(conv_kernel, "model.conv_kernel");
        size!(dropout, "model.dropout");
        model.norm = map.get::<NormKind>("model.norm")?;
        model.norm_settings.eps = map.get("model.norm_eps")?;
        model.norm_settings.momentum = map.get("model.norm_momentum")?;
        model.norm_settings.groups = map.get("model.norm_groups")?;
        model.validate()?;
        let stft_window = match map.raw("stft.window") {
            "auto" => None,
            _ => Some(map.get("stft.window")?),
        };
        let train = TrainConfig {
            lr0: map.get("train.lr")?,
            decay: map.get("train.decay")?,
            clip_norm: map.get("train.clip_norm")?,
            utterances_per_batch: map.get("train.utterances_per_batch")?,
            epochs: map.get("train.epochs")?,
            seed: map.get("train.seed")?,
            precision: map.get("train.precision")?,
            beta1: map.get("train.adam_beta1")?,
            beta2: map.get("train.adam_beta2")?,
            adam_eps: map.get("train.adam_eps")?,
        };
        train.validate()?;
        let s = Self { model_preset: preset, model, data, stft_window, train };
        s.stft()?;
        if s.data.reference_channel >= s.data.channels {
            return Err(Error::Config(format!(
                "reference channel {} of {} microphones",
                s.data.reference_channel, s.data.channels
            )));
        }
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::resolve(&ConfigMap::parse(text)?)
    }

    pub fn stft(&self) -> Result<StftConfig> {
        match self.stft_window {
            Some(w) => StftConfig::new(w),
            None => StftConfig::for_sample_rate(self.data.sample_rate),
        }
    }

    pub fn distribution(&self) -> Result<MixtureDistribution> {
        Ok(MixtureDistribution {
            sample_rate: self.data.sample_rate,
            seconds: self.data.seconds,
            geometry: ArrayGeometry::circular(self.data.channels, self.data.radius)?,
            source_kind: self.data.source.clone(),
            source_settings: SourceSettings { files: self.data.source_files.clone(), tones: self.data.tones.clone() },
            taps: self.data.taps,
            reference_channel: self.data.reference_channel,
        })
    }

    /// Every key with its effective value; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let t = &self.train;
        let join = |v: Vec<String>| v.join(",");
        let pairs: Vec<(&str, String)> = vec![
            ("model.preset", self.model_preset.clone()),
            ("model.blocks", m.num_blocks.to_string()),
            ("model.heads", m.num_heads.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("model.ffn_hidden", m.ffn_hidden.to_string()),
            ("model.conv_groups", m.conv_groups.to_string()),
            ("model.input_kernel", m.input_kernel.to_string()),
            ("model.conv_kernel", m.conv_kernel.to_string()),
            ("model.speakers", m.num_speakers.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.norm", m.norm.to_string()),
            ("model.norm_eps", m.norm_settings.eps.to_string()),
            ("model.norm_momentum", m.norm_settings.momentum.to_string()),
            ("model.norm_groups", m.norm_settings.groups.to_string()),
            ("data.channels", d.channels.to_string()),
            ("data.sample_rate", d.sample_rate.to_string()),
            ("data.seconds", d.seconds.to_string()),
            ("data.train_count", d.train_count.to_string()),
            ("data.val_count", d.val_count.to_string()),
            ("data.test_count", d.test_count.to_string()),
            ("data.source", d.source.clone()),
            ("data.source_files", join(d.source_files.iter().map(|p| p.display().to_string()).collect())),
            ("data.tones", join(d.tones.iter().map(f64::to_string).collect())),
            ("data.radius", d.radius.to_string()),
            ("data.taps", d.taps.to_string()),
            ("data.reference_channel", d.reference_channel.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.dir", d.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("stft.window", self.stft_window.map_or_else(|| "auto".into(), |w| w.to_string())),
            ("train.lr", t.lr0.to_string()),
            ("train.decay", t.decay.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.utterances_per_batch", t.utterances_per_batch.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.precision", t.precision.to_string()),
            ("train.adam_beta1", t.beta1.to_string()),
            ("train.adam_beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision '{s}' (f32 or f64)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_recipe() {
        let s = Settings::default();
        assert_eq!(s.model, ModelConfig::small(8, 2));
        assert_eq!(s.stft().unwrap().window_length(), 512);
        assert_eq!((s.train.lr0, s.train.decay, s.train.clip_norm), (0.001, 0.99, 5.0));
        assert_eq!((s.train.utterances_per_batch, s.train.epochs), (2, 100));
        assert_eq!(s.data.radius, 0.05);
    }

    #[test]
    fn file_then_overrides_with_preset_first() {
        let mut map = ConfigMap::parse("# desk\nmodel.hidden = 48\nmodel.preset = tiny\n\ndata.channels=4\n").unwrap();
        let mut cli = ConfigMap::default();
        cli.set_pair("data.channels=6").unwrap();
        map.merge(&cli);
        let s = Settings::resolve(&map).unwrap();
        assert_eq!((s.model.num_blocks, s.model.hidden, s.model.channels_in), (2, 48, 6));
    }

    #[test]
    fn effective_text_round_trips() {
        let s = Settings::from_text("model.preset=tiny\nmodel.norm=gn\nstft.window=128\ndata.tones=440,880\n").unwrap();
        assert_eq!(Settings::from_text(&s.to_text()).unwrap(), s);
        assert_eq!(Settings::from_text(&Settings::default().to_text()).unwrap(), Settings::default());
    }

    #[test]
    fn bad_input_is_reported() {
        assert!(ConfigMap::parse("model.size = 3").is_err());
        assert!(ConfigMap::parse("model.blocks").is_err());
        assert!(Settings::from_text("model.blocks = two").is_err());
        assert!(Settings::from_text("model.norm = xn").is_err());
        assert!(Settings::from_text("data.reference_channel = 8").is_err());
        assert!(Settings::from_text("train.precision = f16").is_err());
    }
}
