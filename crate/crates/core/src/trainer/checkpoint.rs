//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `NBSEPCKP`, format version (u32), element type tag, the
//! effective configuration text, named parameter tensors, batch-norm
//! running buffers, optional Adam state, then training progress. Strings
//! are u64-length-prefixed UTF-8; tensors are rank, dims and raw values.
//! Loading converts stored values to the requested element type.

use std::path::Path;

use super::Adam;
use crate::config::Settings;
use crate::error::{Error, Result};
use crate::network::{Network, ParamStore};
use crate::normalization::RunningStats;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"NBSEPCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Where a run stands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    /// Epochs completed; training resumes at this epoch.
    pub epoch: u64,
    /// Optimizer steps taken, skipped steps included.
    pub step: u64,
    pub seed: u64,
    /// Best validation SI-SDRi so far (NaN before the first validation).
    pub best_metric: f64,
    pub best_epoch: u64,
}

impl Default for Progress {
    fn default() -> Self {
        Self { epoch: 0, step: 0, seed: 0, best_metric: f64::NAN, best_epoch: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub config_text: String,
    pub params: ParamStore<S>,
    pub running: Vec<Option<RunningStats<S>>>,
    pub optimizer: Option<Adam<S>>,
    pub progress: Progress,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_network(settings: &Settings, net: &Network<S>, optimizer: Option<&Adam<S>>, progress: Progress) -> Self {
        Self {
            config_text: settings.to_text(),
            params: net.params().clone(),
            running: net.running_stats().to_vec(),
            optimizer: optimizer.cloned(),
            progress,
        }
    }

    pub fn settings(&self) -> Result<Settings> {
        Settings::from_text(&self.config_text)
            .map_err(|e| Error::Checkpoint(format!("stored configuration is invalid: {e}")))
    }

    /// Rebuilds the network the checkpoint was taken from.
    pub fn network(&self) -> Result<Network<S>> {
        let mut net = Network::with_params(self.settings()?.model, self.params.clone())?;
        net.set_running_stats(self.running.clone())?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(S::DTYPE);
        w.str(&self.config_text);
        w.u64(self.params.len() as u64);
        for (name, t) in self.params.iter() {
            w.str(name);
            w.tensor(t);
        }
        w.u64(self.running.len() as u64);
        for r in &self.running {
            match r {
                None => w.u8(0),
                Some(r) => {
                    w.u8(1);
                    w.u64(r.updates);
                    w.values(&r.mean);
                    w.values(&r.var);
                }
            }
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.f64(a.beta1);
                w.f64(a.beta2);
                w.f64(a.eps);
                w.u64(a.step);
                w.u64(a.m.len() as u64);
                for (m, v) in a.m.iter().zip(&a.v) {
                    w.tensor(m);
                    w.tensor(v);
                }
            }
        }
        let p = &self.progress;
        w.u64(p.epoch);
        w.u64(p.step);
        w.u64(p.seed);
        w.f64(p.best_metric);
        w.u64(p.best_epoch);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, width: 8 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        r.width = match r.str()?.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("unknown element type '{other}'"))),
        };
        let config_text = r.str()?;
        let mut params = ParamStore::default();
        for _ in 0..r.len()? {
            let name = r.str()?;
            params.push(name, r.tensor()?);
        }
        let mut running = Vec::new();
        for _ in 0..r.len()? {
            running.push(match r.u8()? {
                0 => None,
                1 => {
                    let updates = r.u64()?;
                    Some(RunningStats { updates, mean: r.values()?, var: r.values()? })
                }
                t => return Err(Error::Checkpoint(format!("bad running-statistics tag {t}"))),
            });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let (beta1, beta2, eps, step) = (r.f64()?, r.f64()?, r.f64()?, r.u64()?);
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for _ in 0..r.len()? {
                    m.push(r.tensor()?);
                    v.push(r.tensor()?);
                }
                Some(Adam { beta1, beta2, eps, step, m, v })
            }
            t => return Err(Error::Checkpoint(format!("bad optimizer tag {t}"))),
        };
        let progress =
            Progress { epoch: r.u64()?, step: r.u64()?, seed: r.u64()?, best_metric: r.f64()?, best_epoch: r.u64()? };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config_text, params, running, optimizer, progress })
    }

    /// Writes to a temporary sibling first, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn values<S: Scalar>(&mut self, v: &[S]) {
        self.u64(v.len() as u64);
        for x in v {
            match S::DTYPE {
                "f32" => self.0.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
                _ => self.f64(x.as_f64()),
            }
        }
    }
    fn tensor<S: Scalar>(&mut self, t: &Tensor<S>) {
        self.u64(t.shape().len() as u64);
        for d in t.shape() {
            self.u64(*d as u64);
        }
        self.values(t.data());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Stored element width in bytes; values are converted on load.
    width: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {} of {}", self.pos, self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// A count that must fit in the remaining input.
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Checkpoint(format!("implausible count {n}")));
        }
        Ok(n as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
    fn values<S: Scalar>(&mut self) -> Result<Vec<S>> {
        let n = self.len()?;
        let width = self.width;
        let raw = self.take(n * width)?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| match width {
                4 => S::from_f64_lossy(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))),
                _ => S::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect())
    }
    fn tensor<S: Scalar>(&mut self) -> Result<Tensor<S>> {
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let data = self.values()?;
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::normalization::NormKind;

    fn sample() -> Checkpoint<f32> {
        let settings = Settings::from_text("model.preset=gradcheck\nmodel.norm=bn\ndata.channels=2").unwrap();
        let mut net = Network::<f32>::new(settings.model.clone(), 3).unwrap();
        let mut running = net.running_stats().to_vec();
        if let Some(Some(r)) = running.get_mut(1) {
            r.mean[0] = 0.25;
            r.updates = 7;
        }
        net.set_running_stats(running).unwrap();
        let adam = Adam::new(net.params().tensors(), 0.9, 0.999, 1e-8);
        Checkpoint::from_network(&settings, &net, Some(&adam), Progress { epoch: 3, step: 12, seed: 5, best_metric: 4.5, best_epoch: 2 })
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
        let net = back.network().unwrap();
        assert_eq!(net.config().norm, NormKind::Bn);
        assert_eq!(net.config(), &ModelConfig { norm: NormKind::Bn, ..ModelConfig::gradcheck(2, 2) });
    }

    #[test]
    fn loading_converts_the_element_type() {
        let ck = sample();
        let wide = Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(wide.params.cast::<f32>(), ck.params);
        let narrow = Checkpoint::<f32>::from_bytes(&wide.to_bytes()).unwrap();
        assert_eq!(narrow, ck);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra).is_err());
    }
}
