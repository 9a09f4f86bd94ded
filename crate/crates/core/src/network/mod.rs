//! The narrow-band separation network.
//!
//! One shared model maps every `(utterance, frequency)` sequence of
//! normalized multichannel STFT coefficients to `2N` outputs per frame:
//! a temporal input convolution, `L` blocks of self-attention plus
//! convolutional feed-forward modules, and a linear output layer.

mod params;
mod record;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::narrowband::NarrowbandBatch;
use crate::normalization::{Mode, NormContext, NormKind, NormRegistry, NormSettings, Normalization, RunningStats};
use crate::tensor::{Scalar, SeqLayout, Tape, Tensor, Var};

pub use params::ParamStore;
pub use record::AttentionRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub conv_groups: usize,
    pub input_kernel: usize,
    pub conv_kernel: usize,
    pub channels_in: usize,
    pub num_speakers: usize,
    pub dropout: f64,
    /// Normalization inside the feed-forward module. Anything other than
    /// GBN also turns the norm in front of that module into layer norm.
    pub norm: NormKind,
    pub norm_settings: NormSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::small(8, 2)
    }
}

impl ModelConfig {
    fn preset(num_blocks: usize, hidden: usize, ffn_hidden: usize, channels_in: usize, num_speakers: usize) -> Self {
        Self {
            num_blocks,
            num_heads: 2,
            hidden,
            ffn_hidden,
            conv_groups: 8,
            input_kernel: 5,
            conv_kernel: 3,
            channels_in,
            num_speakers,
            dropout: 0.1,
            norm: NormKind::Gbn,
            norm_settings: NormSettings::default(),
        }
    }

    /// L=8, H1=96, H2=192.
    pub fn small(channels_in: usize, num_speakers: usize) -> Self {
        Self::preset(8, 96, 192, channels_in, num_speakers)
    }

    /// L=12, H1=192, H2=384.
    pub fn large(channels_in: usize, num_speakers: usize) -> Self {
        Self::preset(12, 192, 384, channels_in, num_speakers)
    }

    /// Desk-scale model: L=2, H1=32, H2=64.
    pub fn tiny(channels_in: usize, num_speakers: usize) -> Self {
        Self::preset(2, 32, 64, channels_in, num_speakers)
    }

    /// Smallest model used for finite-difference checks.
    pub fn gradcheck(channels_in: usize, num_speakers: usize) -> Self {
        Self { dropout: 0.0, ..Self::preset(2, 8, 16, channels_in, num_speakers) }
    }

    pub fn by_name(name: &str, channels_in: usize, num_speakers: usize) -> Result<Self> {
        match name {
            "small" => Ok(Self::small(channels_in, num_speakers)),
            "large" => Ok(Self::large(channels_in, num_speakers)),
            "tiny" => Ok(Self::tiny(channels_in, num_speakers)),
            "gradcheck" => Ok(Self::gradcheck(channels_in, num_speakers)),
            _ => Err(Error::Config(format!("unknown model preset '{name}' (small, large, tiny, gradcheck)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_blocks == 0 || self.channels_in == 0 || self.num_speakers == 0 {
            return fail("blocks, input channels and speakers must be positive".into());
        }
        if self.num_heads == 0 || self.hidden % self.num_heads != 0 {
            return fail(format!("hidden size {} not divisible by {} heads", self.hidden, self.num_heads));
        }
        if self.conv_groups == 0 || self.ffn_hidden % self.conv_groups != 0 {
            return fail(format!("ffn size {} not divisible by {} groups", self.ffn_hidden, self.conv_groups));
        }
        if self.input_kernel % 2 == 0 || self.conv_kernel % 2 == 0 {
            return fail("kernel sizes must be odd".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.norm_settings.eps <= 0.0 {
            return fail(format!("norm eps must be positive, got {}", self.norm_settings.eps));
        }
        if self.norm == NormKind::Gn && self.ffn_hidden % self.norm_settings.groups != 0 {
            return fail(format!(
                "ffn size {} not divisible into {} norm groups",
                self.ffn_hidden, self.norm_settings.groups
            ));
        }
        Ok(())
    }

    /// Normalization in front of the feed-forward module.
    pub fn pre_ffn_norm(&self) -> NormKind {
        if self.norm == NormKind::Gbn {
            NormKind::Gbn
        } else {
            NormKind::Ln
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (h1, h2, c, n) = (self.hidden, self.ffn_hidden, self.channels_in, self.num_speakers);
        let input = 2 * c * h1 * self.input_kernel + h1;
        let mhsa = 2 * h1 + 3 * h1 * h1 + 3 * h1 + h1 * h1 + h1;
        let convs = 3 * (h2 * (h2 / self.conv_groups) * self.conv_kernel + h2);
        let ffn = 2 * h1 + h1 * h2 + h2 + convs + 2 * h2 + h2 * h1 + h1;
        input + self.num_blocks * (mhsa + ffn) + h1 * 2 * n + 2 * n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct BlockIndex {
    attn_norm: Affine,
    qkv: Affine,
    attn_out: Affine,
    ffn_norm: Affine,
    lin1: Affine,
    convs: [Affine; 3],
    mid_norm: Affine,
    lin2: Affine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub dropout_seed: u64,
    pub record_attention: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, dropout_seed: 0, record_attention: false }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self { mode: Mode::Train, dropout_seed, record_attention: false }
    }
}

/// Result of running the network on a tape.
pub struct Forward<S> {
    /// `[U*F*T, 2N]` predictions.
    pub output: Var,
    pub attention: Option<AttentionRecord>,
    /// Batch normalization statistics to store after a training step, by
    /// block index.
    pub running: Vec<(usize, RunningStats<S>)>,
}

/// Parameters, running buffers and configuration of one model.
pub struct Network<S: Scalar> {
    config: ModelConfig,
    params: ParamStore<S>,
    running: Vec<Option<RunningStats<S>>>,
    input: Affine,
    blocks: Vec<BlockIndex>,
    output: Affine,
    pre_norm: Box<dyn Normalization<S>>,
    mid_norm: Box<dyn Normalization<S>>,
}

impl<S: Scalar> Clone for Network<S> {
    fn clone(&self) -> Self {
        let mut net = Self::with_params(self.config.clone(), self.params.clone()).expect("validated config");
        net.running = self.running.clone();
        net
    }
}

impl<S: Scalar> std::fmt::Debug for Network<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("config", &self.config)
            .field("params", &self.params.count())
            .finish()
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Ones,
    Zeros,
}

/// Declares every parameter in a fixed order; `make` supplies the values.
fn layout_params<S: Scalar>(
    cfg: &ModelConfig,
    mut make: impl FnMut(&[usize], Init) -> Tensor<S>,
) -> (ParamStore<S>, Affine, Vec<BlockIndex>, Affine) {
    let mut store = ParamStore::default();
    let (h1, h2, g) = (cfg.hidden, cfg.ffn_hidden, cfg.conv_groups);
    let mut pair = |store: &mut ParamStore<S>, prefix: &str, names: [&str; 2], shapes: [&[usize]; 2], inits: [Init; 2]| Affine {
        w: store.push(format!("{prefix}.{}", names[0]), make(shapes[0], inits[0])),
        b: store.push(format!("{prefix}.{}", names[1]), make(shapes[1], inits[1])),
    };
    const WB: [&str; 2] = ["weight", "bias"];
    const GB: [&str; 2] = ["gamma", "beta"];
    let dense = |fan_in: usize| [Init::FanIn(fan_in); 2];
    let norm_init = [Init::Ones, Init::Zeros];

    let cin = 2 * cfg.channels_in;
    let k_in = cfg.input_kernel;
    let input = pair(&mut store, "input_conv", WB, [&[h1, cin, k_in], &[h1]], dense(cin * k_in));
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for l in 0..cfg.num_blocks {
        let p = format!("blocks.{l}");
        let conv_fan = h2 / g * cfg.conv_kernel;
        let conv_shape = [h2, h2 / g, cfg.conv_kernel];
        blocks.push(BlockIndex {
            attn_norm: pair(&mut store, &format!("{p}.mhsa.norm"), GB, [&[h1], &[h1]], norm_init),
            qkv: pair(&mut store, &format!("{p}.mhsa.qkv"), WB, [&[h1, 3 * h1], &[3 * h1]], dense(h1)),
            attn_out: pair(&mut store, &format!("{p}.mhsa.out"), WB, [&[h1, h1], &[h1]], dense(h1)),
            ffn_norm: pair(&mut store, &format!("{p}.ffn.norm"), GB, [&[h1], &[h1]], norm_init),
            lin1: pair(&mut store, &format!("{p}.ffn.linear1"), WB, [&[h1, h2], &[h2]], dense(h1)),
            convs: [
                pair(&mut store, &format!("{p}.ffn.conv1"), WB, [&conv_shape, &[h2]], dense(conv_fan)),
                pair(&mut store, &format!("{p}.ffn.conv2"), WB, [&conv_shape, &[h2]], dense(conv_fan)),
                pair(&mut store, &format!("{p}.ffn.conv3"), WB, [&conv_shape, &[h2]], dense(conv_fan)),
            ],
            mid_norm: pair(&mut store, &format!("{p}.ffn.mid_norm"), GB, [&[h2], &[h2]], norm_init),
            lin2: pair(&mut store, &format!("{p}.ffn.linear2"), WB, [&[h2, h1], &[h1]], dense(h2)),
        });
    }
    let n2 = 2 * cfg.num_speakers;
    let output = pair(&mut store, "output", WB, [&[h1, n2], &[n2]], dense(h1));
    (store, input, blocks, output)
}

impl<S: Scalar> Network<S> {
    /// Fresh model: weights and biases uniform in `±1/sqrt(fan_in)`,
    /// normalization scales one and shifts zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, input, blocks, output) = layout_params::<S>(&config, |shape, init| match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| S::from_f64_lossy(rng.random_range(-bound..bound)))
            }
            Init::Ones => Tensor::full(shape, S::one()),
            Init::Zeros => Tensor::zeros(shape),
        });
        Self::assemble(config, params, input, blocks, output)
    }

    /// Model with the given parameters, which must follow the layout of
    /// `config`.
    pub fn with_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let (layout, input, blocks, output) = layout_params::<S>(&config, |shape, _| Tensor::zeros(shape));
        let mut net = Self::assemble(config, layout, input, blocks, output)?;
        net.params.load_from(params)?;
        Ok(net)
    }

    fn assemble(
        config: ModelConfig,
        params: ParamStore<S>,
        input: Affine,
        blocks: Vec<BlockIndex>,
        output: Affine,
    ) -> Result<Self> {
        let registry = NormRegistry::<S>::with_builtin();
        let pre_norm = registry.create(config.pre_ffn_norm().name(), &config.norm_settings)?;
        let mid_norm = registry.create(config.norm.name(), &config.norm_settings)?;
        let running = (0..config.num_blocks)
            .map(|_| mid_norm.uses_running_stats().then(|| RunningStats::new(config.ffn_hidden)))
            .collect();
        Ok(Self { config, params, running, input, blocks, output, pre_norm, mid_norm })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Batch normalization buffers, one per block (`None` for other kinds).
    pub fn running_stats(&self) -> &[Option<RunningStats<S>>] {
        &self.running
    }

    pub fn set_running_stats(&mut self, running: Vec<Option<RunningStats<S>>>) -> Result<()> {
        if running.len() != self.running.len()
            || running.iter().zip(&self.running).any(|(a, b)| a.is_some() != b.is_some())
        {
            return Err(Error::Checkpoint("running statistics do not match the model".into()));
        }
        self.running = running;
        Ok(())
    }

    pub fn apply_running_updates(&mut self, updates: Vec<(usize, RunningStats<S>)>) {
        for (block, stats) in updates {
            self.running[block] = Some(stats);
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Double-precision copy, used for gradient checks.
    pub fn cast<T: Scalar>(&self) -> Network<T> {
        let mut net = Network::<T>::with_params(self.config.clone(), self.params.cast()).expect("same layout");
        net.running = self
            .running
            .iter()
            .map(|r| {
                r.as_ref().map(|r| RunningStats {
                    mean: r.mean.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
                    var: r.var.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
                    updates: r.updates,
                })
            })
            .collect();
        net
    }

    fn check_input(&self, tape: &Tape<S>, params: &[Var], input: Var, layout: SeqLayout) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "Network::forward",
                format!("{} parameter handles for {} parameters", params.len(), self.params.len()),
            ));
        }
        let x = tape.value(input);
        if layout.frames == 0 {
            return Err(Error::InvalidArgument("sequences must have at least one frame".into()));
        }
        if x.last_dim() != 2 * self.config.channels_in || x.rows() != layout.rows() {
            return Err(Error::shape(
                "Network::forward",
                format!(
                    "input {:?} for {:?} with {} channels",
                    x.shape(),
                    layout,
                    self.config.channels_in
                ),
            ));
        }
        Ok(())
    }

    /// Runs the model on `input` (`[U*F*T, 2C]`), with parameters already
    /// placed on the tape by [`ParamStore::bind`].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        input: Var,
        layout: SeqLayout,
        opts: ForwardOptions,
    ) -> Result<Forward<S>> {
        self.check_input(tape, params, input, layout)?;
        let t = layout.frames;
        let mut x = tape.conv1d(input, params[self.input.w], params[self.input.b], t, 1)?;
        let mut record = opts.record_attention.then(|| AttentionRecord::new(layout, self.config.num_heads));
        let mut running = Vec::new();
        for (l, _) in self.blocks.iter().enumerate() {
            let (y, scores) = self.mhsa_block(tape, params, l, x, layout, opts)?;
            if let (Some(rec), Some(s)) = (record.as_mut(), scores) {
                rec.push_block(s.iter().map(|v| v.as_f64()).collect());
            }
            let (z, stats) = self.convffn_block(tape, params, l, y, layout, opts)?;
            if let Some(s) = stats {
                running.push((l, s));
            }
            x = z;
        }
        let output = tape.linear(x, params[self.output.w], params[self.output.b])?;
        Ok(Forward { output, attention: record, running })
    }

    fn dropout(&self, tape: &mut Tape<S>, x: Var, opts: ForwardOptions, block: usize, site: u64) -> Result<Var> {
        if opts.mode == Mode::Eval || self.config.dropout == 0.0 {
            return Ok(x);
        }
        tape.dropout(x, self.config.dropout, mix_seed(opts.dropout_seed, (block as u64) * 2 + site))
    }

    /// Pre-norm self-attention module with residual connection. Returns the
    /// attention probabilities when recording.
    pub fn mhsa_block(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        block: usize,
        x: Var,
        layout: SeqLayout,
        opts: ForwardOptions,
    ) -> Result<(Var, Option<Vec<S>>)> {
        let b = &self.blocks[block];
        let eps = S::from_f64_lossy(self.config.norm_settings.eps);
        let (h, _) = tape.normalize(
            x,
            params[b.attn_norm.w],
            params[b.attn_norm.b],
            crate::tensor::StatAxes::Row,
            eps,
        )?;
        let qkv = tape.linear(h, params[b.qkv.w], params[b.qkv.b])?;
        let att = tape.self_attention(qkv, layout.frames, self.config.num_heads, opts.record_attention)?;
        let o = tape.linear(att.output, params[b.attn_out.w], params[b.attn_out.b])?;
        let o = self.dropout(tape, o, opts, block, 0)?;
        Ok((tape.add(x, o)?, att.scores))
    }

    /// Normalized convolutional feed-forward module with residual connection.
    pub fn convffn_block(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        block: usize,
        x: Var,
        layout: SeqLayout,
        opts: ForwardOptions,
    ) -> Result<(Var, Option<RunningStats<S>>)> {
        let b = &self.blocks[block];
        let t = layout.frames;
        let g = self.config.conv_groups;
        let plain = NormContext { layout, mode: opts.mode, running: None };
        let h = self.pre_norm.apply(tape, x, params[b.ffn_norm.w], params[b.ffn_norm.b], &plain)?.output;
        let h = tape.linear(h, params[b.lin1.w], params[b.lin1.b])?;
        let h = tape.silu(h);
        let h = tape.conv1d(h, params[b.convs[0].w], params[b.convs[0].b], t, g)?;
        let h = tape.silu(h);
        let h = tape.conv1d(h, params[b.convs[1].w], params[b.convs[1].b], t, g)?;
        let ctx = NormContext { layout, mode: opts.mode, running: self.running[block].as_ref() };
        let normed = self.mid_norm.apply(tape, h, params[b.mid_norm.w], params[b.mid_norm.b], &ctx)?;
        let h = tape.silu(normed.output);
        let h = tape.conv1d(h, params[b.convs[2].w], params[b.convs[2].b], t, g)?;
        let h = tape.silu(h);
        let h = tape.linear(h, params[b.lin2.w], params[b.lin2.b])?;
        let h = self.dropout(tape, h, opts, block, 1)?;
        Ok((tape.add(x, h)?, normed.running))
    }

    /// Inference on a prepared batch: `[U, F, T, 2N]` outputs and, when
    /// requested, the attention record. Batch normalization must have been
    /// trained before it can run in inference mode.
    pub fn forward(&self, batch: &NarrowbandBatch, opts: ForwardOptions) -> Result<(Tensor<S>, Option<AttentionRecord>)> {
        if batch.channels != self.config.channels_in {
            return Err(Error::InvalidArgument(format!(
                "model expects {} channels, batch has {}",
                self.config.channels_in, batch.channels
            )));
        }
        let layout = SeqLayout { utterances: batch.utterances, freqs: batch.freqs, frames: batch.frames };
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let x = Tensor::new(
            vec![batch.rows(), batch.width()],
            batch.data.iter().map(|&v| S::from_f64_lossy(v)).collect(),
        )?;
        let input = tape.constant(x);
        let fwd = self.forward_on_tape(&mut tape, &params, input, layout, opts)?;
        let out = tape
            .value(fwd.output)
            .clone()
            .reshape(vec![batch.utterances, batch.freqs, batch.frames, 2 * self.config.num_speakers])?;
        Ok((out, fwd.attention))
    }
}

#[cfg(test)]
mod tests;
