//! Finite-difference check of every differentiable building block and of
//! the end-to-end training loss.

use crate::error::Result;
use crate::loss::fpit_on_tape;
use crate::network::{ForwardOptions, ModelConfig, Network};
use crate::normalization::{Mode, NormContext, NormKind, NormRegistry, NormSettings, RunningStats};
use crate::stft::StftConfig;
use crate::tensor::gradcheck::{check_gradients_multi, check_gradients_where, random_tensor, GradCheckReport};
use crate::tensor::{SeqLayout, StatAxes, Tape, Tensor, Var};

/// Relative-error bound every case must meet.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
    /// Largest analytic gradient among elements whose true gradient is
    /// identically zero (they have no meaningful relative error).
    pub structural_zero_max: f64,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE && self.structural_zero_max < 1e-10
    }
}

fn case(name: impl Into<String>, report: GradCheckReport) -> SuiteCase {
    SuiteCase { name: name.into(), report, structural_zero_max: 0.0 }
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    random_tensor(&[n], seed).into_data()
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, seed).map(|v| v + 1.5)
}

fn primitive_cases(seed: u64, out: &mut Vec<SuiteCase>) -> Result<()> {
    let s = seed;
    let x = random_tensor(&[12, 6], s);
    out.push(case(
        "linear",
        check_gradients_multi(|t, v| t.linear(v[0], v[1], v[2]), &[x.clone(), random_tensor(&[6, 5], s + 1), random_tensor(&[5], s + 2)], s)?,
    ));
    out.push(case("add", check_gradients_multi(|t, v| t.add(v[0], v[1]), &[x.clone(), random_tensor(&[12, 6], s + 3)], s)?));
    out.push(case("scale", check_gradients_multi(|t, v| Ok(t.scale(v[0], 0.7)), std::slice::from_ref(&x), s)?));
    out.push(case("silu", check_gradients_multi(|t, v| Ok(t.silu(v[0])), std::slice::from_ref(&x), s)?));
    out.push(case("dropout", check_gradients_multi(|t, v| t.dropout(v[0], 0.3, 5), std::slice::from_ref(&x), s)?));
    // 2 sequences of 6 frames
    out.push(case(
        "conv1d",
        check_gradients_multi(
            |t, v| t.conv1d(v[0], v[1], v[2], 6, 1),
            &[x.clone(), random_tensor(&[4, 6, 5], s + 4), random_tensor(&[4], s + 5)],
            s,
        )?,
    ));
    out.push(case(
        "grouped_conv1d",
        check_gradients_multi(
            |t, v| t.conv1d(v[0], v[1], v[2], 6, 2),
            &[x.clone(), random_tensor(&[4, 3, 3], s + 6), random_tensor(&[4], s + 7)],
            s,
        )?,
    ));
    out.push(case(
        "self_attention",
        check_gradients_multi(|t, v| Ok(t.self_attention(v[0], 6, 2, false)?.output), &[random_tensor(&[12, 12], s + 8)], s)?,
    ));
    let affine = |seed| [x.clone(), positive(&[6], seed), random_tensor(&[6], seed + 1)];
    let axes = [
        ("normalize_row", StatAxes::Row),
        ("normalize_row_groups", StatAxes::RowGroups(2)),
        ("normalize_utterance_frame", StatAxes::UtteranceFrame { utterances: 2, freqs: 2, frames: 3 }),
        ("normalize_feature", StatAxes::Feature),
    ];
    for (name, axes) in axes {
        out.push(case(name, check_gradients_multi(|t, v| Ok(t.normalize(v[0], v[1], v[2], axes, 1e-5)?.0), &affine(s + 9), s)?));
    }
    let (mean, var) = (noise(6, s + 11), positive(&[6], s + 12).into_data());
    out.push(case(
        "normalize_fixed",
        check_gradients_multi(|t, v| t.normalize_fixed(v[0], v[1], v[2], &mean, &var, 1e-5), &affine(s + 13), s)?,
    ));
    Ok(())
}

fn strategy_cases(seed: u64, out: &mut Vec<SuiteCase>) -> Result<()> {
    let layout = SeqLayout { utterances: 2, freqs: 2, frames: 3 };
    let settings = NormSettings { groups: 2, ..NormSettings::default() };
    let registry = NormRegistry::<f64>::with_builtin();
    let running = RunningStats::<f64>::new(4);
    for kind in NormKind::ALL {
        let strategy = registry.create(kind.name(), &settings)?;
        let inputs = [random_tensor(&[12, 4], seed), positive(&[4], seed + 1), random_tensor(&[4], seed + 2)];
        let report = check_gradients_multi(
            |t, v| {
                let ctx = NormContext { layout, mode: Mode::Train, running: Some(&running) };
                Ok(strategy.apply(t, v[0], v[1], v[2], &ctx)?.output)
            },
            &inputs,
            seed,
        )?;
        out.push(case(format!("norm_{kind}"), report));
    }
    Ok(())
}

/// Parameter elements with an exactly zero gradient: key biases shift every
/// score of a query row equally, and batch normalization removes a bias
/// added right in front of it.
fn structurally_zero(net: &Network<f64>) -> impl Fn(usize, usize) -> bool + '_ {
    let h1 = net.config().hidden;
    let bn = net.config().norm == NormKind::Bn;
    move |k, e| {
        net.params().names().get(k).is_some_and(|n| {
            (n.ends_with("mhsa.qkv.bias") && (h1..2 * h1).contains(&e)) || (bn && n.ends_with("ffn.conv2.bias"))
        })
    }
}

fn analytic_max<F>(op: F, inputs: &[Tensor<f64>], skip: impl Fn(usize, usize) -> bool) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let n = tape.value(out).len();
    let loss = if n == 1 { out } else { tape.weighted_sum(out, noise(n, 77))? };
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        for (e, g) in grads.get_or_zeros(*v).iter().enumerate() {
            if skip(k, e) {
                worst = worst.max(g.abs());
            }
        }
    }
    Ok(worst)
}

/// Elements checked per tensor in network-level cases; every layer type is
/// also checked exhaustively on its own.
pub const SAMPLES_PER_TENSOR: usize = 48;

fn sampled(inputs: &[Tensor<f64>]) -> impl Fn(usize, usize) -> bool {
    let strides: Vec<usize> = inputs.iter().map(|t| t.len().div_ceil(SAMPLES_PER_TENSOR).max(1)).collect();
    move |k, e| e % strides[k] == (k * 7) % strides[k]
}

fn network_cases(seed: u64, out: &mut Vec<SuiteCase>) -> Result<()> {
    // Tiny model with two input channels on 2 utterances of 5 frequencies
    // and 6 frames.
    let layout = SeqLayout { utterances: 2, freqs: 5, frames: 6 };
    let rows = layout.rows();
    for norm in NormKind::ALL {
        let cfg = ModelConfig { norm, ..ModelConfig::tiny(2, 2) };
        let net = Network::<f64>::new(cfg, seed)?;
        let h1 = net.config().hidden;
        let zero = structurally_zero(&net);
        let mut inputs: Vec<Tensor<f64>> = net.params().tensors().to_vec();
        inputs.push(random_tensor(&[rows, h1], seed + 1));
        let block_of = |prefix: &'static str| {
            let names = net.params().names().to_vec();
            let zero = structurally_zero(&net);
            let pick = sampled(&inputs);
            move |k: usize, e: usize| names.get(k).is_none_or(|n| n.starts_with(prefix)) && !zero(k, e) && pick(k, e)
        };
        // attention does not depend on the normalization kind
        if norm == NormKind::Gbn {
            let mhsa = |t: &mut Tape<f64>, v: &[Var]| {
                let (p, x) = v.split_at(v.len() - 1);
                Ok(net.mhsa_block(t, p, 0, x[0], layout, ForwardOptions::train(3))?.0)
            };
            let report = check_gradients_where(mhsa, &inputs, seed, block_of("blocks.0.mhsa"))?;
            out.push(SuiteCase {
                name: "mhsa_block".into(),
                report,
                structural_zero_max: analytic_max(mhsa, &inputs, &zero)?,
            });
        }
        let ffn = |t: &mut Tape<f64>, v: &[Var]| {
            let (p, x) = v.split_at(v.len() - 1);
            Ok(net.convffn_block(t, p, 0, x[0], layout, ForwardOptions::train(4))?.0)
        };
        let report = check_gradients_where(ffn, &inputs, seed, block_of("blocks.0.ffn"))?;
        out.push(SuiteCase { name: format!("convffn_block_{norm}"), report, structural_zero_max: analytic_max(ffn, &inputs, &zero)? });
    }

    // end to end: network, binding, inverse STFT and permutation-invariant loss
    let config = StftConfig::new(8)?;
    let samples = config.samples_for(layout.frames);
    let targets: Vec<Vec<Vec<f64>>> =
        (0..2).map(|u| (0..2).map(|n| noise(samples, seed + 10 + 2 * u + n)).collect()).collect();
    let scales: Vec<f64> = (0..layout.utterances * layout.freqs).map(|i| 0.5 + 0.05 * i as f64).collect();
    for norm in [NormKind::Gbn, NormKind::Bn] {
        let net = Network::<f64>::new(ModelConfig { norm, ..ModelConfig::tiny(2, 2) }, seed + 1)?;
        let zero = structurally_zero(&net);
        let mut inputs: Vec<Tensor<f64>> = net.params().tensors().to_vec();
        inputs.push(random_tensor(&[rows, 4], seed + 2));
        let op = |t: &mut Tape<f64>, v: &[Var]| {
            let (p, x) = v.split_at(v.len() - 1);
            let fwd = net.forward_on_tape(t, p, x[0], layout, ForwardOptions::train(5))?;
            Ok(fpit_on_tape(t, fwd.output, layout, &scales, &targets, config)?.0)
        };
        let pick = sampled(&inputs);
        let report = check_gradients_where(op, &inputs, seed, |k, e| !zero(k, e) && pick(k, e))?;
        out.push(SuiteCase { name: format!("end_to_end_fpit_{norm}"), report, structural_zero_max: analytic_max(op, &inputs, &zero)? });
    }
    Ok(())
}

/// Runs every case; the caller decides what to do with failures.
pub fn run(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    primitive_cases(seed, &mut out)?;
    strategy_cases(seed, &mut out)?;
    network_cases(seed, &mut out)?;
    Ok(out)
}
