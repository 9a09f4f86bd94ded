use super::*;
use crate::tensor::gradcheck::{check_gradients_where, random_tensor};

fn layout(u: usize, f: usize, t: usize) -> SeqLayout {
    SeqLayout { utterances: u, freqs: f, frames: t }
}

fn run_block(
    net: &Network<f64>,
    x: &Tensor<f64>,
    lay: SeqLayout,
    which: &str,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let params = net.params().bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = match which {
        "mhsa" => net.mhsa_block(&mut tape, &params, 0, xv, lay, ForwardOptions::eval()).unwrap().0,
        _ => net.convffn_block(&mut tape, &params, 0, xv, lay, ForwardOptions::eval()).unwrap().0,
    };
    tape.value(out).clone()
}

#[test]
fn preset_parameter_counts() {
    assert_eq!(ModelConfig::small(8, 2).param_count(), 945_892);
    assert_eq!(ModelConfig::small(4, 2).param_count(), 942_052);
    assert_eq!(ModelConfig::large(8, 2).param_count(), 5_594_308);
    let net = Network::<f32>::new(ModelConfig::tiny(4, 2), 0).unwrap();
    assert_eq!(net.param_count(), ModelConfig::tiny(4, 2).param_count());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = ModelConfig::tiny(4, 2);
    c.num_heads = 3;
    assert!(Network::<f32>::new(c, 0).is_err());
    let mut c = ModelConfig::tiny(4, 2);
    c.ffn_hidden = 60;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::tiny(4, 2);
    c.conv_kernel = 4;
    assert!(c.validate().is_err());
}

#[test]
fn forward_shape_and_eval_determinism() {
    let cfg = ModelConfig { channels_in: 4, ..ModelConfig::gradcheck(4, 2) };
    let net = Network::<f32>::new(cfg, 3).unwrap();
    let x = random_tensor(&[2 * 65 * 32, 8], 1);
    let batch = NarrowbandBatch {
        utterances: 2,
        freqs: 65,
        frames: 32,
        channels: 4,
        data: x.data().to_vec(),
        scales: vec![1.0; 130],
        reference_channel: 0,
    };
    let (a, _) = net.forward(&batch, ForwardOptions::eval()).unwrap();
    let (b, _) = net.forward(&batch, ForwardOptions::eval()).unwrap();
    assert_eq!(a.shape(), &[2, 65, 32, 4]);
    assert_eq!(a, b);
}

#[test]
fn input_conv_impulse_stays_within_kernel_reach() {
    let net = Network::<f64>::new(ModelConfig::gradcheck(2, 2), 5).unwrap();
    let t = 12;
    let mut x = Tensor::<f64>::zeros(&[t, 4]);
    x.data_mut()[6 * 4 + 1] = 1.0;
    let mut tape = Tape::new();
    let p = net.params().bind(&mut tape, false);
    let xv = tape.constant(x);
    let y = tape.conv1d(xv, p[net.input.w], p[net.input.b], t, 1).unwrap();
    let bias = net.params().tensors()[net.input.b].data().to_vec();
    for (row, vals) in tape.value(y).data().chunks(8).enumerate() {
        let moved = vals.iter().zip(&bias).any(|(v, b)| (v - b).abs() > 0.0);
        assert_eq!(moved, (4..=8).contains(&row), "row {row}");
    }
}

#[test]
fn mhsa_of_zero_input_with_zero_biases_is_zero() {
    let mut net = Network::<f64>::new(ModelConfig::gradcheck(2, 2), 1).unwrap();
    let names: Vec<String> = net.params().names().to_vec();
    for (name, t) in names.iter().zip(net.params_mut().tensors_mut()) {
        if name.ends_with(".bias") || name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let lay = layout(1, 2, 5);
    let out = run_block(&net, &Tensor::zeros(&[10, 8]), lay, "mhsa");
    assert!(out.data().iter().all(|v| v.abs() < 1e-4));
}

#[test]
fn mhsa_is_equivariant_to_frame_permutation() {
    let net = Network::<f64>::new(ModelConfig::gradcheck(2, 2), 2).unwrap();
    let lay = layout(1, 3, 6);
    let x = random_tensor(&[18, 8], 4);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor<f64>| {
        let mut out = t.clone();
        for s in 0..3 {
            for (dst, &src) in perm.iter().enumerate() {
                out.data_mut()[(s * 6 + dst) * 8..][..8].copy_from_slice(&t.data()[(s * 6 + src) * 8..][..8]);
            }
        }
        out
    };
    let a = permute(&run_block(&net, &x, lay, "mhsa"));
    let b = run_block(&net, &permute(&x), lay, "mhsa");
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn convffn_impulse_reach_is_three_frames() {
    for norm in [NormKind::Gbn, NormKind::Ln] {
        let cfg = ModelConfig { norm, ..ModelConfig::gradcheck(2, 2) };
        let net = Network::<f64>::new(cfg, 8).unwrap();
        let lay = layout(1, 2, 16);
        let base = random_tensor(&[32, 8], 3);
        let mut bumped = base.clone();
        bumped.data_mut()[(16 + 7) * 8 + 2] += 1.0;
        let a = run_block(&net, &base, lay, "ffn");
        let b = run_block(&net, &bumped, lay, "ffn");
        for row in 0..32 {
            let t = row % 16;
            let delta: f64 = (0..8).map(|i| (a.data()[row * 8 + i] - b.data()[row * 8 + i]).abs()).sum();
            if !(4..=10).contains(&t) {
                assert!(delta < 1e-12, "{norm}: row {row} moved by {delta}");
            }
        }
    }
}

#[test]
fn without_cross_frequency_statistics_frequencies_are_independent() {
    let cfg = ModelConfig { norm: NormKind::Ln, ..ModelConfig::gradcheck(2, 2) };
    let net = Network::<f32>::new(cfg, 4).unwrap();
    let x = random_tensor(&[3 * 6, 4], 9);
    let batch = |data: Vec<f64>| NarrowbandBatch {
        utterances: 1,
        freqs: 3,
        frames: 6,
        channels: 2,
        data,
        scales: vec![1.0; 3],
        reference_channel: 0,
    };
    let (a, _) = net.forward(&batch(x.data().to_vec()), ForwardOptions::eval()).unwrap();
    let mut changed = x.data().to_vec();
    changed[2 * 6 * 4..].iter_mut().for_each(|v| *v *= -3.0);
    let (b, _) = net.forward(&batch(changed), ForwardOptions::eval()).unwrap();
    let first_two = 2 * 6 * 4;
    assert_eq!(a.data()[..first_two], b.data()[..first_two]);
    assert_ne!(a.data()[first_two..], b.data()[first_two..]);
}

#[test]
fn attention_record_rows_are_stochastic() {
    let net = Network::<f32>::new(ModelConfig::gradcheck(2, 2), 4).unwrap();
    let x = random_tensor(&[2 * 3 * 5, 4], 2);
    let batch = NarrowbandBatch {
        utterances: 2,
        freqs: 3,
        frames: 5,
        channels: 2,
        data: x.data().to_vec(),
        scales: vec![1.0; 6],
        reference_channel: 0,
    };
    let opts = ForwardOptions { record_attention: true, ..ForwardOptions::eval() };
    let (_, rec) = net.forward(&batch, opts).unwrap();
    let rec = rec.unwrap();
    assert_eq!(rec.blocks.len(), 2);
    for block in 0..2 {
        for head in 0..2 {
            for u in 0..2 {
                for row in rec.qk_map(block, head, u).unwrap().chunks(5) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                }
                for row in rec.fk_map(block, head, u).unwrap().chunks(5) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn batch_norm_model_needs_training_before_inference() {
    let cfg = ModelConfig { norm: NormKind::Bn, ..ModelConfig::gradcheck(2, 2) };
    let mut net = Network::<f64>::new(cfg, 1).unwrap();
    let lay = layout(1, 2, 4);
    let x = random_tensor(&[8, 4], 1);
    let batch = NarrowbandBatch {
        utterances: 1,
        freqs: 2,
        frames: 4,
        channels: 2,
        data: x.data().to_vec(),
        scales: vec![1.0; 2],
        reference_channel: 0,
    };
    assert!(net.forward(&batch, ForwardOptions::eval()).is_err());
    let mut tape = Tape::new();
    let p = net.params().bind(&mut tape, true);
    let xv = tape.constant(x);
    let fwd = net.forward_on_tape(&mut tape, &p, xv, lay, ForwardOptions::train(0)).unwrap();
    assert_eq!(fwd.running.len(), 2);
    net.apply_running_updates(fwd.running);
    assert!(net.forward(&batch, ForwardOptions::eval()).is_ok());
}

#[test]
fn full_network_gradients_match_finite_differences() {
    for norm in [NormKind::Gbn, NormKind::Bn] {
        let cfg = ModelConfig { norm, ..ModelConfig::gradcheck(2, 2) };
        let net = Network::<f64>::new(cfg, 11).unwrap();
        let lay = layout(1, 4, 8);
        let x = random_tensor(&[32, 4], 12);
        let mut inputs: Vec<Tensor<f64>> = net.params().tensors().to_vec();
        inputs.push(x);
        // Key biases shift every score of a query row equally, and a bias in
        // front of batch normalization is removed by its mean; both have an
        // exactly zero gradient, so they are checked on their own below.
        let h1 = net.config().hidden;
        let names = net.params().names().to_vec();
        let zero_grad = |k: usize, e: usize| {
            names.get(k).is_some_and(|n| {
                (n.ends_with("mhsa.qkv.bias") && (h1..2 * h1).contains(&e))
                    || (norm == NormKind::Bn && n.ends_with("ffn.conv2.bias"))
            })
        };
        let op = |tape: &mut Tape<f64>, vars: &[Var]| {
            let (params, input) = vars.split_at(vars.len() - 1);
            Ok(net.forward_on_tape(tape, params, input[0], lay, ForwardOptions::train(0))?.output)
        };
        let report = check_gradients_where(op, &inputs, 13, |k, e| !zero_grad(k, e)).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = op(&mut tape, &vars).unwrap();
        let loss = tape.weighted_sum(out, random_tensor(&[32 * 4], 1).into_data()).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (k, v) in vars.iter().enumerate() {
            for (e, g) in grads.get_or_zeros(*v).iter().enumerate() {
                if zero_grad(k, e) {
                    assert!(g.abs() < 1e-10, "{} [{e}] = {g}", names[k]);
                }
            }
        }
        assert!(report.max_rel_error < 1e-4, "{norm}: {report:?}");
    }
}
