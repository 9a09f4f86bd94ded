//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! The experiment criteria read models trained by `scripts/train_desk.sh`
//! from `NBSEP_ACCEPTANCE_CACHE` (default `target/acceptance-cache`); a
//! missing model is reported as FAIL. Set `NBSEP_ACCEPTANCE_STRICT=1` to
//! turn any FAIL into a nonzero exit status.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nbsep::config::Settings;
use nbsep::gradsuite;
use nbsep::loss::{fpit, si_sdr};
use nbsep::network::{ForwardOptions, ModelConfig, Network};
use nbsep::normalization::{Mode, NormContext, NormRegistry, NormSettings};
use nbsep::simulator::{Split, SyntheticDataset};
use nbsep::stft::{istft_with_length, stft, StftConfig, Wave};
use nbsep::tensor::gradcheck::random_tensor;
use nbsep::tensor::SeqLayout;
use nbsep::trainer::{self, Checkpoint, FitOptions, LAST_NAME};
use nbsep::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const DESK_TEST: usize = 50;
const COMPARE_TEST: usize = 100;

fn cache_dir() -> PathBuf {
    std::env::var_os("NBSEP_ACCEPTANCE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
            let root = manifest.parent().and_then(Path::parent).unwrap_or(manifest);
            root.join("target/acceptance-cache")
        })
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let cases = gradsuite::run(1).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("non-empty suite");
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    verdict(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} cases, max rel error {:.2e} ({}), {:.1} s, failed {:?}",
            cases.len(),
            worst.report.max_rel_error,
            worst.name,
            secs,
            failed
        ),
    )
}

fn gbn_output(x: &Tensor<f64>, layout: SeqLayout, mode: Mode) -> Tensor<f64> {
    let width = x.last_dim();
    let strategy = NormRegistry::<f64>::with_builtin().create("gbn", &NormSettings::default()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full(&[width], 1.0));
    let b = tape.constant(Tensor::zeros(&[width]));
    let out = strategy.apply(&mut tape, xv, g, b, &NormContext { layout, mode, running: None }).unwrap();
    tape.value(out.output).clone()
}

fn gbn_correctness() -> Outcome {
    let layout = SeqLayout { utterances: 3, freqs: 5, frames: 7 };
    let (width, eps) = (8, NormSettings::default().eps);
    let group_len = layout.freqs * width;
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    let mut modes_equal = true;
    let mut isolated = true;
    for seed in 0..5 {
        // Utterances at very different levels and offsets.
        let raw = random_tensor(&[layout.rows(), width], seed);
        let x = Tensor::from_fn(raw.shape(), |i| {
            let u = i / (layout.freqs * layout.frames * width);
            raw.data()[i] * 10f64.powi(u as i32 - 1) + u as f64
        });
        let y = gbn_output(&x, layout, Mode::Train);
        modes_equal &= y.data().iter().zip(gbn_output(&x, layout, Mode::Eval).data()).all(|(a, b)| a.to_bits() == b.to_bits());
        for u in 0..layout.utterances {
            for t in 0..layout.frames {
                let rows = (0..layout.freqs).map(|f| (u * layout.freqs + f) * layout.frames + t);
                let gather = |m: &Tensor<f64>| -> Vec<f64> {
                    rows.clone().flat_map(|r| m.data()[r * width..(r + 1) * width].to_vec()).collect()
                };
                let (xs, ys) = (gather(&x), gather(&y));
                let n = group_len as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                worst_mean = worst_mean.max(my.abs());
                worst_var = worst_var.max((vy - vx / (vx + eps)).abs());
            }
        }
        // Changing utterance 2 leaves utterances 0 and 1 untouched.
        let per_utt = layout.freqs * layout.frames * width;
        let mut other = x.clone();
        other.data_mut()[2 * per_utt..].iter_mut().for_each(|v| *v = *v * 3.0 - 1.0);
        let z = gbn_output(&other, layout, Mode::Train);
        isolated &= y.data()[..2 * per_utt].iter().zip(&z.data()[..2 * per_utt]).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    verdict(
        worst_mean < 1e-6 && worst_var < 1e-5 && modes_equal && isolated,
        format!(
            "max |mean| {worst_mean:.1e}, max variance error {worst_var:.1e}, train/eval identical {modes_equal}, isolation {isolated}"
        ),
    )
}

fn lexicographic_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for first in 0..n {
        for rest in lexicographic_permutations(n - 1) {
            let mut p = vec![first];
            p.extend(rest.into_iter().map(|v| if v >= first { v + 1 } else { v }));
            out.push(p);
        }
    }
    out
}

fn fpit_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut mismatches = 0;
    for instance in 0..100 {
        let n = 2 + instance % 2;
        let len = 64;
        let targets: Vec<Vec<f64>> = (0..n).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        // Estimates are noisy, shuffled blends of the targets.
        let estimates: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                (0..len).map(|i| (0..n).map(|m| w[m] * targets[m][i]).sum::<f64>() + 0.3 * rng.random_range(-1.0..1.0)).collect()
            })
            .collect();
        let pair: Vec<Vec<f64>> = targets.iter().map(|y| estimates.iter().map(|e| si_sdr(y, e).unwrap()).collect()).collect();
        let mut best = (f64::INFINITY, Vec::new());
        for p in lexicographic_permutations(n) {
            let loss = -(0..n).map(|i| pair[i][p[i]]).sum::<f64>() / n as f64;
            if loss < best.0 {
                best = (loss, p);
            }
        }
        let got = fpit(&estimates, &targets).map_err(|e| e.to_string())?;
        if got.loss != best.0 || got.permutation != best.1 {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("100 instances (N = 2 and 3), {mismatches} differ from exhaustive search"))
}

fn si_sdr_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let y: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = y.iter().map(|v| v + 0.5 * rng.random_range(-1.0..1.0)).collect();
        let base = si_sdr(&y, &e).unwrap();
        for c in [0.1, 3.0, 10.0] {
            let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
            worst = worst.max((si_sdr(&y, &scaled).unwrap() - base).abs());
        }
    }
    let hand = si_sdr(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
    verdict(worst < 1e-6 && hand.abs() < 1e-9, format!("max scale deviation {worst:.1e} dB, [1,0] vs [1,1] gives {hand:e} dB"))
}

fn stft_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for rate in [8000u32, 16000] {
        let cfg = StftConfig::for_sample_rate(rate).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let len = rng.random_range(cfg.window_length()..4 * rate as usize / 4);
            let channels = rng.random_range(1..=4);
            let wave = Wave::new(rate, (0..channels).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()).unwrap();
            let back = istft_with_length(&stft(&wave, cfg).unwrap(), cfg, len).unwrap();
            let err: f64 = wave.channels.iter().flatten().zip(back.channels.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum();
            let norm: f64 = wave.channels.iter().flatten().map(|a| a * a).sum();
            worst = worst.max((err / norm).sqrt());
        }
    }
    verdict(worst < 1e-6, format!("40 signals at 8 and 16 kHz, max relative error {worst:.1e}"))
}

fn parameter_counts() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (preset, reference) in [("small", 0.9e6), ("large", 5.6e6)] {
        for c in [2, 4, 8] {
            let n = ModelConfig::by_name(preset, c, 2).unwrap().param_count();
            let dev = n as f64 / reference - 1.0;
            ok &= dev.abs() <= 0.05;
            parts.push(format!("{preset} C={c}: {n} ({:+.2}%)", 100.0 * dev));
        }
    }
    verdict(ok, parts.join(", "))
}

fn load_cached(norm: &str) -> Result<(Settings, Network<f32>), String> {
    let dir = cache_dir().join(norm);
    let ck = Checkpoint::<f32>::load(&dir.join(trainer::BEST_NAME))
        .map_err(|e| format!("no trained {norm} model ({e}); run scripts/train_desk.sh"))?;
    let progress = Checkpoint::<f32>::load(&dir.join(LAST_NAME)).map(|c| c.progress).map_err(|e| e.to_string())?;
    let settings = ck.settings().map_err(|e| e.to_string())?;
    if progress.epoch < settings.train.epochs {
        return Err(format!("{norm} training is incomplete ({} of {} epochs)", progress.epoch, settings.train.epochs));
    }
    Ok((settings, ck.network().map_err(|e| e.to_string())?))
}

fn held_out(settings: &Settings, net: &Network<f32>, source: &str, count: usize) -> Result<f64, String> {
    let mut s = settings.clone();
    s.data.source = source.to_string();
    let dist = s.distribution().map_err(|e| e.to_string())?;
    let test = SyntheticDataset::new(dist, s.data.seed, Split::Test, count);
    let table = trainer::evaluate_source(net, &test, s.stft().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok(table.mean_si_sdri())
}

fn desk_separation() -> Outcome {
    let (s, net) = load_cached("gbn")?;
    let score = held_out(&s, &net, &s.data.source, DESK_TEST)?;
    let wall: f64 = std::fs::read_to_string(cache_dir().join("gbn/wall_seconds.txt"))
        .map(|t| t.lines().filter_map(|l| l.trim().parse::<f64>().ok()).sum())
        .unwrap_or(f64::NAN);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    // Training parallelizes over utterances, frequencies and attention
    // sequences; the 8-core figure assumes linear scaling from `cores`.
    let projected = wall * cores as f64 / 8.0;
    let config_ok = s.model.num_blocks == 2
        && s.model.num_heads == 2
        && s.model.hidden == 32
        && s.model.ffn_hidden == 64
        && s.data.channels == 4
        && s.data.sample_rate == 8000
        && s.stft().map(|c| c.freqs()).ok() == Some(65)
        && s.data.train_count == 2000
        && s.train.epochs <= 20;
    verdict(
        score >= 8.0 && projected <= 45.0 * 60.0 && config_ok,
        format!(
            "SI-SDRi {score:.2} dB on {DESK_TEST} held-out mixtures, {} epochs, training {:.0} min on {cores} core(s) (projected {:.0} min on 8), config as required {config_ok}",
            s.train.epochs,
            wall / 60.0,
            projected / 60.0
        ),
    )
}

fn normalization_ablation() -> Outcome {
    let mut scores = Vec::new();
    for norm in ["gbn", "bn", "ln", "gn"] {
        let (s, net) = load_cached(norm)?;
        if s.train.utterances_per_batch != 2 {
            return Err(format!("{norm} was trained with {} utterances per batch", s.train.utterances_per_batch));
        }
        scores.push(held_out(&s, &net, &s.data.source, COMPARE_TEST)?);
    }
    let [gbn, bn, ln, gn] = scores[..] else { unreachable!() };
    verdict(
        gbn >= bn + 1.0 && gbn >= ln - 0.5 && gbn >= gn - 0.5,
        format!("SI-SDRi on {COMPARE_TEST} mixtures: GBN {gbn:.2}, BN {bn:.2}, LN {ln:.2}, GN {gn:.2} dB"),
    )
}

fn spectrum_agnostic() -> Outcome {
    let (s, net) = load_cached("gbn")?;
    if s.data.source != "am-noise" {
        return Err(format!("model was trained on '{}' sources", s.data.source));
    }
    let matched = held_out(&s, &net, "am-noise", COMPARE_TEST)?;
    let tones = held_out(&s, &net, "multitone", COMPARE_TEST)?;
    verdict(
        matched - tones <= 2.0,
        format!("SI-SDRi {matched:.2} dB on AM noise, {tones:.2} dB on multitone (degradation {:.2} dB)", matched - tones),
    )
}

fn mhsa_equivariance() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let net = Network::<f64>::new(ModelConfig::tiny(2, 2), seed).map_err(|e| e.to_string())?;
        let hidden = net.config().hidden;
        let layout = SeqLayout { utterances: 2, freqs: 4, frames: 16 };
        let t = layout.frames;
        let mut perm: Vec<usize> = (0..t).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..t).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let x = random_tensor(&[layout.rows(), hidden], seed + 100);
        let at = |m: &Tensor<f64>, r: usize, c: usize| m.data()[r * hidden + c];
        let permuted = Tensor::from_fn(x.shape(), |i| at(&x, (i / hidden / t) * t + perm[(i / hidden) % t], i % hidden));
        let run = |input: Tensor<f64>| {
            let mut tape = Tape::new();
            let params = net.params().bind(&mut tape, false);
            let xv = tape.constant(input);
            let (y, _) = net.mhsa_block(&mut tape, &params, 0, xv, layout, ForwardOptions::eval()).unwrap();
            tape.value(y).clone()
        };
        let (y, yp) = (run(x), run(permuted));
        for r in 0..layout.rows() {
            for c in 0..hidden {
                worst = worst.max((at(&yp, r, c) - at(&y, (r / t) * t + perm[r % t], c)).abs());
            }
        }
    }
    verdict(worst < 1e-5, format!("5 random frame permutations, max deviation {worst:.1e}"))
}

fn reproducibility() -> Outcome {
    let text = "model.preset = tiny\ndata.channels = 2\ndata.sample_rate = 8000\ndata.seconds = 0.5\nstft.window = 64\n\
                data.train_count = 6\ndata.val_count = 2\ntrain.epochs = 2\ntrain.seed = 5\ndata.seed = 5\n";
    let s = Settings::from_text(text).map_err(|e| e.to_string())?;
    let dist = s.distribution().map_err(|e| e.to_string())?;
    let train = SyntheticDataset::new(dist.clone(), s.data.seed, Split::Train, s.data.train_count);
    let val = SyntheticDataset::new(dist, s.data.seed, Split::Validation, s.data.val_count);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let fit = |dir: &tempfile::TempDir, resume: bool, limit: Option<u64>| {
        let opts = FitOptions { out_dir: dir.path().to_path_buf(), resume, max_epochs_this_run: limit };
        pool.install(|| trainer::fit::<f32>(&s, &train, &val, &opts)).map_err(|e| e.to_string())
    };
    fit(&dirs[0], false, None)?;
    fit(&dirs[1], false, None)?;
    fit(&dirs[2], false, Some(1))?;
    fit(&dirs[2], true, None)?;
    let bytes = |d: &tempfile::TempDir| std::fs::read(d.path().join(LAST_NAME)).unwrap();
    let (a, b, c) = (bytes(&dirs[0]), bytes(&dirs[1]), bytes(&dirs[2]));
    verdict(a == b && a == c, format!("repeat run identical {}, interrupted-and-resumed run identical {}", a == b, a == c))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient suite", gradient_suite),
        ("GBN correctness", gbn_correctness),
        ("fPIT oracle", fpit_oracle),
        ("SI-SDR properties", si_sdr_properties),
        ("STFT round trip", stft_round_trip),
        ("parameter counts", parameter_counts),
        ("desk-scale separation", desk_separation),
        ("normalization ablation", normalization_ablation),
        ("spectrum-agnostic", spectrum_agnostic),
        ("MHSA permutation equivariance", mhsa_equivariance),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 && std::env::var("NBSEP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
