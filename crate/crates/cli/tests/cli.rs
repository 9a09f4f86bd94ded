use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use nbsep::simulator::{DirectoryDataset, MANIFEST_NAME};
use nbsep::wav::{read_wav, write_wav};

const CONFIG: &str = "model.preset = tiny
data.channels = 2
data.sample_rate = 8000
data.seconds = 0.5
stft.window = 64
data.train_count = 6
data.val_count = 2
data.test_count = 3
train.epochs = 1
";

fn nbsep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbsep")).args(args).env_remove("NBSEP_DATA_DIR").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = nbsep(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    /// Weights at initialization (trained with a zero learning rate).
    untrained: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("test.conf");
        std::fs::write(&config, CONFIG).unwrap();
        let data = root.join("data");
        ok(&["--config", s(&config), "-q", "simulate", "--out", s(&data)]);
        let run = root.join("run");
        ok(&["--config", s(&config), "--set", "train.lr=0", "-q", "train", "--out", s(&run), "--data", s(&data)]);
        Fixture { untrained: run.join("last.ckpt"), _dir: dir, root, config, data }
    })
}

fn mixture(i: usize) -> PathBuf {
    fixture().data.join(format!("test/test-{i:05}_mix.wav"))
}

#[test]
fn simulate_writes_reproducible_files_with_bounded_snr() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["--config", s(&fixture().config), "--seed", "7", "-q", "simulate", "--split", "train", "--count", "4", "--out", s(out)]);
    }
    let manifest = std::fs::read_to_string(a.join(MANIFEST_NAME)).unwrap();
    let lines: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 4);
    let mut wavs: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".wav"))
        .collect();
    wavs.sort();
    assert_eq!(wavs.len(), 12);
    for name in &wavs {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let entries = DirectoryDataset::open(&a).unwrap();
    assert!(entries.entries().iter().all(|e| (-5.0..=5.0).contains(&e.snr_db)));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let out_dir = fixture().root.join("nowhere-run");
    let out = nbsep(&["--config", s(&fixture().config), "train", "--out", s(&out_dir), "--data", "/definitely/not/here"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    let out = Command::new(env!("CARGO_BIN_EXE_nbsep"))
        .args(["--config", s(&fixture().config), "train", "--out", s(&out_dir)])
        .env("NBSEP_DATA_DIR", "/also/not/here")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(nbsep(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(nbsep(&["--set", "model.nonsense=1", "params"]).status.code(), Some(1));
    assert_eq!(nbsep(&["--set", "train.lr", "params"]).status.code(), Some(1));
}

#[test]
fn training_echoes_config_and_writes_a_parseable_log() {
    let f = fixture();
    let run = f.root.join("smoke");
    let out = ok(&["--config", s(&f.config), "--set", "data.train_count=50", "--set", "data.channels=2", "train", "--out", s(&run), "--data", s(&f.data)]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train.lr = 0.001"), "{stderr}");
    assert!(stderr.contains("model.hidden = 32"));
    let log = std::fs::read_to_string(run.join("log.tsv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap().split('\t').count(), 7);
    // The dataset directory holds 6 training mixtures: 3 steps of 2.
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert!(r[2].parse::<f64>().unwrap().is_finite());
        assert_eq!(r[6], "ok");
    }
}

#[test]
fn separate_is_deterministic_and_keeps_the_length() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["separate", "--checkpoint", s(&f.untrained), "--input", s(&mixture(0)), "--out", s(out)]);
    }
    let input = read_wav(&mixture(0)).unwrap();
    for n in 1..=2 {
        let name = format!("test-00000_est{n}.wav");
        let est = read_wav(&a.join(&name)).unwrap();
        assert_eq!(est.num_channels(), 1);
        assert!(est.len().abs_diff(input.len()) <= 32);
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn separate_rejects_a_channel_mismatch() {
    let f = fixture();
    let wave = read_wav(&mixture(0)).unwrap();
    let mono = f.root.join("mono.wav");
    write_wav(&mono, &nbsep::stft::Wave::mono(wave.sample_rate, wave.channels[0].clone())).unwrap();
    let out = nbsep(&["separate", "--checkpoint", s(&f.untrained), "--input", s(&mono), "--out", s(&f.root.join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected 2 channels"));
}

/// Copies target files as estimates, optionally swapping the speakers.
fn estimates_from(dir: &Path, pick: impl Fn(&DirectoryDataset, usize, usize) -> PathBuf) {
    let data = DirectoryDataset::open(&fixture().data.join("test")).unwrap();
    std::fs::create_dir_all(dir).unwrap();
    for (i, e) in data.entries().iter().enumerate() {
        for n in 0..2 {
            std::fs::copy(pick(&data, i, n), dir.join(format!("{}_est{}.wav", e.id, n + 1))).unwrap();
        }
    }
}

fn table(out: &Output) -> Vec<Vec<String>> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

fn evaluate(estimates: &Path) -> Output {
    let f = fixture();
    nbsep(&["--config", s(&f.config), "evaluate", "--data", s(&f.data.join("test")), "--estimates", s(estimates)])
}

#[test]
fn evaluate_reports_ceiling_and_permutations() {
    let dir = tempfile::tempdir().unwrap();
    let target = |d: &DirectoryDataset, i: usize, n: usize| d.root().join(&d.entries()[i].targets[n]);
    let same = dir.path().join("same");
    estimates_from(&same, target);
    let swapped = dir.path().join("swapped");
    estimates_from(&swapped, |d, i, n| target(d, i, 1 - n));
    let (a, b) = (evaluate(&same), evaluate(&swapped));
    assert!(a.status.success() && b.status.success());
    let (ta, tb) = (table(&a), table(&b));
    assert_eq!(ta.len(), 3 * 2 + 1);
    for (ra, rb) in ta.iter().zip(&tb).take(6) {
        assert_eq!(ra[4], "0,1");
        assert_eq!(rb[4], "1,0");
        assert_eq!(ra[2], rb[2]);
        assert!(ra[2].parse::<f64>().unwrap() > 90.0);
    }
}

#[test]
fn evaluate_scores_the_mixture_at_zero_improvement() {
    let dir = tempfile::tempdir().unwrap();
    let data = DirectoryDataset::open(&fixture().data.join("test")).unwrap();
    for e in data.entries() {
        let mix = read_wav(&data.root().join(&e.mixture)).unwrap();
        for n in 1..=2 {
            let reference = nbsep::stft::Wave::mono(mix.sample_rate, mix.channels[0].clone());
            write_wav(&dir.path().join(format!("{}_est{n}.wav", e.id)), &reference).unwrap();
        }
    }
    let out = evaluate(dir.path());
    assert!(out.status.success());
    for row in table(&out).iter().take(6) {
        assert!(row[3].parse::<f64>().unwrap().abs() < 1e-6, "{row:?}");
    }
}

#[test]
fn evaluate_rejects_length_mismatch_beyond_one_hop() {
    let dir = tempfile::tempdir().unwrap();
    let target = |d: &DirectoryDataset, i: usize, n: usize| d.root().join(&d.entries()[i].targets[n]);
    estimates_from(dir.path(), target);
    let path = dir.path().join("test-00001_est2.wav");
    let mut w = read_wav(&path).unwrap();
    let keep = w.len() - 20;
    w.channels[0].truncate(keep);
    write_wav(&path, &w).unwrap();
    assert!(evaluate(dir.path()).status.success());
    let  keep = w.len() - 20;
    w.channels[0].truncate(keep);
    write_wav(&path, &w).unwrap();
    let out = evaluate(dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("one hop"));
}

fn matrix(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn exported_attention_maps_have_the_expected_shape_and_rows() {
    let f = fixture();
    let out = f.root.join("att");
    ok(&["export-attention", "--checkpoint", s(&f.untrained), "--input", s(&mixture(1)), "--block", "1", "--head", "1", "--out", s(&out)]);
    // 0.5 s at 8 kHz with window 64: 33 frequencies, 4000/32 + 1 frames.
    let (freqs, frames) = (33, 126);
    let qk = matrix(&out.join("qk_b1_h1.tsv"));
    let fk = matrix(&out.join("fk_b1_h1.tsv"));
    assert_eq!((qk.len(), qk[0].len()), (frames, frames));
    assert_eq!((fk.len(), fk[0].len()), (freqs, frames));
    for row in &qk {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
    // At initialization attention is close to uniform.
    let flat = qk.iter().filter(|r| r.iter().cloned().fold(0.0, f64::max) < 5.0 / frames as f64).count();
    assert!(flat as f64 >= 0.9 * frames as f64, "{flat} of {frames} rows near uniform");
    assert!(out.join("qk_b1_h1.png").is_file() && out.join("fk_b1_h1.png").is_file());
}

#[test]
fn attention_indices_are_range_checked() {
    let f = fixture();
    let out = nbsep(&["export-attention", "--checkpoint", s(&f.untrained), "--input", s(&mixture(1)), "--block", "2", "--out", s(&f.root.join("bad"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn separate_can_record_every_attention_head() {
    let f = fixture();
    let out = f.root.join("sep-att");
    ok(&["separate", "--checkpoint", s(&f.untrained), "--input", s(&mixture(2)), "--out", s(&out), "--record-attention"]);
    for b in 0..2 {
        for h in 0..2 {
            assert!(out.join(format!("attention/qk_b{b}_h{h}.tsv")).is_file());
        }
    }
}

#[test]
fn params_lists_exact_counts() {
    let out = ok(&["--set", "data.channels=4", "--set", "model.preset=tiny", "params"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("small\t8\t945892"), "{text}");
    assert!(text.contains("large\t8\t5594308"));
    assert!(text.lines().any(|l| l.starts_with("configured\t4\t")));
}
