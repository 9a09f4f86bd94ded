use std::path::{Path, PathBuf};

use nbsep::config::{ConfigMap, Settings};
use nbsep::gradsuite;
use nbsep::loss::{evaluate as score, MetricsTable};
use nbsep::narrowband::extract_and_normalize;
use nbsep::network::{AttentionRecord, ForwardOptions, ModelConfig, Network};
use nbsep::simulator::{write_dataset, DirectoryDataset, MixtureSource, Split, SyntheticDataset, MANIFEST_NAME};
use nbsep::stft::{stft, Wave};
use nbsep::trainer::{self, Checkpoint, FitOptions, Precision};
use nbsep::wav::{read_wav, write_wav};
use nbsep::{Error, Result};

use crate::heatmap;
use crate::Global;

/// Rendering ceiling of query-key maps; the text export is unclipped.
pub const QK_CLIP: f64 = 0.03;

/// Settings from `base` (a configuration text), then the file, then
/// `--set`, then `--seed`.
fn settings_over(g: &Global, base: Option<&str>) -> Result<Settings> {
    let mut map = match base {
        Some(text) => ConfigMap::parse(text)?,
        None => ConfigMap::default(),
    };
    if let Some(path) = &g.config {
        map.merge(&ConfigMap::load(path)?);
    }
    for pair in &g.overrides {
        map.set_pair(pair)?;
    }
    if let Some(seed) = g.seed {
        map.set("train.seed", &seed.to_string())?;
        map.set("data.seed", &seed.to_string())?;
    }
    Settings::resolve(&map)
}

fn settings(g: &Global) -> Result<Settings> {
    settings_over(g, None)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn synthetic(s: &Settings, split: Split, count: usize) -> Result<SyntheticDataset> {
    Ok(SyntheticDataset::new(s.distribution()?, s.data.seed, split, count))
}

fn open_dir(dir: &Path, s: &Settings) -> Result<DirectoryDataset> {
    if !dir.join(MANIFEST_NAME).is_file() {
        return Err(Error::Data(format!("{} has no {MANIFEST_NAME}", dir.display())));
    }
    let mut d = DirectoryDataset::open(dir)?;
    d.reference_channel = s.data.reference_channel;
    Ok(d)
}

pub fn simulate(g: &Global, out: &Path, split: &str, count: Option<usize>) -> Result<()> {
    let s = settings(g)?;
    let all = [
        (Split::Train, s.data.train_count),
        (Split::Validation, s.data.val_count),
        (Split::Test, s.data.test_count),
    ];
    let jobs: Vec<(Split, usize, PathBuf)> = match split {
        "all" => all.iter().map(|&(sp, n)| (sp, count.unwrap_or(n), out.join(sp.name()))).collect(),
        name => {
            let &(sp, n) = all
                .iter()
                .find(|(sp, _)| sp.name() == name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown split '{name}' (train, val, test or all)")))?;
            vec![(sp, count.unwrap_or(n), out.to_path_buf())]
        }
    };
    for (sp, n, dir) in jobs {
        let manifest = write_dataset(&dir, &synthetic(&s, sp, n)?)?;
        println!("{}: {n} mixtures, manifest {}", sp.name(), manifest.display());
    }
    Ok(())
}

pub fn train(g: &Global, out: &Path, data: Option<PathBuf>, resume: bool) -> Result<()> {
    let s = settings(g)?;
    log::info!("effective configuration:\n{}", s.to_text());
    let root = data
        .or_else(|| s.data.dir.clone())
        .or_else(|| std::env::var_os("NBSEP_DATA_DIR").map(PathBuf::from));
    let (train_set, val_set): (Box<dyn MixtureSource>, Box<dyn MixtureSource>) = match root {
        Some(root) => {
            if !root.is_dir() {
                return Err(Error::Data(format!("dataset directory {} does not exist", root.display())));
            }
            let val: Box<dyn MixtureSource> = if root.join("val").join(MANIFEST_NAME).is_file() {
                Box::new(open_dir(&root.join("val"), &s)?)
            } else {
                log::warn!("{} has no val/ split; validation is skipped", root.display());
                Box::new(synthetic(&s, Split::Validation, 0)?)
            };
            (Box::new(open_dir(&root.join("train"), &s)?), val)
        }
        None => (
            Box::new(synthetic(&s, Split::Train, s.data.train_count)?),
            Box::new(synthetic(&s, Split::Validation, s.data.val_count)?),
        ),
    };
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let config_path = out.join("config.txt");
    std::fs::write(&config_path, s.to_text()).map_err(io_err(&config_path))?;
    let opts = FitOptions { out_dir: out.to_path_buf(), resume, max_epochs_this_run: None };
    let summary = match s.train.precision {
        Precision::F32 => trainer::fit::<f32>(&s, train_set.as_ref(), val_set.as_ref(), &opts)?,
        Precision::F64 => trainer::fit::<f64>(&s, train_set.as_ref(), val_set.as_ref(), &opts)?,
    };
    println!(
        "trained {} epochs ({} steps); best validation SI-SDRi {:.2} dB at epoch {}; {}",
        summary.progress.epoch,
        summary.progress.step,
        summary.progress.best_metric,
        summary.progress.best_epoch,
        summary.best.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Settings, Network<f32>)> {
    let ck = Checkpoint::<f32>::load(path)?;
    Ok((ck.settings()?, ck.network()?))
}

fn read_mixture(path: &Path, s: &Settings) -> Result<Wave> {
    let wave = read_wav(path)?;
    if wave.num_channels() != s.model.channels_in || wave.sample_rate != s.data.sample_rate {
        return Err(Error::Data(format!(
            "{}: expected {} channels at {} Hz, got {} channels at {} Hz",
            path.display(),
            s.model.channels_in,
            s.data.sample_rate,
            wave.num_channels(),
            wave.sample_rate
        )));
    }
    Ok(wave)
}

fn record_attention(net: &Network<f32>, wave: &Wave, s: &Settings) -> Result<AttentionRecord> {
    let batch = extract_and_normalize(&stft(wave, s.stft()?)?, s.data.reference_channel)?;
    let opts = ForwardOptions { record_attention: true, ..ForwardOptions::eval() };
    let (_, record) = net.forward(&batch, opts)?;
    Ok(record.expect("recording was requested"))
}

fn export_head(rec: &AttentionRecord, block: usize, head: usize, out: &Path) -> Result<()> {
    let (nf, nt) = (rec.layout.freqs, rec.layout.frames);
    let qk = rec.qk_map(block, head, 0)?;
    let fk = rec.fk_map(block, head, 0)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let stem = format!("b{block}_h{head}");
    heatmap::write_tsv(&out.join(format!("qk_{stem}.tsv")), &qk, nt)?;
    heatmap::write_tsv(&out.join(format!("fk_{stem}.tsv")), &fk, nt)?;
    heatmap::write_png(&out.join(format!("qk_{stem}.png")), &qk, nt, nt, QK_CLIP)?;
    let fk_max = fk.iter().copied().fold(0.0, f64::max);
    heatmap::write_png(&out.join(format!("fk_{stem}.png")), &fk, nf, nt, fk_max)
}

pub fn separate(checkpoint: &Path, input: &Path, out: &Path, attention: bool) -> Result<()> {
    let (s, net) = load_model(checkpoint)?;
    let wave = read_mixture(input, &s)?;
    let estimates = trainer::separate(&net, &wave, s.data.reference_channel, s.stft()?)?;
    let stem = input.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_else(|| "mixture".into());
    let stem = stem.strip_suffix("_mix").unwrap_or(&stem).to_string();
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    for (n, est) in estimates.into_iter().enumerate() {
        let path = out.join(format!("{stem}_est{}.wav", n + 1));
        write_wav(&path, &Wave::mono(wave.sample_rate, est))?;
        println!("{}", path.display());
    }
    if attention {
        let rec = record_attention(&net, &wave, &s)?;
        for block in 0..rec.blocks.len() {
            for head in 0..rec.heads {
                export_head(&rec, block, head, &out.join("attention"))?;
            }
        }
    }
    Ok(())
}

pub fn export_attention(checkpoint: &Path, input: &Path, block: usize, head: usize, out: &Path) -> Result<()> {
    let (s, net) = load_model(checkpoint)?;
    if block >= s.model.num_blocks || head >= s.model.num_heads {
        return Err(Error::InvalidArgument(format!(
            "block {block}, head {head} out of range ({} blocks, {} heads)",
            s.model.num_blocks, s.model.num_heads
        )));
    }
    let wave = read_mixture(input, &s)?;
    export_head(&record_attention(&net, &wave, &s)?, block, head, out)?;
    println!("attention maps of block {block} head {head} written to {}", out.display());
    Ok(())
}

fn read_estimates(dir: &Path, id: &str, speakers: usize, targets: &[Vec<f64>], hop: usize) -> Result<Vec<Vec<f64>>> {
    (0..speakers)
        .map(|n| {
            let path = dir.join(format!("{id}_est{}.wav", n + 1));
            let w = read_wav(&path)?;
            if w.num_channels() != 1 {
                return Err(Error::Data(format!("{}: expected a mono estimate", path.display())));
            }
            let len = targets[n].len();
            let mut x = w.channels.into_iter().next().expect("one channel");
            if x.len().abs_diff(len) > hop {
                return Err(Error::Data(format!(
                    "{}: {} samples, target has {len} (more than one hop of {hop} apart)",
                    path.display(),
                    x.len()
                )));
            }
            x.resize(len, 0.0);
            Ok(x)
        })
        .collect()
}

pub fn evaluate(
    g: &Global,
    data: Option<PathBuf>,
    estimates: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<&Path>,
) -> Result<()> {
    let model = checkpoint.as_deref().map(load_model).transpose()?;
    let s = settings_over(g, model.as_ref().map(|(s, _)| s.to_text()).as_deref())?;
    let source: Box<dyn MixtureSource> = match data {
        Some(dir) => Box::new(open_dir(&dir, &s)?),
        None => Box::new(synthetic(&s, Split::Test, s.data.test_count)?),
    };
    let table = match (model, estimates) {
        (Some((_, net)), _) => trainer::evaluate_source(&net, source.as_ref(), s.stft()?)?,
        (None, Some(dir)) => {
            let hop = s.stft()?.hop();
            let rows = (0..source.len())
                .map(|i| {
                    let ex = source.get(i)?;
                    let id = source.id(i);
                    let est = read_estimates(&dir, &id, ex.targets.len(), &ex.targets, hop)?;
                    score(&id, &est, &ex.targets, &ex.mixture.channels[ex.reference_channel])
                })
                .collect::<Result<Vec<_>>>()?;
            MetricsTable { rows }
        }
        (None, None) => return Err(Error::InvalidArgument("evaluate needs --estimates or --checkpoint".into())),
    };
    let text = table.to_tsv();
    match out {
        Some(path) => {
            std::fs::write(path, &text).map_err(io_err(path))?;
            println!("mean SI-SDR {:.2} dB, SI-SDRi {:.2} dB over {} mixtures", table.mean_si_sdr(), table.mean_si_sdri(), table.rows.len());
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn gradcheck(g: &Global) -> Result<()> {
    let started = std::time::Instant::now();
    let cases = gradsuite::run(g.seed.unwrap_or(1))?;
    println!("{:<28} {:>12} {:>9} {:>12}  result", "case", "max_rel_err", "elements", "zero_max");
    let mut failed = 0;
    for c in &cases {
        let ok = c.passed();
        failed += usize::from(!ok);
        println!(
            "{:<28} {:>12.3e} {:>9} {:>12.1e}  {}",
            c.name,
            c.report.max_rel_error,
            c.report.checked,
            c.structural_zero_max,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("{} cases in {:.1} s, tolerance {:e}", cases.len(), started.elapsed().as_secs_f64(), gradsuite::TOLERANCE);
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

pub fn params(g: &Global) -> Result<()> {
    let s = settings(g)?;
    let speakers = s.model.num_speakers;
    println!("preset\tchannels\tparameters\treference\tdeviation");
    for (preset, reference) in [("small", 0.9e6), ("large", 5.6e6)] {
        for c in [2, 4, 8] {
            let n = ModelConfig::by_name(preset, c, speakers)?.param_count();
            println!("{preset}\t{c}\t{n}\t{reference}\t{:+.2}%", 100.0 * (n as f64 / reference - 1.0));
        }
    }
    let tiny = ModelConfig::tiny(s.data.channels, speakers).param_count();
    println!("tiny\t{}\t{tiny}\t-\t-", s.data.channels);
    println!("configured\t{}\t{}\t-\t-", s.model.channels_in, s.model.param_count());
    Ok(())
}
