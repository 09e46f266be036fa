use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ticft::checkpoint::Checkpoint;
use ticft::dataset::{Dataset, Manifest, ManifestEntry};
use ticft::experiment::{
    evaluate, generate_pretrain_data, generate_task_data, run_finetune, run_pretrain, sample_one, RunConfig,
    Variant,
};
use ticft::export::{loss_log_csv, write_pgm};
use ticft::metrics::EvalReport;
use ticft::rng::Rng;
use ticft::training::{LossRecord, TrainSample};
use ticft::{Frame, LatentSequence};
use toml::Value;

use crate::{config, Common};

pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";
pub const RAW_FRAMES: &str = "frames.bin";

/// Resolves the config and echoes it to stdout.
fn load_config(common: &Common, extra: &[(&str, Value)]) -> Result<RunConfig> {
    let mut flags: Vec<(&str, Value)> = Vec::new();
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| crate::ConfigError(format!("seed {seed} too large")))?;
        flags.push(("seed", Value::Integer(seed)));
    }
    if let Some(task) = common.task {
        flags.push(("task", Value::String(task.name().into())));
    }
    if let Some(dir) = &common.data_dir {
        flags.push(("paths.data_dir", Value::String(dir.display().to_string())));
    }
    if let Some(dir) = &common.out_dir {
        flags.push(("paths.out_dir", Value::String(dir.display().to_string())));
    }
    flags.extend(extra.iter().cloned());
    let cfg = config::resolve(common.config.as_deref(), &common.overrides, &flags)?;
    print!("{}", config::to_toml(&cfg)?);
    std::io::stdout().flush()?;
    Ok(cfg)
}

fn pretrain_file(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("pretrain.ticd")
}

fn split_file(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.paths.data_dir.join(format!("{}-{split}.ticd", cfg.task))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ticft::Error::io(dir, e).into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| ticft::Error::io(path, e).into())
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<TrainSample>> {
    let path = split_file(cfg, split);
    let data = Dataset::load(&path)?;
    if data.task != Some(cfg.task) {
        bail!(ticft::Error::Format(format!("{} does not hold {} pairs", path.display(), cfg.task)));
    }
    Ok(data.train_samples()?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Writes the loss log; a resumed run appends to the existing file.
fn write_loss_log(path: &Path, log: &[LossRecord], append: bool) -> Result<()> {
    let csv = loss_log_csv(log);
    if append && path.exists() {
        let body = csv.split_once('\n').map_or("", |(_, rest)| rest);
        let mut f = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| ticft::Error::io(path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| ticft::Error::io(path, e))?;
        Ok(())
    } else {
        write_file(path, csv)
    }
}

pub fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common, &[])?;
    let dir = &cfg.paths.data_dir;
    create_dir(dir)?;
    let corpus = generate_pretrain_data(&cfg)?;
    let (train, eval) = generate_task_data(&cfg)?;
    let mut files = Vec::new();
    for (path, data, split) in [
        (pretrain_file(&cfg), &corpus, "pretrain"),
        (split_file(&cfg, "train"), &train, "train"),
        (split_file(&cfg, "eval"), &eval, "eval"),
    ] {
        data.save(&path)?;
        eprintln!("wrote {} ({} samples)", path.display(), data.len());
        files.push(ManifestEntry {
            file: path.file_name().unwrap().to_string_lossy().into_owned(),
            task: data.task.map_or("pretrain".to_string(), |t| t.name().to_string()),
            split: split.to_string(),
            count: data.len(),
        });
    }
    let manifest = Manifest {
        seed: cfg.seed,
        height: cfg.data.height,
        width: cfg.data.width,
        files,
    };
    write_file(&dir.join("manifest.toml"), manifest.to_toml()?)
}

pub fn pretrain(common: &Common, resume: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common, &[])?;
    let corpus = Dataset::load(&pretrain_file(&cfg))?;
    if corpus.task.is_some() {
        bail!(ticft::Error::Format("pretraining file holds task pairs".into()));
    }
    let resume = resume.as_deref().map(load_checkpoint).transpose()?;
    let resumed = resume.is_some();
    let start = Instant::now();
    let (ckpt, log) = run_pretrain(&cfg, &corpus, resume)?;
    report_training("pretrain", &log, start);
    create_dir(&cfg.paths.out_dir)?;
    ckpt.save(&cfg.paths.out_dir.join(PRETRAIN_CKPT))?;
    write_loss_log(&cfg.paths.out_dir.join("pretrain_loss.csv"), &log, resumed)
}

pub fn finetune(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common, &[])?;
    let path = checkpoint.unwrap_or_else(|| cfg.paths.out_dir.join(PRETRAIN_CKPT));
    let ckpt = load_checkpoint(&path)?;
    let resumed = ckpt.layout.is_some();
    let train = load_split(&cfg, "train")?;
    let start = Instant::now();
    let (ckpt, log) = run_finetune(&cfg, ckpt, &train)?;
    report_training("finetune", &log, start);
    create_dir(&cfg.paths.out_dir)?;
    ckpt.save(&cfg.paths.out_dir.join(FINETUNE_CKPT))?;
    write_loss_log(&cfg.paths.out_dir.join("finetune_loss.csv"), &log, resumed)
}

fn report_training(phase: &str, log: &[LossRecord], start: Instant) {
    let tail = &log[log.len().saturating_sub(100)..];
    let recent = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
    eprintln!(
        "{phase}: {} steps in {:.1}s, mean loss over last {} steps {recent:.4}",
        log.len(),
        start.elapsed().as_secs_f64(),
        tail.len()
    );
}

fn buffer_flag(buffer: Option<usize>) -> Vec<(&'static str, Value)> {
    buffer.map(|b| ("buffer", Value::Integer(b as i64))).into_iter().collect()
}

fn take(samples: Vec<TrainSample>, count: Option<usize>) -> Result<Vec<TrainSample>> {
    match count {
        Some(n) if n > samples.len() => bail!(crate::ConfigError(format!(
            "--count {n} exceeds the {} eval samples",
            samples.len()
        ))),
        Some(n) => Ok(samples.into_iter().take(n).collect()),
        None => Ok(samples),
    }
}

/// Raw frames: u32 frame count, u32 pixels per frame, then little-endian
/// f64 pixels.
fn raw_bytes(seq: &LatentSequence) -> Vec<u8> {
    let dim = seq.dim().unwrap_or(0);
    let mut out = Vec::with_capacity(8 + 8 * seq.len() * dim);
    out.extend((seq.len() as u32).to_le_bytes());
    out.extend((dim as u32).to_le_bytes());
    for v in seq.flatten() {
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn read_raw(path: &Path) -> Result<LatentSequence> {
    let bytes = fs::read(path).map_err(|e| ticft::Error::io(path, e))?;
    let bad = || ticft::Error::Format(format!("{} is not a raw frame file", path.display()));
    if bytes.len() < 8 {
        bail!(bad());
    }
    let frames = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 8 * frames * dim {
        bail!(bad());
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let seq = values.chunks(dim.max(1)).map(|c| Frame::new(c.to_vec())).collect();
    Ok(seq)
}

pub fn sample(
    common: &Common,
    checkpoint: Option<PathBuf>,
    variant: Variant,
    buffer: Option<usize>,
    count: Option<usize>,
    output: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common, &buffer_flag(buffer))?;
    let path = checkpoint.unwrap_or_else(|| cfg.paths.out_dir.join(FINETUNE_CKPT));
    let ckpt = load_checkpoint(&path)?;
    let eval = take(load_split(&cfg, "eval")?, count)?;
    let b = cfg.layout()?.buffer;
    let dir = output.unwrap_or_else(|| cfg.paths.out_dir.join("samples").join(format!("{variant}-b{b}")));
    create_dir(&dir)?;
    let grid = cfg.grid()?;
    // Same streams as `experiment::sample_all`, so `sample` and `ablate` agree.
    let base = Rng::for_purpose(cfg.seed, "sample");
    for (i, s) in eval.iter().enumerate() {
        let mut rng = base.substream(i as u64);
        let (out, trace) = sample_one(&cfg, &ckpt.params, s, variant, &mut rng, false)?;
        let sub = dir.join(format!("sample_{i:04}"));
        create_dir(&sub)?;
        for (k, f) in out.frames().iter().enumerate() {
            write_pgm(&sub.join(format!("frame_{k:02}.pgm")), f, grid)?;
        }
        write_file(&sub.join(RAW_FRAMES), raw_bytes(&out))?;
        write_file(&sub.join("trace.csv"), trace.to_csv())?;
    }
    eprintln!("wrote {} samples to {}", eval.len(), dir.display());
    Ok(())
}

pub fn eval(common: &Common, samples: &Path) -> Result<()> {
    let cfg = load_config(common, &[])?;
    let truth = load_split(&cfg, "eval")?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(samples)
        .map_err(|e| ticft::Error::io(samples, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("sample_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!(ticft::Error::io(samples, std::io::Error::new(std::io::ErrorKind::NotFound, "no sample_* directories")));
    }
    if dirs.len() > truth.len() {
        bail!(crate::ConfigError(format!(
            "{} samples but only {} eval pairs",
            dirs.len(),
            truth.len()
        )));
    }
    let generated = dirs.iter().map(|d| read_raw(&d.join(RAW_FRAMES))).collect::<Result<Vec<_>>>()?;
    let gt: Vec<LatentSequence> = truth.iter().take(generated.len()).map(|s| s.target.clone()).collect();
    let report = EvalReport::score(&generated, &gt)?;
    write_file(&samples.join("report.csv"), report.to_csv())?;
    write_file(&samples.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    eprintln!(
        "{} samples: target mse {:.5} ± {:.5}, fidelity {:.4}, smoothness {:.4}",
        report.count,
        report.target_mse.mean,
        report.target_mse.std,
        report.condition_fidelity.mean,
        report.smoothness.mean
    );
    Ok(())
}

pub const ABLATION_HEADER: &str = "variant,buffer,count,target_mse_mean,target_mse_std,condition_fidelity_mean,condition_fidelity_std,smoothness_mean,smoothness_std";

pub fn ablate(
    common: &Common,
    checkpoint: Option<PathBuf>,
    variants: Vec<Variant>,
    buffers: Vec<usize>,
    count: Option<usize>,
) -> Result<()> {
    let cfg = load_config(common, &[])?;
    let path = checkpoint.unwrap_or_else(|| cfg.paths.out_dir.join(FINETUNE_CKPT));
    let ckpt = load_checkpoint(&path)?;
    let eval = take(load_split(&cfg, "eval")?, count)?;
    let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
    let buffers = if buffers.is_empty() { vec![cfg.layout()?.buffer] } else { buffers };
    let mut table = format!("{ABLATION_HEADER}\n");
    for &b in &buffers {
        let run = RunConfig { buffer: Some(b), ..cfg.clone() };
        run.validate().map_err(|e| crate::ConfigError(format!("buffer {b}: {e}")))?;
        for &v in &variants {
            let r = evaluate(&run, &ckpt.params, &eval, v, common.threads)?;
            eprintln!(
                "{v:>10} B={b}: target mse {:.5}, fidelity {:.4}, smoothness {:.4}",
                r.target_mse.mean, r.condition_fidelity.mean, r.smoothness.mean
            );
            table.push_str(&format!(
                "{v},{b},{},{},{},{},{},{},{}\n",
                r.count,
                r.target_mse.mean,
                r.target_mse.std,
                r.condition_fidelity.mean,
                r.condition_fidelity.std,
                r.smoothness.mean,
                r.smoothness.std
            ));
        }
    }
    create_dir(&cfg.paths.out_dir)?;
    write_file(&cfg.paths.out_dir.join("ablation.csv"), table)
}
