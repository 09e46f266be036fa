use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ticft::dataset::{file_size, Dataset, Manifest};
use ticft::experiment::RunConfig;
use ticft::layout::Task;
use ticft::tasks::Grid;

const TINY: &str = r#"
seed = 5
task = "style-transfer"
pretrain_steps = 20
finetune_steps = 10

[model]
d_model = 16
d_ff = 32

[data]
pretrain_count = 12
train_count = 4
eval_count = 3

[sampler]
steps = 10
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.toml");
    let text = format!(
        "{TINY}\n[paths]\ndata_dir = \"{}\"\nout_dir = \"{}\"\n",
        root.join("data").display(),
        root.join("runs").display()
    );
    std::fs::write(&config, text).unwrap();
    Workspace { _dir: dir, root, config }
}

fn ticft(ws: &Workspace, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ticft"))
        .arg("--config")
        .arg(&ws.config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(ws: &Workspace, args: &[&str]) -> String {
    let out = ticft(ws, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible_and_sized() {
    let ws = workspace();
    ok(&ws, &["gen-data"]);
    let data = ws.root.join("data");
    let first = read_dir_bytes(&data);
    ok(&ws, &["gen-data"]);
    assert_eq!(read_dir_bytes(&data), first);

    let manifest = Manifest::from_toml(&std::fs::read_to_string(data.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest.seed, 5);
    assert_eq!(manifest.files.len(), 3);
    let grid = Grid::default();
    let train = std::fs::read(data.join("style-transfer-train.ticd")).unwrap();
    assert_eq!(u32::from_le_bytes(train[24..28].try_into().unwrap()), 4);
    assert_eq!(train.len(), file_size(Some(Task::StyleTransfer), grid, 4));
    let corpus = std::fs::read(data.join("pretrain.ticd")).unwrap();
    assert_eq!(corpus.len(), file_size(None, grid, 12));
    assert!(Dataset::from_bytes(&corpus).unwrap().verify_regeneration().unwrap());
}

#[test]
fn config_echo_reparses_identically() {
    let ws = workspace();
    let echoed = ok(&ws, &["--set", "train.lr=0.002", "--seed", "9", "gen-data"]);
    let cfg: RunConfig = toml::from_str(&echoed).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.train.lr, 0.002);
    assert_eq!(cfg.model.d_model, 16);
    let path = ws.root.join("echo.toml");
    std::fs::write(&path, &echoed).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ticft"))
        .arg("--config")
        .arg(&path)
        .arg("gen-data")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), echoed);
}

#[test]
fn exit_codes() {
    let ws = workspace();
    assert_eq!(ticft(&ws, &["--set", "bogus=1", "gen-data"]).status.code(), Some(2));
    assert_eq!(ticft(&ws, &["--set", "model.n_heads=3", "gen-data"]).status.code(), Some(2));
    assert_eq!(ticft(&ws, &["sample", "--variant", "sideways"]).status.code(), Some(2));
    // Nothing generated yet.
    assert_eq!(ticft(&ws, &["pretrain"]).status.code(), Some(3));
    ok(&ws, &["gen-data"]);
    assert_eq!(ticft(&ws, &["--set", "train.lr=1e300", "pretrain"]).status.code(), Some(4));
    std::fs::write(ws.root.join("junk.ckpt"), b"TICFnope").unwrap();
    let junk = ws.root.join("junk.ckpt");
    assert_eq!(ticft(&ws, &["finetune", "--checkpoint", junk.to_str().unwrap()]).status.code(), Some(3));
}

fn pgm_pixels(path: &Path) -> Vec<u8> {
    let bytes = std::fs::read(path).unwrap();
    let header = b"P5\n8 8\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    bytes[header.len()..].to_vec()
}

fn raw_frames(path: &Path) -> Vec<f64> {
    let bytes = std::fs::read(path).unwrap();
    bytes[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

fn write_raw(path: &Path, frames: &ticft::LatentSequence) {
    let mut out = Vec::new();
    out.extend((frames.len() as u32).to_le_bytes());
    out.extend((frames.dim().unwrap() as u32).to_le_bytes());
    for v in frames.flatten() {
        out.extend(v.to_le_bytes());
    }
    std::fs::write(path, out).unwrap();
}

#[test]
fn pipeline_end_to_end() {
    let ws = workspace();
    let runs = ws.root.join("runs");
    ok(&ws, &["gen-data"]);
    ok(&ws, &["pretrain"]);
    let log = std::fs::read_to_string(runs.join("pretrain_loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);
    assert_eq!(log.lines().next(), Some("step,loss,wall_time"));

    // Resuming to a longer schedule continues the step counter and appends.
    let pre = runs.join("pretrain.ckpt");
    ok(&ws, &["--set", "pretrain_steps=30", "pretrain", "--resume", pre.to_str().unwrap()]);
    let log = std::fs::read_to_string(runs.join("pretrain_loss.csv")).unwrap();
    let steps: Vec<u64> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (0..30).collect::<Vec<_>>());

    ok(&ws, &["finetune"]);
    assert_eq!(std::fs::read_to_string(runs.join("finetune_loss.csv")).unwrap().lines().count(), 11);

    // Frame dumps: K PGM files per sample within one gray level of the raw values.
    ok(&ws, &["sample"]);
    let dir = runs.join("samples/ticft-b3");
    for i in 0..3 {
        let sub = dir.join(format!("sample_{i:04}"));
        let raw = raw_frames(&sub.join("frames.bin"));
        let pgms: Vec<_> = (0..6).map(|k| sub.join(format!("frame_{k:02}.pgm"))).collect();
        assert!(pgms.iter().all(|p| p.exists()));
        assert!(!sub.join("frame_06.pgm").exists());
        let pixels: Vec<u8> = pgms.iter().flat_map(|p| pgm_pixels(p)).collect();
        assert_eq!(pixels.len(), raw.len());
        for (g, v) in pixels.iter().zip(&raw) {
            let back = *g as f64 / 255.0 * 2.0 - 1.0;
            assert!((back - v.clamp(-1.0, 1.0)).abs() <= 1.0 / 255.0 + 1e-12);
        }
        let trace = std::fs::read_to_string(sub.join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 11);
    }

    // ticft with no buffer is the no-buffer variant.
    ok(&ws, &["sample", "--buffer", "0"]);
    ok(&ws, &["sample", "--variant", "no-buffer"]);
    for i in 0..3 {
        let a = std::fs::read(runs.join(format!("samples/ticft-b0/sample_{i:04}/frames.bin"))).unwrap();
        let b = std::fs::read(runs.join(format!("samples/no-buffer-b3/sample_{i:04}/frames.bin"))).unwrap();
        assert_eq!(a, b);
    }

    ok(&ws, &["eval", "--samples", dir.to_str().unwrap()]);
    let report = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 4);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["count"], 3);

    ok(&ws, &["ablate", "--variants", "ticft,no-buffer,replace", "--buffers", "1,3"]);
    let table = std::fs::read_to_string(runs.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 6);
    assert!(table.lines().nth(1).unwrap().starts_with("ticft,1,3,"));
}

#[test]
fn ground_truth_scores_zero() {
    let ws = workspace();
    ok(&ws, &["gen-data"]);
    let eval = Dataset::load(&ws.root.join("data/style-transfer-eval.ticd")).unwrap();
    let dir = ws.root.join("truth");
    for (i, s) in eval.train_samples().unwrap().iter().enumerate() {
        let sub = dir.join(format!("sample_{i:04}"));
        std::fs::create_dir_all(&sub).unwrap();
        write_raw(&sub.join("frames.bin"), &s.target);
    }
    ok(&ws, &["eval", "--samples", dir.to_str().unwrap()]);
    let report = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let cols: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!((cols[1], cols[2]), (0.0, 0.0));
    }

    let empty = ws.root.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(ticft(&ws, &["eval", "--samples", empty.to_str().unwrap()]).status.code(), Some(3));
}
