use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use distillvol::data::{list_cases, load_scan};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_distillvol"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(out: &Path, seed: u64, count: usize, extra: &[&str]) {
    let (seed, count) = (seed.to_string(), count.to_string());
    let mut args = vec![
        "synth",
        "--seed",
        &seed,
        "--count",
        &count,
        "--out",
        p(out),
        "--extents",
        "16,16,16",
    ];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

const TINY_UNET: &str = r#"
[model]
arch = "unet"
base_channels = 2
levels = 2

[train]
patch = [8, 8, 8]
batch_size = 2
iterations = 4
checkpoint_every = 2
optimizer = { kind = "adam" }
schedule = { kind = "step_drop", initial = 1e-3, drop_at = 3, factor = 0.1 }
"#;

const TINY_RES: &str = r#"
[model]
arch = "res_unet"
base_channels = 2
groups = 2

[train]
patch = [16, 16, 16]
batch_size = 1
iterations = 2
optimizer = { kind = "adam" }
schedule = { kind = "step_drop", initial = 1e-3, drop_at = 3, factor = 0.1 }
"#;

/// Labeled training data, an unlabeled pool and an evaluation set under `dir`.
fn dataset(dir: &Path) {
    synth(&dir.join("train"), 0, 3, &[]);
    synth(&dir.join("pool"), 10, 2, &["--unlabeled"]);
    synth(&dir.join("eval"), 20, 2, &[]);
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "run.log" {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_seeded_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, 5, 3, &[]);
    synth(&b, 5, 3, &[]);
    assert_eq!(files_under(&a), files_under(&b));
    let cases = list_cases(&a).unwrap();
    assert_eq!(cases.len(), 3);
    let scan = load_scan(&cases[0]).unwrap();
    assert_eq!(scan.case_id, "synth-5");
    assert_eq!(scan.extents(), [16, 16, 16]);
    assert_eq!(scan.grade.as_deref(), Some("HGG"));
    assert!(scan.labels.is_some());

    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("case_id = \"synth-7\""), "{manifest}");

    let empty = dir.path().join("empty");
    synth(&empty, 0, 0, &[]);
    let m: toml::Table = toml::from_str(&fs::read_to_string(empty.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(m["cases"].as_array().map(Vec::len).unwrap_or(0), 0);

    let unl = dir.path().join("unl");
    synth(&unl, 0, 1, &["--unlabeled"]);
    assert!(load_scan(&unl.join("synth-0")).unwrap().labels.is_none());
}

#[test]
fn missing_dataset_path_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "exp.toml",
        &format!("out = \"runs\"\n\n[dataset]\nroot = \"does/not/exist\"\n{TINY_UNET}"),
    );
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("dataset.root") && err.contains("exp.toml:4"), "{err}");
}

#[test]
fn malformed_config_and_thread_count_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "out = \"x\"\n[dataset]\nrooot = \"y\"\n");
    assert_eq!(run(&["train", "--config", p(&cfg)]).status.code(), Some(2));
    let o = bin()
        .env("DISTILLVOL_THREADS", "many")
        .args(["gradcheck"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let cfg = write_config(
        dir.path(),
        "unet.toml",
        &format!("seed = 4\n[dataset]\nroot = \"train\"\n{TINY_UNET}"),
    );
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("run{i}"))).collect();
    for out in &outs {
        let o = run(&["train", "--config", p(&cfg), "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (files_under(&outs[0]), files_under(&outs[1]));
    let names: Vec<_> = a.iter().map(|(n, _)| n.to_str().unwrap().to_string()).collect();
    for expected in [
        "loss.csv",
        "model.dvw",
        "checkpoints/iter_00000002.dvw",
        "checkpoints/iter_00000004.dvw",
    ] {
        assert!(names.iter().any(|n| n == expected), "{names:?}");
    }
    assert_eq!(a, b);
    let log = fs::read_to_string(outs[0].join("loss.csv")).unwrap();
    assert!(log.starts_with("iteration,lr,dice_part,bce_part,total\n"));
    assert_eq!(log.lines().count(), 5);

    let other = dir.path().join("run_seed5");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&other), "--seed", "5"]);
    assert!(o.status.success());
    assert_ne!(
        fs::read(other.join("model.dvw")).unwrap(),
        fs::read(outs[0].join("model.dvw")).unwrap()
    );
}

#[test]
fn diverging_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("train"), 0, 2, &[]);
    let body = TINY_UNET
        .replace("iterations = 4", "iterations = 20")
        .replace(
            "optimizer = { kind = \"adam\" }",
            "optimizer = { kind = \"sgd\", momentum = 0.9 }",
        )
        .replace("initial = 1e-3", "initial = 1e30");
    let cfg = write_config(
        dir.path(),
        "exp.toml",
        &format!("out = \"runs\"\n[dataset]\nroot = \"train\"\n{body}"),
    );
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn gradcheck_reports_corrupted_ops() {
    let ok = run(&["gradcheck"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("res_unet"));
    let bad = run(&["gradcheck", "--include-corrupted"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("corrupted_double"));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn teachers_ensemble_student_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let eval =
        |model: &str, ckpt: &str| format!("\n[eval]\nroot = \"eval\"\ncheckpoint = \"{ckpt}\"\nmethod = \"{model}\"\n");
    let unet = write_config(
        d,
        "unet.toml",
        &format!(
            "out = \"runs/unet\"\n[dataset]\nroot = \"train\"\n{TINY_UNET}{}",
            eval("UNet", "runs/unet/model.dvw")
        ),
    );
    let res = write_config(
        d,
        "res.toml",
        &format!("out = \"runs/res\"\n[dataset]\nroot = \"train\"\n{TINY_RES}"),
    );
    for cfg in [&unet, &res] {
        let o = run(&["train", "--config", p(cfg)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }

    // evaluation artifacts
    let o = run(&["evaluate", "--config", p(&unet)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("Method,Dice ET,Dice WT,Dice TC\nUNet,"), "{stdout}");
    let out = d.join("runs/unet");
    let per_case = csv_rows(&out.join("per_case.csv"));
    assert_eq!(per_case[0], ["case_id", "dice_wt", "dice_tc", "dice_et"]);
    assert_eq!(per_case.len(), 3);
    let boxplot = csv_rows(&out.join("boxplot.csv"));
    assert_eq!(boxplot[0], ["region", "min", "q1", "median", "q3", "max"]);
    assert_eq!(
        boxplot.iter().skip(1).map(|r| r[0].as_str()).collect::<Vec<_>>(),
        ["WT", "TC", "ET"]
    );
    let table = csv_rows(&out.join("table.csv"));
    assert_eq!(table[0], ["Method", "Dice ET", "Dice WT", "Dice TC"]);
    let mean = |col: usize| {
        per_case[1..]
            .iter()
            .map(|r| r[col].parse::<f64>().unwrap())
            .sum::<f64>()
            / 2.0
    };
    for (col, table_col) in [(3, 1), (1, 2), (2, 3)] {
        let reported: f64 = table[1][table_col].parse().unwrap();
        assert!((reported - mean(col)).abs() < 1e-4, "{reported} vs {}", mean(col));
    }
    let summary: toml::Table = toml::from_str(&fs::read_to_string(out.join("summary.toml")).unwrap()).unwrap();
    assert_eq!(summary["cases"].as_integer(), Some(2));
    assert_eq!(summary["arch"].as_str(), Some("unet"));

    // ensemble labels for the pool
    let ens = write_config(
        d,
        "ensemble.toml",
        "out = \"runs/pseudo\"\n[dataset]\nunlabeled = \"pool\"\n[ensemble]\nmembers = [\n  { config = \"unet.toml\", checkpoint = \"runs/unet/model.dvw\" },\n  { config = \"res.toml\", checkpoint = \"runs/res/model.dvw\" },\n]\n",
    );
    let o = run(&["ensemble-label", "--config", p(&ens)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: toml::Table =
        toml::from_str(&fs::read_to_string(d.join("runs/pseudo/manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest["hard_labels"].as_bool(), Some(false));
    assert_eq!(manifest["cases"].as_array().unwrap().len(), 2);
    let members = manifest["members"].as_array().unwrap();
    assert_eq!(members.len(), 2);
    assert_eq!(members[0]["sha256"].as_str().unwrap().len(), 64);

    // the student
    let student = write_config(
        d,
        "student.toml",
        &format!("out = \"runs/student\"\n[dataset]\nroot = \"train\"\nunlabeled = \"pool\"\npseudo_labels = \"runs/pseudo\"\n{TINY_RES}\n[eval]\nroot = \"eval\"\n"),
    );
    let o = run(&["distill", "--config", p(&student)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("runs/student/student.dvw").exists());
    assert_eq!(
        fs::read_to_string(d.join("runs/student/loss.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    // a checkpoint that does not fit the member's architecture
    let wrong = write_config(
        d,
        "wrong.toml",
        "out = \"runs/wrong\"\n[dataset]\nunlabeled = \"pool\"\n[ensemble]\nmembers = [{ config = \"res.toml\", checkpoint = \"runs/unet/model.dvw\" }]\n",
    );
    let o = run(&["ensemble-label", "--config", p(&wrong)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("does not match architecture res_unet"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn evaluation_overlap_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("train"), 0, 2, &[]);
    synth(&dir.path().join("eval"), 1, 1, &[]);
    let cfg = write_config(
        dir.path(),
        "exp.toml",
        &format!("out = \"runs\"\n[dataset]\nroot = \"train\"\n{TINY_UNET}\n[eval]\nroot = \"eval\"\n"),
    );
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("synth-1"), "{}", stderr(&o));
}

/// Minimal single-file NIfTI-1, little endian, float32 or uint8 voxels.
fn write_nifti(path: &Path, dims: [i16; 3], values: &[f32], as_u8: bool) {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim = [3i16, dims[0], dims[1], dims[2], 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    let (code, bits) = if as_u8 { (2i16, 8i16) } else { (16, 32) };
    h[70..72].copy_from_slice(&code.to_le_bytes());
    h[72..74].copy_from_slice(&bits.to_le_bytes());
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    for v in values {
        if as_u8 {
            h.push(*v as u8);
        } else {
            h.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, h).unwrap();
}

#[test]
fn import_converts_nifti_cases() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("nifti");
    fs::create_dir_all(&src).unwrap();
    let dims = [3i16, 2, 2]; // x, y, z
    let n = 12;
    for (m, name) in ["t1", "t1ce", "t2", "flair"].iter().enumerate() {
        let values: Vec<f32> = (0..n).map(|i| (i + 100 * m) as f32).collect();
        write_nifti(&src.join(format!("scan_{name}_A.nii")), dims, &values, false);
    }
    let seg: Vec<f32> = (0..n).map(|i| [0.0, 1.0, 2.0, 4.0][i % 4]).collect();
    write_nifti(&src.join("scan_seg_A.nii"), dims, &seg, true);

    let cfg = write_config(
        dir.path(),
        "names.toml",
        "source = \"nifti\"\n[names]\nt1 = \"scan_t1_{case}.nii\"\nt1gd = \"scan_t1ce_{case}.nii\"\nt2 = \"scan_t2_{case}.nii\"\nflair = \"scan_flair_{case}.nii\"\nseg = \"scan_seg_{case}.nii\"\n[grades]\nA = \"LGG\"\n",
    );
    let out = dir.path().join("cases");
    let o = run(&["import", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scan = load_scan(&out.join("A")).unwrap();
    assert_eq!(scan.extents(), [2, 2, 3]);
    assert_eq!(scan.modalities[3].data()[5], 305.0);
    assert_eq!(scan.labels.as_ref().unwrap().data()[..4], [0, 1, 2, 4]);
    assert_eq!(scan.grade.as_deref(), Some("LGG"));

    fs::remove_file(src.join("scan_t2_A.nii")).unwrap();
    let o = run(&["import", "--config", p(&cfg), "--out", p(&dir.path().join("again"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("t2"), "{}", stderr(&o));
}
