use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use distillvol::data::{
    generate_synthetic_case, list_cases, load_scan, read_nifti, save_scan, Modality, MultiModalScan, Provenance, Volume,
};
use distillvol::gradcheck::{corrupted_probe, run_suite, MAX_REL_ERROR};
use distillvol::metrics::{summarize_metrics, write_boxplot_csv, write_case_csv, write_table_csv, MetricsSummary};
use distillvol::orchestrator::{
    self, pseudo_label, save_checkpoint, sha256_file, stratified_split, write_loss_log, write_store, MemberRecord,
    NetworkPredictor, StoreManifest, TrainCase, VolumePredictor,
};
use distillvol::regions::LabelMap;
use serde::{Deserialize, Serialize};

use crate::config::Loaded;
use crate::{CliError, Common};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("cannot create {}: {e}", dir.display())))
}

/// Timestamps live here and nowhere else, so every other output is
/// byte-identical across reruns.
struct RunLog {
    file: fs::File,
    start: Instant,
}

impl RunLog {
    fn open(out: &Path, command: &str) -> Result<Self, CliError> {
        let path = out.join("run.log");
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let _ = writeln!(file, "[unix {now}] {command} started");
        Ok(RunLog {
            file,
            start: Instant::now(),
        })
    }

    fn note(&mut self, msg: &str) {
        log::info!("{msg}");
        let _ = writeln!(self.file, "[+{:.1}s] {msg}", self.start.elapsed().as_secs_f64());
    }
}

struct Ctx {
    loaded: Loaded,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self, CliError> {
        let loaded = Loaded::read(&c.config)?;
        let seed = c.seed.unwrap_or(loaded.cfg.seed);
        let out = match c.out.clone().or_else(|| loaded.cfg.out.clone()) {
            Some(o) => o,
            None => return Err(loaded.error("", "out", "no output directory (set `out` or pass --out)")),
        };
        Ok(Ctx { loaded, seed, out })
    }
}

fn load_dir(root: &Path) -> Result<Vec<MultiModalScan>, CliError> {
    list_cases(root)?
        .iter()
        .map(|d| load_scan(d).map_err(CliError::from))
        .collect()
}

/// Labeled cases split into (training, evaluation).
fn split(l: &Loaded, root_optional: bool) -> Result<(Vec<MultiModalScan>, Vec<MultiModalScan>), CliError> {
    let labeled = match &l.cfg.dataset.root {
        Some(_) => load_dir(&l.existing("dataset", "root", l.cfg.dataset.root.as_ref())?)?,
        None if root_optional => Vec::new(),
        None => return Err(l.error("dataset", "root", "missing")),
    };
    let Some(eval) = &l.cfg.eval else {
        return Ok((labeled, Vec::new()));
    };
    if eval.root.is_some() {
        let held = load_dir(&l.existing("eval", "root", eval.root.as_ref())?)?;
        let ids: HashSet<&str> = held.iter().map(|s| s.case_id.as_str()).collect();
        if let Some(s) = labeled.iter().find(|s| ids.contains(s.case_id.as_str())) {
            return Err(distillvol::Error::SplitLeak(s.case_id.clone()).into());
        }
        return Ok((labeled, held));
    }
    let eval_ids: HashSet<String> = if let Some(cases) = &eval.cases {
        let known: HashSet<&str> = labeled.iter().map(|s| s.case_id.as_str()).collect();
        if let Some(bad) = cases.iter().find(|c| !known.contains(c.as_str())) {
            return Err(l.error("eval", "cases", format!("unknown case {bad}")));
        }
        cases.iter().cloned().collect()
    } else if let Some(f) = eval.fraction {
        let keys: Vec<_> = labeled.iter().map(|s| (s.case_id.clone(), s.grade.clone())).collect();
        stratified_split(&keys, f)
            .map_err(|e| l.error("eval", "fraction", e))?
            .eval
            .into_iter()
            .collect()
    } else {
        HashSet::new()
    };
    Ok(labeled.into_iter().partition(|s| !eval_ids.contains(&s.case_id)))
}

fn checkpoint_hook<'a>(
    out: &'a Path,
    log: &'a mut RunLog,
) -> impl FnMut(usize, &distillvol::nn::Network<f32>) -> distillvol::Result<()> + 'a {
    move |it, net| {
        let path = out.join("checkpoints").join(format!("iter_{it:08}.dvw"));
        save_checkpoint(net, &path)?;
        log.note(&format!("checkpoint {}", path.display()));
        Ok(())
    }
}

pub fn train(c: &Common) -> Result<(), CliError> {
    let ctx = Ctx::new(c)?;
    let cfg = ctx.loaded.train_config(ctx.seed)?;
    let (train_scans, _) = split(&ctx.loaded, false)?;
    if train_scans.is_empty() {
        return Err(ctx.loaded.error("dataset", "root", "no training cases found"));
    }
    create_dir(&ctx.out.join("checkpoints"))?;
    let mut log = RunLog::open(&ctx.out, "train")?;
    log.note(&format!("training {} on {} cases", cfg.model.kind(), train_scans.len()));
    let cases = train_scans
        .iter()
        .map(TrainCase::from_scan)
        .collect::<distillvol::Result<Vec<_>>>()?;
    let mut net = cfg.model.build()?;
    let result = orchestrator::train(&mut net, &cases, &cfg, &mut checkpoint_hook(&ctx.out, &mut log));
    let report = result?;
    write_loss_log(&ctx.out.join("loss.csv"), &report.history)?;
    save_checkpoint(&net, &ctx.out.join("model.dvw"))?;
    log.note(&format!("done after {} iterations", report.iterations));
    Ok(())
}

pub fn ensemble_label(c: &Common, hard_flag: bool) -> Result<(), CliError> {
    let ctx = Ctx::new(c)?;
    let l = &ctx.loaded;
    let ens = l
        .cfg
        .ensemble
        .as_ref()
        .ok_or_else(|| l.error("ensemble", "members", "the [ensemble] section is missing"))?;
    if ens.members.is_empty() {
        return Err(l.error("ensemble", "members", "at least one member is required"));
    }
    let unlabeled_root = l.existing("dataset", "unlabeled", l.cfg.dataset.unlabeled.as_ref())?;
    let mut members = Vec::new();
    let mut records = Vec::new();
    for m in &ens.members {
        let member_cfg = Loaded::read(&m.config)?.train_config(0)?;
        if !m.checkpoint.exists() {
            return Err(l.error(
                "ensemble",
                "checkpoint",
                format!("path {} does not exist", m.checkpoint.display()),
            ));
        }
        let net = member_cfg.model.load(&m.checkpoint)?;
        records.push(MemberRecord {
            checkpoint: m.checkpoint.display().to_string(),
            arch: net.kind().to_string(),
            sha256: sha256_file(&m.checkpoint)?,
        });
        members.push(NetworkPredictor::new(net, &member_cfg));
    }
    let eval_ids: HashSet<String> = if l.cfg.eval.is_some() && l.cfg.dataset.root.is_some() {
        split(l, false)?.1.into_iter().map(|s| s.case_id).collect()
    } else {
        HashSet::new()
    };
    let mut scans = load_dir(&unlabeled_root)?;
    scans.retain(|s| {
        let keep = !eval_ids.contains(&s.case_id);
        if !keep {
            log::warn!("case {} is in the evaluation split; not pseudo-labeling it", s.case_id);
        }
        keep
    });
    create_dir(&ctx.out)?;
    let mut log = RunLog::open(&ctx.out, "ensemble-label")?;
    log.note(&format!("{} members, {} candidate cases", members.len(), scans.len()));
    let refs: Vec<&dyn VolumePredictor> = members.iter().map(|m| m as &dyn VolumePredictor).collect();
    let hard = hard_flag || ens.hard_labels;
    let cases = pseudo_label(&refs, &scans, hard)?;
    let manifest = StoreManifest {
        hard_labels: hard,
        cases: cases.iter().map(|c| c.case_id.clone()).collect(),
        members: records,
    };
    write_store(&ctx.out, &cases, &manifest)?;
    log.note(&format!("wrote {} pseudo-labeled cases", cases.len()));
    Ok(())
}

pub fn distill(c: &Common) -> Result<(), CliError> {
    let ctx = Ctx::new(c)?;
    let l = &ctx.loaded;
    let cfg = l.train_config(ctx.seed)?;
    let (train_scans, eval_scans) = split(l, false)?;
    let eval_ids: Vec<String> = eval_scans.into_iter().map(|s| s.case_id).collect();
    let unlabeled = match &l.cfg.dataset.unlabeled {
        Some(_) => load_dir(&l.existing("dataset", "unlabeled", l.cfg.dataset.unlabeled.as_ref())?)?,
        None => Vec::new(),
    };
    let pseudo = match &l.cfg.dataset.pseudo_labels {
        Some(_) => {
            orchestrator::read_store(&l.existing("dataset", "pseudo_labels", l.cfg.dataset.pseudo_labels.as_ref())?)?
        }
        None => Vec::new(),
    };
    create_dir(&ctx.out.join("checkpoints"))?;
    let mut log = RunLog::open(&ctx.out, "distill")?;
    log.note(&format!(
        "student on {} manual + {} pseudo-labeled cases",
        train_scans.len(),
        pseudo.len()
    ));
    let (net, report) = orchestrator::distill(
        &train_scans,
        &unlabeled,
        &pseudo,
        &eval_ids,
        &cfg,
        &mut checkpoint_hook(&ctx.out, &mut log),
    )?;
    write_loss_log(&ctx.out.join("loss.csv"), &report.history)?;
    save_checkpoint(&net, &ctx.out.join("student.dvw"))?;
    log.note(&format!("done after {} iterations", report.iterations));
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    method: &'a str,
    arch: String,
    checkpoint: String,
    sha256: String,
    cases: usize,
    #[serde(flatten)]
    regions: &'a MetricsSummary,
}

pub fn evaluate(c: &Common) -> Result<(), CliError> {
    let ctx = Ctx::new(c)?;
    let l = &ctx.loaded;
    let cfg = l.train_config(ctx.seed)?;
    let eval = l.cfg.eval.clone().unwrap_or_default();
    let checkpoint = l.existing("eval", "checkpoint", eval.checkpoint.as_ref())?;
    let (_, cases) = split(l, true)?;
    if cases.is_empty() {
        return Err(l.error("eval", "root", "the evaluation split is empty"));
    }
    let net = cfg.model.load(&checkpoint)?;
    let arch = net.kind().to_string();
    let method = eval.method.clone().unwrap_or_else(|| arch.clone());
    let model = NetworkPredictor::new(net, &cfg);
    create_dir(&ctx.out)?;
    let mut log = RunLog::open(&ctx.out, "evaluate")?;
    let records = orchestrator::evaluate(&model, &cases)?;
    let summary = summarize_metrics(&records)?;
    write_case_csv(&ctx.out.join("per_case.csv"), &records)?;
    write_boxplot_csv(&ctx.out.join("boxplot.csv"), &summary)?;
    write_table_csv(&ctx.out.join("table.csv"), &[(method.clone(), summary)])?;
    let text = toml::to_string(&EvalSummary {
        method: &method,
        arch,
        checkpoint: checkpoint.display().to_string(),
        sha256: sha256_file(&checkpoint)?,
        cases: records.len(),
        regions: &summary,
    })
    .map_err(|e| CliError::Failed(e.to_string()))?;
    fs::write(ctx.out.join("summary.toml"), text).map_err(|e| CliError::Failed(e.to_string()))?;
    println!("Method,Dice ET,Dice WT,Dice TC");
    println!(
        "{method},{:.4},{:.4},{:.4}",
        summary.et.mean, summary.wt.mean, summary.tc.mean
    );
    log.note(&format!("evaluated {} cases", records.len()));
    Ok(())
}

pub fn gradcheck(include_corrupted: bool) -> Result<(), CliError> {
    let extra = if include_corrupted {
        vec![corrupted_probe()]
    } else {
        Vec::new()
    };
    let reports = run_suite(extra)?;
    for r in &reports {
        println!(
            "{:<28} {:>6} entries  max rel err {:.3e}  {}",
            r.name,
            r.entries,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.3e})", r.name, r.max_rel_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check above {MAX_REL_ERROR:e}: {}",
            failed.join(", ")
        )))
    }
}

#[derive(Serialize, Deserialize)]
struct SynthManifest {
    seed: u64,
    extents: [usize; 3],
    cases: Vec<SynthEntry>,
}

#[derive(Serialize, Deserialize)]
struct SynthEntry {
    case_id: String,
    grade: String,
    labeled: bool,
}

pub fn synth(seed: u64, count: usize, out: &Path, extents: [usize; 3], unlabeled: bool) -> Result<(), CliError> {
    create_dir(out)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut scan = generate_synthetic_case(seed.wrapping_add(i as u64), extents)?;
        scan.grade = Some(if i % 2 == 0 { "HGG" } else { "LGG" }.to_string());
        if unlabeled {
            scan.labels = None;
            scan.provenance = Provenance::None;
        }
        save_scan(&scan, &out.join(&scan.case_id))?;
        entries.push(SynthEntry {
            case_id: scan.case_id,
            grade: scan.grade.unwrap_or_default(),
            labeled: !unlabeled,
        });
    }
    let text = toml::to_string(&SynthManifest {
        seed,
        extents,
        cases: entries,
    })
    .map_err(|e| CliError::Failed(e.to_string()))?;
    let path = out.join("manifest.toml");
    fs::write(&path, text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

/// File names per modality with a `{case}` placeholder.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NameMap {
    t1: String,
    t1gd: String,
    t2: String,
    flair: String,
    seg: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ImportConfig {
    source: PathBuf,
    names: NameMap,
    #[serde(default)]
    grades: BTreeMap<String, String>,
}

fn fill(pattern: &str, case: &str) -> String {
    pattern.replace("{case}", case)
}

pub fn import(config: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(config).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    let mut cfg: ImportConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    if cfg.source.is_relative() {
        cfg.source = config.parent().unwrap_or(Path::new("")).join(&cfg.source);
    }
    let (prefix, suffix) = cfg
        .names
        .t1
        .split_once("{case}")
        .ok_or_else(|| CliError::Config(format!("{}: names.t1 lacks a {{case}} placeholder", config.display())))?;
    let entries = fs::read_dir(&cfg.source)
        .map_err(|e| CliError::Config(format!("{}: source: {}: {e}", config.display(), cfg.source.display())))?;
    let mut cases: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix(prefix)
                .and_then(|r| r.strip_suffix(suffix))
                .filter(|c| !c.is_empty())
                .map(str::to_string)
        })
        .collect();
    cases.sort();
    create_dir(out)?;
    for case in &cases {
        let patterns = [&cfg.names.t1, &cfg.names.t1gd, &cfg.names.t2, &cfg.names.flair];
        let mut vols = Vec::with_capacity(4);
        for (m, p) in Modality::ALL.iter().zip(patterns) {
            let path = cfg.source.join(fill(p, case));
            if !path.exists() {
                return Err(distillvol::Error::MissingModality(m.name()).into());
            }
            let (ext, data) = read_nifti(&path)?;
            vols.push(Volume::new(ext, data)?);
        }
        let labels = match &cfg.names.seg {
            Some(p) if cfg.source.join(fill(p, case)).exists() => {
                let path = cfg.source.join(fill(p, case));
                let (ext, data) = read_nifti(&path)?;
                let bytes = data
                    .iter()
                    .map(|&v| {
                        let r = v.round();
                        if (0.0..=255.0).contains(&r) && (v - r).abs() < 1e-3 {
                            Ok(r as u8)
                        } else {
                            Err(CliError::Failed(format!("{}: non-integer label {v}", path.display())))
                        }
                    })
                    .collect::<Result<Vec<u8>, _>>()?;
                Some(LabelMap::new(ext, bytes)?)
            }
            _ => None,
        };
        let provenance = if labels.is_some() {
            Provenance::Manual
        } else {
            Provenance::None
        };
        let modalities: [Volume; 4] = vols.try_into().expect("four modalities");
        let mut scan = MultiModalScan::new(case.clone(), modalities, labels, provenance)?;
        scan.grade = cfg.grades.get(case).cloned();
        save_scan(&scan, &out.join(case))?;
        log::info!("imported {case}");
    }
    Ok(())
}
