use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use amber_core::autodiff::Tensor;
use amber_core::dataio::{generate_synthetic, Dataset};
use amber_core::evalreport::{
    aggregate, ambiguity_bins, compare, evaluate, load_aggregate, render, render_comparison, EvalReport,
};
use amber_core::losses::{KAPPA_GRID, LAMBDA_MAI_GRID};
use amber_core::model::{Checkpoint, ModalityId, ModelParams};
use amber_core::trainer::{cross_validate, grid_search, CvResult, Objective};
use amber_core::{AmberError, Result};
use serde::{Deserialize, Serialize};

use crate::settings::{BinsSettings, CompareSettings, EvalSettings, FileRef, GenSettings, Manifest, TrainSettings};

/// `<path>.manifest.json`, next to a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_out(manifest: &mut Manifest, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, bytes)?;
    manifest.record_output(name, bytes);
    Ok(())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn gen(settings: &GenSettings, out: &Path) -> Result<()> {
    let ds = generate_synthetic(&settings.synth)?;
    let mut manifest = Manifest::new("gen", settings, vec![])?;
    let text = ds.to_jsonl();
    write_out(&mut manifest, &parent_dir(out), &file_name(out), text.as_bytes())?;
    manifest.write(&sidecar(out))?;
    println!(
        "wrote {} samples (C={}, folds={}) to {}",
        ds.len(),
        ds.classes,
        ds.fold_count,
        out.display()
    );
    Ok(())
}

/// One student test prediction, as written by `train` and read by `bins`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub run_id: String,
    pub system: String,
    pub fold: usize,
    pub seed: u64,
    pub id: String,
    pub pred: Vec<f64>,
    pub target: Vec<f64>,
}

fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("| system | metric | mean | std |\n|---|---|---|---|\n");
    for row in aggregate(reports)
        .iter()
        .filter(|r| r.bin == "all" && r.metric != "count")
    {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            row.system,
            row.metric,
            f(row.mean),
            f(row.std)
        ));
    }
    out
}

pub fn train(settings: &TrainSettings, out: &Path, jobs: usize) -> Result<()> {
    let ds = Dataset::load_jsonl(&settings.data)?;
    if let Some(k) = settings.folds {
        if k != ds.fold_count {
            return Err(AmberError::Dataset(format!(
                "--folds {k} does not match the dataset's {} folds",
                ds.fold_count
            )));
        }
    }
    let mut cfg = settings.train.clone();
    cfg.validate()?;
    if settings.grid && cfg.objective != Objective::Amber {
        return Err(AmberError::Config(
            "grid search applies to the amber objective only".into(),
        ));
    }
    let mut manifest = Manifest::new("train", settings, vec![FileRef::of(&settings.data)?])?;
    std::fs::create_dir_all(out)?;

    if settings.grid {
        let points = grid_search(&ds, &cfg, &LAMBDA_MAI_GRID, &KAPPA_GRID, jobs)?;
        let best = &points[0];
        cfg.loss.lambda_mai = best.lambda_mai;
        cfg.loss.kappa = best.kappa;
        let text = serde_json::to_string_pretty(&points)? + "\n";
        write_out(&mut manifest, out, "grid.json", text.as_bytes())?;
        eprintln!("grid: selected lambda_mai={} kappa={}", best.lambda_mai, best.kappa);
    }

    let cv = cross_validate(&ds, &cfg, jobs)?;
    write_train_outputs(&cv, &mut manifest, out, settings)?;
    manifest.write(&out.join("manifest.json"))?;
    let mut reports = cv.reports();
    reports.iter_mut().for_each(|r| r.config_hash = manifest.hash.clone());
    print!("{}", summary_table(&reports));
    Ok(())
}

fn write_train_outputs(cv: &CvResult, manifest: &mut Manifest, out: &Path, settings: &TrainSettings) -> Result<()> {
    let mut log = String::new();
    let mut preds = String::new();
    for run in &cv.runs {
        for line in run.log_lines() {
            log.push_str(&line);
            log.push('\n');
        }
        let system = format!("{}/{}", run.objective, run.student);
        for ((id, p), t) in run.test_ids.iter().zip(&run.test_predictions).zip(&run.test_targets) {
            let line = PredictionLine {
                run_id: run.run_id(),
                system: system.clone(),
                fold: run.fold,
                seed: run.seed,
                id: id.clone(),
                pred: p.clone(),
                target: t.clone(),
            };
            preds.push_str(&serde_json::to_string(&line)?);
            preds.push('\n');
        }
        let ckpt = serde_json::to_string(&Checkpoint::from_params(&run.best_params))? + "\n";
        write_out(
            manifest,
            out,
            &format!("checkpoints/{}.json", run.run_id()),
            ckpt.as_bytes(),
        )?;
    }
    write_out(manifest, out, "train_log.jsonl", log.as_bytes())?;
    write_out(manifest, out, "predictions.jsonl", preds.as_bytes())?;

    let mut reports = cv.reports();
    reports.iter_mut().for_each(|r| r.config_hash = manifest.hash.clone());
    let name = format!("report.{}", settings.format.extension());
    write_out(manifest, out, &name, render(&reports, settings.format)?.as_bytes())?;
    Ok(())
}

pub fn eval(settings: &EvalSettings, out: &Path) -> Result<()> {
    let params = ModelParams::load(&settings.checkpoint)?;
    let ds = Dataset::load_jsonl(&settings.data)?;
    let c = &params.config;
    if (c.dim_a, c.dim_t, c.classes) != (ds.dim_a, ds.dim_t, ds.classes) {
        return Err(AmberError::Dataset(format!(
            "dataset has dims {}/{} and C={}, checkpoint expects {}/{} and C={}",
            ds.dim_a, ds.dim_t, ds.classes, c.dim_a, c.dim_t, c.classes
        )));
    }
    let idx: Vec<usize> = match settings.fold {
        Some(k) if k >= ds.fold_count => {
            return Err(AmberError::Config(format!(
                "fold {k} out of range for {} folds",
                ds.fold_count
            )))
        }
        Some(k) => ds.fold_indices(k),
        None => (0..ds.len()).collect(),
    };
    if idx.is_empty() {
        return Err(AmberError::Dataset("no samples to evaluate".into()));
    }
    let (ha, ht, y) = ds.batch(&idx);
    let preds = params.predict(&ha, &ht)?;
    let targets = rows(&y);
    let mut manifest = Manifest::new(
        "eval",
        settings,
        vec![FileRef::of(&settings.checkpoint)?, FileRef::of(&settings.data)?],
    )?;
    let mut reports = Vec::new();
    for m in ModalityId::ALL {
        let p = rows(preds.get(m));
        reports.push(EvalReport {
            system: format!("{}/{}", settings.system, m),
            fold: settings.fold,
            seed: None,
            samples: idx.len(),
            metrics: evaluate(&p, &targets)?,
            bins: ambiguity_bins(&p, &targets, settings.bins)?,
            config_hash: manifest.hash.clone(),
        });
    }
    let text = render(&reports, settings.format)?;
    write_out(&mut manifest, &parent_dir(out), &file_name(out), text.as_bytes())?;
    manifest.write(&sidecar(out))?;
    print!("{}", summary_table(&reports));
    Ok(())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Predictions and targets of one system.
type PredTargets = (Vec<Vec<f64>>, Vec<Vec<f64>>);

pub fn bins(settings: &BinsSettings, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(&settings.predictions)?;
    let mut by_system: BTreeMap<String, PredTargets> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(line).map_err(|e| AmberError::Data {
            line: i + 1,
            msg: format!("bad prediction record: {e}"),
        })?;
        if p.pred.len() != p.target.len() {
            return Err(AmberError::Data {
                line: i + 1,
                msg: "prediction and target lengths differ".into(),
            });
        }
        let e = by_system.entry(p.system).or_default();
        e.0.push(p.pred);
        e.1.push(p.target);
    }
    if by_system.is_empty() {
        return Err(AmberError::Dataset(format!(
            "{} has no predictions",
            settings.predictions.display()
        )));
    }
    let mut manifest = Manifest::new("bins", settings, vec![FileRef::of(&settings.predictions)?])?;
    let mut reports = Vec::new();
    for (system, (p, t)) in by_system {
        reports.push(EvalReport {
            system,
            fold: None,
            seed: None,
            samples: p.len(),
            metrics: evaluate(&p, &t)?,
            bins: ambiguity_bins(&p, &t, settings.bins)?,
            config_hash: manifest.hash.clone(),
        });
    }
    let text = render(&reports, settings.format)?;
    write_out(&mut manifest, &parent_dir(out), &file_name(out), text.as_bytes())?;
    manifest.write(&sidecar(out))?;
    for r in &reports {
        for b in &r.bins {
            let m = b.metrics;
            println!(
                "{} bin {} [{:.3}, {:.3}] n={} acc={} wf1={}",
                r.system,
                b.index,
                b.lo,
                b.hi,
                b.count,
                m.map_or("-".into(), |m| format!("{:.4}", m.acc)),
                m.map_or("-".into(), |m| format!("{:.4}", m.wf1)),
            );
        }
    }
    Ok(())
}

pub fn compare_cmd(settings: &CompareSettings, out: Option<&Path>) -> Result<()> {
    let base = load_aggregate(&settings.baseline)?;
    let cand = load_aggregate(&settings.candidate)?;
    let rows = compare(&base, &settings.baseline_system, &cand, &settings.candidate_system)?;
    let text = render_comparison(&rows);
    if let Some(path) = out {
        let mut manifest = Manifest::new(
            "compare",
            settings,
            vec![FileRef::of(&settings.baseline)?, FileRef::of(&settings.candidate)?],
        )?;
        write_out(&mut manifest, &parent_dir(path), &file_name(path), text.as_bytes())?;
        manifest.write(&sidecar(path))?;
    }
    print!("{text}");
    Ok(())
}
