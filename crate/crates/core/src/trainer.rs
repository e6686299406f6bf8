//! AdamW, the mini-batch loop with best-validation selection, and the
//! cross-validation / multi-seed harness.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::dataio::{fold_split, Dataset};
use crate::error::{AmberError, Result};
use crate::evalreport::{ambiguity_bins, evaluate, BinRow, EvalReport, Metrics};
use crate::losses::{amber_loss, cbce_loss, class_weights_from, rai_loss, LossBreakdown, LossConfig};
use crate::model::{forward_all, HeadOutputs, ModalityId, ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Rater + modality ambiguity objective.
    Amber,
    /// Class-balanced soft cross-entropy on every head.
    Cbce,
    /// Student fit to the rater distribution only.
    Rai,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Amber => "amber",
            Objective::Cbce => "cbce",
            Objective::Rai => "rai",
        })
    }
}

impl std::str::FromStr for Objective {
    type Err = AmberError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amber" => Ok(Objective::Amber),
            "cbce" => Ok(Objective::Cbce),
            "rai" => Ok(Objective::Rai),
            other => Err(AmberError::Config(format!("unknown objective '{other}'"))),
        }
    }
}

/// Head widths and student choice; embedding dims come from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden: usize,
    pub fusion_dim: usize,
    pub student: ModalityId,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: 256,
            fusion_dim: 256,
            student: ModalityId::AT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub objective: Objective,
    pub loss: LossConfig,
    pub arch: ArchConfig,
    /// Entropy bins in per-run reports.
    pub bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 128,
            epochs: 30,
            seeds: vec![0, 1, 2, 3, 4],
            objective: Objective::Amber,
            loss: LossConfig::default(),
            arch: ArchConfig::default(),
            bins: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AmberError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(AmberError::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(AmberError::Config("weight decay must be >= 0 and eps > 0".into()));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(AmberError::Config("batch and epochs must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(AmberError::Config("need at least one seed".into()));
        }
        if self.bins < 2 {
            return Err(AmberError::Config("need at least 2 entropy bins".into()));
        }
        self.loss.validate()
    }

    pub fn model_config(&self, ds: &Dataset) -> ModelConfig {
        ModelConfig {
            dim_a: ds.dim_a,
            dim_t: ds.dim_t,
            fusion_dim: self.arch.fusion_dim,
            hidden: self.arch.hidden,
            classes: ds.classes,
            student: self.arch.student,
        }
    }

    fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(|t| t.data().len()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr · (m̂ / (√v̂ + ε) + wd · θ)`.
///
/// Nothing is modified when any gradient is non-finite.
pub fn opt_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &OptimConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AmberError::Shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.data().len() {
            return Err(AmberError::Shape(format!(
                "parameter {i} is {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(AmberError::Numerical(format!("non-finite gradient for parameter {i}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((theta, &grad), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * grad;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * grad * grad;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *theta);
        }
    }
    Ok(())
}

/// Builds the configured objective on `g`.
fn objective_loss(
    g: &mut Graph,
    y_var: crate::autodiff::Var,
    outputs: &HeadOutputs,
    cfg: &TrainConfig,
    class_weights: &[f64],
) -> Result<(crate::autodiff::Var, LossBreakdown)> {
    match cfg.objective {
        Objective::Amber => amber_loss(g, y_var, outputs, &cfg.loss),
        Objective::Rai => {
            let rai = rai_loss(g, y_var, outputs.student_output())?;
            let v = g.value(rai).item();
            Ok((
                rai,
                LossBreakdown {
                    total: v,
                    rai: v,
                    ..LossBreakdown::default()
                },
            ))
        }
        Objective::Cbce => {
            let mut total = None;
            for m in ModalityId::ALL {
                let term = cbce_loss(g, y_var, outputs.get(m), class_weights)?;
                total = Some(match total {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
            let total = total.expect("three heads");
            let rai = crate::losses::rai_loss(g, y_var, outputs.student_output())?;
            let v = g.value(total).item();
            Ok((
                total,
                LossBreakdown {
                    total: v,
                    rai: g.value(rai).item(),
                    cbce: Some(v),
                    ..LossBreakdown::default()
                },
            ))
        }
    }
}

/// One epoch's logged values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    /// Student-head validation metrics.
    pub val_metrics: Metrics,
}

/// Outcome of one (fold, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub fold: usize,
    pub seed: u64,
    pub objective: Objective,
    pub student: ModalityId,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch with the lowest validation JS (earliest on ties).
    pub selected_epoch: usize,
    /// Test metrics of every head under the selected parameters.
    pub test: BTreeMap<ModalityId, Metrics>,
    pub test_bins: BTreeMap<ModalityId, Vec<BinRow>>,
    pub test_ids: Vec<String>,
    /// Student-head test predictions, aligned with `test_ids`.
    pub test_predictions: Vec<Vec<f64>>,
    pub test_targets: Vec<Vec<f64>>,
    pub best_params: ModelParams,
}

impl RunRecord {
    pub fn run_id(&self) -> String {
        format!("{}-f{}-s{}", self.objective, self.fold, self.seed)
    }

    /// Per-epoch training log, one JSON object per line.
    pub fn log_lines(&self) -> Vec<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            run_id: &'a str,
            epoch: usize,
            split: &'a str,
            loss: &'a LossBreakdown,
            #[serde(skip_serializing_if = "Option::is_none")]
            metrics: Option<&'a Metrics>,
        }
        let id = self.run_id();
        let mut out = Vec::with_capacity(self.epochs.len() * 2);
        for e in &self.epochs {
            for (split, loss, metrics) in [("train", &e.train, None), ("val", &e.val, Some(&e.val_metrics))] {
                let line = Line {
                    run_id: &id,
                    epoch: e.epoch,
                    split,
                    loss,
                    metrics,
                };
                out.push(serde_json::to_string(&line).expect("log line serializes"));
            }
        }
        out
    }

    /// One report per head on the test fold.
    pub fn reports(&self) -> Vec<EvalReport> {
        ModalityId::ALL
            .iter()
            .map(|m| EvalReport {
                system: format!("{}/{}", self.objective, m),
                fold: Some(self.fold),
                seed: Some(self.seed),
                samples: self.test_ids.len(),
                metrics: self.test[m],
                bins: self.test_bins[m].clone(),
                config_hash: String::new(),
            })
            .collect()
    }
}

/// SplitMix64 finalizer; decorrelates (seed, fold) pairs for the shuffle RNG.
fn mix(seed: u64, fold: usize) -> u64 {
    let mut z = seed ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Forward-only loss and predictions on a whole split.
fn evaluate_split(
    params: &ModelParams,
    ds: &Dataset,
    idx: &[usize],
    cfg: &TrainConfig,
    class_weights: &[f64],
) -> Result<(LossBreakdown, crate::model::Predictions)> {
    let (ha, ht, y) = ds.batch(idx);
    let mut g = Graph::new();
    let vars = params.register_frozen(&mut g);
    let ha = g.constant(ha);
    let ht = g.constant(ht);
    let y = g.constant(y);
    let out = forward_all(&mut g, &params.config, &vars, ha, ht)?;
    let (_, breakdown) = objective_loss(&mut g, y, &out, cfg, class_weights)?;
    let preds = crate::model::Predictions {
        a: g.value(out.a).clone(),
        t: g.value(out.t).clone(),
        at: g.value(out.at).clone(),
    };
    Ok((breakdown, preds))
}

/// Forward, backward and one optimizer step on a mini-batch.
fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    ds: &Dataset,
    chunk: &[usize],
    cfg: &TrainConfig,
    class_weights: &[f64],
) -> Result<LossBreakdown> {
    let (ha, ht, y) = ds.batch(chunk);
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let ha = g.constant(ha);
    let ht = g.constant(ht);
    let y = g.constant(y);
    let out = forward_all(&mut g, &params.config, &vars, ha, ht)?;
    let (loss, breakdown) = objective_loss(&mut g, y, &out, cfg, class_weights)?;
    if !breakdown.total.is_finite() {
        return Err(AmberError::Numerical(format!("non-finite loss {}", breakdown.total)));
    }
    let grads = g.backward(loss)?;
    let grads: Vec<Tensor> = vars
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| grads.get_or_zeros(*v, t.rows(), t.cols()))
        .collect();
    opt_step(&mut params.tensors_mut(), &grads, state, &cfg.optim())?;
    Ok(breakdown)
}

/// Trains one fold with one seed for the full epoch budget and evaluates the
/// best-validation parameters on the test fold.
pub fn train_one(ds: &Dataset, fold: usize, seed: u64, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let split = fold_split(ds, fold)?;
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(AmberError::Dataset(format!("fold {fold} leaves an empty split")));
    }
    let model_cfg = cfg.model_config(ds);
    let mut params = ModelParams::init(&model_cfg, seed)?;
    let mut state = AdamState::new(params.tensors());
    let class_weights = class_weights_from(ds.labels(&split.train))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, fold));
    let val_targets: Vec<&[f64]> = split.val.iter().map(|&i| ds.samples[i].y.probs()).collect();

    let mut order = split.train.clone();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut parts = Vec::with_capacity(order.len().div_ceil(cfg.batch));
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let locate = |e: AmberError| match e {
                AmberError::Numerical(msg) => {
                    AmberError::Numerical(format!("{msg} (fold {fold}, seed {seed}, epoch {epoch}, batch {b})"))
                }
                other => other,
            };
            let breakdown = train_step(&mut params, &mut state, ds, chunk, cfg, &class_weights).map_err(locate)?;
            parts.push((breakdown, chunk.len()));
        }
        let train = LossBreakdown::weighted_mean(&parts);

        let (val, preds) = evaluate_split(&params, ds, &split.val, cfg, &class_weights)?;
        let student_rows = rows(preds.get(model_cfg.student));
        let val_metrics = evaluate(&student_rows, &val_targets)?;
        if best.as_ref().is_none_or(|(js, _, _)| val_metrics.js < *js) {
            best = Some((val_metrics.js, epoch, params.clone()));
        }
        epochs.push(EpochLog {
            epoch,
            train,
            val,
            val_metrics,
        });
    }

    let (_, selected_epoch, best_params) = best.expect("at least one epoch");
    let (_, preds) = evaluate_split(&best_params, ds, &split.test, cfg, &class_weights)?;
    let test_targets: Vec<Vec<f64>> = split.test.iter().map(|&i| ds.samples[i].y.probs().to_vec()).collect();
    let mut test = BTreeMap::new();
    let mut test_bins = BTreeMap::new();
    for m in ModalityId::ALL {
        let p = rows(preds.get(m));
        test.insert(m, evaluate(&p, &test_targets)?);
        test_bins.insert(m, ambiguity_bins(&p, &test_targets, cfg.bins)?);
    }
    Ok(RunRecord {
        fold,
        seed,
        objective: cfg.objective,
        student: model_cfg.student,
        epochs,
        selected_epoch,
        test,
        test_bins,
        test_ids: split.test.iter().map(|&i| ds.samples[i].id.clone()).collect(),
        test_predictions: rows(preds.get(model_cfg.student)),
        test_targets,
        best_params,
    })
}

/// All runs of a cross-validation in (fold, seed) order, with reports.
#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub runs: Vec<RunRecord>,
}

impl CvResult {
    /// Per-run, per-head reports in run order.
    pub fn reports(&self) -> Vec<EvalReport> {
        self.runs.iter().flat_map(RunRecord::reports).collect()
    }

    /// Student-head reports only.
    pub fn student_reports(&self) -> Vec<EvalReport> {
        self.runs
            .iter()
            .flat_map(|r| {
                r.reports()
                    .into_iter()
                    .filter(|x| x.system.ends_with(&format!("/{}", r.student)))
            })
            .collect()
    }

    /// Mean student metric per seed, averaged over folds.
    pub fn per_seed_mean(&self, metric: &str) -> BTreeMap<u64, f64> {
        let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for r in &self.runs {
            if let Some(v) = r.test[&r.student].get(metric) {
                let e = acc.entry(r.seed).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
    }

    /// Entropy-binned student metrics over the test predictions of every run.
    pub fn pooled_bins(&self, bins: usize) -> Result<Vec<BinRow>> {
        let preds: Vec<&[f64]> = self
            .runs
            .iter()
            .flat_map(|r| r.test_predictions.iter().map(Vec::as_slice))
            .collect();
        let targets: Vec<&[f64]> = self
            .runs
            .iter()
            .flat_map(|r| r.test_targets.iter().map(Vec::as_slice))
            .collect();
        ambiguity_bins(&preds, &targets, bins)
    }
}

/// Runs every (fold, seed) pair on up to `jobs` threads. Results do not
/// depend on `jobs`.
pub fn cross_validate(ds: &Dataset, cfg: &TrainConfig, jobs: usize) -> Result<CvResult> {
    cfg.validate()?;
    if ds.fold_count < 3 {
        return Err(AmberError::Config(format!(
            "need at least 3 folds, dataset has {}",
            ds.fold_count
        )));
    }
    let tasks: Vec<(usize, u64)> = (0..ds.fold_count)
        .flat_map(|f| cfg.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let runs: Result<Vec<RunRecord>> = if jobs <= 1 {
        tasks.iter().map(|&(f, s)| train_one(ds, f, s, cfg)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| AmberError::Config(format!("thread pool: {e}")))?;
        pool.install(|| tasks.par_iter().map(|&(f, s)| train_one(ds, f, s, cfg)).collect())
    };
    Ok(CvResult { runs: runs? })
}

/// One grid point and its mean best validation JS over all runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda_mai: f64,
    pub kappa: f64,
    pub mean_val_js: f64,
}

/// Cross-validates every (λ_MAI, κ) pair and returns the points sorted by
/// mean validation JS (best first, grid order on ties).
pub fn grid_search(
    ds: &Dataset,
    cfg: &TrainConfig,
    lambdas: &[f64],
    kappas: &[f64],
    jobs: usize,
) -> Result<Vec<GridPoint>> {
    let mut points = Vec::new();
    for &lambda_mai in lambdas {
        for &kappa in kappas {
            let mut c = cfg.clone();
            c.loss.lambda_mai = lambda_mai;
            c.loss.kappa = kappa;
            let cv = cross_validate(ds, &c, jobs)?;
            let vals: Vec<f64> = cv
                .runs
                .iter()
                .map(|r| r.epochs[r.selected_epoch - 1].val_metrics.js)
                .collect();
            points.push(GridPoint {
                lambda_mai,
                kappa,
                mean_val_js: vals.iter().sum::<f64>() / vals.len() as f64,
            });
        }
    }
    points.sort_by(|a, b| a.mean_val_js.total_cmp(&b.mean_val_js));
    Ok(points)
}
