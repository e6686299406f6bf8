//! Distributional and classification metrics, entropy-binned analysis, and
//! report files.
//!
//! CSV and Markdown reports share one column schema:
//! `system, fold, seed, bin, metric, value, mean, std`. Per-run rows fill
//! `value`; aggregate rows use `fold = seed = "all"` and fill `mean`/`std`.
//! Missing values (undefined R², empty bins) are empty cells.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distlib::{argmax, bhattacharyya_slice, entropy_bits_slice, js_divergence_slice};
use crate::error::{AmberError, Result};

/// Metric names in report order.
pub const METRIC_NAMES: [&str; 7] = ["js", "bc", "r2", "r2_raw", "f1_macro", "wf1", "acc"];

/// Metrics where a smaller value is better.
pub fn lower_is_better(metric: &str) -> bool {
    metric == "js"
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistMetrics {
    pub js: f64,
    pub bc: f64,
    /// `None` when every target in the split is identical.
    pub r2_raw: Option<f64>,
    /// `r2_raw` clamped to `[0, 1]`.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClsMetrics {
    pub f1_macro: f64,
    pub wf1: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub js: f64,
    pub bc: f64,
    pub r2_raw: Option<f64>,
    pub r2: Option<f64>,
    pub f1_macro: f64,
    pub wf1: f64,
    pub acc: f64,
}

impl Metrics {
    pub fn from_parts(d: DistMetrics, c: ClsMetrics) -> Self {
        Metrics {
            js: d.js,
            bc: d.bc,
            r2_raw: d.r2_raw,
            r2: d.r2,
            f1_macro: c.f1_macro,
            wf1: c.wf1,
            acc: c.acc,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "js" => Some(self.js),
            "bc" => Some(self.bc),
            "r2" => self.r2,
            "r2_raw" => self.r2_raw,
            "f1_macro" => Some(self.f1_macro),
            "wf1" => Some(self.wf1),
            "acc" => Some(self.acc),
            _ => None,
        }
    }

    pub fn named(&self) -> [(&'static str, Option<f64>); 7] {
        METRIC_NAMES.map(|n| (n, self.get(n)))
    }
}

fn check_lengths<P: AsRef<[f64]>, T: AsRef<[f64]>>(preds: &[P], targets: &[T]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(AmberError::Shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(AmberError::Shape("no samples to evaluate".into()));
    }
    for (p, t) in preds.iter().zip(targets) {
        if p.as_ref().len() != t.as_ref().len() {
            return Err(AmberError::Shape(format!(
                "prediction over {} classes for target over {}",
                p.as_ref().len(),
                t.as_ref().len()
            )));
        }
    }
    Ok(())
}

/// Mean JS and BC, and pooled-cell R² against the per-class target mean.
pub fn dist_metrics<P: AsRef<[f64]>, T: AsRef<[f64]>>(preds: &[P], targets: &[T]) -> Result<DistMetrics> {
    check_lengths(preds, targets)?;
    let n = preds.len() as f64;
    let js = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| js_divergence_slice(p.as_ref(), t.as_ref()))
        .sum::<f64>()
        / n;
    let bc = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| bhattacharyya_slice(p.as_ref(), t.as_ref()))
        .sum::<f64>()
        / n;

    let classes = targets[0].as_ref().len();
    let mut class_mean = vec![0.0; classes];
    for t in targets {
        for (m, v) in class_mean.iter_mut().zip(t.as_ref()) {
            *m += v;
        }
    }
    class_mean.iter_mut().for_each(|m| *m /= n);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        for ((&s, &y), &m) in p.as_ref().iter().zip(t.as_ref()).zip(&class_mean) {
            ss_res += (y - s).powi(2);
            ss_tot += (y - m).powi(2);
        }
    }
    let r2_raw = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(DistMetrics {
        js,
        bc,
        r2_raw,
        r2: r2_raw.map(|r| r.clamp(0.0, 1.0)),
    })
}

/// Macro-F1, support-weighted F1 and accuracy of the argmax labels (ties to
/// the lowest class index on both sides).
pub fn cls_metrics<P: AsRef<[f64]>, T: AsRef<[f64]>>(preds: &[P], targets: &[T]) -> Result<ClsMetrics> {
    check_lengths(preds, targets)?;
    let classes = targets[0].as_ref().len();
    let pred_labels: Vec<usize> = preds.iter().map(|p| argmax(p.as_ref())).collect();
    let true_labels: Vec<usize> = targets.iter().map(|t| argmax(t.as_ref())).collect();
    Ok(cls_metrics_from_labels(&pred_labels, &true_labels, classes))
}

/// [`cls_metrics`] on hard labels.
pub fn cls_metrics_from_labels(pred: &[usize], truth: &[usize], classes: usize) -> ClsMetrics {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1: Vec<f64> = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let n = truth.len().max(1) as f64;
    ClsMetrics {
        f1_macro: f1.iter().sum::<f64>() / classes as f64,
        wf1: f1.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / n,
        acc: tp.iter().sum::<usize>() as f64 / n,
    }
}

pub fn evaluate<P: AsRef<[f64]>, T: AsRef<[f64]>>(preds: &[P], targets: &[T]) -> Result<Metrics> {
    Ok(Metrics::from_parts(
        dist_metrics(preds, targets)?,
        cls_metrics(preds, targets)?,
    ))
}

/// One equal-width entropy bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub index: usize,
    /// Lower and upper entropy edge in bits.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub metrics: Option<Metrics>,
}

impl BinRow {
    pub fn label(&self) -> String {
        format!("{}", self.index)
    }
}

/// Bin index of an entropy value among `bins` equal-width bins over
/// `[0, max_bits]`. Values on an inner edge go to the lower bin.
pub fn bin_index(entropy: f64, max_bits: f64, bins: usize) -> usize {
    (0..bins)
        .find(|&k| entropy <= max_bits * (k + 1) as f64 / bins as f64)
        .unwrap_or(bins - 1)
}

/// Metrics per equal-width bin of target entropy over `[0, log2 C]`.
pub fn ambiguity_bins<P, T>(preds: &[P], targets: &[T], bins: usize) -> Result<Vec<BinRow>>
where
    P: AsRef<[f64]>,
    T: AsRef<[f64]>,
{
    if bins < 2 {
        return Err(AmberError::Config(format!("need at least 2 bins, got {bins}")));
    }
    check_lengths(preds, targets)?;
    let max_bits = (targets[0].as_ref().len() as f64).log2();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, t) in targets.iter().enumerate() {
        members[bin_index(entropy_bits_slice(t.as_ref()), max_bits, bins)].push(i);
    }
    members
        .into_iter()
        .enumerate()
        .map(|(k, idx)| {
            let metrics = if idx.is_empty() {
                None
            } else {
                let p: Vec<&[f64]> = idx.iter().map(|&i| preds[i].as_ref()).collect();
                let t: Vec<&[f64]> = idx.iter().map(|&i| targets[i].as_ref()).collect();
                Some(evaluate(&p, &t)?)
            };
            Ok(BinRow {
                index: k,
                lo: max_bits * k as f64 / bins as f64,
                hi: max_bits * (k + 1) as f64 / bins as f64,
                count: idx.len(),
                metrics,
            })
        })
        .collect()
}

/// Metrics of one system on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub fold: Option<usize>,
    pub seed: Option<u64>,
    pub samples: usize,
    pub metrics: Metrics,
    #[serde(default)]
    pub bins: Vec<BinRow>,
    /// Hash of the run manifest that produced this report.
    #[serde(default)]
    pub config_hash: String,
}

/// Mean and population standard deviation of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub system: String,
    pub bin: String,
    pub metric: String,
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

/// Shifted by the first value, so a constant sample has exactly zero spread.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let shift = values[0];
    let mean_dev = values.iter().map(|v| v - shift).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - shift - mean_dev).powi(2)).sum::<f64>() / n;
    (shift + mean_dev, var.sqrt())
}

fn bin_values(r: &EvalReport) -> Vec<(String, Option<Metrics>, usize)> {
    let mut out = vec![("all".to_string(), Some(r.metrics), r.samples)];
    for b in &r.bins {
        out.push((b.label(), b.metrics, b.count));
    }
    out
}

/// Aggregates reports per system, bin and metric, in first-seen system
/// order.
pub fn aggregate(reports: &[EvalReport]) -> Vec<AggregateRow> {
    let mut systems: Vec<&str> = Vec::new();
    for r in reports {
        if !systems.contains(&r.system.as_str()) {
            systems.push(&r.system);
        }
    }
    let mut rows = Vec::new();
    for system in systems {
        let mine: Vec<&EvalReport> = reports.iter().filter(|r| r.system == system).collect();
        let mut cells: BTreeMap<(usize, usize), (String, String, Vec<f64>)> = BTreeMap::new();
        for r in &mine {
            for (bi, (label, metrics, count)) in bin_values(r).into_iter().enumerate() {
                let entry = cells
                    .entry((bi, 0))
                    .or_insert_with(|| (label.clone(), "count".into(), Vec::new()));
                entry.2.push(count as f64);
                for (mi, name) in METRIC_NAMES.iter().enumerate() {
                    let entry = cells
                        .entry((bi, mi + 1))
                        .or_insert_with(|| (label.clone(), name.to_string(), Vec::new()));
                    if let Some(v) = metrics.and_then(|m| m.get(name)) {
                        entry.2.push(v);
                    }
                }
            }
        }
        for (_, (bin, metric, values)) in cells {
            let (mean, std) = if values.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&values);
                (Some(m), Some(s))
            };
            rows.push(AggregateRow {
                system: system.to_string(),
                bin,
                metric,
                n: values.len(),
                mean,
                std,
            });
        }
    }
    rows
}

/// A flat report row in the shared CSV/Markdown schema.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub system: String,
    pub fold: String,
    pub seed: String,
    pub bin: String,
    pub metric: String,
    pub value: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

pub const COLUMNS: [&str; 8] = ["system", "fold", "seed", "bin", "metric", "value", "mean", "std"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| AmberError::Report(format!("bad number '{s}': {e}")))
}

impl ReportRow {
    fn cells(&self) -> [String; 8] {
        [
            self.system.clone(),
            self.fold.clone(),
            self.seed.clone(),
            self.bin.clone(),
            self.metric.clone(),
            fmt_opt(self.value),
            fmt_opt(self.mean),
            fmt_opt(self.std),
        ]
    }

    fn from_cells(cells: &[&str]) -> Result<Self> {
        if cells.len() != COLUMNS.len() {
            return Err(AmberError::Report(format!(
                "expected {} columns, got {}",
                COLUMNS.len(),
                cells.len()
            )));
        }
        Ok(ReportRow {
            system: cells[0].trim().to_string(),
            fold: cells[1].trim().to_string(),
            seed: cells[2].trim().to_string(),
            bin: cells[3].trim().to_string(),
            metric: cells[4].trim().to_string(),
            value: parse_opt(cells[5])?,
            mean: parse_opt(cells[6])?,
            std: parse_opt(cells[7])?,
        })
    }
}

/// Flattens per-run reports and their aggregates into schema rows.
pub fn report_rows(reports: &[EvalReport]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for r in reports {
        let fold = r.fold.map_or("all".to_string(), |f| f.to_string());
        let seed = r.seed.map_or("all".to_string(), |s| s.to_string());
        for (bin, metrics, count) in bin_values(r) {
            rows.push(ReportRow {
                system: r.system.clone(),
                fold: fold.clone(),
                seed: seed.clone(),
                bin: bin.clone(),
                metric: "count".into(),
                value: Some(count as f64),
                mean: None,
                std: None,
            });
            for name in METRIC_NAMES {
                rows.push(ReportRow {
                    system: r.system.clone(),
                    fold: fold.clone(),
                    seed: seed.clone(),
                    bin: bin.clone(),
                    metric: name.into(),
                    value: metrics.and_then(|m| m.get(name)),
                    mean: None,
                    std: None,
                });
            }
        }
    }
    for a in aggregate(reports) {
        rows.push(ReportRow {
            system: a.system,
            fold: "all".into(),
            seed: "all".into(),
            bin: a.bin,
            metric: a.metric,
            value: None,
            mean: a.mean,
            std: a.std,
        });
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    #[serde(alias = "md")]
    Markdown,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = AmberError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            other => Err(AmberError::Config(format!("unknown report format '{other}'"))),
        }
    }
}

/// JSON report document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub reports: Vec<EvalReport>,
    pub aggregate: Vec<AggregateRow>,
}

fn check_names(reports: &[EvalReport]) -> Result<()> {
    if reports.is_empty() {
        return Err(AmberError::Report("no reports to emit".into()));
    }
    if let Some(r) = reports.iter().find(|r| r.system.contains([',', '|', '\n', '"'])) {
        return Err(AmberError::Report(format!(
            "system name '{}' contains a reserved character",
            r.system
        )));
    }
    Ok(())
}

pub fn render_csv(reports: &[EvalReport]) -> Result<String> {
    check_names(reports)?;
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for row in report_rows(reports) {
        out.push_str(&row.cells().join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn render_markdown(reports: &[EvalReport]) -> Result<String> {
    check_names(reports)?;
    let mut out = String::new();
    writeln!(out, "| {} |", COLUMNS.join(" | ")).unwrap();
    writeln!(out, "|{}", "---|".repeat(COLUMNS.len())).unwrap();
    for row in report_rows(reports) {
        writeln!(out, "| {} |", row.cells().join(" | ")).unwrap();
    }
    Ok(out)
}

pub fn render_json(reports: &[EvalReport]) -> Result<String> {
    check_names(reports)?;
    let doc = ReportFile {
        reports: reports.to_vec(),
        aggregate: aggregate(reports),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn render(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => render_csv(reports),
        ReportFormat::Markdown => render_markdown(reports),
        ReportFormat::Json => render_json(reports),
    }
}

/// Writes `reports` to `path`; output is byte-identical for equal input.
pub fn emit_report(reports: &[EvalReport], path: &Path, format: ReportFormat) -> Result<()> {
    let text = render(reports, format)?;
    std::fs::write(path, text).map_err(|e| AmberError::Report(format!("cannot write {}: {e}", path.display())))
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| AmberError::Report("empty CSV".into()))?;
    if header.split(',').collect::<Vec<_>>() != COLUMNS {
        return Err(AmberError::Report(format!("unexpected CSV header '{header}'")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| ReportRow::from_cells(&l.split(',').collect::<Vec<_>>()))
        .collect()
}

pub fn parse_markdown(text: &str) -> Result<Vec<ReportRow>> {
    let split = |l: &str| -> Vec<String> {
        l.trim()
            .trim_start_matches('|')
            .trim_end_matches('|')
            .split('|')
            .map(|c| c.trim().to_string())
            .collect()
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| AmberError::Report("empty table".into()))?;
    if split(header) != COLUMNS {
        return Err(AmberError::Report(format!("unexpected table header '{header}'")));
    }
    lines.next();
    lines
        .map(|l| {
            let cells = split(l);
            ReportRow::from_cells(&cells.iter().map(String::as_str).collect::<Vec<_>>())
        })
        .collect()
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
            ReportFormat::Json => "json",
        }
    }

    /// Format implied by a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(ReportFormat::Csv),
            Some("md") => Ok(ReportFormat::Markdown),
            Some("json") => Ok(ReportFormat::Json),
            _ => Err(AmberError::Report(format!(
                "cannot infer report format of {}",
                path.display()
            ))),
        }
    }
}

/// Aggregate rows of a report file in any supported format. Run counts are
/// only stored in JSON reports; tabular formats yield `n = 0`.
pub fn load_aggregate(path: &Path) -> Result<Vec<AggregateRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AmberError::Report(format!("cannot read {}: {e}", path.display())))?;
    let rows = match ReportFormat::from_path(path)? {
        ReportFormat::Json => {
            let doc: ReportFile = serde_json::from_str(&text)?;
            return Ok(doc.aggregate);
        }
        ReportFormat::Csv => parse_csv(&text)?,
        ReportFormat::Markdown => parse_markdown(&text)?,
    };
    Ok(rows
        .into_iter()
        .filter(|r| r.fold == "all" && r.seed == "all" && r.value.is_none())
        .map(|r| AggregateRow {
            n: 0,
            system: r.system,
            bin: r.bin,
            metric: r.metric,
            mean: r.mean,
            std: r.std,
        })
        .collect())
}

/// One metric of a baseline/candidate comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub bin: String,
    pub metric: String,
    pub baseline: Option<f64>,
    pub candidate: Option<f64>,
    /// `candidate − baseline`.
    pub delta: Option<f64>,
    /// Improvement relative to the baseline in percent, signed so that a
    /// positive value is always better (a JS decrease counts as positive).
    pub relative_improvement_pct: Option<f64>,
}

/// Relative improvement in percent of `candidate` over `baseline`.
pub fn relative_improvement(metric: &str, baseline: f64, candidate: f64) -> Option<f64> {
    if baseline == 0.0 {
        return None;
    }
    let change = (candidate - baseline) / baseline.abs() * 100.0;
    Some(if lower_is_better(metric) { -change } else { change })
}

/// Side-by-side aggregate means of one system from each side.
pub fn compare(
    baseline: &[AggregateRow],
    base_system: &str,
    candidate: &[AggregateRow],
    cand_system: &str,
) -> Result<Vec<ComparisonRow>> {
    let pick = |rows: &[AggregateRow], system: &str| -> BTreeMap<(String, String), Option<f64>> {
        rows.iter()
            .filter(|r| r.system == system && r.metric != "count")
            .map(|r| ((r.bin.clone(), r.metric.clone()), r.mean))
            .collect()
    };
    let b = pick(baseline, base_system);
    let c = pick(candidate, cand_system);
    if b.is_empty() {
        return Err(AmberError::Report(format!(
            "no rows for system '{base_system}' in baseline"
        )));
    }
    if c.is_empty() {
        return Err(AmberError::Report(format!(
            "no rows for system '{cand_system}' in candidate"
        )));
    }
    let bk: Vec<_> = b.keys().collect();
    let ck: Vec<_> = c.keys().collect();
    if bk != ck {
        let missing: Vec<String> = b
            .keys()
            .filter(|k| !c.contains_key(*k))
            .chain(c.keys().filter(|k| !b.contains_key(*k)))
            .map(|(bin, m)| format!("{m}@{bin}"))
            .collect();
        return Err(AmberError::Report(format!(
            "metric sets differ: {}",
            missing.join(", ")
        )));
    }
    let mut rows: Vec<ComparisonRow> = b
        .iter()
        .map(|((bin, metric), &bv)| {
            let cv = c[&(bin.clone(), metric.clone())];
            let delta = bv.zip(cv).map(|(x, y)| y - x);
            let rel = bv.zip(cv).and_then(|(x, y)| relative_improvement(metric, x, y));
            ComparisonRow {
                bin: bin.clone(),
                metric: metric.clone(),
                baseline: bv,
                candidate: cv,
                delta,
                relative_improvement_pct: rel,
            }
        })
        .collect();
    // "all" first, then bins in numeric order, metrics in report order.
    let bin_key = |b: &str| {
        if b == "all" {
            -1
        } else {
            b.parse::<i64>().unwrap_or(i64::MAX)
        }
    };
    let metric_key = |m: &str| METRIC_NAMES.iter().position(|n| *n == m).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| (bin_key(&r.bin), metric_key(&r.metric)));
    Ok(rows)
}

pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "| bin | metric | baseline | candidate | delta | rel_improvement_pct |\n|---|---|---|---|---|---|\n",
    );
    for r in rows {
        writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.bin,
            r.metric,
            fmt_opt(r.baseline),
            fmt_opt(r.candidate),
            fmt_opt(r.delta),
            r.relative_improvement_pct
                .map(|x| format!("{x:.2}"))
                .unwrap_or_default()
        )
        .unwrap();
    }
    out
}
