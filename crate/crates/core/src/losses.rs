//! Rater-ambiguity (RAI), modality-ambiguity (MAI) and combined objectives,
//! the reliability weights of the expert heads, and the class-balanced
//! cross-entropy baseline.
//!
//! Every batch reduction is an arithmetic mean. Expert weights are computed
//! from forward values only, so no gradient flows through them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::distlib::{js_divergence_slice, SoftLabel};
use crate::error::{AmberError, Result};
use crate::model::{HeadOutputs, ModalityId};

/// Whether expert heads are also pulled toward the rater distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertSupervision {
    Rai,
    None,
}

/// Gradient policy for the expert side of the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaiExpertGrad {
    /// Experts enter `JS(s ∥ p_m)` through a stop-gradient node.
    Detached,
    /// Gradients reach both student and experts.
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_rai: f64,
    pub lambda_mai: f64,
    pub kappa: f64,
    pub expert_supervision: ExpertSupervision,
    pub mai_expert_grad: MaiExpertGrad,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_rai: 1.0,
            lambda_mai: 0.5,
            kappa: 4.0,
            expert_supervision: ExpertSupervision::Rai,
            mai_expert_grad: MaiExpertGrad::Detached,
        }
    }
}

/// Grid searched for the consistency weight.
pub const LAMBDA_MAI_GRID: [f64; 3] = [0.3, 0.5, 0.7];
/// Grid searched for the sharpness of the expert weights.
pub const KAPPA_GRID: [f64; 3] = [2.0, 4.0, 8.0];

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rai", self.lambda_rai),
            ("lambda_mai", self.lambda_mai),
            ("kappa", self.kappa),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(AmberError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss terms of one batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rai: f64,
    pub mai: f64,
    /// Expert reliability weights `u_m`.
    pub u: BTreeMap<ModalityId, f64>,
    /// Expert divergences `D_m = JS(p_m ∥ y)`.
    pub d: BTreeMap<ModalityId, f64>,
    /// Direct supervision terms of the experts, when enabled.
    pub expert_rai: BTreeMap<ModalityId, f64>,
    /// Set only for the class-balanced cross-entropy objective.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cbce: Option<f64>,
}

impl LossBreakdown {
    /// Running mean over batches, weighted by batch size.
    pub fn weighted_mean(items: &[(LossBreakdown, usize)]) -> LossBreakdown {
        let n: usize = items.iter().map(|(_, k)| k).sum();
        if n == 0 {
            return LossBreakdown::default();
        }
        let n = n as f64;
        let mut out = LossBreakdown::default();
        let mut cbce = 0.0;
        let mut has_cbce = false;
        for (b, k) in items {
            let w = *k as f64 / n;
            out.total += w * b.total;
            out.rai += w * b.rai;
            out.mai += w * b.mai;
            for (map, src) in [
                (&mut out.u, &b.u),
                (&mut out.d, &b.d),
                (&mut out.expert_rai, &b.expert_rai),
            ] {
                for (m, v) in src {
                    *map.entry(*m).or_insert(0.0) += w * v;
                }
            }
            if let Some(c) = b.cbce {
                cbce += w * c;
                has_cbce = true;
            }
        }
        out.cbce = has_cbce.then_some(cbce);
        out
    }
}

/// Mean base-2 `JS(y ∥ s)`; `y` should be a constant node.
pub fn rai_loss(g: &mut Graph, y: Var, s: Var) -> Result<Var> {
    g.js(y, s)
}

/// `u_m = exp(−κ D_m) / Σ exp(−κ D_m')`, evaluated with a max shift.
pub fn expert_weights(d: &BTreeMap<ModalityId, f64>, kappa: f64) -> Result<BTreeMap<ModalityId, f64>> {
    if d.is_empty() {
        return Err(AmberError::Config("expert set is empty".into()));
    }
    if let Some((m, v)) = d.iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
        return Err(AmberError::Numerical(format!("divergence of expert {m} is {v}")));
    }
    let logits: Vec<(ModalityId, f64)> = d.iter().map(|(m, v)| (*m, -kappa * v)).collect();
    let max = logits.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<(ModalityId, f64)> = logits.iter().map(|(m, l)| (*m, (l - max).exp())).collect();
    let z: f64 = exps.iter().map(|(_, e)| e).sum();
    Ok(exps.into_iter().map(|(m, e)| (m, e / z)).collect())
}

/// Mean row-wise base-2 JS between two forward values, without a graph node.
fn detached_js(g: &Graph, p: Var, q: Var) -> f64 {
    let (tp, tq) = (g.value(p), g.value(q));
    let b = tp.rows().max(1) as f64;
    (0..tp.rows())
        .map(|i| js_divergence_slice(tp.row(i), tq.row(i)))
        .sum::<f64>()
        / b
}

/// Output of [`mai_loss`].
#[derive(Debug, Clone)]
pub struct MaiTerm {
    pub loss: Var,
    pub u: BTreeMap<ModalityId, f64>,
    pub d: BTreeMap<ModalityId, f64>,
}

/// Values that enter the objective without gradient: the expert weights and,
/// in detached mode, the expert predictions used as teachers.
///
/// Supplying one to [`amber_loss_frozen`] turns those quantities into
/// constants, so the objective's full derivative equals what backward
/// computes. Gradient checks use this.
#[derive(Debug, Clone)]
pub struct DetachedState {
    pub u: BTreeMap<ModalityId, f64>,
    pub teachers: Option<BTreeMap<ModalityId, Tensor>>,
}

impl DetachedState {
    pub fn capture(g: &Graph, y: Var, outputs: &HeadOutputs, cfg: &LossConfig) -> Result<Self> {
        let d: BTreeMap<ModalityId, f64> = outputs
            .experts()
            .iter()
            .map(|(m, p)| (*m, detached_js(g, *p, y)))
            .collect();
        let u = expert_weights(&d, cfg.kappa)?;
        let teachers = (cfg.mai_expert_grad == MaiExpertGrad::Detached).then(|| {
            outputs
                .experts()
                .iter()
                .map(|(m, p)| (*m, g.value(*p).clone()))
                .collect()
        });
        Ok(DetachedState { u, teachers })
    }
}

/// Reliability-weighted consistency `Σ_m u_m · JS(s ∥ p_m)` over the experts.
pub fn mai_loss(
    g: &mut Graph,
    student: ModalityId,
    s: Var,
    experts: &[(ModalityId, Var)],
    y: Var,
    cfg: &LossConfig,
) -> Result<MaiTerm> {
    mai_loss_impl(g, student, s, experts, y, cfg, None)
}

fn mai_loss_impl(
    g: &mut Graph,
    student: ModalityId,
    s: Var,
    experts: &[(ModalityId, Var)],
    y: Var,
    cfg: &LossConfig,
    frozen: Option<&DetachedState>,
) -> Result<MaiTerm> {
    let mut given: Vec<ModalityId> = experts.iter().map(|e| e.0).collect();
    given.sort();
    let mut wanted = student.experts().to_vec();
    wanted.sort();
    if given != wanted {
        return Err(AmberError::Config(format!(
            "experts {given:?} do not match student {student} (expected {wanted:?})"
        )));
    }

    let d: BTreeMap<ModalityId, f64> = experts.iter().map(|(m, p)| (*m, detached_js(g, *p, y))).collect();
    let u = match frozen {
        Some(f) => f.u.clone(),
        None => expert_weights(&d, cfg.kappa)?,
    };

    let mut loss: Option<Var> = None;
    for (m, p) in experts {
        let teacher = match (cfg.mai_expert_grad, frozen.and_then(|f| f.teachers.as_ref())) {
            (MaiExpertGrad::Detached, Some(t)) => g.constant(t[m].clone()),
            (MaiExpertGrad::Detached, None) => g.stop_grad(*p),
            (MaiExpertGrad::Coupled, _) => *p,
        };
        let js = g.js(s, teacher)?;
        let term = g.scalar_mul(js, u[m]);
        loss = Some(match loss {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(MaiTerm {
        loss: loss.expect("two experts"),
        u,
        d,
    })
}

/// `λ_RAI · RAI + λ_MAI · MAI`, plus `Σ_m JS(y ∥ p_m)` over the experts when
/// expert supervision is on.
pub fn amber_loss(g: &mut Graph, y: Var, outputs: &HeadOutputs, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    amber_loss_impl(g, y, outputs, cfg, None)
}

/// [`amber_loss`] with the no-gradient quantities pinned to `frozen`.
pub fn amber_loss_frozen(
    g: &mut Graph,
    y: Var,
    outputs: &HeadOutputs,
    cfg: &LossConfig,
    frozen: &DetachedState,
) -> Result<(Var, LossBreakdown)> {
    amber_loss_impl(g, y, outputs, cfg, Some(frozen))
}

fn amber_loss_impl(
    g: &mut Graph,
    y: Var,
    outputs: &HeadOutputs,
    cfg: &LossConfig,
    frozen: Option<&DetachedState>,
) -> Result<(Var, LossBreakdown)> {
    let s = outputs.student_output();
    let experts = outputs.experts();

    let rai = rai_loss(g, y, s)?;
    let mai = mai_loss_impl(g, outputs.student, s, &experts, y, cfg, frozen)?;

    let weighted_rai = g.scalar_mul(rai, cfg.lambda_rai);
    let weighted_mai = g.scalar_mul(mai.loss, cfg.lambda_mai);
    let mut total = g.add(weighted_rai, weighted_mai)?;

    let mut expert_rai = BTreeMap::new();
    if cfg.expert_supervision == ExpertSupervision::Rai {
        for (m, p) in experts {
            let term = rai_loss(g, y, p)?;
            expert_rai.insert(m, g.value(term).item());
            total = g.add(total, term)?;
        }
    }

    let breakdown = LossBreakdown {
        total: g.value(total).item(),
        rai: g.value(rai).item(),
        mai: g.value(mai.loss).item(),
        u: mai.u,
        d: mai.d,
        expert_rai,
        cbce: None,
    };
    Ok((total, breakdown))
}

/// Mean of `−Σ_c w_c · y_c · ln s_c`, log clamped at 1e-12.
pub fn cbce_loss(g: &mut Graph, y: Var, s: Var, class_weights: &[f64]) -> Result<Var> {
    if let Some(w) = class_weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(AmberError::Config(format!(
            "class weight {w} is not a finite non-negative value"
        )));
    }
    g.soft_cross_entropy(y, s, class_weights)
}

/// Floor on class frequency in [`class_weights_from`].
pub const CLASS_FREQ_FLOOR: f64 = 1e-6;

/// Inverse-frequency class weights from soft labels, scaled to mean 1.
pub fn class_weights_from<'a, I>(labels: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a SoftLabel>,
{
    let mut mass: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for y in labels {
        if mass.is_empty() {
            mass = vec![0.0; y.classes()];
        } else if mass.len() != y.classes() {
            return Err(AmberError::Shape(format!(
                "labels over {} and {} classes",
                mass.len(),
                y.classes()
            )));
        }
        for (m, p) in mass.iter_mut().zip(y.probs()) {
            *m += p;
        }
        n += 1;
    }
    if n == 0 {
        return Err(AmberError::Dataset(
            "cannot derive class weights from an empty split".into(),
        ));
    }
    let total: f64 = mass.iter().sum();
    let raw: Vec<f64> = mass.iter().map(|m| 1.0 / (m / total).max(CLASS_FREQ_FLOOR)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}
