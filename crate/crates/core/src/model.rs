//! Modality heads, gated fusion and student/expert roles.
//!
//! Each head is `softmax(W₂·relu(W₁·h + b₁) + b₂)`. The fusion head runs on
//! `h_AT = g ⊙ (h_A·W_A) + (1 − g) ⊙ (h_T·W_T)` with the gate
//! `g = sigmoid([h_A | h_T]·W_g + b_g)`. Batches are rows.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{AmberError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    A,
    T,
    AT,
}

impl ModalityId {
    pub const ALL: [ModalityId; 3] = [ModalityId::A, ModalityId::T, ModalityId::AT];

    /// The heads that act as experts when `self` is the student.
    pub fn experts(self) -> [ModalityId; 2] {
        match self {
            ModalityId::A => [ModalityId::T, ModalityId::AT],
            ModalityId::T => [ModalityId::A, ModalityId::AT],
            ModalityId::AT => [ModalityId::A, ModalityId::T],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityId::A => "a",
            ModalityId::T => "t",
            ModalityId::AT => "at",
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModalityId {
    type Err = AmberError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(ModalityId::A),
            "t" => Ok(ModalityId::T),
            "at" => Ok(ModalityId::AT),
            other => Err(AmberError::Config(format!("unknown modality '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim_a: usize,
    pub dim_t: usize,
    pub fusion_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub student: ModalityId,
}

impl ModelConfig {
    /// Default widths (hidden 256, fusion 256) with the fusion head as student.
    pub fn new(dim_a: usize, dim_t: usize, classes: usize) -> Self {
        ModelConfig {
            dim_a,
            dim_t,
            fusion_dim: 256,
            hidden: 256,
            classes,
            student: ModalityId::AT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("dim_a", self.dim_a),
            ("dim_t", self.dim_t),
            ("fusion_dim", self.fusion_dim),
            ("hidden", self.hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(AmberError::Config(format!("{name} must be at least 1")));
        }
        if self.classes < 2 {
            return Err(AmberError::Config("need at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn head_input_dim(&self, m: ModalityId) -> usize {
        match m {
            ModalityId::A => self.dim_a,
            ModalityId::T => self.dim_t,
            ModalityId::AT => self.fusion_dim,
        }
    }
}

/// Two linear layers around a ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w_gate: Tensor,
    pub b_gate: Tensor,
    pub proj_a: Tensor,
    pub proj_t: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub audio: HeadParams,
    pub text: HeadParams,
    pub fusion_head: HeadParams,
    pub fusion: FusionParams,
}

/// Uniform in `[−1/√fan_in, 1/√fan_in]`.
fn init_uniform(rng: &mut ChaCha8Rng, fan_in: usize, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

impl HeadParams {
    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize, classes: usize) -> Self {
        HeadParams {
            w1: init_uniform(rng, input, input, hidden),
            b1: init_uniform(rng, input, 1, hidden),
            w2: init_uniform(rng, hidden, hidden, classes),
            b2: init_uniform(rng, hidden, 1, classes),
        }
    }

    fn zeros(input: usize, hidden: usize, classes: usize) -> Self {
        HeadParams {
            w1: Tensor::zeros(input, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, classes),
            b2: Tensor::zeros(1, classes),
        }
    }
}

/// Names of all parameter tensors, in [`ModelParams::tensors`] order.
pub const PARAM_NAMES: [&str; 16] = [
    "a.w1", "a.b1", "a.w2", "a.b2", "t.w1", "t.b1", "t.w2", "t.b2", "at.w1", "at.b1", "at.w2", "at.b2", "gate.w",
    "gate.b", "proj.a", "proj.t",
];

impl ModelParams {
    /// Seeded initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, c, f) = (config.hidden, config.classes, config.fusion_dim);
        let audio = HeadParams::init(&mut rng, config.dim_a, h, c);
        let text = HeadParams::init(&mut rng, config.dim_t, h, c);
        let fusion_head = HeadParams::init(&mut rng, f, h, c);
        let cat = config.dim_a + config.dim_t;
        let fusion = FusionParams {
            w_gate: init_uniform(&mut rng, cat, cat, f),
            b_gate: init_uniform(&mut rng, cat, 1, f),
            proj_a: init_uniform(&mut rng, config.dim_a, config.dim_a, f),
            proj_t: init_uniform(&mut rng, config.dim_t, config.dim_t, f),
        };
        Ok(ModelParams {
            config: config.clone(),
            audio,
            text,
            fusion_head,
            fusion,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (h, c, f) = (config.hidden, config.classes, config.fusion_dim);
        Ok(ModelParams {
            config: config.clone(),
            audio: HeadParams::zeros(config.dim_a, h, c),
            text: HeadParams::zeros(config.dim_t, h, c),
            fusion_head: HeadParams::zeros(f, h, c),
            fusion: FusionParams {
                w_gate: Tensor::zeros(config.dim_a + config.dim_t, f),
                b_gate: Tensor::zeros(1, f),
                proj_a: Tensor::zeros(config.dim_a, f),
                proj_t: Tensor::zeros(config.dim_t, f),
            },
        })
    }

    pub fn head(&self, m: ModalityId) -> &HeadParams {
        match m {
            ModalityId::A => &self.audio,
            ModalityId::T => &self.text,
            ModalityId::AT => &self.fusion_head,
        }
    }

    pub fn tensors(&self) -> [&Tensor; 16] {
        let (a, t, at, f) = (&self.audio, &self.text, &self.fusion_head, &self.fusion);
        [
            &a.w1, &a.b1, &a.w2, &a.b2, &t.w1, &t.b1, &t.w2, &t.b2, &at.w1, &at.b1, &at.w2, &at.b2, &f.w_gate,
            &f.b_gate, &f.proj_a, &f.proj_t,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        let ModelParams {
            audio: a,
            text: t,
            fusion_head: at,
            fusion: f,
            ..
        } = self;
        [
            &mut a.w1,
            &mut a.b1,
            &mut a.w2,
            &mut a.b2,
            &mut t.w1,
            &mut t.b1,
            &mut t.w2,
            &mut t.b2,
            &mut at.w1,
            &mut at.b1,
            &mut at.w2,
            &mut at.b2,
            &mut f.w_gate,
            &mut f.b_gate,
            &mut f.proj_a,
            &mut f.proj_t,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Registers every tensor as a trainable leaf on `g`.
    pub fn register(&self, g: &mut Graph) -> ParamVars {
        let vars = self.tensors().map(|t| g.param(t.clone()));
        ParamVars { vars }
    }

    /// Registers every tensor as a constant (inference only).
    pub fn register_frozen(&self, g: &mut Graph) -> ParamVars {
        let vars = self.tensors().map(|t| g.constant(t.clone()));
        ParamVars { vars }
    }

    /// Full inference on raw feature matrices.
    pub fn predict(&self, h_a: &Tensor, h_t: &Tensor) -> Result<Predictions> {
        let mut g = Graph::new();
        let vars = self.register_frozen(&mut g);
        let ha = g.constant(h_a.clone());
        let ht = g.constant(h_t.clone());
        let out = forward_all(&mut g, &self.config, &vars, ha, ht)?;
        Ok(Predictions {
            a: g.value(out.a).clone(),
            t: g.value(out.t).clone(),
            at: g.value(out.at).clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::from_params(self);
        let json = serde_json::to_string(&ckpt)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.into_params()
    }
}

/// On-disk checkpoint: `{"format": "amber-ckpt-v1", "config": {...},
/// "tensors": [{"name", "rows", "cols", "data"}, ...]}` with tensors in
/// [`PARAM_NAMES`] order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "amber-ckpt-v1";

impl Checkpoint {
    pub fn from_params(p: &ModelParams) -> Self {
        let tensors = PARAM_NAMES
            .iter()
            .zip(p.tensors())
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: p.config.clone(),
            tensors,
        }
    }

    pub fn into_params(self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(AmberError::Config(format!(
                "unsupported checkpoint format '{}'",
                self.format
            )));
        }
        let mut params = ModelParams::zeros(&self.config)?;
        if self.tensors.len() != PARAM_NAMES.len() {
            return Err(AmberError::Config(format!(
                "checkpoint holds {} tensors, expected {}",
                self.tensors.len(),
                PARAM_NAMES.len()
            )));
        }
        for ((slot, name), nt) in params.tensors_mut().into_iter().zip(PARAM_NAMES).zip(self.tensors) {
            if nt.name != name || (nt.rows, nt.cols) != slot.shape() {
                return Err(AmberError::Shape(format!(
                    "checkpoint tensor '{}' {}x{} does not match '{name}' {:?}",
                    nt.name,
                    nt.rows,
                    nt.cols,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(nt.rows, nt.cols, nt.data)?;
        }
        if !params.all_finite() {
            return Err(AmberError::Numerical("checkpoint holds non-finite values".into()));
        }
        Ok(params)
    }
}

/// Graph handles for every parameter tensor, in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub vars: [Var; 16],
}

impl ParamVars {
    fn head(&self, m: ModalityId) -> [Var; 4] {
        let base = match m {
            ModalityId::A => 0,
            ModalityId::T => 4,
            ModalityId::AT => 8,
        };
        [
            self.vars[base],
            self.vars[base + 1],
            self.vars[base + 2],
            self.vars[base + 3],
        ]
    }

    fn fusion(&self) -> [Var; 4] {
        [self.vars[12], self.vars[13], self.vars[14], self.vars[15]]
    }
}

fn check_input(g: &Graph, h: Var, dim: usize, what: &str) -> Result<()> {
    let t = g.value(h);
    if t.cols() != dim {
        return Err(AmberError::Shape(format!(
            "{what} has {} features, expected {dim}",
            t.cols()
        )));
    }
    if !t.all_finite() {
        return Err(AmberError::Numerical(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// `softmax(relu(h·W₁ + b₁)·W₂ + b₂)` for head `m`.
pub fn head_forward(g: &mut Graph, config: &ModelConfig, vars: &ParamVars, m: ModalityId, h: Var) -> Result<Var> {
    check_input(g, h, config.head_input_dim(m), &format!("input to head {m}"))?;
    let [w1, b1, w2, b2] = vars.head(m);
    let z1 = g.matmul(h, w1)?;
    let z1 = g.add_bias(z1, b1)?;
    let a1 = g.relu(z1);
    let z2 = g.matmul(a1, w2)?;
    let z2 = g.add_bias(z2, b2)?;
    g.softmax(z2)
}

/// Gated fusion of the two modality embeddings into `h_AT`.
pub fn fuse(g: &mut Graph, config: &ModelConfig, vars: &ParamVars, h_a: Var, h_t: Var) -> Result<Var> {
    check_input(g, h_a, config.dim_a, "h_A")?;
    check_input(g, h_t, config.dim_t, "h_T")?;
    let (ra, rt) = (g.value(h_a).rows(), g.value(h_t).rows());
    if ra != rt {
        return Err(AmberError::Shape(format!("batch sizes {ra} (h_A) and {rt} (h_T)")));
    }
    let [w_gate, b_gate, proj_a, proj_t] = vars.fusion();
    let cat = g.concat(h_a, h_t)?;
    let pre = g.matmul(cat, w_gate)?;
    let pre = g.add_bias(pre, b_gate)?;
    let gate = g.sigmoid(pre);
    let pa = g.matmul(h_a, proj_a)?;
    let pt = g.matmul(h_t, proj_t)?;
    let ones = g.constant(Tensor::filled(ra, config.fusion_dim, 1.0));
    let inv_gate = g.sub(ones, gate)?;
    let from_a = g.mul(gate, pa)?;
    let from_t = g.mul(inv_gate, pt)?;
    g.add(from_a, from_t)
}

/// Per-head output nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub a: Var,
    pub t: Var,
    pub at: Var,
    pub student: ModalityId,
}

impl HeadOutputs {
    pub fn get(&self, m: ModalityId) -> Var {
        match m {
            ModalityId::A => self.a,
            ModalityId::T => self.t,
            ModalityId::AT => self.at,
        }
    }

    /// `s = p_{m*}`.
    pub fn student_output(&self) -> Var {
        self.get(self.student)
    }

    pub fn experts(&self) -> [(ModalityId, Var); 2] {
        self.student.experts().map(|m| (m, self.get(m)))
    }
}

pub fn forward_all(g: &mut Graph, config: &ModelConfig, vars: &ParamVars, h_a: Var, h_t: Var) -> Result<HeadOutputs> {
    let a = head_forward(g, config, vars, ModalityId::A, h_a)?;
    let t = head_forward(g, config, vars, ModalityId::T, h_t)?;
    let h_at = fuse(g, config, vars, h_a, h_t)?;
    let at = head_forward(g, config, vars, ModalityId::AT, h_at)?;
    Ok(HeadOutputs {
        a,
        t,
        at,
        student: config.student,
    })
}

/// Inference outputs of all three heads, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub a: Tensor,
    pub t: Tensor,
    pub at: Tensor,
}

impl Predictions {
    pub fn get(&self, m: ModalityId) -> &Tensor {
        match m {
            ModalityId::A => &self.a,
            ModalityId::T => &self.t,
            ModalityId::AT => &self.at,
        }
    }
}
