//! Datasets of paired embeddings with rater votes: JSONL ingestion, the
//! synthetic dual-ambiguity generator, and fold bookkeeping.
//!
//! File layout (one JSON object per line):
//!
//! ```text
//! {"schema":"amber-ds-v1","C":4,"dim_a":16,"dim_t":16,"folds":5}
//! {"id":"s0","h_a":[...],"h_t":[...],"votes":[3,1,0,0],"fold":2}
//! ```
//!
//! Records may also carry `"y"` (checked against the votes within 1e-6) and
//! `"n"` (declared annotator count, checked against the vote sum).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::distlib::{aggregate_votes, RaterVotes, SoftLabel};
use crate::error::{AmberError, Result};

pub const SCHEMA: &str = "amber-ds-v1";

/// Stored soft labels may differ from the recomputed ones by at most this.
pub const STORED_Y_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub h_a: Vec<f64>,
    pub h_t: Vec<f64>,
    pub votes: RaterVotes,
    /// Always `aggregate_votes(&votes)`.
    pub y: SoftLabel,
    pub fold: usize,
}

impl Sample {
    pub fn new(id: String, h_a: Vec<f64>, h_t: Vec<f64>, votes: RaterVotes, fold: usize) -> Self {
        let y = aggregate_votes(&votes);
        Sample {
            id,
            h_a,
            h_t,
            votes,
            y,
            fold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub dim_a: usize,
    pub dim_t: usize,
    pub fold_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    #[serde(rename = "C")]
    classes: usize,
    dim_a: usize,
    dim_t: usize,
    folds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raters: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    h_a: Vec<f64>,
    h_t: Vec<f64>,
    votes: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fold: Option<usize>,
}

fn data_err(line: usize, msg: impl Into<String>) -> AmberError {
    AmberError::Data { line, msg: msg.into() }
}

impl Dataset {
    /// Checks the structural invariants: dims, class count, fold partition.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(AmberError::Dataset("need at least 2 classes".into()));
        }
        if self.fold_count == 0 {
            return Err(AmberError::Dataset("fold count must be positive".into()));
        }
        let mut seen = HashSet::new();
        let mut fold_sizes = vec![0usize; self.fold_count];
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(AmberError::Dataset(format!("duplicate id '{}'", s.id)));
            }
            if s.h_a.len() != self.dim_a || s.h_t.len() != self.dim_t {
                return Err(AmberError::Dataset(format!("sample '{}' has wrong feature dims", s.id)));
            }
            if s.votes.classes() != self.classes {
                return Err(AmberError::Dataset(format!("sample '{}' has wrong class count", s.id)));
            }
            if s.fold >= self.fold_count {
                return Err(AmberError::Dataset(format!(
                    "sample '{}' in fold {} of {}",
                    s.id, s.fold, self.fold_count
                )));
            }
            fold_sizes[s.fold] += 1;
        }
        if let Some(k) = fold_sizes.iter().position(|&n| n == 0) {
            return Err(AmberError::Dataset(format!("fold {k} is empty")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.fold == fold)
            .map(|(i, _)| i)
            .collect()
    }

    /// Stacks the features and soft labels of `idx` into batch tensors
    /// `(h_A, h_T, y)`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor, Tensor) {
        let mut ha = Vec::with_capacity(idx.len() * self.dim_a);
        let mut ht = Vec::with_capacity(idx.len() * self.dim_t);
        let mut y = Vec::with_capacity(idx.len() * self.classes);
        for &i in idx {
            let s = &self.samples[i];
            ha.extend_from_slice(&s.h_a);
            ht.extend_from_slice(&s.h_t);
            y.extend_from_slice(s.y.probs());
        }
        let n = idx.len();
        (
            Tensor::new(n, self.dim_a, ha).expect("dims validated"),
            Tensor::new(n, self.dim_t, ht).expect("dims validated"),
            Tensor::new(n, self.classes, y).expect("dims validated"),
        )
    }

    pub fn labels<'a>(&'a self, idx: &'a [usize]) -> impl Iterator<Item = &'a SoftLabel> + 'a {
        idx.iter().map(move |&i| &self.samples[i].y)
    }

    /// Reads a dataset file. Every rejection names the offending line.
    pub fn load_jsonl(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Dataset::read_jsonl(BufReader::new(file))
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
        let mut lines = reader.lines().enumerate();
        let header: Header = loop {
            match lines.next() {
                None => return Err(data_err(1, "missing header record")),
                Some((i, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line)
                        .map_err(|e| data_err(i + 1, format!("malformed header: {e}")))?;
                }
            }
        };
        if header.schema != SCHEMA {
            return Err(data_err(1, format!("unsupported schema '{}'", header.schema)));
        }
        if header.classes < 2 || header.dim_a == 0 || header.dim_t == 0 || header.folds == 0 {
            return Err(data_err(1, "header needs C >= 2 and positive dims and folds"));
        }

        let mut samples = Vec::new();
        let mut ids = HashSet::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| data_err(lineno, format!("malformed record: {e}")))?;
            if !ids.insert(rec.id.clone()) {
                return Err(data_err(lineno, format!("duplicate id '{}'", rec.id)));
            }
            if rec.h_a.len() != header.dim_a {
                return Err(data_err(
                    lineno,
                    format!("h_a has {} values, header says {}", rec.h_a.len(), header.dim_a),
                ));
            }
            if rec.h_t.len() != header.dim_t {
                return Err(data_err(
                    lineno,
                    format!("h_t has {} values, header says {}", rec.h_t.len(), header.dim_t),
                ));
            }
            if rec.h_a.iter().chain(&rec.h_t).any(|x| !x.is_finite()) {
                return Err(data_err(lineno, "non-finite feature value"));
            }
            if rec.votes.len() != header.classes {
                return Err(data_err(
                    lineno,
                    format!("{} vote counts for C = {}", rec.votes.len(), header.classes),
                ));
            }
            let sum: u32 = rec.votes.iter().sum();
            let declared = rec.n.or(header.raters).unwrap_or(sum);
            let votes = RaterVotes::new(rec.votes, declared)
                .map_err(|e| data_err(lineno, format!("vote-sum mismatch: {e}")))?;
            let fold = rec.fold.unwrap_or(samples.len() % header.folds);
            if fold >= header.folds {
                return Err(data_err(
                    lineno,
                    format!("fold {fold} out of range for {} folds", header.folds),
                ));
            }
            let sample = Sample::new(rec.id, rec.h_a, rec.h_t, votes, fold);
            if let Some(stored) = rec.y {
                let ok = stored.len() == header.classes
                    && stored
                        .iter()
                        .zip(sample.y.probs())
                        .all(|(a, b)| (a - b).abs() <= STORED_Y_TOLERANCE);
                if !ok {
                    return Err(data_err(lineno, "stored y disagrees with the votes"));
                }
            }
            samples.push(sample);
        }

        let ds = Dataset {
            samples,
            classes: header.classes,
            dim_a: header.dim_a,
            dim_t: header.dim_t,
            fold_count: header.folds,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Canonical JSONL text; byte-identical for equal datasets.
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            schema: SCHEMA.into(),
            classes: self.classes,
            dim_a: self.dim_a,
            dim_t: self.dim_t,
            folds: self.fold_count,
            raters: None,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            let rec = Record {
                id: s.id.clone(),
                h_a: s.h_a.clone(),
                h_t: s.h_t.clone(),
                votes: s.votes.counts().to_vec(),
                y: None,
                n: None,
                fold: Some(s.fold),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// SHA-256 of the canonical JSONL text, hex encoded.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}

/// Index sets of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Test on fold `k`, validate on fold `k + 1` (cyclic), train on the rest.
pub fn fold_split(ds: &Dataset, k: usize) -> Result<FoldSplit> {
    if ds.fold_count < 3 {
        return Err(AmberError::Config(format!(
            "need at least 3 folds for train/val/test, dataset has {}",
            ds.fold_count
        )));
    }
    if k >= ds.fold_count {
        return Err(AmberError::Config(format!(
            "fold {k} out of range for {} folds",
            ds.fold_count
        )));
    }
    let val_fold = (k + 1) % ds.fold_count;
    let mut split = FoldSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, s) in ds.samples.iter().enumerate() {
        if s.fold == k {
            split.test.push(i);
        } else if s.fold == val_fold {
            split.val.push(i);
        } else {
            split.train.push(i);
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub classes: usize,
    pub dim_a: usize,
    pub dim_t: usize,
    pub raters: u32,
    /// Dirichlet concentration; lower means sharper rater consensus.
    pub ambiguity_alpha: f64,
    /// Probability that the audio cue class differs from the text cue class.
    pub conflict_rate: f64,
    pub noise_sigma: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 2000,
            classes: 4,
            dim_a: 16,
            dim_t: 16,
            raters: 10,
            ambiguity_alpha: 0.7,
            conflict_rate: 0.3,
            noise_sigma: 0.5,
            folds: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conflict_rate) {
            return Err(AmberError::Config(format!(
                "conflict rate {} outside [0, 1]",
                self.conflict_rate
            )));
        }
        if self.raters == 0 {
            return Err(AmberError::Config("need at least one rater".into()));
        }
        if !(self.ambiguity_alpha > 0.0 && self.ambiguity_alpha.is_finite()) {
            return Err(AmberError::Config(format!(
                "alpha must be positive, got {}",
                self.ambiguity_alpha
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(AmberError::Config(format!(
                "noise must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.classes < 2 {
            return Err(AmberError::Config("need at least 2 classes".into()));
        }
        if self.classes > self.dim_a || self.classes > self.dim_t {
            return Err(AmberError::Config(format!(
                "{} classes need feature dims of at least {} for independent anchors (got {} / {})",
                self.classes, self.classes, self.dim_a, self.dim_t
            )));
        }
        if self.folds == 0 || self.n_samples < self.folds {
            return Err(AmberError::Config(format!(
                "{} samples cannot fill {} folds",
                self.n_samples, self.folds
            )));
        }
        Ok(())
    }
}

/// Seeded unit-norm anchors, one per class, pairwise distinct.
fn anchors(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while out.len() < classes {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        let v: Vec<f64> = v.into_iter().map(|x| x / norm).collect();
        let distinct = out
            .iter()
            .all(|u| u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>() > 1e-6);
        if distinct {
            out.push(v);
        }
    }
    out
}

/// `Dirichlet(α·1)` via normalized gamma draws. When every draw underflows
/// (tiny α) the mass goes to one uniformly chosen class.
fn dirichlet(rng: &mut ChaCha8Rng, gamma: &Gamma<f64>, classes: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        let mut v = vec![0.0; classes];
        v[rng.random_range(0..classes)] = 1.0;
        v
    }
}

fn sample_class(rng: &mut ChaCha8Rng, pi: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    // Rounding left u above the final cumulative sum.
    pi.iter().rposition(|&p| p > 0.0).unwrap_or(pi.len() - 1)
}

/// Generates paired embeddings whose rater votes come from a Dirichlet draw
/// and whose modality cues disagree at `conflict_rate`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let anchors_a = anchors(&mut rng, cfg.classes, cfg.dim_a);
    let anchors_t = anchors(&mut rng, cfg.classes, cfg.dim_t);
    let gamma = Gamma::new(cfg.ambiguity_alpha, 1.0)
        .map_err(|e| AmberError::Config(format!("gamma({}): {e}", cfg.ambiguity_alpha)))?;

    let width = cfg.n_samples.to_string().len();
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let pi = dirichlet(&mut rng, &gamma, cfg.classes);
        let mut counts = vec![0u32; cfg.classes];
        for _ in 0..cfg.raters {
            counts[sample_class(&mut rng, &pi)] += 1;
        }
        let cue_t = crate::distlib::argmax(&pi);
        let cue_a = if rng.random::<f64>() < cfg.conflict_rate {
            let k = rng.random_range(0..cfg.classes - 1);
            if k >= cue_t {
                k + 1
            } else {
                k
            }
        } else {
            cue_t
        };
        let mut noisy = |anchor: &[f64]| -> Vec<f64> {
            anchor
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + cfg.noise_sigma * z
                })
                .collect()
        };
        let h_a = noisy(&anchors_a[cue_a]);
        let h_t = noisy(&anchors_t[cue_t]);
        let votes = RaterVotes::new(counts, cfg.raters)?;
        samples.push(Sample::new(format!("s{i:0width$}"), h_a, h_t, votes, 0));
    }

    let mut order: Vec<usize> = (0..cfg.n_samples).collect();
    order.shuffle(&mut rng);
    for (pos, &i) in order.iter().enumerate() {
        samples[i].fold = pos % cfg.folds;
    }

    let ds = Dataset {
        samples,
        classes: cfg.classes,
        dim_a: cfg.dim_a,
        dim_t: cfg.dim_t,
        fold_count: cfg.folds,
    };
    ds.validate()?;
    Ok(ds)
}

/// The per-class anchors `(audio, text)` that [`generate_synthetic`] uses
/// for `cfg`.
pub fn synthetic_anchors(cfg: &SynthConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a = anchors(&mut rng, cfg.classes, cfg.dim_a);
    let t = anchors(&mut rng, cfg.classes, cfg.dim_t);
    (a, t)
}
