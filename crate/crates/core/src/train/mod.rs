//! Toy encoder classifier trained on synthetic tasks, for A/B runs of score kinds.
//!
//! Every arm of a comparison uses the same seed, the same data and the same
//! weight-initialisation draws. Only the score function differs.

pub mod model;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionSpec, ScoreKind};
use crate::error::{Error, Result};
use crate::ops::{NoCount, OpTally};
use crate::tensor::Rng;

pub use model::{Dims, Model, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// A sentinel token (id 0) is followed by the answer token `1 + label`.
    NeedleRetrieval,
    /// Label is the most frequent token id, ties broken toward the lower id.
    MajorityToken,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::NeedleRetrieval => "needle",
            TaskKind::MajorityToken => "majority",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "needle" | "needle-retrieval" | "needleretrieval" => Ok(TaskKind::NeedleRetrieval),
            "majority" | "majority-token" | "majoritytoken" => Ok(TaskKind::MajorityToken),
            _ => Err(Error::Parse(format!("unknown task {s:?} (expected needle or majority)"))),
        }
    }
}

/// Generator parameters for a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
    pub classes: usize,
    pub seed: u64,
}

pub const NEEDLE_SENTINEL: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.vocab == 0 || self.classes == 0 {
            return Err(Error::Config("seq_len, vocab and classes must be >= 1".into()));
        }
        if self.classes > self.vocab {
            return Err(Error::Config(format!(
                "{} classes cannot be encoded in a vocabulary of {}",
                self.classes, self.vocab
            )));
        }
        match self.kind {
            TaskKind::NeedleRetrieval => {
                if self.classes + 1 > self.vocab {
                    return Err(Error::Config(format!(
                        "needle task needs vocab >= classes + 1 (sentinel), got vocab {} classes {}",
                        self.vocab, self.classes
                    )));
                }
                if self.seq_len < 2 {
                    return Err(Error::Config("needle task needs seq_len >= 2".into()));
                }
                if self.vocab < 2 {
                    return Err(Error::Config("needle task needs a non-sentinel token".into()));
                }
            }
            TaskKind::MajorityToken => {
                if self.classes > 1 && self.seq_len < 2 {
                    return Err(Error::Config("majority task needs seq_len >= 2".into()));
                }
            }
        }
        Ok(())
    }

    /// The label a sequence deterministically encodes.
    pub fn label_of(&self, tokens: &[usize]) -> Option<usize> {
        match self.kind {
            TaskKind::NeedleRetrieval => tokens
                .windows(2)
                .find(|w| w[0] == NEEDLE_SENTINEL)
                .and_then(|w| w[1].checked_sub(1))
                .filter(|&l| l < self.classes),
            TaskKind::MajorityToken => {
                let mut counts = vec![0usize; self.vocab];
                for &t in tokens {
                    counts[t] += 1;
                }
                let mut best = 0;
                for (i, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = i;
                    }
                }
                Some(best).filter(|&l| l < self.classes)
            }
        }
    }

    fn sample(&self, rng: &mut Rng, label: usize) -> Vec<usize> {
        match self.kind {
            TaskKind::NeedleRetrieval => {
                // Distractors never use the sentinel; answer tokens also appear as distractors.
                let mut tokens: Vec<usize> = (0..self.seq_len).map(|_| 1 + rng.below(self.vocab - 1)).collect();
                let pos = rng.below(self.seq_len - 1);
                tokens[pos] = NEEDLE_SENTINEL;
                tokens[pos + 1] = 1 + label;
                tokens
            }
            TaskKind::MajorityToken => {
                let mut tokens: Vec<usize> = (0..self.seq_len).map(|_| rng.below(self.classes)).collect();
                // Overwrite positions in random order until `label` strictly leads.
                let mut order: Vec<usize> = (0..self.seq_len).collect();
                rng.shuffle(&mut order);
                for &pos in &order {
                    if self.label_of(&tokens) == Some(label) {
                        break;
                    }
                    tokens[pos] = label;
                }
                tokens
            }
        }
    }
}

/// Deterministic, class-balanced dataset: labels cycle through the classes
/// before the sample order is shuffled.
pub fn generate_task(task: &SyntheticTask, n_samples: usize) -> Result<Vec<Sample>> {
    task.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    let mut rng = Rng::new(task.seed);
    let mut data: Vec<Sample> = (0..n_samples)
        .map(|i| {
            let label = i % task.classes;
            Sample {
                tokens: task.sample(&mut rng, label),
                label,
            }
        })
        .collect();
    rng.shuffle(&mut data);
    debug_assert!(data.iter().all(|s| task.label_of(&s.tokens) == Some(s.label)));
    Ok(data)
}

/// Model and optimiser settings shared by every arm of an A/B run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub classes: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Total samples; the last `eval_fraction` of them form the evaluation split.
    pub samples: usize,
    pub eval_fraction: f64,
    pub seed: u64,
    pub attention: AttentionSpec,
    pub lambda_grid: Vec<f64>,
}

impl TrainConfig {
    /// Needle retrieval baseline: 16 tokens, vocabulary 16, 2 layers, 2 heads,
    /// model width 32, 2000 samples.
    pub fn needle_baseline(kind: ScoreKind, lambda: f64) -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 32,
            ffn_dim: 64,
            seq_len: 16,
            vocab: 16,
            classes: 4,
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch: 16,
            samples: 2000,
            eval_fraction: 0.2,
            seed: 7,
            attention: AttentionSpec {
                kind,
                lambda,
                d_k: 16,
                mask: None,
            },
            lambda_grid: vec![1.0, 2.0, 3.0, 5.0],
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            seq_len: self.seq_len,
            vocab: self.vocab,
            classes: self.classes,
        }
    }

    pub fn task(&self, kind: TaskKind) -> SyntheticTask {
        SyntheticTask {
            kind,
            seq_len: self.seq_len,
            vocab: self.vocab,
            classes: self.classes,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("seq_len", self.seq_len),
            ("vocab", self.vocab),
            ("classes", self.classes),
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("samples", self.samples),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.attention.d_k != self.d_model / self.heads {
            return Err(Error::Config(format!(
                "attention d_k {} != d_model / heads = {}",
                self.attention.d_k,
                self.d_model / self.heads
            )));
        }
        // lr = 0 is allowed as a no-learning control.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config(format!("eval_fraction must lie in (0, 1), got {}", self.eval_fraction)));
        }
        let n_eval = self.n_eval();
        if n_eval == 0 || n_eval >= self.samples {
            return Err(Error::Config(format!(
                "{} samples cannot be split with eval fraction {}",
                self.samples, self.eval_fraction
            )));
        }
        self.attention.validate()
    }

    fn n_eval(&self) -> usize {
        (self.samples as f64 * self.eval_fraction).round() as usize
    }
}

/// Per-epoch training record, emitted as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub final_train_acc: f64,
    pub final_eval_acc: f64,
    pub loss_curve: Vec<f64>,
    pub lambda: f64,
    pub attention_kind: ScoreKind,
    /// Score operations for one forward pass of one sequence.
    pub op_tally: OpTally,
    pub epochs: Vec<EpochRecord>,
}

fn accuracy(model: &Model, params: &Params, data: &[Sample]) -> Result<f64> {
    let mut correct = 0usize;
    for s in data {
        if model.predict(params, &s.tokens)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains one arm with momentum SGD on mean cross-entropy over mini-batches.
pub fn train(config: &TrainConfig, task: &SyntheticTask) -> Result<RunResult> {
    train_with(config, task, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(config: &TrainConfig, task: &SyntheticTask, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<RunResult> {
    config.validate()?;
    if (task.seq_len, task.vocab, task.classes) != (config.seq_len, config.vocab, config.classes) {
        return Err(Error::Config(format!(
            "task shape (seq_len {}, vocab {}, classes {}) disagrees with config ({}, {}, {})",
            task.seq_len, task.vocab, task.classes, config.seq_len, config.vocab, config.classes
        )));
    }
    let data = generate_task(task, config.samples)?;
    let (train_set, eval_set) = data.split_at(config.samples - config.n_eval());

    let model = Model::new(config.dims(), config.attention.clone())?;
    let mut rng = Rng::new(config.seed);
    let mut params = Params::init(&mut rng.fork(), &config.dims())?;
    let mut order_rng = rng.fork();
    let mut velocity = params.zeros_like();

    let mut op_tally = OpTally::default();
    model.forward(&params, &eval_set[0].tokens, &mut op_tally)?;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch) {
            let mut grads = params.zeros_like();
            for &i in batch {
                let s = &train_set[i];
                let trace = model.forward(&params, &s.tokens, &mut NoCount)?;
                let loss = Model::loss(&trace, s.label);
                if !loss.is_finite() || trace.probs.iter().any(|p| !p.is_finite()) {
                    return Err(Error::Diverged { epoch });
                }
                loss_sum += loss;
                if model::argmax(&trace.probs) == s.label {
                    correct += 1;
                }
                model.backward(&params, &trace, s.label, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            velocity.scale(config.momentum);
            velocity.axpy(1.0, &grads)?;
            params.axpy(-config.lr, &velocity)?;
        }
        let loss = loss_sum / train_set.len() as f64;
        if !loss.is_finite() || !params.sq_norm().is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let rec = EpochRecord {
            epoch,
            loss,
            train_acc: correct as f64 / train_set.len() as f64,
            eval_acc: accuracy(&model, &params, eval_set)?,
        };
        on_epoch(&rec);
        records.push(rec);
    }

    Ok(RunResult {
        final_train_acc: accuracy(&model, &params, train_set)?,
        final_eval_acc: records.last().map_or(0.0, |r| r.eval_acc),
        loss_curve: records.iter().map(|r| r.loss).collect(),
        lambda: config.attention.lambda,
        attention_kind: config.attention.kind,
        op_tally,
        epochs: records,
    })
}

/// One run per grid value of λ on identical data and seed, sorted by eval
/// accuracy (descending), ties broken toward the smaller λ.
pub fn lambda_grid_search(config: &TrainConfig, task: &SyntheticTask) -> Result<Vec<RunResult>> {
    lambda_grid_search_with(config, task, |_, _| {})
}

pub fn lambda_grid_search_with(
    config: &TrainConfig,
    task: &SyntheticTask,
    mut on_epoch: impl FnMut(f64, &EpochRecord),
) -> Result<Vec<RunResult>> {
    if config.lambda_grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    let mut results = Vec::with_capacity(config.lambda_grid.len());
    for &lambda in &config.lambda_grid {
        let mut cfg = config.clone();
        cfg.attention.lambda = lambda;
        results.push(train_with(&cfg, task, |r| on_epoch(lambda, r))?);
    }
    sort_by_eval(&mut results);
    Ok(results)
}

pub fn sort_by_eval(results: &mut [RunResult]) {
    results.sort_by(|a, b| {
        b.final_eval_acc
            .total_cmp(&a.final_eval_acc)
            .then(a.lambda.total_cmp(&b.lambda))
    });
}

/// Summary CSV across runs: `kind,lambda,final_train_acc,final_eval_acc,final_loss`.
pub fn summary_csv(results: &[RunResult]) -> String {
    let mut s = String::from("kind,lambda,final_train_acc,final_eval_acc,final_loss\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.attention_kind,
            r.lambda,
            r.final_train_acc,
            r.final_eval_acc,
            r.loss_curve.last().copied().unwrap_or(f64::NAN)
        ));
    }
    s
}
