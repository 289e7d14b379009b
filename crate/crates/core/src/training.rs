//! Optimizers, the training loop and binary-classification metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{backward, forward_with_tape, objective, BalanceConfig};
use crate::error::{Error, Result};
use crate::layers::{model_forward, Model};
use crate::numerics::{argmax_first, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// 0 trains on the full batch every step.
    pub batch_size: usize,
    #[serde(rename = "lr")]
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Minibatch shuffling seed. Unused for full-batch training.
    pub seed: u64,
    pub balance: BalanceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 0,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            balance: BalanceConfig::default(),
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted: it is a useful no-op for checks that need an
    /// optimizer step without movement.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        if self.balance.enabled && (self.balance.lambda.is_nan() || self.balance.lambda < 0.0) {
            return Err(Error::Config("balance lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair of buffers per parameter array.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|(_, p)| p.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[&[f64]], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, p) in model.params_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                *w -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean objective over the batches of each epoch, measured before the step.
    pub losses: Vec<f64>,
    pub train_time_s: f64,
}

/// Trains `model` on `(x, labels)`. Deterministic for a given config.
pub fn train(mut model: Model, x: &Matrix, labels: &[u8], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    if x.rows() != labels.len() {
        return Err(Error::shape("train labels", x.rows(), labels.len()));
    }
    if x.cols() != model.input_dim() {
        return Err(Error::shape("train features", model.input_dim(), x.cols()));
    }
    let start = Instant::now();
    let n = x.rows();
    let full = cfg.batch_size == 0 || cfg.batch_size >= n;
    let mut rng = Rng::seed_from(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = Adam::new(&model);
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let batches: Vec<Vec<usize>> = if full {
            vec![Vec::new()]
        } else {
            rng.shuffle(&mut order);
            order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
        };
        let mut total = 0.0;
        for rows in &batches {
            let (bx, by);
            let (xb, yb): (&Matrix, &[u8]) = if full {
                (x, labels)
            } else {
                bx = x.select_rows(rows);
                by = rows.iter().map(|&r| labels[r]).collect::<Vec<_>>();
                (&bx, &by)
            };
            let tape = forward_with_tape(&model, xb)?;
            let loss = objective(&tape, yb, &cfg.balance)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, loss });
            }
            total += loss;
            let grads = backward(&model, &tape, yb, &cfg.balance)?;
            let g: Vec<&[f64]> = grads.params().into_iter().map(|(_, p)| p).collect();
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut model, &g, cfg),
                Optimizer::Sgd => {
                    for (p, gp) in model.params_mut().into_iter().zip(&g) {
                        for (w, d) in p.iter_mut().zip(gp.iter()) {
                            *w -= cfg.learning_rate * d;
                        }
                    }
                }
            }
        }
        losses.push(total / batches.len() as f64);
    }
    Ok(TrainOutcome {
        model,
        losses,
        train_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Class probabilities for every row.
pub fn predict_proba(model: &Model, x: &Matrix) -> Result<Matrix> {
    Ok(model_forward(model, x)?.0)
}

/// Positive class is label 1 (patient).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[u8], labels: &[u8]) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::shape("confusion", labels.len(), predicted.len()));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &y) in predicted.iter().zip(labels) {
            match (p == 1, y == 1) {
                (true, true) => c.tp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.sensitivity());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Predicted class is the first maximal column, so an exact tie goes to 0.
pub fn confusion(probs: &Matrix, labels: &[u8]) -> Result<ConfusionCounts> {
    if probs.rows() != labels.len() {
        return Err(Error::shape("confusion", probs.rows(), labels.len()));
    }
    let predicted = (0..probs.rows())
        .map(|r| argmax_first(probs.row(r)).map(|c| c as u8))
        .collect::<Result<Vec<u8>>>()?;
    ConfusionCounts::from_predictions(&predicted, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    pub precision: f64,
    pub f1: f64,
    pub train_time_s: f64,
}

impl MetricsReport {
    pub const FIELDS: [&'static str; 7] = [
        "accuracy",
        "sensitivity",
        "specificity",
        "auc",
        "precision",
        "f1",
        "train_time_s",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.sensitivity,
            self.specificity,
            self.auc,
            self.precision,
            self.f1,
            self.train_time_s,
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        Self {
            accuracy: v[0],
            sensitivity: v[1],
            specificity: v[2],
            auc: v[3],
            precision: v[4],
            f1: v[5],
            train_time_s: v[6],
        }
    }
}

/// Mann-Whitney statistic: the fraction of (positive, negative) pairs where
/// the positive scores higher, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", labels.len(), scores.len()));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y != 1)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass);
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// All six metrics. AUC uses column 1 of `probs` as the score.
pub fn metrics(c: &ConfusionCounts, probs: &Matrix, labels: &[u8]) -> Result<MetricsReport> {
    if c.total() != labels.len() {
        return Err(Error::shape("metrics", labels.len(), c.total()));
    }
    let scores: Vec<f64> = (0..probs.rows()).map(|r| probs.get(r, 1)).collect();
    Ok(MetricsReport {
        accuracy: c.accuracy(),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        auc: auc(&scores, labels)?,
        precision: c.precision(),
        f1: c.f1(),
        train_time_s: 0.0,
    })
}

/// [`confusion`] followed by [`metrics`].
pub fn evaluate(probs: &Matrix, labels: &[u8], train_time_s: f64) -> Result<MetricsReport> {
    let c = confusion(probs, labels)?;
    Ok(MetricsReport {
        train_time_s,
        ..metrics(&c, probs, labels)?
    })
}
