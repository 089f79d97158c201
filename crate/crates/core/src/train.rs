//! Seeded training loops over the softmax cross-entropy objective.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tensor};
use crate::data::{Classify, Dataset, DeviationProbe};
use crate::error::{Error, Result};
use crate::fsutil::opt_field;
use crate::models::{Classifier, Parameter};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr } | Self::Adam { lr, .. } => lr,
        }
    }

    /// Applies one update to every parameter. `step` counts from 1.
    pub fn step(&self, params: &mut [Parameter], step: u64) {
        for p in params {
            match *self {
                Self::Sgd { lr } => sgd_step(p, lr),
                Self::Adam { .. } => adam_step(p, self, step),
            }
        }
    }
}

pub fn sgd_step(param: &mut Parameter, lr: f64) {
    for (w, g) in param.value.values_mut().iter_mut().zip(&param.grad) {
        *w -= lr * g;
    }
}

/// Bias-corrected Adam update. Non-Adam optimizers are ignored.
pub fn adam_step(param: &mut Parameter, hyper: &Optimizer, step: u64) {
    let Optimizer::Adam {
        lr,
        beta1,
        beta2,
        eps,
    } = *hyper
    else {
        return;
    };
    let t = step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let state = &mut param.state;
    let values = param.value.values_mut();
    for i in 0..values.len() {
        let g = param.grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Epochs at which checkpoint metrics are taken.
    pub eval_epochs: Vec<usize>,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Domain("epochs must be >= 1".into()));
        }
        if !(self.optimizer.lr() >= 0.0) || !self.optimizer.lr().is_finite() {
            return Err(Error::Domain("learning rate must be finite and >= 0".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        if let Some(&e) = self.eval_epochs.iter().find(|&&e| e == 0 || e > self.epochs) {
            return Err(Error::Domain(format!("eval epoch {e} outside 1..={}", self.epochs)));
        }
        Ok(())
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        crate::experiment::digest(&serde_json::to_string(self).expect("config serialises"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub p_decoded: Option<f64>,
    pub alpha_decoded: Option<f64>,
    pub bayes_dev: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub wall_time: Duration,
    pub config_hash: String,
}

pub const RUN_CSV_HEADER: &str = "epoch,train_loss,train_acc,val_acc,p_decoded,alpha_decoded,bayes_dev";

impl EpochRecord {
    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            opt_field(self.val_acc),
            opt_field(self.p_decoded),
            opt_field(self.alpha_decoded),
            opt_field(self.bayes_dev)
        )
    }
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(RUN_CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(out, "{}", e.csv_fields());
        }
        out
    }

    pub fn at(&self, epoch: usize) -> Option<&EpochRecord> {
        self.epochs.get(epoch.checked_sub(1)?)
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }
}

/// Optional held-out measurements taken during training.
#[derive(Clone, Copy, Debug, Default)]
pub struct Evaluation<'a> {
    pub validation: Option<&'a Dataset>,
    pub deviation: Option<&'a DeviationProbe>,
    /// Also measure Bayes deviation every this many epochs.
    pub deviation_every: Option<usize>,
}

/// Fraction of rows whose prediction equals the label.
pub fn evaluate_accuracy(c: &impl Classify, points: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Domain("accuracy of an empty dataset".into()));
    }
    let pred = c.classify(points)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean cross-entropy and accuracy on a full dataset, without a tape.
pub fn evaluate_loss(c: &Classifier, data: &Dataset) -> Result<(f64, f64)> {
    let out = c.forward(&data.points)?;
    let (loss, _) = kernels::softmax_cross_entropy(out.logits.values(), &data.labels, out.logits.cols());
    let pred = out.logits.argmax_rows();
    let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok((loss, hits as f64 / data.len() as f64))
}

pub fn train(c: &mut Classifier, data: &Dataset, cfg: &TrainConfig) -> Result<RunRecord> {
    train_with(c, data, cfg, &Evaluation::default(), |_, _| Ok(()))
}

/// Trains `c` in place for `cfg.epochs` epochs, calling `on_checkpoint`
/// after each epoch listed in `cfg.eval_epochs`.
pub fn train_with(
    c: &mut Classifier,
    data: &Dataset,
    cfg: &TrainConfig,
    eval: &Evaluation<'_>,
    mut on_checkpoint: impl FnMut(usize, &Classifier) -> Result<()>,
) -> Result<RunRecord> {
    cfg.validate()?;
    if data.num_classes > c.spec().num_classes {
        return Err(Error::Domain(format!(
            "dataset has {} classes, model {}",
            data.num_classes,
            c.spec().num_classes
        )));
    }
    let start = Instant::now();
    let mut rng = seed::rng(cfg.seed);
    let n = data.len();
    let batch = cfg.batch_size.unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    let mut grad_norm = 0.0;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for (b, idx) in order.chunks(batch).enumerate() {
            let diverged = |grad_norm| Error::Diverged {
                epoch,
                batch: b,
                grad_norm,
            };
            let (x, y) = if idx.len() == n && !cfg.shuffle {
                (data.points.clone(), data.labels.clone())
            } else {
                (data.points.select_rows(idx), idx.iter().map(|&i| data.labels[i]).collect())
            };
            c.zero_grad();
            let loss = match c.loss_and_accumulate(&x, &y) {
                Err(Error::NonFinite { .. }) => return Err(diverged(grad_norm)),
                other => other?,
            };
            grad_norm = c
                .params()
                .iter()
                .flat_map(|p| &p.grad)
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(diverged(grad_norm));
            }
            step += 1;
            cfg.optimizer.step(c.params_mut(), step);
        }

        let (train_loss, train_acc) = match evaluate_loss(c, data) {
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    epoch,
                    batch: n.div_ceil(batch),
                    grad_norm,
                })
            }
            other => other?,
        };
        let checkpoint = cfg.eval_epochs.contains(&epoch);
        let val_acc = match eval.validation {
            Some(v) => Some(evaluate_accuracy(c, &v.points, &v.labels)?),
            None => None,
        };
        let dev_due = checkpoint || eval.deviation_every.is_some_and(|k| k > 0 && epoch % k == 0);
        let bayes_dev = match eval.deviation {
            Some(probe) if dev_due => Some(probe.deviation(&*c)?.estimate),
            _ => None,
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_acc,
            p_decoded: c.decoded_p(),
            alpha_decoded: c.decoded_alpha(),
            bayes_dev,
        });
        if checkpoint {
            on_checkpoint(epoch, c)?;
        }
    }

    Ok(RunRecord {
        epochs,
        wall_time: start.elapsed(),
        config_hash: cfg.hash(),
    })
}
