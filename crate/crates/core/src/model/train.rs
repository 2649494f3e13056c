use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::{loss_and_grads, sequence_loss};
use super::params::ModelParams;
use crate::autodiff::{adam_step, AdamConfig, AdamState, Array};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{derive_seed, seeded};
use crate::signature::{SignatureBank, Standardizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            patience: 5,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.adam.lr
            )));
        }
        Ok(())
    }
}

/// One row of the training log. Epoch 0 holds the losses of the initial parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sequence loss.
    pub train_loss: f64,
    pub valid_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_loss,wall_seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.valid_loss, e.wall_seconds
            ));
        }
        out
    }

    pub fn initial_train_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train_loss)
    }

    pub fn min_train_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.train_loss).reduce(f64::min)
    }
}

fn sequences(bank: &SignatureBank, anchors: &[usize]) -> Result<Vec<Vec<Arc<Array>>>> {
    anchors.iter().map(|&t| bank.sequence(t)).collect()
}

/// Mean per-sequence loss; NaN for an empty set.
pub fn mean_loss(params: &ModelParams, seqs: &[Vec<Arc<Array>>], exec: Exec) -> Result<f64> {
    if seqs.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = exec.map(seqs, |s| sequence_loss(params, s));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    let mean = total / seqs.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Numeric(format!("mean loss is {mean}")));
    }
    Ok(mean)
}

/// Train from a fresh initialization drawn from `train.seed`.
pub fn fit(
    model: &ModelConfig,
    standardizer: Standardizer,
    bank: &SignatureBank,
    train_anchors: &[usize],
    valid_anchors: &[usize],
    train: &TrainConfig,
    exec: Exec,
) -> Result<(ModelParams, TrainLog)> {
    let mut params = ModelParams::init(model, derive_seed(train.seed, 0))?;
    params.standardizer = standardizer;
    fit_from(
        params,
        bank,
        train_anchors,
        valid_anchors,
        train,
        exec,
        |_| {},
    )
}

/// Continue training `params`; `on_epoch` sees each log row as it is produced.
pub fn fit_from(
    mut params: ModelParams,
    bank: &SignatureBank,
    train_anchors: &[usize],
    valid_anchors: &[usize],
    train: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelParams, TrainLog)> {
    train.validate()?;
    if train_anchors.is_empty() {
        return Err(Error::Config("no training anchors".into()));
    }
    let train_seqs = sequences(bank, train_anchors)?;
    let valid_seqs = sequences(bank, valid_anchors)?;
    let mut rng = seeded(derive_seed(train.seed, 1));
    let mut adam = AdamState::new(train.adam, params.values());
    let start = Instant::now();

    let monitor = |train_loss: f64, valid_loss: f64| {
        if valid_loss.is_nan() {
            train_loss
        } else {
            valid_loss
        }
    };
    let first = EpochLog {
        epoch: 0,
        train_loss: mean_loss(&params, &train_seqs, exec)?,
        valid_loss: mean_loss(&params, &valid_seqs, exec)?,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    on_epoch(&first);
    let mut best = (
        monitor(first.train_loss, first.valid_loss),
        params.clone(),
        0,
    );
    let mut log = TrainLog {
        epochs: vec![first],
        best_epoch: 0,
    };

    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let results = exec.map(batch, |&i| loss_and_grads(&params, &train_seqs[i]));
            let mut sum: Vec<Option<Array>> = vec![None; params.len()];
            for r in results {
                let (loss, grads) = r.map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
                total += loss;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            adam_step(params.values_mut(), &sum, &mut adam)?;
        }
        let train_loss = total / train_seqs.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss diverged at epoch {epoch}"
            )));
        }
        let row = EpochLog {
            epoch,
            train_loss,
            valid_loss: mean_loss(&params, &valid_seqs, exec)?,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        let score = monitor(row.train_loss, row.valid_loss);
        log.epochs.push(row);
        if score < best.0 {
            best = (score, params.clone(), epoch);
        } else if train.patience > 0 && epoch - best.2 >= train.patience {
            break;
        }
    }
    log.best_epoch = best.2;
    Ok((best.1, log))
}
