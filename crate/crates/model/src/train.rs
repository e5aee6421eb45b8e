//! Mini-batch training with Adam or SGD and per-epoch validation.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cmdrec_core::features::{mask_sequences, EncodedSequence, MaskMode, Scheme};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{ModelError, Result};
use crate::eval::{evaluate, fit_to_model, max_sequence};
use crate::network::{ForwardOptions, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Defaults to CLM for causal backbones and MLM otherwise.
    pub scheme: Option<Scheme>,
    pub p_mask: f64,
    /// Cutoffs evaluated on the validation split each epoch.
    pub eval_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            optimizer: Optimizer::default(),
            clip_norm: Some(1.0),
            seed: 0,
            scheme: None,
            p_mask: 0.15,
            eval_ks: vec![5, 10],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidTrainConfig(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.p_mask) {
            return bad("p_mask must lie in [0, 1]");
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall_5: Option<f64>,
    pub val_ndcg_5: Option<f64>,
    pub val_recall_10: Option<f64>,
    pub val_ndcg_10: Option<f64>,
    pub seconds: f64,
}

enum OptState {
    Sgd,
    Adam { m: Vec<Tensor>, v: Vec<Tensor>, t: i32 },
}

/// Optimizer state over the trainable tensors of one model.
pub struct Stepper {
    lr: f64,
    clip: Option<f64>,
    optimizer: Optimizer,
    state: OptState,
}

impl Stepper {
    pub fn new(model: &Model, config: &TrainConfig) -> Stepper {
        let state = match config.optimizer {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam { .. } => {
                let zeros: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.value.rows, p.value.cols)).collect();
                OptState::Adam { m: zeros.clone(), v: zeros, t: 0 }
            }
        };
        Stepper { lr: config.lr, clip: config.clip_norm, optimizer: config.optimizer, state }
    }

    /// Applies one update; frozen tensors are never touched.
    pub fn step(&mut self, model: &mut Model, mut grads: Vec<Option<Tensor>>) {
        for (i, g) in grads.iter_mut().enumerate() {
            if !model.params.param(i).trainable {
                *g = None;
            }
        }
        if let Some(clip) = self.clip {
            let norm = grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt();
            if norm > clip {
                grads.iter_mut().flatten().for_each(|g| g.scale(clip / norm));
            }
        }
        let lr = self.lr;
        match (&mut self.state, self.optimizer) {
            (OptState::Sgd, _) => {
                for (i, g) in grads.iter().enumerate() {
                    let Some(g) = g else { continue };
                    let p = &mut model.params.param_mut(i).value;
                    p.data.iter_mut().zip(&g.data).for_each(|(w, d)| *w -= lr * d);
                }
            }
            (OptState::Adam { m, v, t }, Optimizer::Adam { beta1, beta2, eps }) => {
                *t += 1;
                let (c1, c2) = (1.0 - beta1.powi(*t), 1.0 - beta2.powi(*t));
                for (i, g) in grads.iter().enumerate() {
                    let Some(g) = g else { continue };
                    let (mi, vi) = (&mut m[i], &mut v[i]);
                    let p = &mut model.params.param_mut(i).value;
                    for k in 0..g.data.len() {
                        let d = g.data[k];
                        mi.data[k] = beta1 * mi.data[k] + (1.0 - beta1) * d;
                        vi.data[k] = beta2 * vi.data[k] + (1.0 - beta2) * d * d;
                        let mhat = mi.data[k] / c1;
                        let vhat = vi.data[k] / c2;
                        p.data[k] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            (OptState::Adam { .. }, Optimizer::Sgd) => unreachable!("state matches optimizer"),
        }
    }
}

/// Optional on-disk record of a run.
pub struct RunDir {
    pub path: PathBuf,
    metrics: File,
}

impl RunDir {
    pub fn create(path: &Path, model: &Model, config: &TrainConfig) -> Result<RunDir> {
        fs::create_dir_all(path)?;
        let snapshot = serde_json::json!({ "backbone": model.config, "lora": model.lora, "train": config });
        fs::write(path.join("config.json"), serde_json::to_string_pretty(&snapshot)?)?;
        let metrics = OpenOptions::new().create(true).write(true).truncate(true).open(path.join("metrics.jsonl"))?;
        Ok(RunDir { path: path.to_path_buf(), metrics })
    }

    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.metrics, "{}", serde_json::to_string(r)?)?;
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path.join("model.ckpt")
    }
}

pub struct TrainData<'a> {
    pub train: &'a [EncodedSequence],
    pub validation: &'a [EncodedSequence],
    /// Stored in the checkpoint when a run directory is used.
    pub vocab_hash: &'a str,
}

/// Trains in place and returns the per-epoch history.
pub fn train(
    model: &mut Model,
    data: &TrainData<'_>,
    config: &TrainConfig,
    mut run_dir: Option<&mut RunDir>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let scheme = config.scheme.unwrap_or_else(|| model.config.default_scheme());
    let keep = max_sequence(model, scheme);
    let train: Vec<EncodedSequence> = data.train.iter().filter(|s| s.len() >= 2).map(|s| fit_to_model(s, keep)).collect();
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut stepper = Stepper::new(model, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<EncodedSequence> = chunk.iter().map(|i| train[*i].clone()).collect();
            let batch_seed = config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64);
            let batch = mask_sequences(&seqs, scheme, MaskMode::Train, config.p_mask, batch_seed)?;
            let n = batch.supervised();
            if n == 0 {
                step += 1;
                continue;
            }
            let (loss, grads, _) = model.loss_and_grads(&batch, &ForwardOptions::train(batch_seed ^ 0xd20f))?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.all_finite()) {
                return Err(ModelError::NonFiniteLoss { batch: step });
            }
            stepper.step(model, grads);
            loss_sum += loss * n as f64;
            weight += n;
            step += 1;
        }
        let report = if data.validation.is_empty() {
            None
        } else {
            Some(evaluate(model, data.validation, scheme, &config.eval_ks)?)
        };
        let at = |f: fn(&cmdrec_core::metrics::MetricsReport, usize) -> Option<f64>, k| report.as_ref().and_then(|r| f(r, k));
        let record = EpochRecord {
            epoch,
            train_loss: if weight > 0 { loss_sum / weight as f64 } else { f64::NAN },
            val_recall_5: at(|r, k| r.recall(k), 5),
            val_ndcg_5: at(|r, k| r.ndcg(k), 5),
            val_recall_10: at(|r, k| r.recall(k), 10),
            val_ndcg_10: at(|r, k| r.ndcg(k), 10),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} recall@5 {:?} ({:.1}s)",
            record.train_loss,
            record.val_recall_5,
            record.seconds
        );
        if let Some(dir) = run_dir.as_deref_mut() {
            dir.record(&record)?;
        }
        on_epoch(&record);
        history.push(record);
    }
    if let Some(dir) = run_dir {
        checkpoint::save(&dir.checkpoint_path(), model, data.vocab_hash)?;
    }
    Ok(history)
}
