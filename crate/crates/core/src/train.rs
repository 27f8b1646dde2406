//! Training loop and full-catalog ranking evaluation.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{make_batches, DatasetSplits, Sample, SplitMode};
use crate::error::{Error, Result};
use crate::model::{loss_and_gradients, model_forward, ModelConfig, ModelParams};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::packing::{apply_mask, pack_batch, ItemSequence, MaskSpec};
use crate::real::Real;
use crate::tensor::Tensor;

/// 1-based rank of `target`; every other item scoring at least as high counts
/// ahead of it.
pub fn rank_of_target<F: Real>(scores: &[F], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != target && s >= t)
        .count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub users: usize,
    pub metrics: Vec<MetricsAtK>,
}

impl MetricReport {
    /// Averages over `ranks`, summed in the given order.
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let metrics = ks
            .iter()
            .map(|&k| {
                let sum = |f: fn(usize, usize) -> f64| ranks.iter().map(|&r| f(r, k)).sum::<f64>() / n;
                MetricsAtK {
                    k,
                    hr: sum(hr_at_k),
                    ndcg: sum(ndcg_at_k),
                    mrr: sum(mrr_at_k),
                }
            })
            .collect();
        MetricReport {
            users: ranks.len(),
            metrics,
        }
    }

    pub fn at(&self, k: usize) -> Option<&MetricsAtK> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn tsv_header(&self) -> String {
        let mut cols = vec!["users".to_string()];
        for m in &self.metrics {
            cols.extend([format!("hr@{}", m.k), format!("ndcg@{}", m.k), format!("mrr@{}", m.k)]);
        }
        cols.join("\t")
    }

    pub fn tsv_row(&self) -> String {
        let mut cols = vec![self.users.to_string()];
        for m in &self.metrics {
            cols.extend([m.hr, m.ndcg, m.mrr].map(|v| format!("{v:.6}")));
        }
        cols.join("\t")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub batch_size: usize,
    /// Remove the user's input items from the candidates (the target stays).
    pub filter_seen: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![10, 20],
            batch_size: 256,
            filter_seen: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config(format!("cutoffs must be a non-empty list of positive integers, got {:?}", self.ks)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("evaluation batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Ranks every user of `mode` with an arbitrary scorer returning `[K, V]`
/// scores for a batch of samples. Batches are scored in parallel and merged in
/// user order.
pub fn evaluate_with<S>(
    splits: &DatasetSplits,
    mode: SplitMode,
    max_len: usize,
    cfg: &EvalConfig,
    score: S,
) -> Result<MetricReport>
where
    S: Fn(&[Sample]) -> Result<Tensor<f32>> + Sync,
{
    cfg.validate()?;
    if mode == SplitMode::Train {
        return Err(Error::Config("evaluation runs on the valid or test split".into()));
    }
    let batches = make_batches(splits, cfg.batch_size, max_len, mode, 0)?;
    let per_batch: Vec<Vec<usize>> = batches
        .par_iter()
        .map(|batch| {
            let scores = score(batch)?;
            let v = scores.cols();
            if scores.rows() != batch.len() {
                return Err(Error::dim("evaluate", format!("{} score rows for {} users", scores.rows(), batch.len())));
            }
            Ok(batch
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let mut row = scores.row(k).to_vec();
                    if cfg.filter_seen {
                        for &i in &s.sequence.item_ids {
                            if i != s.target && i < v {
                                row[i] = f32::NEG_INFINITY;
                            }
                        }
                    }
                    rank_of_target(&row, s.target)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let ranks: Vec<usize> = per_batch.into_iter().flatten().collect();
    Ok(MetricReport::from_ranks(&ranks, &cfg.ks))
}

/// Model logits for a batch, with masking and dropout disabled.
pub fn score_batch(params: &ModelParams, cfg: &ModelConfig, samples: &[Sample]) -> Result<Tensor<f32>> {
    let seqs: Vec<ItemSequence> = samples.iter().map(|s| s.sequence.clone()).collect();
    let batch = pack_batch(&seqs, &params.embeddings)?;
    // the RNG is never drawn from in evaluation mode
    let out = model_forward(&batch, params, cfg, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(out.logits)
}

pub fn evaluate(
    params: &ModelParams,
    splits: &DatasetSplits,
    model_cfg: &ModelConfig,
    eval_cfg: &EvalConfig,
    mode: SplitMode,
) -> Result<MetricReport> {
    evaluate_with(splits, mode, model_cfg.max_len, eval_cfg, |b| score_batch(params, model_cfg, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a better validation score.
    pub patience: usize,
    pub seed: u64,
    /// Cutoff of the validation NDCG used for model selection.
    pub select_k: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 1024,
            epochs: 200,
            patience: 10,
            seed: 2024,
            select_k: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 || self.select_k == 0 {
            return Err(Error::Config("batch_size and select_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean training loss.
    pub loss: f64,
    pub seconds: f64,
    pub valid_ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: Option<MetricReport>,
    /// Epoch after which patience ran out, if it did.
    pub early_stop_epoch: Option<usize>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn best_ndcg(&self, k: usize) -> Option<f64> {
        self.best_valid.as_ref().and_then(|m| m.at(k)).map(|m| m.ndcg)
    }
}

/// One pass over the shuffled training users with fresh masks. Returns the
/// sample-weighted mean loss.
pub fn train_epoch(
    params: &mut ModelParams,
    adam: &mut AdamState,
    splits: &DatasetSplits,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let batches = make_batches(splits, train_cfg.batch_size, model_cfg.max_len, SplitMode::Train, rng.gen())?;
    let adam_cfg = train_cfg.adam();
    let (mut total, mut count) = (0.0f64, 0usize);
    for (b, samples) in batches.iter().enumerate() {
        let seqs: Vec<ItemSequence> = samples.iter().map(|s| s.sequence.clone()).collect();
        let targets: Vec<usize> = samples.iter().map(|s| s.target).collect();
        let packed = pack_batch(&seqs, &params.embeddings)?;
        let spec = MaskSpec {
            rho: model_cfg.rho,
            seed: rng.gen(),
            protect_last: true,
        };
        let masked = apply_mask(&packed, &spec, &params.embeddings, true)?;
        let (loss, grads) = loss_and_gradients(params, &masked, &targets, model_cfg, true, rng)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: b,
                detail: format!("loss is {loss}"),
            });
        }
        if let Some(bad) = grads.iter().flatten().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Training {
                epoch,
                batch: b,
                detail: format!("non-finite gradient in parameter {bad}"),
            });
        }
        let grad_refs: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
        let mut slots: Vec<&mut Tensor<f32>> = params.slots_mut().into_iter().map(|(_, t)| t).collect();
        adam_step(&mut slots, &grad_refs, adam, &adam_cfg)?;
        total += loss as f64 * samples.len() as f64;
        count += samples.len();
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / count as f64)
}

/// Adam over shuffled, freshly masked batches with early stopping on
/// validation NDCG. On return `params` hold the best epoch's weights, which
/// are also written to `best_checkpoint` when given.
pub fn train(
    params: &mut ModelParams,
    splits: &DatasetSplits,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    best_checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let mut eval_cfg = eval_cfg.clone();
    if !eval_cfg.ks.contains(&train_cfg.select_k) {
        eval_cfg.ks.push(train_cfg.select_k);
    }
    eval_cfg.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut adam = AdamState::new(params.slots().into_iter().map(|(_, t)| t));
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid: None,
        early_stop_epoch: None,
    };
    let mut best_params = params.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut stagnant = 0;
    for epoch in 1..=train_cfg.epochs {
        let start = Instant::now();
        let loss = train_epoch(params, &mut adam, splits, model_cfg, train_cfg, epoch, &mut rng)?;
        let valid = evaluate(params, splits, model_cfg, &eval_cfg, SplitMode::Valid)?;
        let score = valid.at(train_cfg.select_k).map_or(0.0, |m| m.ndcg);
        report.epochs.push(EpochRecord {
            epoch,
            loss,
            seconds: start.elapsed().as_secs_f64(),
            valid_ndcg: score,
        });
        log::info!("epoch {epoch}: loss {loss:.5}, valid ndcg@{} {score:.5}", train_cfg.select_k);
        if score > best_score {
            best_score = score;
            best_params = params.clone();
            report.best_epoch = epoch;
            report.best_valid = Some(valid);
            stagnant = 0;
            if let Some(path) = best_checkpoint {
                let named = params.to_named();
                let refs: Vec<(String, &Tensor<f32>)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
                save_checkpoint(path, &refs)?;
            }
        } else {
            stagnant += 1;
            if stagnant >= train_cfg.patience {
                report.early_stop_epoch = Some(epoch);
                break;
            }
        }
    }
    *params = best_params;
    Ok(report)
}
