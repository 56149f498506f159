//! Training loops for the classifier and the generator, plus the metric
//! helpers and TSV logs they share.
//!
//! Both loops are deterministic functions of (initial parameters, config,
//! data): batch order comes from a counter-derived RNG per epoch, batches
//! are assembled and reduced in index order, and every update rounds
//! through f32. Any non-finite value surfacing mid-epoch is reported as
//! divergence at that epoch rather than poisoning later state.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::adam::Adam;
use crate::nn::graph::Graph;
use crate::nn::model::{self, ArchTag, ModelParams};
use crate::objective::{self, LossBreakdown, LossConfig, ObjectiveItem};
use crate::seeds::{self, TAG_SHUFFLE};
use crate::volume::Volume;

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// One line of the training metrics log.
#[derive(Debug, Clone, Copy)]
pub struct EpochRow {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_seconds: f64,
}

pub const METRICS_TSV_HEADER: &str = "epoch\ttrain_loss\tval_metric\twall_seconds";

pub fn write_metrics_tsv(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut out = String::from(METRICS_TSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.epoch, r.train_loss, r.val_metric, r.wall_seconds
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-step objective log for generator training.
pub fn write_loss_log(path: &Path, steps: &[(u64, LossBreakdown)]) -> Result<()> {
    let mut out = String::from(LossBreakdown::TSV_HEADER);
    out.push('\n');
    for (step, b) in steps {
        out.push_str(&b.tsv_row(*step));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Area under the ROC curve by the Mann–Whitney statistic: the probability
/// that a positive outscores a negative, counting ties as half.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Usage(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let pos: Vec<f64> = labels
        .iter()
        .zip(scores)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &s)| s)
        .collect();
    let neg: Vec<f64> = labels
        .iter()
        .zip(scores)
        .filter(|(&l, _)| l == 0)
        .map(|(_, &s)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Metric(
            "AUC needs both a positive and a negative example".into(),
        ));
    }
    let mut favorable = 0.0;
    for &p in &pos {
        for &n in &neg {
            favorable += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(favorable / (pos.len() * neg.len()) as f64)
}

fn promote_divergence(e: Error, epoch: u32) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Divergence { epoch, detail },
        other => other,
    }
}

fn shuffled_indices(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, TAG_SHUFFLE, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Result of classifier training: the best-validation snapshot, the final
/// parameters (for warm restarts), and the per-epoch log.
#[derive(Debug)]
pub struct ClassifierTraining {
    pub best: ModelParams,
    pub best_epoch: u32,
    pub best_val_auc: f64,
    pub final_params: ModelParams,
    pub rows: Vec<EpochRow>,
}

fn classifier_val_auc(params: &ModelParams, val: &[(&Volume, u8)]) -> Result<f64> {
    let mut scores = Vec::with_capacity(val.len());
    let mut labels = Vec::with_capacity(val.len());
    for &(volume, label) in val {
        scores.push(model::classifier_probability(params, volume)?);
        labels.push(label);
    }
    auc(&labels, &scores)
}

/// Train a binary volume classifier with batched BCE and Adam; keep the
/// snapshot with the highest validation AUC (earliest epoch wins ties).
pub fn train_classifier(
    init: &ModelParams,
    cfg: &TrainConfig,
    train: &[(&Volume, u8)],
    val: &[(&Volume, u8)],
) -> Result<ClassifierTraining> {
    init.expect_tag(ArchTag::Classifier)?;
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training needs non-empty train and val sets".into()));
    }
    let mut params = init.clone();
    let mut opt = Adam::new(cfg.lr, &params)?;
    let mut rows = Vec::with_capacity(cfg.epochs as usize);
    let mut best: Option<(f64, u32, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = shuffled_indices(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_loss = (|| -> Result<f64> {
                let mut g = Graph::new();
                let staged = model::stage(&mut g, &params, true)?;
                let mut item_losses = Vec::with_capacity(chunk.len());
                for &idx in chunk {
                    let (volume, label) = train[idx];
                    let (d, h, w) = volume.dims();
                    let x = g.leaf(
                        vec![volume.channels(), d, h, w],
                        volume.voxels().iter().map(|&v| v as f64).collect(),
                        false,
                    )?;
                    let logit = model::classifier_logit(&mut g, &staged, x)?;
                    let prob = g.sigmoid(logit)?;
                    let clamped = g.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
                    let inside = if label == 1 {
                        clamped
                    } else {
                        g.affine(clamped, -1.0, 1.0)?
                    };
                    let log = g.log_clamped(inside, f64::MIN_POSITIVE)?;
                    item_losses.push(g.affine(log, -1.0, 0.0)?);
                }
                let batch = g.mean_of(&item_losses)?;
                g.backward(batch)?;
                let grads: Vec<Vec<f64>> = staged.vars.iter().map(|&v| g.grad(v).to_vec()).collect();
                let value = g.scalar_value(batch);
                opt.step(&mut params, &grads)?;
                Ok(value)
            })()
            .map_err(|e| promote_divergence(e, epoch))?;
            loss_sum += batch_loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_auc =
            classifier_val_auc(&params, val).map_err(|e| promote_divergence(e, epoch))?;
        rows.push(EpochRow {
            epoch,
            train_loss,
            val_metric: val_auc,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_auc > *b) {
            let mut snap = params.clone();
            snap.epoch = epoch;
            best = Some((val_auc, epoch, snap));
        }
    }
    let (best_val_auc, best_epoch, best) = best.expect("at least one epoch ran");
    let mut final_params = params;
    final_params.epoch = cfg.epochs;
    Ok(ClassifierTraining {
        best,
        best_epoch,
        best_val_auc,
        final_params,
        rows,
    })
}

/// One line of the generator's per-epoch log. `epoch` 0 describes the
/// untrained generator: the same sweeps run before any update.
#[derive(Debug, Clone, Copy)]
pub struct GenEpochRow {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_total: f64,
    pub val_gap: f64,
    pub wall_seconds: f64,
}

impl GenEpochRow {
    pub fn to_metric_row(self) -> EpochRow {
        EpochRow {
            epoch: self.epoch,
            train_loss: self.train_loss,
            val_metric: self.val_total,
            wall_seconds: self.wall_seconds,
        }
    }
}

#[derive(Debug)]
pub struct GeneratorTraining {
    pub best: ModelParams,
    pub best_epoch: u32,
    pub best_val_total: f64,
    pub final_params: ModelParams,
    pub rows: Vec<GenEpochRow>,
    /// (step, batch breakdown) for every optimizer step, in order.
    pub steps: Vec<(u64, LossBreakdown)>,
    /// Checksum of the frozen classifier, verified unchanged by training.
    pub classifier_checksum: u64,
}

/// Mean objective of the current generator over `volumes`, with the
/// classifier's unperturbed scores supplied from a cache.
fn generator_sweep(
    generator: &ModelParams,
    classifier: &ModelParams,
    loss_cfg: &LossConfig,
    volumes: &[&Volume],
    y_np: &[f64],
) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut gap = 0.0;
    for (volume, &y_np) in volumes.iter().zip(y_np) {
        let mut g = Graph::new();
        let staged_c = model::stage(&mut g, classifier, false)?;
        let staged_g = model::stage(&mut g, generator, false)?;
        let (d, h, w) = volume.dims();
        let x = g.leaf(
            vec![volume.channels(), d, h, w],
            volume.voxels().iter().map(|&v| v as f64).collect(),
            false,
        )?;
        let mask = model::generator_mask_graph(&mut g, &staged_g, x)?;
        let perturbed = g.mul(mask, x)?;
        let logit = model::classifier_logit(&mut g, &staged_c, perturbed)?;
        let prob = g.sigmoid(logit)?;
        let y_p = g.scalar_value(prob);
        let l1: f64 = {
            let pv = g.values(perturbed);
            let xv = g.values(x);
            let sum: f64 = pv.iter().zip(xv).map(|(a, b)| (a - b).abs()).sum();
            match loss_cfg.l1_mode {
                objective::L1Mode::VoxelMean => sum / xv.len() as f64,
                objective::L1Mode::ItemSum => sum,
            }
        };
        let pert = objective::perturbation_loss(y_p, y_np, loss_cfg);
        let ind = objective::indecisive_penalty(y_p, loss_cfg);
        total += loss_cfg.w_perturbation * pert + loss_cfg.w_l1 * l1 + loss_cfg.w_indecisive * ind;
        gap += (y_p - y_np).abs();
    }
    let n = volumes.len() as f64;
    Ok((total / n, gap / n))
}

/// Adversarially train the generator against a frozen classifier. The best
/// snapshot minimizes the validation objective; epoch 0 records the
/// untrained baseline.
pub fn train_generator(
    init: &ModelParams,
    classifier: &ModelParams,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    train: &[&Volume],
    val: &[&Volume],
) -> Result<GeneratorTraining> {
    init.expect_tag(ArchTag::Generator)?;
    classifier.expect_tag(ArchTag::Classifier)?;
    cfg.validate()?;
    loss_cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training needs non-empty train and val sets".into()));
    }
    let checksum_before = classifier.checksum();

    // The classifier never moves, so its scores on unperturbed volumes are
    // constants; compute them once.
    let train_y_np: Vec<f64> = train
        .iter()
        .map(|v| model::classifier_probability(classifier, v))
        .collect::<Result<_>>()?;
    let val_y_np: Vec<f64> = val
        .iter()
        .map(|v| model::classifier_probability(classifier, v))
        .collect::<Result<_>>()?;

    let mut params = init.clone();
    let mut opt = Adam::new(cfg.lr, &params)?;
    let mut rows = Vec::with_capacity(cfg.epochs as usize + 1);
    let mut steps: Vec<(u64, LossBreakdown)> = Vec::new();
    let mut step_counter = 0u64;

    // Epoch 0: the untrained generator, measured with the same sweeps.
    let started = Instant::now();
    let (train0, _) = generator_sweep(&params, classifier, loss_cfg, train, &train_y_np)?;
    let (val0, gap0) = generator_sweep(&params, classifier, loss_cfg, val, &val_y_np)?;
    rows.push(GenEpochRow {
        epoch: 0,
        train_loss: train0,
        val_total: val0,
        val_gap: gap0,
        wall_seconds: started.elapsed().as_secs_f64(),
    });
    let mut snap0 = params.clone();
    snap0.epoch = 0;
    let mut best: (f64, u32, ModelParams) = (val0, 0, snap0);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = shuffled_indices(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let breakdown = (|| -> Result<LossBreakdown> {
                let mut g = Graph::new();
                let staged_c = model::stage(&mut g, classifier, false)?;
                let staged_g = model::stage(&mut g, &params, true)?;
                let mut items = Vec::with_capacity(chunk.len());
                for &idx in chunk {
                    let volume = train[idx];
                    let (d, h, w) = volume.dims();
                    let x = g.leaf(
                        vec![volume.channels(), d, h, w],
                        volume.voxels().iter().map(|&v| v as f64).collect(),
                        false,
                    )?;
                    let mask = model::generator_mask_graph(&mut g, &staged_g, x)?;
                    let perturbed = g.mul(mask, x)?;
                    let logit = model::classifier_logit(&mut g, &staged_c, perturbed)?;
                    let y_p = g.sigmoid(logit)?;
                    let y_np = g.leaf(vec![1], vec![train_y_np[idx]], false)?;
                    items.push(ObjectiveItem {
                        original: x,
                        perturbed,
                        y_p,
                        y_np,
                    });
                }
                let nodes = objective::batch_objective(&mut g, loss_cfg, &items)?;
                g.backward(nodes.total)?;
                let grads: Vec<Vec<f64>> =
                    staged_g.vars.iter().map(|&v| g.grad(v).to_vec()).collect();
                let breakdown = objective::read_breakdown(&g, &nodes);
                opt.step(&mut params, &grads)?;
                Ok(breakdown)
            })()
            .map_err(|e| promote_divergence(e, epoch))?;
            step_counter += 1;
            steps.push((step_counter, breakdown));
            loss_sum += breakdown.total * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_total, val_gap) =
            generator_sweep(&params, classifier, loss_cfg, val, &val_y_np)
                .map_err(|e| promote_divergence(e, epoch))?;
        rows.push(GenEpochRow {
            epoch,
            train_loss,
            val_total,
            val_gap,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if val_total < best.0 {
            let mut snap = params.clone();
            snap.epoch = epoch;
            best = (val_total, epoch, snap);
        }
    }

    if classifier.checksum() != checksum_before {
        return Err(Error::Usage(
            "classifier parameters changed during generator training".into(),
        ));
    }
    let (best_val_total, best_epoch, best) = best;
    let mut final_params = params;
    final_params.epoch = cfg.epochs;
    Ok(GeneratorTraining {
        best,
        best_epoch,
        best_val_total,
        final_params,
        rows,
        steps,
        classifier_checksum: checksum_before,
    })
}
