//! The generator's composite training objective.
//!
//! Three terms over a batch, each averaged across items and summed:
//!
//! * **perturbation loss** — `ln(1 / max(|y_p − y_np|, ε))`: rewards masks
//!   that move the frozen classifier's output away from its score on the
//!   unperturbed volume; the ε floor keeps the log bounded.
//! * **L1 loss** — mean absolute voxel difference between the perturbed and
//!   original volumes: pushes the mask toward "change nothing".
//! * **indecisive penalty** — `−α(y_p − β)² + δ`: a concave bump that is
//!   largest when the perturbed score sits on the decision boundary `β`,
//!   discouraging masks that merely make the classifier uncertain.
//!
//! Per-term weights exist as tuning knobs but default to 1, making the
//! total a plain sum. The L1 term can optionally aggregate as a per-item
//! sum instead of a voxel mean, which changes its scale relative to the
//! other terms.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, VarId};
use crate::volume::Volume;

/// How the L1 term aggregates voxel differences within one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum L1Mode {
    /// Mean over all voxels (default).
    #[default]
    VoxelMean,
    /// Sum over all voxels.
    ItemSum,
}

impl L1Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            L1Mode::VoxelMean => "voxel-mean",
            L1Mode::ItemSum => "item-sum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "voxel-mean" => Ok(L1Mode::VoxelMean),
            "item-sum" => Ok(L1Mode::ItemSum),
            other => Err(Error::Config(format!(
                "unknown l1 mode {other:?} (expected voxel-mean or item-sum)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub epsilon_gap: f64,
    pub w_perturbation: f64,
    pub w_l1: f64,
    pub w_indecisive: f64,
    pub l1_mode: L1Mode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 4.0,
            beta: 0.5,
            delta: 1.0,
            epsilon_gap: 1e-6,
            w_perturbation: 1.0,
            w_l1: 1.0,
            w_indecisive: 1.0,
            l1_mode: L1Mode::VoxelMean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_gap.is_finite() && self.epsilon_gap > 0.0) {
            return Err(Error::Config(format!(
                "loss.epsilon_gap must be positive, got {}",
                self.epsilon_gap
            )));
        }
        for (name, v) in [
            ("loss.alpha", self.alpha),
            ("loss.beta", self.beta),
            ("loss.delta", self.delta),
            ("loss.w_perturbation", self.w_perturbation),
            ("loss.w_l1", self.w_l1),
            ("loss.w_indecisive", self.w_indecisive),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        for (name, v) in [
            ("loss.w_perturbation", self.w_perturbation),
            ("loss.w_l1", self.w_l1),
            ("loss.w_indecisive", self.w_indecisive),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `ln(1 / max(|y_p − y_np|, ε))` for one item.
pub fn perturbation_loss(y_p: f64, y_np: f64, cfg: &LossConfig) -> f64 {
    -((y_p - y_np).abs().max(cfg.epsilon_gap)).ln()
}

/// `−α(y_p − β)² + δ` for one item.
pub fn indecisive_penalty(y_p: f64, cfg: &LossConfig) -> f64 {
    let d = y_p - cfg.beta;
    -cfg.alpha * d * d + cfg.delta
}

/// Absolute difference between two same-shape volumes, aggregated per `mode`.
pub fn l1_loss(perturbed: &Volume, original: &Volume, mode: L1Mode) -> Result<f64> {
    if perturbed.channels() != original.channels() || perturbed.dims() != original.dims() {
        return Err(Error::Dimension(format!(
            "l1 operands differ: {}x{:?} vs {}x{:?}",
            perturbed.channels(),
            perturbed.dims(),
            original.channels(),
            original.dims()
        )));
    }
    let sum: f64 = perturbed
        .voxels()
        .iter()
        .zip(original.voxels())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(match mode {
        L1Mode::VoxelMean => sum / perturbed.voxels().len() as f64,
        L1Mode::ItemSum => sum,
    })
}

/// Batch-mean values of every objective component.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub y_np: f64,
    pub y_p: f64,
    pub perturbation: f64,
    pub l1: f64,
    pub indecisive: f64,
    pub total: f64,
    /// Mean |y_p − y_np| before the ε floor; informational, not logged.
    pub mean_abs_gap: f64,
}

impl LossBreakdown {
    pub const TSV_HEADER: &'static str = "step\ty_np\ty_p\tperturbation\tl1\tindecisive\ttotal";

    pub fn tsv_row(&self, step: u64) -> String {
        format!(
            "{step}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.y_np, self.y_p, self.perturbation, self.l1, self.indecisive, self.total
        )
    }
}

/// One batch item already present in a graph.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveItem {
    /// Unperturbed input volume.
    pub original: VarId,
    /// Masked volume actually fed to the classifier.
    pub perturbed: VarId,
    /// Classifier probability on `perturbed` (differentiable).
    pub y_p: VarId,
    /// Classifier probability on `original` (held constant).
    pub y_np: VarId,
}

/// Scalar nodes for the batch objective and its components.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub total: VarId,
    pub perturbation: VarId,
    pub l1: VarId,
    pub indecisive: VarId,
    pub y_p_mean: VarId,
    pub y_np_mean: VarId,
    pub gap_mean: VarId,
}

/// Build the batch objective over `items`, returning scalar nodes. The
/// caller runs `backward` on `total`.
pub fn batch_objective(
    g: &mut Graph,
    cfg: &LossConfig,
    items: &[ObjectiveItem],
) -> Result<ObjectiveNodes> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Usage("objective needs at least one item".into()));
    }
    let mut perts = Vec::with_capacity(items.len());
    let mut l1s = Vec::with_capacity(items.len());
    let mut inds = Vec::with_capacity(items.len());
    let mut yps = Vec::with_capacity(items.len());
    let mut ynps = Vec::with_capacity(items.len());
    let mut gaps = Vec::with_capacity(items.len());
    for item in items {
        let diff = g.sub(item.y_p, item.y_np)?;
        let gap = g.abs(diff)?;
        let log_gap = g.log_clamped(gap, cfg.epsilon_gap)?;
        perts.push(g.affine(log_gap, -1.0, 0.0)?);
        gaps.push(gap);

        let centered = g.affine(item.y_p, 1.0, -cfg.beta)?;
        let sq = g.square(centered)?;
        inds.push(g.affine(sq, -cfg.alpha, cfg.delta)?);

        let vox_diff = g.sub(item.perturbed, item.original)?;
        let vox_abs = g.abs(vox_diff)?;
        l1s.push(match cfg.l1_mode {
            L1Mode::VoxelMean => g.mean_all(vox_abs)?,
            L1Mode::ItemSum => g.sum_all(vox_abs)?,
        });

        yps.push(item.y_p);
        ynps.push(item.y_np);
    }
    let perturbation = g.mean_of(&perts)?;
    let l1 = g.mean_of(&l1s)?;
    let indecisive = g.mean_of(&inds)?;
    let y_p_mean = g.mean_of(&yps)?;
    let y_np_mean = g.mean_of(&ynps)?;
    let gap_mean = g.mean_of(&gaps)?;

    let wp = g.affine(perturbation, cfg.w_perturbation, 0.0)?;
    let wl = g.affine(l1, cfg.w_l1, 0.0)?;
    let wi = g.affine(indecisive, cfg.w_indecisive, 0.0)?;
    let partial = g.add(wp, wl)?;
    let total = g.add(partial, wi)?;
    Ok(ObjectiveNodes {
        total,
        perturbation,
        l1,
        indecisive,
        y_p_mean,
        y_np_mean,
        gap_mean,
    })
}

/// Read a [`LossBreakdown`] out of evaluated objective nodes.
pub fn read_breakdown(g: &Graph, nodes: &ObjectiveNodes) -> LossBreakdown {
    LossBreakdown {
        y_np: g.scalar_value(nodes.y_np_mean),
        y_p: g.scalar_value(nodes.y_p_mean),
        perturbation: g.scalar_value(nodes.perturbation),
        l1: g.scalar_value(nodes.l1),
        indecisive: g.scalar_value(nodes.indecisive),
        total: g.scalar_value(nodes.total),
        mean_abs_gap: g.scalar_value(nodes.gap_mean),
    }
}

/// Evaluate the objective for a batch of (volume, mask) pairs against a
/// frozen classifier, without touching any optimizer machinery.
pub fn total_loss(
    batch: &[(&Volume, &crate::volume::PerturbationMask)],
    classifier: &crate::nn::model::ModelParams,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    use crate::nn::model::{self, ArchTag};
    classifier.expect_tag(ArchTag::Classifier)?;
    if batch.is_empty() {
        return Err(Error::Usage("objective needs at least one item".into()));
    }
    let mut g = Graph::new();
    let staged = model::stage(&mut g, classifier, false)?;
    let mut items = Vec::with_capacity(batch.len());
    for (volume, mask) in batch {
        let (d, h, w) = volume.dims();
        let x = g.leaf(
            vec![volume.channels(), d, h, w],
            volume.voxels().iter().map(|&v| v as f64).collect(),
            false,
        )?;
        let mv = mask.as_volume();
        if mv.channels() != volume.channels() || mv.dims() != volume.dims() {
            return Err(Error::Dimension(format!(
                "mask shape {}x{:?} does not match volume {}x{:?}",
                mv.channels(),
                mv.dims(),
                volume.channels(),
                volume.dims()
            )));
        }
        let m = g.leaf(
            vec![mv.channels(), d, h, w],
            mv.voxels().iter().map(|&v| v as f64).collect(),
            false,
        )?;
        let perturbed = g.mul(m, x)?;
        let logit_np = model::classifier_logit(&mut g, &staged, x)?;
        let y_np = g.sigmoid(logit_np)?;
        let logit_p = model::classifier_logit(&mut g, &staged, perturbed)?;
        let y_p = g.sigmoid(logit_p)?;
        items.push(ObjectiveItem {
            original: x,
            perturbed,
            y_p,
            y_np,
        });
    }
    let nodes = batch_objective(&mut g, cfg, &items)?;
    Ok(read_breakdown(&g, &nodes))
}
