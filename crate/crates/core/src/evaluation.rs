//! Dice scoring of relevance maps against ground truth, plus the
//! blank-perturbation baseline and dataset-level report generation.
//!
//! Optimal thresholding searches the nested unions of rank bins (the top
//! k ranks for k = 1..B) and reports the best Dice along with the depth
//! k* that achieved it — an oracle-style upper bound that uses the truth
//! mask to pick the grouping. The per-rank table scores each rank bin on
//! its own. Both methods ("ours" and the blank baseline) share the same
//! painting, combination, binning, and scoring code.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::model::{classifier_probability, generator_mask, ArchTag, ModelParams};
use crate::relevance::{
    bin_ranks, combine_sequences, generate_relevance, paint_scores, RelevanceConfig, RelevanceMap,
};
use crate::slic::slic_segment;
use crate::volume::{BinaryMask, Volume};

/// Dice similarity 2|a∩b| / (|a|+|b|); two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "dice over mismatched masks {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut inter = 0usize;
    for (&x, &y) in a.values().iter().zip(b.values()) {
        inter += (x && y) as usize;
    }
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Best Dice over the nested candidates "union of ranks 0..k−1" for
/// k = 1..B, with the smallest depth k* achieving it.
pub fn optimal_threshold_dice(rm: &RelevanceMap, truth: &BinaryMask) -> Result<(f64, usize)> {
    if rm.dims() != truth.dims() {
        return Err(Error::Dimension(format!(
            "relevance map {:?} does not match truth {:?}",
            rm.dims(),
            truth.dims()
        )));
    }
    let b = rm.bin_count();
    let mut bin_size = vec![0usize; b];
    let mut bin_inter = vec![0usize; b];
    for (&r, &t) in rm.ranks().iter().zip(truth.values()) {
        bin_size[r as usize] += 1;
        bin_inter[r as usize] += t as usize;
    }
    let truth_count = truth.count();
    let mut best = f64::MIN;
    let mut best_k = 1;
    let (mut size, mut inter) = (0usize, 0usize);
    for k in 1..=b {
        size += bin_size[k - 1];
        inter += bin_inter[k - 1];
        let d = if size + truth_count == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (size + truth_count) as f64
        };
        if d > best {
            best = d;
            best_k = k;
        }
    }
    Ok((best, best_k))
}

/// Dice of each rank bin on its own against the truth mask.
pub fn ranked_dice_table(rm: &RelevanceMap, truth: &BinaryMask) -> Result<Vec<f64>> {
    let mut table = Vec::with_capacity(rm.bin_count());
    for r in 0..rm.bin_count() {
        table.push(dice(&rm.top_regions(r)?, truth)?);
    }
    Ok(table)
}

/// Baseline relevance: zero each superpixel of each channel in turn and
/// score it by how much the classifier's output moves. Larger change means
/// more relevant, so scores are binned without inversion.
pub fn blank_perturbation_baseline(
    volume: &Volume,
    classifier: &ModelParams,
    cfg: &RelevanceConfig,
) -> Result<RelevanceMap> {
    classifier.expect_tag(ArchTag::Classifier)?;
    cfg.validate()?;
    let y0 = classifier_probability(classifier, volume)?;
    let (d, h, w) = volume.dims();
    let n = d * h * w;
    let mut painted = Vec::with_capacity(volume.channels());
    for c in 0..volume.channels() {
        let spmap = slic_segment(&volume.channel(c)?.minmax_normalize(), &cfg.slic)?;
        let mut scores = Vec::with_capacity(spmap.count());
        for s in 0..spmap.count() {
            let mut voxels = volume.voxels().to_vec();
            let mut touched = false;
            for (v, &l) in spmap.labels().iter().enumerate() {
                if l as usize == s {
                    let idx = c * n + v;
                    touched |= voxels[idx] != 0.0;
                    voxels[idx] = 0.0;
                }
            }
            if !touched {
                // Zeroing an all-zero region is the identity perturbation.
                scores.push(0.0);
                continue;
            }
            let perturbed = Volume::new(volume.channels(), volume.dims(), voxels)?;
            scores.push((y0 - classifier_probability(classifier, &perturbed)?).abs());
        }
        painted.push(paint_scores(&scores, &spmap)?);
    }
    let combined = combine_sequences(&painted)?;
    let bin_cfg = RelevanceConfig {
        low_mask_is_relevant: false,
        ..cfg.clone()
    };
    let mut rm = bin_ranks(&combined, &bin_cfg)?;
    rm.set_per_sequence(painted);
    Ok(rm)
}

/// One evaluation input: a volume with its ground-truth lesion mask.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub case_id: String,
    pub volume: Volume,
    pub truth: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ours,
    Blank,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Blank => "blank",
        }
    }
}

#[derive(Debug, Clone)]
pub enum CaseOutcome {
    Scored {
        dsc_optimal: f64,
        k_star: usize,
        per_rank: Vec<f64>,
    },
    /// The case produced a degenerate (constant) relevance map.
    Failed { reason: String },
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub case_id: String,
    pub method: Method,
    pub outcome: CaseOutcome,
}

/// Per-case rows for both methods plus per-method means.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub bin_count: usize,
    pub rows: Vec<EvalRow>,
}

/// Column means over the successfully scored rows of one method, or None
/// when that method scored nothing.
#[derive(Debug, Clone)]
pub struct MethodMeans {
    pub dsc_optimal: f64,
    pub k_star: f64,
    pub per_rank: Vec<f64>,
    pub scored: usize,
}

impl EvalReport {
    pub fn means(&self, method: Method) -> Option<MethodMeans> {
        let mut scored = 0usize;
        let mut dsc = 0.0;
        let mut k = 0.0;
        let mut ranks = vec![0.0; self.bin_count];
        for row in self.rows.iter().filter(|r| r.method == method) {
            if let CaseOutcome::Scored {
                dsc_optimal,
                k_star,
                per_rank,
            } = &row.outcome
            {
                scored += 1;
                dsc += dsc_optimal;
                k += *k_star as f64;
                for (acc, v) in ranks.iter_mut().zip(per_rank) {
                    *acc += v;
                }
            }
        }
        if scored == 0 {
            return None;
        }
        for r in ranks.iter_mut() {
            *r /= scored as f64;
        }
        Some(MethodMeans {
            dsc_optimal: dsc / scored as f64,
            k_star: k / scored as f64,
            per_rank: ranks,
            scored,
        })
    }

    /// Tab-separated report: one row per case and method, then one MEAN
    /// row per method. Failed cases carry "nan" in every numeric column.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("case_id\tmethod\tdsc_optimal\tk_star");
        for r in 0..self.bin_count {
            let _ = write!(out, "\tdsc_rank_{r}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}\t{}", row.case_id, row.method.as_str());
            match &row.outcome {
                CaseOutcome::Scored {
                    dsc_optimal,
                    k_star,
                    per_rank,
                } => {
                    let _ = write!(out, "\t{dsc_optimal:.6}\t{k_star}");
                    for v in per_rank {
                        let _ = write!(out, "\t{v:.6}");
                    }
                }
                CaseOutcome::Failed { .. } => {
                    for _ in 0..self.bin_count + 2 {
                        out.push_str("\tnan");
                    }
                }
            }
            out.push('\n');
        }
        for method in [Method::Ours, Method::Blank] {
            if !self.rows.iter().any(|r| r.method == method) {
                continue;
            }
            let _ = write!(out, "MEAN\t{}", method.as_str());
            match self.means(method) {
                Some(m) => {
                    let _ = write!(out, "\t{:.6}\t{:.6}", m.dsc_optimal, m.k_star);
                    for v in &m.per_rank {
                        let _ = write!(out, "\t{v:.6}");
                    }
                }
                None => {
                    for _ in 0..self.bin_count + 2 {
                        out.push_str("\tnan");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Space-aligned table of the TSV contents for terminal output.
    pub fn render_table(&self) -> String {
        let tsv = self.to_tsv();
        let rows: Vec<Vec<&str>> = tsv.lines().map(|l| l.split('\t').collect()).collect();
        let columns = rows.first().map_or(0, Vec::len);
        let mut widths = vec![0usize; columns];
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        for row in &rows {
            for (i, (cell, w)) in row.iter().zip(&widths).enumerate() {
                if i > 0 {
                    out.push_str("  ");
                }
                let _ = write!(out, "{cell:<w$}");
            }
            while out.ends_with(' ') {
                out.pop();
            }
            out.push('\n');
        }
        out
    }
}

fn score_map(rm: &RelevanceMap, truth: &BinaryMask) -> Result<CaseOutcome> {
    let (dsc_optimal, k_star) = optimal_threshold_dice(rm, truth)?;
    let per_rank = ranked_dice_table(rm, truth)?;
    Ok(CaseOutcome::Scored {
        dsc_optimal,
        k_star,
        per_rank,
    })
}

/// Run both methods over every case. Degenerate relevance maps become
/// failed rows; any other error aborts. Cases are distributed over
/// `workers` threads; the report order is independent of `workers`.
pub fn evaluate_dataset(
    cases: &[EvalCase],
    generator: &ModelParams,
    classifier: &ModelParams,
    cfg: &RelevanceConfig,
    workers: usize,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Usage("no cases to evaluate".into()));
    }
    if workers == 0 {
        return Err(Error::Usage("workers must be at least 1".into()));
    }
    generator.expect_tag(ArchTag::Generator)?;
    classifier.expect_tag(ArchTag::Classifier)?;
    cfg.validate()?;

    let evaluate_case = |case: &EvalCase| -> Result<(CaseOutcome, CaseOutcome)> {
        let ours = match generator_mask(generator, &case.volume)
            .and_then(|mask| generate_relevance(&case.volume, &mask, cfg))
        {
            Ok(rm) => score_map(&rm, &case.truth)?,
            Err(Error::DegenerateMap(reason)) => CaseOutcome::Failed { reason },
            Err(e) => return Err(e),
        };
        let blank = match blank_perturbation_baseline(&case.volume, classifier, cfg) {
            Ok(rm) => score_map(&rm, &case.truth)?,
            Err(Error::DegenerateMap(reason)) => CaseOutcome::Failed { reason },
            Err(e) => return Err(e),
        };
        Ok((ours, blank))
    };

    let mut results: Vec<Option<Result<(CaseOutcome, CaseOutcome)>>> = Vec::new();
    results.resize_with(cases.len(), || None);
    if workers == 1 {
        for (slot, case) in results.iter_mut().zip(cases) {
            *slot = Some(evaluate_case(case));
        }
    } else {
        let stripes: Vec<Vec<usize>> = (0..workers)
            .map(|w| (w..cases.len()).step_by(workers).collect())
            .collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = stripes
                .iter()
                .map(|stripe| {
                    scope.spawn(|| {
                        stripe
                            .iter()
                            .map(|&i| (i, evaluate_case(&cases[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for handle in handles {
                for (i, res) in handle.join().expect("evaluation worker panicked") {
                    results[i] = Some(res);
                }
            }
        });
    }

    let mut ours_rows = Vec::with_capacity(cases.len());
    let mut blank_rows = Vec::with_capacity(cases.len());
    for (case, slot) in cases.iter().zip(results) {
        let (ours, blank) = slot.expect("every case evaluated")?;
        ours_rows.push(EvalRow {
            case_id: case.case_id.clone(),
            method: Method::Ours,
            outcome: ours,
        });
        blank_rows.push(EvalRow {
            case_id: case.case_id.clone(),
            method: Method::Blank,
            outcome: blank,
        });
    }
    ours_rows.extend(blank_rows);
    Ok(EvalReport {
        bin_count: cfg.bins,
        rows: ours_rows,
    })
}
