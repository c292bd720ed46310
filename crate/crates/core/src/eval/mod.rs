//! Scoring predicted layer stacks against ground truth.
//!
//! Predicted layers are aligned to true layers by an exact minimum-cost
//! assignment over a per-layer distance, then every metric is reported under
//! that single alignment. Visible segmentation quality is measured by the
//! adjusted Rand index between panoptic projections.

mod assignment;

pub use assignment::{solve_assignment, Assignment};

use std::collections::HashMap;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::compositor::{
    binarize, composite, panoptic_project, CompositeImage, LayerImage, LayerStack, PanopticMap,
    DEFAULT_DELTA,
};
use crate::error::{Error, Result};

/// Gray-canvas RGB mean squared error plus `1 - IoU` of the binarized alphas.
pub fn layer_distance(a: &LayerImage, b: &LayerImage) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Structural(format!(
            "layer dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let ca = a.canvased();
    let cb = b.canvased();
    let mse = Zip::from(&ca)
        .and(&cb)
        .fold(0.0, |acc, x, y| acc + (x - y) * (x - y))
        / ca.len() as f64;
    Ok(mse + 1.0 - iou(a, b))
}

fn iou(a: &LayerImage, b: &LayerImage) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    Zip::from(&a.alpha).and(&b.alpha).for_each(|&x, &y| {
        let (x, y) = (binarize(x) == 1.0, binarize(y) == 1.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    });
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Alignment of a predicted stack to the true stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `pred_for_truth[i]` is the predicted slot matched to true slot `i`.
    pub pred_for_truth: Vec<usize>,
    /// Distance of each matched pair, indexed by true slot.
    pub distances: Vec<f64>,
    pub total: f64,
}

/// Exact layer alignment. Background slots are paired by constraint; the
/// foreground slots are assigned by minimum total [`layer_distance`]. The
/// shorter stack is padded with empty layers.
pub fn hungarian_match(pred: &LayerStack, truth: &LayerStack) -> Result<MatchResult> {
    if pred.dims() != truth.dims() {
        return Err(Error::Structural("stacks have different spatial dims".into()));
    }
    let n = pred.len().max(truth.len());
    let pred = pred.clone().padded(n);
    let truth = truth.clone().padded(n);

    let mut cost = vec![vec![0.0; n - 1]; n - 1];
    for (ti, row) in cost.iter_mut().enumerate() {
        for (pj, c) in row.iter_mut().enumerate() {
            *c = layer_distance(&pred.layers[pj + 1], &truth.layers[ti + 1])?;
        }
    }
    let assignment = solve_assignment(&cost)?;

    let mut pred_for_truth = Vec::with_capacity(n);
    pred_for_truth.push(0);
    pred_for_truth.extend(assignment.columns.iter().map(|&j| j + 1));
    let distances = pred_for_truth
        .iter()
        .enumerate()
        .map(|(ti, &pj)| layer_distance(&pred.layers[pj], &truth.layers[ti]))
        .collect::<Result<Vec<_>>>()?;
    let total = distances.iter().sum();
    Ok(MatchResult {
        pred_for_truth,
        distances,
        total,
    })
}

/// Adjusted Rand index between two pixel partitions.
///
/// When the expected index equals the maximum index (both partitions are a
/// single cluster, or every pixel is its own cluster) the chance correction
/// is undefined; the result is 1 if the partitions coincide and 0 otherwise.
pub fn ari(pred: &PanopticMap, truth: &PanopticMap) -> Result<f64> {
    if pred.labels.dim() != truth.labels.dim() {
        return Err(Error::Structural("panoptic maps have different dims".into()));
    }
    let mut joint: HashMap<(u32, u32), u64> = HashMap::new();
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    for (&p, &t) in pred.labels.iter().zip(truth.labels.iter()) {
        *joint.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let pairs = |n: u64| (n as f64) * (n as f64 - 1.0) / 2.0;
    let n = pred.labels.len() as u64;
    let index: f64 = joint.values().map(|&c| pairs(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    let expected = if total > 0.0 { sum_rows * sum_cols / total } else { 0.0 };
    let max_index = 0.5 * (sum_rows + sum_cols);
    if max_index == expected {
        // Identical partitions have one joint cell per row and per column.
        let same = joint.len() == rows.len() && joint.len() == cols.len();
        return Ok(if same { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max_index - expected))
}

/// Scores of one sampled stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub distance: f64,
    pub ari: f64,
    pub composite_mse: f64,
    pub matching: MatchResult,
}

/// Best-of-K and mean-over-K summary for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<RunScore>,
    pub distance_best: f64,
    pub distance_mean: f64,
    pub ari_best: f64,
    pub ari_mean: f64,
    pub composite_mse_best: f64,
    pub composite_mse_mean: f64,
}

/// Scores `K >= 1` sampled stacks for the same input image.
pub fn evaluate(
    pred_runs: &[LayerStack],
    truth: &LayerStack,
    image: &CompositeImage,
) -> Result<EvalReport> {
    if pred_runs.is_empty() {
        return Err(Error::Validation("evaluate needs at least one run".into()));
    }
    let truth_panoptic = panoptic_project(&truth.binarized());
    let runs = pred_runs
        .iter()
        .map(|pred| {
            let matching = hungarian_match(pred, truth)?;
            let ari = ari(&panoptic_project(&pred.binarized()), &truth_panoptic)?;
            let composite_mse = composite(pred, DEFAULT_DELTA)?.mse(image)?;
            Ok(RunScore {
                distance: matching.total,
                ari,
                composite_mse,
                matching,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = runs.len() as f64;
    let min = |f: fn(&RunScore) -> f64| runs.iter().map(f).fold(f64::INFINITY, f64::min);
    let max = |f: fn(&RunScore) -> f64| runs.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let mean = |f: fn(&RunScore) -> f64| runs.iter().map(f).sum::<f64>() / k;
    Ok(EvalReport {
        distance_best: min(|r| r.distance),
        distance_mean: mean(|r| r.distance),
        ari_best: max(|r| r.ari),
        ari_mean: mean(|r| r.ari),
        composite_mse_best: min(|r| r.composite_mse),
        composite_mse_mean: mean(|r| r.composite_mse),
        runs,
    })
}
