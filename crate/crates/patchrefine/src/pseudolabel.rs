//! Patch-optimal thresholding and pseudo-label generation.
//!
//! For each patch of a logit map, the threshold that maximizes IoU against
//! the ground-truth patch is found exactly: the candidate set (the patch's
//! sorted unique values plus one sentinel strictly above the maximum)
//! realizes every binarization achievable under the inclusive `>=` rule, so
//! an incremental sweep over candidates is an exhaustive search. Binarizing
//! each patch at its own optimum yields the pseudo-label mask, which by
//! construction dominates any fixed threshold patch-by-patch.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{binarize, BinaryMask, LogitMap, PatchGrid};

/// Sentinel threshold strictly above any valid score; selects the empty
/// prediction.
pub const EMPTY_SENTINEL: f32 = 2.0;

/// A patch threshold: either a score from the patch or the empty-prediction
/// sentinel (which orders above every score).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchThreshold {
    Score(f32),
    Empty,
}

impl PatchThreshold {
    /// Numeric threshold usable with [`binarize`]; `Empty` maps to
    /// [`EMPTY_SENTINEL`].
    pub fn as_score(self) -> f32 {
        match self {
            PatchThreshold::Score(v) => v,
            PatchThreshold::Empty => EMPTY_SENTINEL,
        }
    }

    pub fn apply(self, patch: &LogitMap) -> BinaryMask {
        binarize(patch, self.as_score())
    }
}

/// Objective maximized when picking a patch threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Foreground IoU with the `empty/empty = 1` convention (default).
    #[default]
    ForegroundIou,
    /// Mean of foreground and background IoU.
    MeanIou,
}

/// Outcome of the per-patch threshold search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchThresholdResult {
    pub patch_index: usize,
    pub threshold: PatchThreshold,
    pub objective_value: f64,
}

/// Sorted unique patch values plus the empty-prediction sentinel.
///
/// Sweeping exactly these thresholds enumerates every achievable
/// binarization of the patch.
pub fn candidate_thresholds(patch: &LogitMap) -> Vec<f32> {
    let mut vals: Vec<f32> = patch.values().iter().copied().collect();
    vals.sort_by(f32::total_cmp);
    vals.dedup();
    vals.push(EMPTY_SENTINEL);
    vals
}

fn objective_of(tp: u64, pred: u64, gt: u64, total: u64, objective: Objective) -> f64 {
    let union = pred + gt - tp;
    let fg = if union == 0 {
        1.0
    } else {
        tp as f64 / union as f64
    };
    match objective {
        Objective::ForegroundIou => fg,
        Objective::MeanIou => {
            // Background IoU from complements: intersection = total - union,
            // union = total - tp.
            let bg_union = total - tp;
            let bg = if bg_union == 0 {
                1.0
            } else {
                (total - union) as f64 / bg_union as f64
            };
            (fg + bg) / 2.0
        }
    }
}

/// Finds the candidate threshold maximizing the objective for one patch.
/// Ties break toward the largest threshold (fewest predicted foreground
/// pixels), with the empty sentinel counting as the largest of all.
pub fn optimal_patch_threshold(
    patch: &LogitMap,
    gt_patch: &BinaryMask,
    objective: Objective,
) -> Result<PatchThresholdResult> {
    if patch.shape() != gt_patch.shape() {
        return Err(Error::ShapeMismatch {
            context: "optimal_patch_threshold",
            expected: patch.shape(),
            got: gt_patch.shape(),
        });
    }
    let mut pixels: Vec<(f32, bool)> = patch
        .values()
        .iter()
        .zip(gt_patch.values().iter())
        .map(|(&v, &g)| (v, g == 1))
        .collect();
    // Descending by score: the prediction set grows as the threshold drops.
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));

    let total = pixels.len() as u64;
    let gt_count = pixels.iter().filter(|&&(_, g)| g).count() as u64;

    let mut best = PatchThresholdResult {
        patch_index: 0,
        threshold: PatchThreshold::Empty,
        objective_value: objective_of(0, 0, gt_count, total, objective),
    };

    let mut tp = 0u64;
    let mut pred = 0u64;
    let mut i = 0usize;
    while i < pixels.len() {
        let v = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == v {
            pred += 1;
            tp += u64::from(pixels[i].1);
            i += 1;
        }
        let obj = objective_of(tp, pred, gt_count, total, objective);
        // Strict improvement only: candidates are visited largest-first, so
        // the first maximum seen is the largest tying threshold.
        if obj > best.objective_value {
            best.threshold = PatchThreshold::Score(v);
            best.objective_value = obj;
        }
    }
    Ok(best)
}

/// Assembles the pseudo-label mask by binarizing each patch at its own
/// optimal threshold.
pub fn generate_pseudo_labels(
    map: &LogitMap,
    gt: &BinaryMask,
    patch_size: usize,
    objective: Objective,
) -> Result<BinaryMask> {
    if map.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            context: "generate_pseudo_labels",
            expected: map.shape(),
            got: gt.shape(),
        });
    }
    let (h, w) = map.shape();
    if h != w {
        return Err(Error::InvalidConfig(format!(
            "pseudo-label generation expects a square map, got {h}x{w}"
        )));
    }
    let grid = PatchGrid::new(h, patch_size)?;
    let map_patches = map.split(grid.grid_side)?;
    let gt_patches = gt.split(grid.grid_side)?;
    let mut out_patches = Vec::with_capacity(grid.patch_count);
    for (idx, (mp, gp)) in map_patches.iter().zip(gt_patches.iter()).enumerate() {
        let mut res = optimal_patch_threshold(mp, gp, objective)?;
        res.patch_index = idx;
        out_patches.push(res.threshold.apply(mp));
    }
    BinaryMask::merge(&out_patches, grid.grid_side)
}

/// Evaluation-time alias of [`generate_pseudo_labels`]: the same
/// construction used as a ground-truth-informed upper-bound baseline.
pub fn per_patch_oracle(
    map: &LogitMap,
    gt: &BinaryMask,
    patch_size: usize,
    objective: Objective,
) -> Result<BinaryMask> {
    generate_pseudo_labels(map, gt, patch_size, objective)
}

/// Single threshold from the pooled candidate set maximizing mean per-image
/// foreground IoU over the pairs. Ties break toward the largest threshold.
pub fn global_best_threshold(pairs: &[(&LogitMap, &BinaryMask)]) -> Result<f32> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("global_best_threshold pair list"));
    }
    for (m, g) in pairs {
        if m.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                context: "global_best_threshold",
                expected: m.shape(),
                got: g.shape(),
            });
        }
    }
    let n_images = pairs.len();
    let mut entries: Vec<(f32, u32, bool)> = Vec::new();
    let mut gt_count = vec![0u64; n_images];
    for (idx, (m, g)) in pairs.iter().enumerate() {
        for (&v, &t) in m.values().iter().zip(g.values().iter()) {
            entries.push((v, idx as u32, t == 1));
        }
        gt_count[idx] = g.foreground_count() as u64;
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));

    let iou_of = |tp: u64, pred: u64, gt: u64| -> f64 {
        let union = pred + gt - tp;
        if union == 0 {
            1.0
        } else {
            tp as f64 / union as f64
        }
    };

    let mut tp = vec![0u64; n_images];
    let mut pred = vec![0u64; n_images];
    let mut iou_now: Vec<f64> = gt_count.iter().map(|&g| iou_of(0, 0, g)).collect();
    let mut sum: f64 = iou_now.iter().sum();

    let mut best_tau = EMPTY_SENTINEL;
    let mut best_obj = sum / n_images as f64;

    let mut i = 0usize;
    while i < entries.len() {
        let v = entries[i].0;
        while i < entries.len() && entries[i].0 == v {
            let (_, img, fg) = entries[i];
            let img = img as usize;
            sum -= iou_now[img];
            pred[img] += 1;
            tp[img] += u64::from(fg);
            iou_now[img] = iou_of(tp[img], pred[img], gt_count[img]);
            sum += iou_now[img];
            i += 1;
        }
        let obj = sum / n_images as f64;
        if obj > best_obj {
            best_obj = obj;
            best_tau = v;
        }
    }
    Ok(best_tau)
}
