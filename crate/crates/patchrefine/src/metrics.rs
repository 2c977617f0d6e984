//! Evaluation metrics: IoU / mIoU, patch-averaged IoU, boundary IoU (mBA)
//! and mean absolute error.
//!
//! All ratios use the `empty / empty = 1` convention so that all-background
//! images and patches are well-defined maximization targets. The boundary
//! band needed by mBA is computed with an exact Euclidean distance transform
//! and cross-checked against a brute-force construction in the tests.

use ndarray::{Array2, s};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, LogitMap};

/// Per-method metric row over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method_name: String,
    pub miou: f64,
    pub patch_miou: f64,
    pub mba: f64,
    pub mae: f64,
    pub sample_count: usize,
}

impl EvalReport {
    pub fn new(
        method_name: impl Into<String>,
        miou: f64,
        patch_miou: f64,
        mba: f64,
        mae: f64,
        sample_count: usize,
    ) -> Result<Self> {
        let fractions = [("miou", miou), ("patch_miou", patch_miou), ("mba", mba)];
        for (name, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} {v} outside [0, 1]")));
            }
        }
        if mae < 0.0 || !mae.is_finite() {
            return Err(Error::InvalidConfig(format!("mae {mae} must be >= 0")));
        }
        if sample_count == 0 {
            return Err(Error::EmptyInput("evaluation sample set"));
        }
        Ok(Self {
            method_name: method_name.into(),
            miou,
            patch_miou,
            mba,
            mae,
            sample_count,
        })
    }
}

fn check_same_shape(a: (usize, usize), b: (usize, usize), context: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            context,
            expected: a,
            got: b,
        });
    }
    Ok(())
}

/// Foreground intersection-over-union of two masks; `1.0` when both are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same_shape(pred.shape(), gt.shape(), "iou")?;
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.values().iter().zip(gt.values().iter()) {
        inter += u64::from(p & g);
        union += u64::from(p | g);
    }
    Ok(ratio_or_one(inter, union))
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Arithmetic mean of per-image [`iou`] values.
pub fn miou<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a BinaryMask, &'a BinaryMask)>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pred, gt) in pairs {
        sum += iou(pred, gt)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("miou pair list"));
    }
    Ok(sum / n as f64)
}

/// Mean of per-patch IoUs over the `patch_size` grid.
///
/// This is the aggregation level at which the per-patch oracle dominates
/// every fixed threshold exactly.
pub fn patch_miou(pred: &BinaryMask, gt: &BinaryMask, patch_size: usize) -> Result<f64> {
    check_same_shape(pred.shape(), gt.shape(), "patch_miou")?;
    let (h, w) = pred.shape();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::NotDivisible {
            side: h,
            patch_size,
        });
    }
    let pv = pred.values();
    let gv = gt.values();
    let mut sum = 0.0;
    let mut count = 0usize;
    for pi in 0..h / patch_size {
        for pj in 0..w / patch_size {
            let win = s![
                pi * patch_size..(pi + 1) * patch_size,
                pj * patch_size..(pj + 1) * patch_size
            ];
            let (mut inter, mut union) = (0u64, 0u64);
            for (&p, &g) in pv.slice(win).iter().zip(gv.slice(win).iter()) {
                inter += u64::from(p & g);
                union += u64::from(p | g);
            }
            sum += ratio_or_one(inter, union);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Contour pixels: foreground pixels 4-adjacent to background or to the
/// image border.
fn contour(mask: &BinaryMask) -> Array2<bool> {
    let v = mask.values();
    let (h, w) = v.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        if v[[r, c]] == 0 {
            return false;
        }
        r == 0
            || r == h - 1
            || c == 0
            || c == w - 1
            || v[[r - 1, c]] == 0
            || v[[r + 1, c]] == 0
            || v[[r, c - 1]] == 0
            || v[[r, c + 1]] == 0
    })
}

/// Exact squared Euclidean distance to the nearest `true` cell
/// (Felzenszwalb–Huttenlocher two-pass transform). Cells are `INFINITY`
/// when there is no source at all.
fn squared_edt(sources: &Array2<bool>) -> Array2<f64> {
    let (h, w) = sources.dim();
    // Pass 1: per-column distance (in rows) to the nearest source.
    let mut coldist = Array2::from_elem((h, w), f64::INFINITY);
    for c in 0..w {
        let mut last: Option<usize> = None;
        for r in 0..h {
            if sources[[r, c]] {
                last = Some(r);
            }
            if let Some(sr) = last {
                coldist[[r, c]] = (r - sr) as f64;
            }
        }
        last = None;
        for r in (0..h).rev() {
            if sources[[r, c]] {
                last = Some(r);
            }
            if let Some(sr) = last {
                coldist[[r, c]] = coldist[[r, c]].min((sr - r) as f64);
            }
        }
    }
    // Pass 2: per-row lower envelope of parabolas over squared column
    // distances.
    let mut out = Array2::from_elem((h, w), f64::INFINITY);
    let mut v = vec![0usize; w]; // parabola sites
    let mut z = vec![0.0f64; w + 1]; // envelope boundaries
    for r in 0..h {
        let f = |c: usize| {
            let d = coldist[[r, c]];
            if d.is_finite() {
                d * d
            } else {
                f64::INFINITY
            }
        };
        let mut k = 0usize;
        let mut have_any = false;
        for q in 0..w {
            let fq = f(q);
            if !fq.is_finite() {
                continue;
            }
            if !have_any {
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                have_any = true;
                continue;
            }
            let mut sct;
            loop {
                let p = v[k];
                sct = (fq + (q * q) as f64 - f(p) - (p * p) as f64)
                    / (2.0 * q as f64 - 2.0 * p as f64);
                if sct <= z[k] {
                    if k == 0 {
                        break;
                    }
                    k -= 1;
                } else {
                    break;
                }
            }
            if sct <= z[k] {
                // New parabola dominates everything so far.
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                k = 0;
            } else {
                k += 1;
                v[k] = q;
                z[k] = sct;
                z[k + 1] = f64::INFINITY;
            }
        }
        if !have_any {
            continue;
        }
        let mut k2 = 0usize;
        for q in 0..w {
            while z[k2 + 1] < q as f64 {
                k2 += 1;
            }
            let p = v[k2];
            let dx = q as f64 - p as f64;
            out[[r, q]] = dx * dx + f(p);
        }
    }
    out
}

/// Foreground pixels whose Euclidean distance to the mask's contour is
/// at most `d`.
pub fn boundary_band(mask: &BinaryMask, d: u32) -> BinaryMask {
    let sources = contour(mask);
    let sq = squared_edt(&sources);
    let dd = (d as f64) * (d as f64);
    let v = mask.values();
    BinaryMask::from_valid(Array2::from_shape_fn(v.dim(), |(r, c)| {
        u8::from(v[[r, c]] == 1 && sq[[r, c]] <= dd)
    }))
}

/// Boundary IoU: IoU of the two boundary bands at distance `d`
/// (`d = 15` is the recommended evaluation setting).
pub fn mba(pred: &BinaryMask, gt: &BinaryMask, d: u32) -> Result<f64> {
    check_same_shape(pred.shape(), gt.shape(), "mba")?;
    iou(&boundary_band(pred, d), &boundary_band(gt, d))
}

/// Mean absolute error between a score map and 0/1 ground truth.
pub fn mae(map: &LogitMap, gt: &BinaryMask) -> Result<f64> {
    check_same_shape(map.shape(), gt.shape(), "mae")?;
    let mut sum = 0.0;
    for (&v, &g) in map.values().iter().zip(gt.values().iter()) {
        sum += (v as f64 - g as f64).abs();
    }
    Ok(sum / (map.height() * map.width()) as f64)
}
