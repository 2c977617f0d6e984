//! Training objective: ground-truth BCE, pseudo-label focal loss, the
//! squashed-Laplace boundary loss, and their weighted combination
//! `alpha * L_ps + (1 - alpha) * L_gt` summed over the two decoder branches.
//!
//! Every loss uses pixel-mean reduction and comes with a hand-derived
//! analytic gradient with respect to the prediction; the gradients are the
//! ones used to seed network backpropagation and are checked against central
//! finite differences in the tests. Probabilities are clamped to
//! `[1e-7, 1 - 1e-7]` inside every logarithm; the clamp also zeroes the
//! gradient where it is active.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Clamp applied inside every logarithm.
pub const CLAMP_EPS: f64 = 1e-7;

/// Loss weights and ablation flags.
///
/// `alpha` weighs the pseudo-label term against the ground-truth term;
/// `gamma` is the focal exponent. The four flags mirror the loss ablations:
/// disabling one side of the combination makes the other side the whole
/// loss (no `alpha` scaling).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub use_gt_term: bool,
    pub use_ps_term: bool,
    pub use_focal: bool,
    pub use_boundary: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            gamma: 2.0,
            use_gt_term: true,
            use_ps_term: true,
            use_focal: true,
            use_boundary: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "loss.alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "loss.gamma {} must be >= 0",
                self.gamma
            )));
        }
        let ps_active = self.use_ps_term && (self.use_focal || self.use_boundary);
        if !self.use_gt_term && !ps_active {
            return Err(Error::InvalidConfig(
                "at least one loss term must be enabled".into(),
            ));
        }
        Ok(())
    }
}

fn check_shapes<F: Scalar>(
    a: &ArrayView2<'_, F>,
    b: &ArrayView2<'_, F>,
    context: &'static str,
) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context,
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

fn clamp<F: Scalar>(p: F) -> F {
    let eps = F::from_f64c(CLAMP_EPS);
    p.max(eps).min(F::one() - eps)
}

fn clamp_active<F: Scalar>(p: F) -> bool {
    let eps = F::from_f64c(CLAMP_EPS);
    p <= eps || p >= F::one() - eps
}

/// Mean binary cross-entropy; `target` may be hard labels or soft scores.
pub fn bce_loss<F: Scalar>(pred: ArrayView2<'_, F>, target: ArrayView2<'_, F>) -> Result<F> {
    check_shapes(&pred, &target, "bce_loss")?;
    let n = F::from_usize(pred.len()).unwrap();
    let mut sum = F::zero();
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let p = clamp(p);
        sum = sum - t * p.ln() - (F::one() - t) * (F::one() - p).ln();
    }
    Ok(sum / n)
}

/// d(bce_loss)/d(pred); zero where the clamp is active.
pub fn bce_loss_grad<F: Scalar>(
    pred: ArrayView2<'_, F>,
    target: ArrayView2<'_, F>,
) -> Result<Array2<F>> {
    check_shapes(&pred, &target, "bce_loss_grad")?;
    let n = F::from_usize(pred.len()).unwrap();
    let mut out = Array2::zeros(pred.dim());
    for ((&p, &t), g) in pred.iter().zip(target.iter()).zip(out.iter_mut()) {
        if clamp_active(p) {
            continue;
        }
        *g = (-t / p + (F::one() - t) / (F::one() - p)) / n;
    }
    Ok(out)
}

/// Focal loss against 0/1 pseudo-labels:
/// `-(1-c)^gamma * ln(c)` where the pseudo-label is 1 and
/// `-c^gamma * ln(1-c)` where it is 0, averaged over pixels.
/// Reduces exactly to [`bce_loss`] at `gamma = 0`.
pub fn focal_loss<F: Scalar>(
    pred: ArrayView2<'_, F>,
    pseudo: ArrayView2<'_, F>,
    gamma: F,
) -> Result<F> {
    check_shapes(&pred, &pseudo, "focal_loss")?;
    let n = F::from_usize(pred.len()).unwrap();
    let half = F::from_f64c(0.5);
    let mut sum = F::zero();
    for (&p, &t) in pred.iter().zip(pseudo.iter()) {
        let p = clamp(p);
        if t > half {
            sum = sum - (F::one() - p).powf(gamma) * p.ln();
        } else {
            sum = sum - p.powf(gamma) * (F::one() - p).ln();
        }
    }
    Ok(sum / n)
}

/// d(focal_loss)/d(pred); zero where the clamp is active.
pub fn focal_loss_grad<F: Scalar>(
    pred: ArrayView2<'_, F>,
    pseudo: ArrayView2<'_, F>,
    gamma: F,
) -> Result<Array2<F>> {
    check_shapes(&pred, &pseudo, "focal_loss_grad")?;
    let n = F::from_usize(pred.len()).unwrap();
    let half = F::from_f64c(0.5);
    let one = F::one();
    let mut out = Array2::zeros(pred.dim());
    for ((&p, &t), g) in pred.iter().zip(pseudo.iter()).zip(out.iter_mut()) {
        if clamp_active(p) {
            continue;
        }
        let d = if t > half {
            // d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
            let a = if gamma == F::zero() {
                F::zero()
            } else {
                gamma * (one - p).powf(gamma - one) * p.ln()
            };
            a - (one - p).powf(gamma) / p
        } else {
            // d/dp [-p^g ln(1-p)] = -g p^(g-1) ln(1-p) + p^g / (1-p)
            let a = if gamma == F::zero() {
                F::zero()
            } else {
                -gamma * p.powf(gamma - one) * (one - p).ln()
            };
            a + p.powf(gamma) / (one - p)
        };
        *g = d / n;
    }
    Ok(out)
}

/// Cross-correlation with the 3x3 Laplacian kernel
/// `[[0,1,0],[1,-4,1],[0,1,0]]` under zero padding. The kernel is its own
/// adjoint, so this doubles as the backward operator.
fn laplace_conv<F: Scalar>(x: &ArrayView2<'_, F>) -> Array2<F> {
    let (h, w) = x.dim();
    let four = F::from_f64c(4.0);
    let mut z = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut v = -four * x[[r, c]];
            if r > 0 {
                v = v + x[[r - 1, c]];
            }
            if r + 1 < h {
                v = v + x[[r + 1, c]];
            }
            if c > 0 {
                v = v + x[[r, c - 1]];
            }
            if c + 1 < w {
                v = v + x[[r, c + 1]];
            }
            z[[r, c]] = v;
        }
    }
    z
}

/// Squashed Laplace operator `|tanh(conv(map, K))|`; a soft edge detector
/// with values in `[0, tanh(4)]` for unit-range inputs.
pub fn squashed_laplace<F: Scalar>(map: ArrayView2<'_, F>) -> Array2<F> {
    laplace_conv(&map).mapv(|z| z.tanh().abs())
}

/// Boundary loss: BCE between the squashed Laplace maps of prediction and
/// pseudo-labels (the target map acts as soft targets).
pub fn boundary_loss<F: Scalar>(
    pred: ArrayView2<'_, F>,
    pseudo: ArrayView2<'_, F>,
) -> Result<F> {
    check_shapes(&pred, &pseudo, "boundary_loss")?;
    let p = squashed_laplace(pred);
    let t = squashed_laplace(pseudo);
    bce_loss(p.view(), t.view())
}

/// d(boundary_loss)/d(pred), chained through `|tanh|` and the Laplacian.
pub fn boundary_loss_grad<F: Scalar>(
    pred: ArrayView2<'_, F>,
    pseudo: ArrayView2<'_, F>,
) -> Result<Array2<F>> {
    check_shapes(&pred, &pseudo, "boundary_loss_grad")?;
    let z = laplace_conv(&pred);
    let th = z.mapv(|v| v.tanh());
    let p = th.mapv(|v| v.abs());
    let t = squashed_laplace(pseudo);
    let dp = bce_loss_grad(p.view(), t.view())?;
    // d|tanh z|/dz = sign(tanh z) * (1 - tanh^2 z); sign(0) = 0.
    let mut dz = Array2::zeros(pred.dim());
    for ((g, &thv), &dpv) in dz.iter_mut().zip(th.iter()).zip(dp.iter()) {
        let sign = if thv > F::zero() {
            F::one()
        } else if thv < F::zero() {
            -F::one()
        } else {
            F::zero()
        };
        *g = dpv * sign * (F::one() - thv * thv);
    }
    Ok(laplace_conv(&dz.view()))
}

/// One branch's loss per the combination rule. With both terms enabled this
/// is `alpha * L_ps + (1 - alpha) * L_gt` where
/// `L_ps = focal + boundary` (as enabled); with one side disabled the other
/// side is the whole loss.
pub fn branch_loss<F: Scalar>(
    pred: ArrayView2<'_, F>,
    gt: ArrayView2<'_, F>,
    pseudo: ArrayView2<'_, F>,
    cfg: &LossConfig,
) -> Result<F> {
    check_shapes(&pred, &gt, "branch_loss")?;
    check_shapes(&pred, &pseudo, "branch_loss")?;
    cfg.validate()
        .map_err(|e| Error::InvalidConfig(format!("branch_loss: {e}")))?;
    let ps_active = cfg.use_ps_term && (cfg.use_focal || cfg.use_boundary);
    let l_ps = if ps_active {
        let mut l = F::zero();
        if cfg.use_focal {
            l = l + focal_loss(pred, pseudo, F::from_f64c(cfg.gamma))?;
        }
        if cfg.use_boundary {
            l = l + boundary_loss(pred, pseudo)?;
        }
        l
    } else {
        F::zero()
    };
    let l_gt = if cfg.use_gt_term {
        bce_loss(pred, gt)?
    } else {
        F::zero()
    };
    Ok(match (ps_active, cfg.use_gt_term) {
        (true, true) => {
            let a = F::from_f64c(cfg.alpha);
            a * l_ps + (F::one() - a) * l_gt
        }
        (true, false) => l_ps,
        (false, true) => l_gt,
        (false, false) => unreachable!("validated above"),
    })
}

/// d(branch_loss)/d(pred).
pub fn branch_loss_grad<F: Scalar>(
    pred: ArrayView2<'_, F>,
    gt: ArrayView2<'_, F>,
    pseudo: ArrayView2<'_, F>,
    cfg: &LossConfig,
) -> Result<Array2<F>> {
    check_shapes(&pred, &gt, "branch_loss_grad")?;
    check_shapes(&pred, &pseudo, "branch_loss_grad")?;
    cfg.validate()
        .map_err(|e| Error::InvalidConfig(format!("branch_loss_grad: {e}")))?;
    let ps_active = cfg.use_ps_term && (cfg.use_focal || cfg.use_boundary);
    let mut g_ps = Array2::zeros(pred.dim());
    if ps_active {
        if cfg.use_focal {
            g_ps = g_ps + focal_loss_grad(pred, pseudo, F::from_f64c(cfg.gamma))?;
        }
        if cfg.use_boundary {
            g_ps = g_ps + boundary_loss_grad(pred, pseudo)?;
        }
    }
    let g_gt = if cfg.use_gt_term {
        bce_loss_grad(pred, gt)?
    } else {
        Array2::zeros(pred.dim())
    };
    Ok(match (ps_active, cfg.use_gt_term) {
        (true, true) => {
            let a = F::from_f64c(cfg.alpha);
            g_ps.mapv(|v| v * a) + g_gt.mapv(|v| v * (F::one() - a))
        }
        (true, false) => g_ps,
        (false, true) => g_gt,
        (false, false) => unreachable!("validated above"),
    })
}

/// Sum of the two branch losses; both branches share the same pseudo-labels.
pub fn total_loss<F: Scalar>(
    global_pred: ArrayView2<'_, F>,
    local_pred: ArrayView2<'_, F>,
    gt: ArrayView2<'_, F>,
    pseudo: ArrayView2<'_, F>,
    cfg: &LossConfig,
) -> Result<F> {
    Ok(branch_loss(global_pred, gt, pseudo, cfg)? + branch_loss(local_pred, gt, pseudo, cfg)?)
}

/// Gradients of [`total_loss`] with respect to each branch prediction.
pub fn total_loss_grads<F: Scalar>(
    global_pred: ArrayView2<'_, F>,
    local_pred: ArrayView2<'_, F>,
    gt: ArrayView2<'_, F>,
    pseudo: ArrayView2<'_, F>,
    cfg: &LossConfig,
) -> Result<(Array2<F>, Array2<F>)> {
    Ok((
        branch_loss_grad(global_pred, gt, pseudo, cfg)?,
        branch_loss_grad(local_pred, gt, pseudo, cfg)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pred(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        // Away from the clamp so finite differences are smooth.
        Array2::from_shape_fn((h, w), |_| rng.gen_range(0.01..0.99))
    }

    fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| f64::from(rng.gen_bool(0.5)))
    }

    /// Central finite differences of `f` w.r.t. every pixel of `pred`.
    fn finite_diff(
        f: &dyn Fn(ArrayView2<'_, f64>) -> f64,
        pred: &Array2<f64>,
        h: f64,
    ) -> Array2<f64> {
        let mut out = Array2::zeros(pred.dim());
        let mut work = pred.clone();
        for idx in 0..pred.len() {
            let (r, c) = (idx / pred.ncols(), idx % pred.ncols());
            let orig = work[[r, c]];
            work[[r, c]] = orig + h;
            let plus = f(work.view());
            work[[r, c]] = orig - h;
            let minus = f(work.view());
            work[[r, c]] = orig;
            out[[r, c]] = (plus - minus) / (2.0 * h);
        }
        out
    }

    fn max_rel_err(analytic: &Array2<f64>, fd: &Array2<f64>) -> f64 {
        analytic
            .iter()
            .zip(fd.iter())
            .map(|(&a, &f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn bce_perfect_prediction_is_nearly_zero() {
        let t = array![[0.0f64, 1.0], [1.0, 0.0]];
        let l = bce_loss(t.view(), t.view()).unwrap();
        assert!(l >= 0.0 && l <= 2e-7, "{l}");
    }

    #[test]
    fn bce_half_prediction_is_ln2() {
        let p = Array2::from_elem((4, 4), 0.5f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_labels(&mut rng, 4, 4);
        let l = bce_loss(p.view(), t.view()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_per_pixel_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_pred(&mut rng, 4, 4);
        let t = random_labels(&mut rng, 4, 4);
        let l = bce_loss(p.view(), t.view()).unwrap();
        let mut sum = 0.0;
        for (&pi, &ti) in p.iter().zip(t.iter()) {
            let pc = pi.clamp(1e-7, 1.0 - 1e-7);
            sum += -(ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln());
        }
        assert!((l - sum / 16.0).abs() < 1e-12);
    }

    #[test]
    fn focal_gamma0_equals_bce_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_pred(&mut rng, 8, 8);
        let t = random_labels(&mut rng, 8, 8);
        assert_eq!(
            focal_loss(p.view(), t.view(), 0.0).unwrap(),
            bce_loss(p.view(), t.view()).unwrap()
        );
        assert_eq!(
            focal_loss_grad(p.view(), t.view(), 0.0).unwrap(),
            bce_loss_grad(p.view(), t.view()).unwrap()
        );
    }

    #[test]
    fn focal_half_prediction_analytic_value() {
        let p = Array2::from_elem((4, 4), 0.5f64);
        let ones = Array2::from_elem((4, 4), 1.0f64);
        let l = focal_loss(p.view(), ones.view(), 2.0).unwrap();
        assert!((l - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_per_pixel_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_pred(&mut rng, 4, 4);
        let t = random_labels(&mut rng, 4, 4);
        let l = focal_loss(p.view(), t.view(), 2.0).unwrap();
        let mut sum = 0.0;
        for (&pi, &ti) in p.iter().zip(t.iter()) {
            let pc = pi.clamp(1e-7, 1.0 - 1e-7);
            if ti == 1.0 {
                sum += -(1.0 - pc).powi(2) * pc.ln();
            } else {
                sum += -pc.powi(2) * (1.0 - pc).ln();
            }
        }
        assert!((l - sum / 16.0).abs() < 1e-12);
    }

    #[test]
    fn squashed_laplace_of_constant_is_zero() {
        // 0.25 is exactly representable, so the interior cancellation is
        // exact; with zero padding the borders see the constant's own
        // deficit.
        let m = Array2::from_elem((5, 5), 0.25f64);
        let s = squashed_laplace(m.view());
        assert_eq!(s[[2, 2]], 0.0);
        assert!(s[[0, 2]] > 0.0);
    }

    #[test]
    fn squashed_laplace_center_impulse() {
        let mut m = Array2::zeros((3, 3));
        m[[1, 1]] = 1.0f64;
        let s = squashed_laplace(m.view());
        assert!((s[[1, 1]] - 4.0f64.tanh()).abs() < 1e-6); // |tanh(-4)|
        assert!((s[[0, 1]] - 1.0f64.tanh()).abs() < 1e-6);
        assert!((s[[1, 0]] - 1.0f64.tanh()).abs() < 1e-6);
        assert_eq!(s[[0, 0]], 0.0);
    }

    #[test]
    fn squashed_laplace_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Array2::from_shape_fn((5, 5), |_| rng.gen::<f64>());
        let s = squashed_laplace(m.view());
        let kernel = [(0i64, 1i64, 1.0), (0, -1, 1.0), (1, 0, 1.0), (-1, 0, 1.0), (0, 0, -4.0)];
        for r in 0..5i64 {
            for c in 0..5i64 {
                let mut z = 0.0;
                for &(dr, dc, k) in &kernel {
                    let (rr, cc) = (r + dr, c + dc);
                    if (0..5).contains(&rr) && (0..5).contains(&cc) {
                        z += k * m[[rr as usize, cc as usize]];
                    }
                }
                assert!((s[[r as usize, c as usize]] - z.tanh().abs()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn squashed_laplace_bounded_by_tanh4() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Array2::from_shape_fn((8, 8), |_| rng.gen::<f64>());
        let s = squashed_laplace(m.view());
        for &v in s.iter() {
            assert!((0.0..=4.0f64.tanh()).contains(&v));
        }
    }

    #[test]
    fn boundary_loss_of_equal_constants_is_negligible() {
        // Constant-zero maps squash to zero everywhere (zero padding
        // included), so only the log clamp contributes.
        let m = Array2::from_elem((4, 4), 0.0f64);
        let l = boundary_loss(m.view(), m.view()).unwrap();
        assert!(l < 1e-6, "{l}");
        // Equal nonzero constants still match at the borders; the loss is
        // the self-entropy of the shared squashed map, which is an upper
        // bound attained at equality.
        let c = Array2::from_elem((4, 4), 0.25f64);
        let lc = boundary_loss(c.view(), c.view()).unwrap();
        let s = squashed_laplace(c.view());
        assert_eq!(lc, bce_loss(s.view(), s.view()).unwrap());
    }

    #[test]
    fn boundary_loss_of_identical_masks_is_self_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_labels(&mut rng, 4, 4);
        let l = boundary_loss(t.view(), t.view()).unwrap();
        let s = squashed_laplace(t.view());
        let self_entropy = bce_loss(s.view(), s.view()).unwrap();
        assert_eq!(l, self_entropy);
        // BCE(q, q) is the entropy of q, an upper bound for BCE(p, q) at p=q.
        assert!(l >= 0.0);
    }

    #[test]
    fn boundary_loss_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_pred(&mut rng, 4, 4);
        let t = random_labels(&mut rng, 4, 4);
        let l = boundary_loss(p.view(), t.view()).unwrap();
        let sp = squashed_laplace(p.view());
        let st = squashed_laplace(t.view());
        let mut sum = 0.0;
        for (&a, &b) in sp.iter().zip(st.iter()) {
            let a = a.clamp(1e-7, 1.0 - 1e-7);
            sum += -(b * a.ln() + (1.0 - b) * (1.0 - a).ln());
        }
        assert!((l - sum / 16.0).abs() < 1e-10);
    }

    #[test]
    fn branch_loss_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_pred(&mut rng, 4, 4);
        let gt = random_labels(&mut rng, 4, 4);
        let ps = random_labels(&mut rng, 4, 4);

        let mut cfg = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let l = branch_loss(p.view(), gt.view(), ps.view(), &cfg).unwrap();
        assert!((l - bce_loss(p.view(), gt.view()).unwrap()).abs() < 1e-15);

        cfg.alpha = 1.0;
        let l = branch_loss(p.view(), gt.view(), ps.view(), &cfg).unwrap();
        let expect = focal_loss(p.view(), ps.view(), 2.0).unwrap()
            + boundary_loss(p.view(), ps.view()).unwrap();
        assert!((l - expect).abs() < 1e-15);

        cfg.alpha = 0.7;
        let l = branch_loss(p.view(), gt.view(), ps.view(), &cfg).unwrap();
        let combo = 0.7 * expect + 0.3 * bce_loss(p.view(), gt.view()).unwrap();
        assert!((l - combo).abs() < 1e-12);
    }

    #[test]
    fn branch_loss_ablation_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_pred(&mut rng, 4, 4);
        let gt = random_labels(&mut rng, 4, 4);
        let ps = random_labels(&mut rng, 4, 4);

        let gt_only = LossConfig {
            use_ps_term: false,
            ..LossConfig::default()
        };
        let l = branch_loss(p.view(), gt.view(), ps.view(), &gt_only).unwrap();
        assert_eq!(l, bce_loss(p.view(), gt.view()).unwrap());

        let ps_only = LossConfig {
            use_gt_term: false,
            ..LossConfig::default()
        };
        let l = branch_loss(p.view(), gt.view(), ps.view(), &ps_only).unwrap();
        let expect = focal_loss(p.view(), ps.view(), 2.0).unwrap()
            + boundary_loss(p.view(), ps.view()).unwrap();
        assert_eq!(l, expect);

        let nothing = LossConfig {
            use_gt_term: false,
            use_ps_term: false,
            ..LossConfig::default()
        };
        assert!(branch_loss(p.view(), gt.view(), ps.view(), &nothing).is_err());
    }

    #[test]
    fn total_loss_is_branch_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_pred(&mut rng, 4, 4);
        let l = random_pred(&mut rng, 4, 4);
        let gt = random_labels(&mut rng, 4, 4);
        let ps = random_labels(&mut rng, 4, 4);
        let cfg = LossConfig::default();

        let total = total_loss(g.view(), l.view(), gt.view(), ps.view(), &cfg).unwrap();
        let expect = branch_loss(g.view(), gt.view(), ps.view(), &cfg).unwrap()
            + branch_loss(l.view(), gt.view(), ps.view(), &cfg).unwrap();
        assert!((total - expect).abs() < 1e-12);

        let twice = total_loss(g.view(), g.view(), gt.view(), ps.view(), &cfg).unwrap();
        let one = branch_loss(g.view(), gt.view(), ps.view(), &cfg).unwrap();
        assert!((twice - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_pred(&mut rng, 8, 8);
        let gt = random_labels(&mut rng, 8, 8);
        let ps = random_labels(&mut rng, 8, 8);
        let h = 1e-5;

        let cases: Vec<(&str, Box<dyn Fn(ArrayView2<'_, f64>) -> f64>, Array2<f64>)> = vec![
            (
                "bce",
                Box::new(|x| bce_loss(x, gt.view()).unwrap()),
                bce_loss_grad(p.view(), gt.view()).unwrap(),
            ),
            (
                "focal g=0",
                Box::new(|x| focal_loss(x, ps.view(), 0.0).unwrap()),
                focal_loss_grad(p.view(), ps.view(), 0.0).unwrap(),
            ),
            (
                "focal g=2",
                Box::new(|x| focal_loss(x, ps.view(), 2.0).unwrap()),
                focal_loss_grad(p.view(), ps.view(), 2.0).unwrap(),
            ),
            (
                "boundary",
                Box::new(|x| boundary_loss(x, ps.view()).unwrap()),
                boundary_loss_grad(p.view(), ps.view()).unwrap(),
            ),
            (
                "branch",
                Box::new(|x| {
                    branch_loss(x, gt.view(), ps.view(), &LossConfig::default()).unwrap()
                }),
                branch_loss_grad(p.view(), gt.view(), ps.view(), &LossConfig::default()).unwrap(),
            ),
        ];
        for (name, f, analytic) in cases {
            let fd = finite_diff(f.as_ref(), &p, h);
            let err = max_rel_err(&analytic, &fd);
            assert!(err <= 1e-4, "{name}: max rel err {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn losses_nonnegative_and_flip_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_pred(&mut rng, 6, 6);
            let gt = random_labels(&mut rng, 6, 6);
            let ps = random_labels(&mut rng, 6, 6);
            let cfg = LossConfig::default();

            let l = branch_loss(p.view(), gt.view(), ps.view(), &cfg).unwrap();
            prop_assert!(l >= 0.0);

            // Flipping all inputs together leaves every loss unchanged: the
            // Laplacian kernel is symmetric under horizontal/vertical flips.
            let flip = |a: &Array2<f64>| a.slice(ndarray::s![..;-1, ..;-1]).to_owned();
            let (pf, gf, sf) = (flip(&p), flip(&gt), flip(&ps));
            let lf = branch_loss(pf.view(), gf.view(), sf.view(), &cfg).unwrap();
            prop_assert!((l - lf).abs() < 1e-12);

            let b = boundary_loss(p.view(), ps.view()).unwrap();
            let bf = boundary_loss(pf.view(), sf.view()).unwrap();
            prop_assert!((b - bf).abs() < 1e-12);
        }
    }
}
