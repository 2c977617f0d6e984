//! Array operations with explicit forward and backward passes.
//!
//! Tensors are `(batch, channels, height, width)`. Convolution goes through
//! im2col + GEMM; every backward pass writes disjoint outputs or reduces in
//! a fixed order, so results are identical regardless of thread schedule.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};

use crate::scalar::Scalar;

pub fn conv_out_side(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Fills the column block for output rows `[r0, r1)` of one sample:
/// `col[(ci*KH+ki)*KW+kj, (oi-r0)*OW+oj] = x[ci, oi*s+ki-pad, oj*s+kj-pad]`
/// with zeros where the receptive field leaves the image.
fn im2col_rows<F: Scalar>(
    x: &ArrayView3<'_, F>,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    ow: usize,
    r0: usize,
    r1: usize,
    col: &mut ndarray::ArrayViewMut2<'_, F>,
) {
    let (c_in, h, w) = x.dim();
    let (kh, kw) = kernel;
    col.fill(F::zero());
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut col_row = col.row_mut(row);
                for oi in r0..r1 {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let ii = ii as usize;
                    let base = (oi - r0) * ow;
                    if stride == 1 {
                        let oj0 = pad.saturating_sub(kj);
                        let oj1 = (w + pad - kj).min(ow);
                        if oj0 >= oj1 {
                            continue;
                        }
                        let jj0 = oj0 + kj - pad;
                        let jj1 = jj0 + (oj1 - oj0);
                        col_row
                            .slice_mut(s![base + oj0..base + oj1])
                            .assign(&x.slice(s![ci, ii, jj0..jj1]));
                    } else {
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            col_row[base + oj] = x[[ci, ii, jj as usize]];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: scatter-adds the column block back into the
/// input gradient rows.
fn col2im_rows_add<F: Scalar>(
    col: &ndarray::ArrayView2<'_, F>,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    ow: usize,
    r0: usize,
    r1: usize,
    dx: &mut ndarray::ArrayViewMut3<'_, F>,
) {
    let (c_in, h, w) = dx.dim();
    let (kh, kw) = kernel;
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let col_row = col.row(row);
                for oi in r0..r1 {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let ii = ii as usize;
                    let base = (oi - r0) * ow;
                    if stride == 1 {
                        let oj0 = pad.saturating_sub(kj);
                        let oj1 = (w + pad - kj).min(ow);
                        if oj0 >= oj1 {
                            continue;
                        }
                        let jj0 = oj0 + kj - pad;
                        let jj1 = jj0 + (oj1 - oj0);
                        let mut dst = dx.slice_mut(s![ci, ii, jj0..jj1]);
                        dst.zip_mut_with(&col_row.slice(s![base + oj0..base + oj1]), |d, &v| {
                            *d = *d + v
                        });
                    } else {
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            dx[[ci, ii, jj as usize]] =
                                dx[[ci, ii, jj as usize]] + col_row[base + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Column budget per GEMM task (~2 MB of f32 scratch).
fn conv_cols_budget(k_dim: usize) -> usize {
    const TARGET_ELEMS: usize = 512 * 1024;
    (TARGET_ELEMS / k_dim.max(1)).max(256)
}

/// Work decomposition: either whole-sample groups (small planes) or row
/// ranges within one sample (large planes). Every task owns a disjoint set
/// of output rows.
#[derive(Clone, Copy)]
struct ConvTask {
    n0: usize,
    n1: usize,
    r0: usize,
    r1: usize,
}

fn conv_tasks(n: usize, oh: usize, ow: usize, k_dim: usize) -> Vec<ConvTask> {
    let budget = conv_cols_budget(k_dim);
    let plane = oh * ow;
    if plane <= budget {
        let group = (budget / plane).max(1);
        (0..n)
            .step_by(group)
            .map(|n0| ConvTask {
                n0,
                n1: (n0 + group).min(n),
                r0: 0,
                r1: oh,
            })
            .collect()
    } else {
        let chunk = (budget / ow).clamp(1, oh);
        (0..n)
            .flat_map(|ni| {
                (0..oh).step_by(chunk).map(move |r0| ConvTask {
                    n0: ni,
                    n1: ni + 1,
                    r0,
                    r1: (r0 + chunk).min(oh),
                })
            })
            .collect()
    }
}

/// Raw pointer wrapper for provably disjoint parallel writes.
struct SendPtr<F>(*mut F);
unsafe impl<F> Send for SendPtr<F> {}
unsafe impl<F> Sync for SendPtr<F> {}

impl<F> SendPtr<F> {
    fn get(&self) -> *mut F {
        self.0
    }
}

/// Fused three-tap row update: `y[j] += w0*x[j-1] + w1*x[j] + w2*x[j+1]`
/// with the out-of-range taps dropped at the row ends.
#[inline]
fn fma3<F: Scalar>(y: &mut [F], x: &[F], w0: F, w1: F, w2: F) {
    let wd = y.len();
    if wd == 0 {
        return;
    }
    if wd == 1 {
        y[0] = y[0] + w1 * x[0];
        return;
    }
    y[0] = y[0] + w1 * x[0] + w2 * x[1];
    for j in 1..wd - 1 {
        y[j] = y[j] + w0 * x[j - 1] + w1 * x[j] + w2 * x[j + 1];
    }
    y[wd - 1] = y[wd - 1] + w0 * x[wd - 2] + w1 * x[wd - 1];
}

/// Deterministic vector dot product: eight fixed lanes summed in a fixed
/// order, so the result is independent of call context.
#[inline]
fn dot_lanes<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut lanes = [F::zero(); 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (ca, cb) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
        for l in 0..8 {
            lanes[l] = lanes[l] + ca[l] * cb[l];
        }
    }
    let mut tail = F::zero();
    for j in chunks * 8..a.len() {
        tail = tail + a[j] * b[j];
    }
    let mut acc = tail;
    for l in 0..8 {
        acc = acc + lanes[l];
    }
    acc
}

/// Row strips sized so the live x/y rows stay cache-resident.
fn direct_row_chunk(c_in: usize, c_out: usize, w: usize, h: usize) -> usize {
    const TARGET_ELEMS: usize = 64 * 1024;
    (TARGET_ELEMS / ((c_in + c_out) * w).max(1)).clamp(1, h.max(1))
}

/// Direct 3x3 stride-1 convolution; avoids the 9x im2col inflation that
/// dominates at small channel counts.
fn conv3x3_direct_fwd<F: Scalar>(
    x: &ArrayView4<'_, F>,
    w: &ArrayView4<'_, F>,
    b: Option<&ArrayView1<'_, F>>,
) -> Array4<F> {
    let (n, c_in, h, wd) = x.dim();
    let c_out = w.dim().0;
    let x_own;
    let x_flat: &[F] = match x.as_slice() {
        Some(s) => s,
        None => {
            x_own = x.as_standard_layout().to_owned();
            x_own.as_slice().expect("standard copy is contiguous")
        }
    };
    let w_flat = w.as_slice().expect("weights contiguous");
    let chunk = direct_row_chunk(c_in, c_out, wd, h);
    let tasks: Vec<(usize, usize, usize)> = (0..n)
        .flat_map(|ni| (0..h).step_by(chunk).map(move |r0| (ni, r0, (r0 + chunk).min(h))))
        .collect();

    let mut y = Array4::zeros((n, c_out, h, wd));
    let y_ptr: SendPtr<F> = SendPtr(y.as_mut_ptr());
    tasks.par_iter().for_each(|&(ni, r0, r1)| {
        // This task exclusively owns y rows [r0, r1) of sample ni.
        unsafe {
            for co in 0..c_out {
                let bias = b.map_or(F::zero(), |b| b[co]);
                for r in r0..r1 {
                    let off = ((ni * c_out + co) * h + r) * wd;
                    let row = std::slice::from_raw_parts_mut(y_ptr.get().add(off), wd);
                    for v in row.iter_mut() {
                        *v = bias;
                    }
                }
            }
            for ci in 0..c_in {
                for ki in 0..3usize {
                    for r in r0..r1 {
                        let ii = r as isize + ki as isize - 1;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let x_off = ((ni * c_in + ci) * h + ii as usize) * wd;
                        let x_row = &x_flat[x_off..x_off + wd];
                        for co in 0..c_out {
                            let w_off = ((co * c_in + ci) * 3 + ki) * 3;
                            let y_off = ((ni * c_out + co) * h + r) * wd;
                            let y_row = std::slice::from_raw_parts_mut(y_ptr.get().add(y_off), wd);
                            fma3(y_row, x_row, w_flat[w_off], w_flat[w_off + 1], w_flat[w_off + 2]);
                        }
                    }
                }
            }
        }
    });
    y
}

/// Direct 3x3 stride-1 backward: input gradient by kernel-flipped taps,
/// weight gradient by per-strip shifted dots reduced in task order.
fn conv3x3_direct_bwd<F: Scalar>(
    x: &ArrayView4<'_, F>,
    w: &ArrayView4<'_, F>,
    dy: &ArrayView4<'_, F>,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (n, c_in, h, wd) = x.dim();
    let c_out = w.dim().0;
    let x_own;
    let x_flat: &[F] = match x.as_slice() {
        Some(s) => s,
        None => {
            x_own = x.as_standard_layout().to_owned();
            x_own.as_slice().expect("standard copy is contiguous")
        }
    };
    let dy_own;
    let dy_flat: &[F] = match dy.as_slice() {
        Some(s) => s,
        None => {
            dy_own = dy.as_standard_layout().to_owned();
            dy_own.as_slice().expect("standard copy is contiguous")
        }
    };
    let w_flat = w.as_slice().expect("weights contiguous");
    let chunk = direct_row_chunk(c_in, c_out, wd, h);
    let tasks: Vec<(usize, usize, usize)> = (0..n)
        .flat_map(|ni| (0..h).step_by(chunk).map(move |r0| (ni, r0, (r0 + chunk).min(h))))
        .collect();

    let mut dx = Array4::zeros((n, c_in, h, wd));
    let dx_ptr: SendPtr<F> = SendPtr(dx.as_mut_ptr());
    let kk = c_out * c_in * 9;
    let per_task: Vec<Vec<F>> = tasks
        .par_iter()
        .map(|&(ni, r0, r1)| {
            // dx rows [r0, r1) of sample ni are owned exclusively; dy/x rows
            // outside the strip are read-only.
            let mut dw_local = vec![F::zero(); kk];
            unsafe {
                for ci in 0..c_in {
                    for ki in 0..3usize {
                        // dx[rx] pulls dy row rx - ki + 1 with flipped taps.
                        for rx in r0..r1 {
                            let ry = rx as isize - ki as isize + 1;
                            if ry < 0 || ry >= h as isize {
                                continue;
                            }
                            for co in 0..c_out {
                                let dy_off = ((ni * c_out + co) * h + ry as usize) * wd;
                                let dy_row = &dy_flat[dy_off..dy_off + wd];
                                let dx_off = ((ni * c_in + ci) * h + rx) * wd;
                                let dx_row =
                                    std::slice::from_raw_parts_mut(dx_ptr.get().add(dx_off), wd);
                                let w_off = ((co * c_in + ci) * 3 + ki) * 3;
                                fma3(
                                    dx_row,
                                    dy_row,
                                    w_flat[w_off + 2],
                                    w_flat[w_off + 1],
                                    w_flat[w_off],
                                );
                            }
                        }
                        // dW over the dy rows this task owns.
                        for r in r0..r1 {
                            let ii = r as isize + ki as isize - 1;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let x_off = ((ni * c_in + ci) * h + ii as usize) * wd;
                            let x_row = &x_flat[x_off..x_off + wd];
                            for co in 0..c_out {
                                let dy_off = ((ni * c_out + co) * h + r) * wd;
                                let dy_row = &dy_flat[dy_off..dy_off + wd];
                                let w_off = ((co * c_in + ci) * 3 + ki) * 3;
                                // kj = 0, 1, 2 with the valid column windows.
                                dw_local[w_off] =
                                    dw_local[w_off] + dot_lanes(&dy_row[1..], &x_row[..wd - 1]);
                                dw_local[w_off + 1] =
                                    dw_local[w_off + 1] + dot_lanes(dy_row, x_row);
                                dw_local[w_off + 2] =
                                    dw_local[w_off + 2] + dot_lanes(&dy_row[..wd - 1], &x_row[1..]);
                            }
                        }
                    }
                }
            }
            dw_local
        })
        .collect();

    let mut dw_flat = vec![F::zero(); kk];
    for task_dw in per_task {
        for (acc, v) in dw_flat.iter_mut().zip(task_dw) {
            *acc = *acc + v;
        }
    }
    let dw = Array4::from_shape_vec((c_out, c_in, 3, 3), dw_flat).unwrap();

    let mut db = Array1::zeros(c_out);
    for co in 0..c_out {
        db[co] = dy.slice(s![.., co, .., ..]).sum();
    }
    (dx, dw, db)
}

/// 2-D convolution (cross-correlation) with zero padding.
///
/// im2col and GEMM are fused over tasks with per-worker scratch, so the
/// column matrix never materializes in full and stays cache-resident. Small
/// patch-samples are grouped into one GEMM, so convolving many patches costs
/// about the same as one large map of equal pixel count. Tasks write
/// disjoint output rows, which keeps results independent of the thread
/// schedule.
pub fn conv2d_fwd<F: Scalar>(
    x: &ArrayView4<'_, F>,
    w: &ArrayView4<'_, F>,
    b: Option<&ArrayView1<'_, F>>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, wc_in, kh, kw) = w.dim();
    assert_eq!(c_in, wc_in, "conv2d channel mismatch");
    // Direct taps win on wide rows; narrow patch rows amortize better
    // through the grouped im2col GEMM path.
    if kh == 3 && kw == 3 && stride == 1 && pad == 1 && wd >= 32 {
        return conv3x3_direct_fwd(x, w, b);
    }
    let oh = conv_out_side(h, kh, stride, pad);
    let ow = conv_out_side(wd, kw, stride, pad);
    let k_dim = c_in * kh * kw;
    let w_mat = w.to_shape((c_out, k_dim)).unwrap();
    let tasks = conv_tasks(n, oh, ow, k_dim);
    let max_cols = tasks
        .iter()
        .map(|t| (t.n1 - t.n0) * (t.r1 - t.r0) * ow)
        .max()
        .unwrap_or(0);

    let mut y = Array4::zeros((n, c_out, oh, ow));
    let y_ptr: SendPtr<F> = SendPtr(y.as_mut_ptr());
    tasks.par_iter().for_each_init(
        || {
            (
                Array2::<F>::zeros((k_dim, max_cols)),
                Array2::<F>::zeros((c_out, max_cols)),
            )
        },
        |(col, y_chunk), &ConvTask { n0, n1, r0, r1 }| {
            let rows = r1 - r0;
            let sample_cols = rows * ow;
            let cols = (n1 - n0) * sample_cols;
            let mut col_trim = col.slice_mut(s![.., ..cols]);
            for ni in n0..n1 {
                let x_n = x.index_axis(Axis(0), ni);
                let mut block = col_trim
                    .slice_mut(s![.., (ni - n0) * sample_cols..(ni - n0 + 1) * sample_cols]);
                im2col_rows(&x_n, (kh, kw), stride, pad, ow, r0, r1, &mut block);
            }
            let mut y_trim = y_chunk.slice_mut(s![.., ..cols]);
            ndarray::linalg::general_mat_mul(
                F::one(),
                &w_mat.view(),
                &col_trim.view(),
                F::zero(),
                &mut y_trim,
            );
            // Each task owns rows [r0, r1) of samples [n0, n1) across all
            // output channels; no other task touches them.
            unsafe {
                for ni in n0..n1 {
                    for co in 0..c_out {
                        let bias = b.map_or(F::zero(), |b| b[co]);
                        let dst_off = ((ni * c_out + co) * oh + r0) * ow;
                        let dst =
                            std::slice::from_raw_parts_mut(y_ptr.get().add(dst_off), sample_cols);
                        let src_row = y_trim.row(co);
                        let src = src_row.as_slice().expect("contiguous scratch row");
                        let s0 = (ni - n0) * sample_cols;
                        for i in 0..sample_cols {
                            dst[i] = src[s0 + i] + bias;
                        }
                    }
                }
            }
        },
    );
    y
}

/// Gradients of [`conv2d_fwd`] w.r.t. input, weights, and bias.
///
/// Tasks parallelize over disjoint sample groups (or, for large planes, over
/// samples with sequential row chunks inside); per-task weight gradients
/// reduce in task order, so results do not depend on the thread schedule.
pub fn conv2d_bwd<F: Scalar>(
    x: &ArrayView4<'_, F>,
    w: &ArrayView4<'_, F>,
    stride: usize,
    pad: usize,
    dy: &ArrayView4<'_, F>,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    if kh == 3 && kw == 3 && stride == 1 && pad == 1 && wd >= 32 {
        return conv3x3_direct_bwd(x, w, dy);
    }
    let k_dim = c_in * kh * kw;
    let w_mat = w.to_shape((c_out, k_dim)).unwrap();
    let budget = conv_cols_budget(k_dim);
    let plane = oh * ow;
    let group = (budget / plane.max(1)).max(1);
    let chunk = (budget / ow).clamp(1, oh);

    let mut dx = Array4::zeros((n, c_in, h, wd));
    // Sample groups own disjoint dx slabs; rows within a sample are
    // processed sequentially (the col2im halo overlaps adjacent row chunks).
    let groups: Vec<(usize, usize)> = (0..n)
        .step_by(group)
        .map(|n0| (n0, (n0 + group).min(n)))
        .collect();
    let slab = c_in * h * wd;
    let dx_ptr: SendPtr<F> = SendPtr(dx.as_mut_ptr());
    let per_group: Vec<Array2<F>> = groups
        .par_iter()
        .map(|&(n0, n1)| {
            let mut dw_g = Array2::<F>::zeros((c_out, k_dim));
            let mut col = Array2::<F>::zeros((k_dim, chunk * ow));
            let mut dy_chunk = Array2::<F>::zeros((c_out, chunk * ow));
            let mut dcol = Array2::<F>::zeros((k_dim, chunk * ow));
            for ni in n0..n1 {
                let x_n = x.index_axis(Axis(0), ni);
                let dy_n = dy.index_axis(Axis(0), ni);
                // This group exclusively owns dx samples [n0, n1).
                let mut dx_n = unsafe {
                    ndarray::ArrayViewMut3::from_shape_ptr(
                        (c_in, h, wd),
                        dx_ptr.get().add(ni * slab),
                    )
                };
                let mut r0 = 0;
                while r0 < oh {
                    let r1 = (r0 + chunk).min(oh);
                    let rows = r1 - r0;
                    let mut col_trim = col.slice_mut(s![.., ..rows * ow]);
                    im2col_rows(&x_n, (kh, kw), stride, pad, ow, r0, r1, &mut col_trim);
                    let mut dy_trim = dy_chunk.slice_mut(s![.., ..rows * ow]);
                    for co in 0..c_out {
                        dy_trim.row_mut(co).assign(
                            &dy_n.slice(s![co, r0..r1, ..]).to_shape(rows * ow).unwrap(),
                        );
                    }
                    // dW += dY_chunk . col_chunk^T (both blocks cache-resident).
                    ndarray::linalg::general_mat_mul(
                        F::one(),
                        &dy_trim.view(),
                        &col_trim.view().t(),
                        F::one(),
                        &mut dw_g,
                    );
                    // dcol = W^T . dY_chunk, scattered back into dx rows.
                    let mut dcol_trim = dcol.slice_mut(s![.., ..rows * ow]);
                    ndarray::linalg::general_mat_mul(
                        F::one(),
                        &w_mat.t(),
                        &dy_trim.view(),
                        F::zero(),
                        &mut dcol_trim,
                    );
                    col2im_rows_add(
                        &dcol_trim.view(),
                        (kh, kw),
                        stride,
                        pad,
                        ow,
                        r0,
                        r1,
                        &mut dx_n,
                    );
                    r0 = r1;
                }
            }
            dw_g
        })
        .collect();

    let mut dw_mat = Array2::zeros((c_out, k_dim));
    for dw_g in per_group {
        dw_mat = dw_mat + dw_g;
    }
    let dw = dw_mat.into_shape_with_order((c_out, c_in, kh, kw)).unwrap();

    let mut db = Array1::zeros(c_out);
    for co in 0..c_out {
        db[co] = dy.slice(s![.., co, .., ..]).sum();
    }
    (dx, dw, db)
}

pub fn relu_fwd<F: Scalar>(x: &ArrayView4<'_, F>) -> Array4<F> {
    x.mapv(|v| v.max(F::zero()))
}

pub fn relu_bwd<F: Scalar>(x: &ArrayView4<'_, F>, dy: &ArrayView4<'_, F>) -> Array4<F> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(x, |g, &v| {
        if v <= F::zero() {
            *g = F::zero();
        }
    });
    dx
}

pub fn sigmoid_fwd<F: Scalar>(x: &ArrayView4<'_, F>) -> Array4<F> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// Takes the forward *output* `y = sigmoid(x)`.
pub fn sigmoid_bwd<F: Scalar>(y: &ArrayView4<'_, F>, dy: &ArrayView4<'_, F>) -> Array4<F> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(y, |g, &v| *g = *g * v * (F::one() - v));
    dx
}

/// Axis sampling table for half-pixel-center bilinear interpolation.
fn bilinear_axis<F: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, F)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5)
                .clamp(0.0, in_len as f64 - 1.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, F::from_f64c(src - i0 as f64))
        })
        .collect()
}

pub fn upsample_bilinear_fwd<F: Scalar>(
    x: &ArrayView4<'_, F>,
    out_h: usize,
    out_w: usize,
) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let rows = bilinear_axis::<F>(h, out_h);
    let cols = bilinear_axis::<F>(w, out_w);
    let one = F::one();
    let mut y = Array4::zeros((n, c, out_h, out_w));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
                let row0 = plane.slice(s![r0, ..]);
                let row1 = plane.slice(s![r1, ..]);
                let row0 = row0.as_slice().expect("contiguous row");
                let row1 = row1.as_slice().expect("contiguous row");
                let mut out_row = y.slice_mut(s![ni, ci, oi, ..]);
                let out_row = out_row.as_slice_mut().expect("contiguous row");
                for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                    let top = row0[c0] * (one - fc) + row0[c1] * fc;
                    let bot = row1[c0] * (one - fc) + row1[c1] * fc;
                    out_row[oj] = top * (one - fr) + bot * fr;
                }
            }
        }
    }
    y
}

pub fn upsample_bilinear_bwd<F: Scalar>(
    in_shape: (usize, usize, usize, usize),
    dy: &ArrayView4<'_, F>,
) -> Array4<F> {
    let (n, c, h, w) = in_shape;
    let (_, _, out_h, out_w) = dy.dim();
    let rows = bilinear_axis::<F>(h, out_h);
    let cols = bilinear_axis::<F>(w, out_w);
    let one = F::one();
    let mut dx = Array4::zeros(in_shape);
    for ni in 0..n {
        for ci in 0..c {
            for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
                let dy_row = dy.slice(s![ni, ci, oi, ..]);
                let dy_row = dy_row.as_slice().expect("contiguous row");
                // Two destination rows per output row; split borrows when
                // they differ.
                if r0 == r1 {
                    let mut drow = dx.slice_mut(s![ni, ci, r0, ..]);
                    let drow = drow.as_slice_mut().expect("contiguous row");
                    for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let g = dy_row[oj];
                        drow[c0] = drow[c0] + g * (one - fc);
                        drow[c1] = drow[c1] + g * fc;
                    }
                } else {
                    let (mut top, mut bot) = dx
                        .slice_mut(s![ni, ci, .., ..])
                        .split_at(ndarray::Axis(0), r1);
                    let mut t = top.slice_mut(s![r0, ..]);
                    let t = t.as_slice_mut().expect("contiguous row");
                    let mut b = bot.slice_mut(s![0, ..]);
                    let b = b.as_slice_mut().expect("contiguous row");
                    for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let g = dy_row[oj];
                        let g0 = g * (one - fr);
                        let g1 = g * fr;
                        t[c0] = t[c0] + g0 * (one - fc);
                        t[c1] = t[c1] + g0 * fc;
                        b[c0] = b[c0] + g1 * (one - fc);
                        b[c1] = b[c1] + g1 * fc;
                    }
                }
            }
        }
    }
    dx
}

/// Adaptive average pooling to `size x size`; the input side must be
/// divisible by `size` so the windows are uniform.
pub fn avg_pool_to_fwd<F: Scalar>(x: &ArrayView4<'_, F>, size: usize) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    assert!(h % size == 0 && w % size == 0, "pool size must divide input");
    let (wh, ww) = (h / size, w / size);
    let scale = F::from_usize(wh * ww).unwrap();
    let mut y = Array4::zeros((n, c, size, size));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..size {
                for oj in 0..size {
                    let win = x.slice(s![ni, ci, oi * wh..(oi + 1) * wh, oj * ww..(oj + 1) * ww]);
                    y[[ni, ci, oi, oj]] = win.sum() / scale;
                }
            }
        }
    }
    y
}

pub fn avg_pool_to_bwd<F: Scalar>(
    in_shape: (usize, usize, usize, usize),
    dy: &ArrayView4<'_, F>,
) -> Array4<F> {
    let (n, c, h, w) = in_shape;
    let (_, _, size, _) = dy.dim();
    let (wh, ww) = (h / size, w / size);
    let scale = F::from_usize(wh * ww).unwrap();
    let mut dx = Array4::zeros(in_shape);
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..size {
                for oj in 0..size {
                    let g = dy[[ni, ci, oi, oj]] / scale;
                    dx.slice_mut(s![ni, ci, oi * wh..(oi + 1) * wh, oj * ww..(oj + 1) * ww])
                        .mapv_inplace(|v| v + g);
                }
            }
        }
    }
    dx
}

/// Channel concatenation (always standard layout).
pub fn concat_c_fwd<F: Scalar>(xs: &[ArrayView4<'_, F>]) -> Array4<F> {
    let (n, _, h, w) = xs[0].dim();
    let c_total: usize = xs.iter().map(|x| x.dim().1).sum();
    let mut y = Array4::zeros((n, c_total, h, w));
    let mut off = 0;
    for x in xs {
        let c = x.dim().1;
        y.slice_mut(s![.., off..off + c, .., ..]).assign(x);
        off += c;
    }
    y
}

pub fn concat_c_bwd<F: Scalar>(channels: &[usize], dy: &ArrayView4<'_, F>) -> Vec<Array4<F>> {
    let mut out = Vec::with_capacity(channels.len());
    let mut offset = 0;
    for &c in channels {
        out.push(dy.slice(s![.., offset..offset + c, .., ..]).to_owned());
        offset += c;
    }
    out
}

/// Broadcast multiply by a 1-channel gate: `y[n,c] = x[n,c] * a[n,0]`.
pub fn mul_gate_fwd<F: Scalar>(x: &ArrayView4<'_, F>, a: &ArrayView4<'_, F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    assert_eq!(a.dim(), (n, 1, h, w), "gate must be 1-channel");
    let mut y = x.to_owned();
    for ci in 0..c {
        let mut plane = y.slice_mut(s![.., ci, .., ..]);
        plane.zip_mut_with(&a.slice(s![.., 0, .., ..]), |v, &g| *v = *v * g);
    }
    y
}

pub fn mul_gate_bwd<F: Scalar>(
    x: &ArrayView4<'_, F>,
    a: &ArrayView4<'_, F>,
    dy: &ArrayView4<'_, F>,
) -> (Array4<F>, Array4<F>) {
    let (n, c, h, w) = x.dim();
    let mut dx = dy.to_owned();
    for ci in 0..c {
        let mut plane = dx.slice_mut(s![.., ci, .., ..]);
        plane.zip_mut_with(&a.slice(s![.., 0, .., ..]), |v, &g| *v = *v * g);
    }
    let mut da = Array4::zeros((n, 1, h, w));
    for ci in 0..c {
        let prod = &dy.slice(s![.., ci, .., ..]) * &x.slice(s![.., ci, .., ..]);
        da.slice_mut(s![.., 0, .., ..]).zip_mut_with(&prod, |v, &p| *v = *v + p);
    }
    (dx, da)
}

/// Rearranges `(N, C, H, W)` into `(N*g^2, C, H/g, W/g)`: each sample's
/// `g x g` patch grid becomes a run of `g^2` consecutive batch entries in
/// row-major patch order.
pub fn space_to_batch_fwd<F: Scalar>(x: &ArrayView4<'_, F>, grid: usize) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    assert!(h % grid == 0 && w % grid == 0, "grid must divide spatial dims");
    let (ph, pw) = (h / grid, w / grid);
    let mut y = Array4::zeros((n * grid * grid, c, ph, pw));
    let owned;
    let src: &[F] = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.as_standard_layout().to_owned();
            owned.as_slice().expect("standard copy is contiguous")
        }
    };
    let dst = y.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..h {
                let (pi, i) = (r / ph, r % ph);
                let src_row = ((ni * c + ci) * h + r) * w;
                for pj in 0..grid {
                    let sample = ni * grid * grid + pi * grid + pj;
                    let dst_off = ((sample * c + ci) * ph + i) * pw;
                    dst[dst_off..dst_off + pw]
                        .copy_from_slice(&src[src_row + pj * pw..src_row + (pj + 1) * pw]);
                }
            }
        }
    }
    y
}

/// Exact inverse of [`space_to_batch_fwd`].
pub fn batch_to_space_fwd<F: Scalar>(x: &ArrayView4<'_, F>, grid: usize) -> Array4<F> {
    let (nk, c, ph, pw) = x.dim();
    assert!(nk % (grid * grid) == 0, "batch not a multiple of grid^2");
    let n = nk / (grid * grid);
    let (h, w) = (ph * grid, pw * grid);
    let mut y = Array4::zeros((n, c, h, w));
    let owned;
    let src: &[F] = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.as_standard_layout().to_owned();
            owned.as_slice().expect("standard copy is contiguous")
        }
    };
    let dst = y.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..h {
                let (pi, i) = (r / ph, r % ph);
                let dst_row = ((ni * c + ci) * h + r) * w;
                for pj in 0..grid {
                    let sample = ni * grid * grid + pi * grid + pj;
                    let src_off = ((sample * c + ci) * ph + i) * pw;
                    dst[dst_row + pj * pw..dst_row + (pj + 1) * pw]
                        .copy_from_slice(&src[src_off..src_off + pw]);
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks an op's input gradient against central finite differences of
    /// the weighted output sum `L = sum(y * r)`.
    fn check_input_grad(
        fwd: &dyn Fn(&ArrayView4<'_, f64>) -> Array4<f64>,
        bwd: &dyn Fn(&ArrayView4<'_, f64>, &ArrayView4<'_, f64>) -> Array4<f64>,
        x: &Array4<f64>,
        rng: &mut ChaCha8Rng,
    ) {
        let y = fwd(&x.view());
        let r = Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0));
        let analytic = bwd(&x.view(), &r.view());
        let h = 1e-6;
        let mut work = x.clone();
        for idx in 0..x.len() {
            let nd = x
                .view()
                .into_shape_with_order(IxDyn(&[x.len()]))
                .unwrap();
            let _ = nd;
            let flat_idx = idx;
            let (orig, pos) = {
                let slice = work.as_slice_mut().unwrap();
                (slice[flat_idx], flat_idx)
            };
            {
                let slice = work.as_slice_mut().unwrap();
                slice[pos] = orig + h;
            }
            let lp = (&fwd(&work.view()) * &r).sum();
            {
                let slice = work.as_slice_mut().unwrap();
                slice[pos] = orig - h;
            }
            let lm = (&fwd(&work.view()) * &r).sum();
            {
                let slice = work.as_slice_mut().unwrap();
                slice[pos] = orig;
            }
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[flat_idx];
            assert!(
                (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1.0),
                "idx {flat_idx}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn4(&mut rng, (2, 3, 5, 5));
        let w = Array4::from_shape_fn((4, 3, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let y = conv2d_fwd(&x.view(), &w.view(), Some(&b.view()), 1, 1);
        assert_eq!(y.dim(), (2, 4, 5, 5));
        for n in 0..2 {
            for co in 0..4 {
                for oi in 0..5i64 {
                    for oj in 0..5i64 {
                        let mut acc = b[co];
                        for ci in 0..3 {
                            for ki in 0..3i64 {
                                for kj in 0..3i64 {
                                    let (ii, jj) = (oi + ki - 1, oj + kj - 1);
                                    if (0..5).contains(&ii) && (0..5).contains(&jj) {
                                        acc += w[[co, ci, ki as usize, kj as usize]]
                                            * x[[n, ci, ii as usize, jj as usize]];
                                    }
                                }
                            }
                        }
                        let got = y[[n, co, oi as usize, oj as usize]];
                        assert!((got - acc).abs() < 1e-10, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_stride2_shape_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn4(&mut rng, (1, 2, 6, 6));
        let w = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let y = conv2d_fwd(&x.view(), &w.view(), None, 2, 1);
        assert_eq!(y.dim(), (1, 3, 3, 3));
        // Spot check one output against the direct sum.
        let (oi, oj, co) = (1usize, 2usize, 1usize);
        let mut acc = 0.0;
        for ci in 0..2 {
            for ki in 0..3i64 {
                for kj in 0..3i64 {
                    let ii = (oi * 2) as i64 + ki - 1;
                    let jj = (oj * 2) as i64 + kj - 1;
                    if (0..6).contains(&ii) && (0..6).contains(&jj) {
                        acc += w[[co, ci, ki as usize, kj as usize]]
                            * x[[0, ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
        assert!((y[[0, co, oi, oj]] - acc).abs() < 1e-10);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn4(&mut rng, (2, 2, 4, 4));
        let w = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen_range(-0.5..0.5));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
        let y = conv2d_fwd(&x.view(), &w.view(), Some(&b.view()), 1, 1);
        let r = Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0));
        let (dx, dw, db) = conv2d_bwd(&x.view(), &w.view(), 1, 1, &r.view());

        let h = 1e-6;
        let loss = |x_: &Array4<f64>, w_: &Array4<f64>, b_: &Array1<f64>| -> f64 {
            (&conv2d_fwd(&x_.view(), &w_.view(), Some(&b_.view()), 1, 1) * &r).sum()
        };
        // Input gradient.
        let mut xw = x.clone();
        for i in 0..x.len() {
            let sl = xw.as_slice_mut().unwrap();
            let orig = sl[i];
            sl[i] = orig + h;
            let lp = loss(&xw, &w, &b);
            xw.as_slice_mut().unwrap()[i] = orig - h;
            let lm = loss(&xw, &w, &b);
            xw.as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = dx.as_slice().unwrap()[i];
            assert!((a - fd).abs() < 1e-5 * a.abs().max(fd.abs()).max(1.0));
        }
        // Weight gradient.
        let mut ww = w.clone();
        for i in 0..w.len() {
            let sl = ww.as_slice_mut().unwrap();
            let orig = sl[i];
            sl[i] = orig + h;
            let lp = loss(&x, &ww, &b);
            ww.as_slice_mut().unwrap()[i] = orig - h;
            let lm = loss(&x, &ww, &b);
            ww.as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = dw.as_slice().unwrap()[i];
            assert!((a - fd).abs() < 1e-5 * a.abs().max(fd.abs()).max(1.0));
        }
        // Bias gradient.
        for i in 0..b.len() {
            let mut bw = b.clone();
            bw[i] += h;
            let lp = loss(&x, &w, &bw);
            bw[i] -= 2.0 * h;
            let lm = loss(&x, &w, &bw);
            let fd = (lp - lm) / (2.0 * h);
            assert!((db[i] - fd).abs() < 1e-5 * db[i].abs().max(fd.abs()).max(1.0));
        }
    }

    #[test]
    fn elementwise_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn4(&mut rng, (2, 3, 4, 4));

        // relu: keep inputs away from the kink at 0.
        let xr = x.mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        check_input_grad(
            &|x| relu_fwd(x),
            &|x, dy| relu_bwd(x, dy),
            &xr,
            &mut rng,
        );

        check_input_grad(
            &|x| sigmoid_fwd(x),
            &|x, dy| sigmoid_bwd(&sigmoid_fwd(x).view(), dy),
            &x,
            &mut rng,
        );
    }

    #[test]
    fn upsample_gradients_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn4(&mut rng, (1, 2, 3, 3));
        let y = upsample_bilinear_fwd(&x.view(), 6, 6);
        assert_eq!(y.dim(), (1, 2, 6, 6));
        check_input_grad(
            &|x| upsample_bilinear_fwd(x, 6, 6),
            &|x, dy| upsample_bilinear_bwd(x.dim(), dy),
            &x,
            &mut rng,
        );
        // Constant input upsamples to the same constant.
        let c = Array4::from_elem((1, 1, 4, 4), 0.3f64);
        let u = upsample_bilinear_fwd(&c.view(), 8, 8);
        for &v in u.iter() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_gradients_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn4(&mut rng, (1, 2, 4, 4));
        let y = avg_pool_to_fwd(&x.view(), 2);
        assert_eq!(y.dim(), (1, 2, 2, 2));
        let manual = x.slice(s![0, 0, 0..2, 0..2]).mean().unwrap();
        assert!((y[[0, 0, 0, 0]] - manual).abs() < 1e-12);
        check_input_grad(
            &|x| avg_pool_to_fwd(x, 2),
            &|x, dy| avg_pool_to_bwd(x.dim(), dy),
            &x,
            &mut rng,
        );
    }

    #[test]
    fn mul_gate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn4(&mut rng, (2, 3, 3, 3));
        let a = randn4(&mut rng, (2, 1, 3, 3));
        let y = mul_gate_fwd(&x.view(), &a.view());
        assert!((y[[0, 2, 1, 1]] - x[[0, 2, 1, 1]] * a[[0, 0, 1, 1]]).abs() < 1e-12);

        let r = randn4(&mut rng, (2, 3, 3, 3));
        let (dx, da) = mul_gate_bwd(&x.view(), &a.view(), &r.view());
        let h = 1e-6;
        // Gate gradient by finite differences.
        let mut aw = a.clone();
        for i in 0..a.len() {
            let sl = aw.as_slice_mut().unwrap();
            let orig = sl[i];
            sl[i] = orig + h;
            let lp = (&mul_gate_fwd(&x.view(), &aw.view()) * &r).sum();
            aw.as_slice_mut().unwrap()[i] = orig - h;
            let lm = (&mul_gate_fwd(&x.view(), &aw.view()) * &r).sum();
            aw.as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let g = da.as_slice().unwrap()[i];
            assert!((g - fd).abs() < 1e-6 * g.abs().max(fd.abs()).max(1.0));
        }
        // Input gradient is the gate broadcast over channels.
        for ((n, c, i, j), &v) in dx.indexed_iter() {
            assert!((v - r[[n, c, i, j]] * a[[n, 0, i, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_split_are_inverses() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = randn4(&mut rng, (2, 2, 3, 3));
        let b = randn4(&mut rng, (2, 3, 3, 3));
        let y = concat_c_fwd(&[a.view(), b.view()]);
        assert_eq!(y.dim(), (2, 5, 3, 3));
        let parts = concat_c_bwd(&[2, 3], &y.view());
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn space_to_batch_round_trip_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn4(&mut rng, (2, 3, 6, 6));
        let y = space_to_batch_fwd(&x.view(), 3);
        assert_eq!(y.dim(), (18, 3, 2, 2));
        // Row-major patch order: entry 1 of sample 0 is the (0,1) patch.
        assert_eq!(
            y.slice(s![1, .., .., ..]),
            x.slice(s![0, .., 0..2, 2..4])
        );
        let back = batch_to_space_fwd(&y.view(), 3);
        assert_eq!(back, x);
        // Grid 1 is the identity.
        assert_eq!(space_to_batch_fwd(&x.view(), 1), x);
    }

    #[test]
    fn conv_on_batched_patches_is_per_patch_independent() {
        // Zeroing one patch's input changes only that patch's output.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn4(&mut rng, (4, 2, 4, 4));
        let w = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let y0 = conv2d_fwd(&x.view(), &w.view(), None, 1, 1);
        let mut x2 = x.clone();
        x2.slice_mut(s![1, .., .., ..]).fill(0.0);
        let y1 = conv2d_fwd(&x2.view(), &w.view(), None, 1, 1);
        for n in [0usize, 2, 3] {
            assert_eq!(y0.slice(s![n, .., .., ..]), y1.slice(s![n, .., .., ..]));
        }
        assert_ne!(y0.slice(s![1, .., .., ..]), y1.slice(s![1, .., .., ..]));
    }

    #[test]
    fn f32_and_f64_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x64 = randn4(&mut rng, (1, 2, 4, 4));
        let w64 = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let x32 = x64.mapv(|v| v as f32);
        let w32 = w64.mapv(|v| v as f32);
        let y64 = conv2d_fwd(&x64.view(), &w64.view(), None, 1, 1);
        let y32 = conv2d_fwd(&x32.view(), &w32.view(), None, 1, 1);
        for (&a, &b) in y64.iter().zip(y32.iter()) {
            assert!((a - b as f64).abs() < 1e-5);
        }
        let _ = ArrayD::<f64>::zeros(IxDyn(&[1]));
    }
}
