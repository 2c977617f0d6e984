//! Fundamental grid types and patch arithmetic.
//!
//! A [`LogitMap`] holds per-pixel foreground scores in `[0, 1]`, a
//! [`BinaryMask`] holds `{0, 1}` labels, and a [`PatchGrid`] describes the
//! decomposition of a square `S x S` map into `k = (S/P)^2` disjoint patches
//! enumerated in row-major order. [`binarize`] applies the inclusive
//! `score >= threshold` rule; [`split_patches`] / [`merge_patches`] are exact
//! inverses of each other.

use ndarray::{Array2, ArrayView2, s};

use crate::error::{Error, Result};

/// 2-D grid of per-pixel foreground scores, each in `[0.0, 1.0]`.
///
/// Scores are stored as `f32`; convert with [`LogitMap::to_f64`] when a
/// computation needs 64-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    data: Array2<f32>,
}

impl LogitMap {
    /// Wraps a score grid, validating that every value lies in `[0, 1]`.
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("logit map"));
        }
        for &v in data.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "logit value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Wraps values already known to satisfy the invariant.
    pub(crate) fn from_valid(data: Array2<f32>) -> Self {
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { data }
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn values(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn into_values(self) -> Array2<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    /// Splits into `grid_side^2` patches in row-major order.
    pub fn split(&self, grid_side: usize) -> Result<Vec<LogitMap>> {
        Ok(split_patches(&self.data.view(), grid_side)?
            .into_iter()
            .map(LogitMap::from_valid)
            .collect())
    }

    /// Inverse of [`LogitMap::split`].
    pub fn merge(patches: &[LogitMap], grid_side: usize) -> Result<LogitMap> {
        let views: Vec<ArrayView2<'_, f32>> = patches.iter().map(|p| p.data.view()).collect();
        Ok(LogitMap::from_valid(merge_patches(&views, grid_side)?))
    }
}

/// 2-D grid of labels in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<u8>,
}

impl BinaryMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("binary mask"));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidConfig(
                "binary mask values must be 0 or 1".into(),
            ));
        }
        Ok(Self { data })
    }

    pub(crate) fn from_valid(data: Array2<u8>) -> Self {
        debug_assert!(data.iter().all(|&v| v <= 1));
        Self { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn values(&self) -> ArrayView2<'_, u8> {
        self.data.view()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// View of the labels as scores, for loss terms that take soft targets.
    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn to_f32(&self) -> Array2<f32> {
        self.data.mapv(f32::from)
    }

    /// Reinterprets the labels as a (degenerate) logit map.
    pub fn as_logit_map(&self) -> LogitMap {
        LogitMap::from_valid(self.to_f32())
    }

    pub fn split(&self, grid_side: usize) -> Result<Vec<BinaryMask>> {
        Ok(split_patches(&self.data.view(), grid_side)?
            .into_iter()
            .map(BinaryMask::from_valid)
            .collect())
    }

    pub fn merge(patches: &[BinaryMask], grid_side: usize) -> Result<BinaryMask> {
        let views: Vec<ArrayView2<'_, u8>> = patches.iter().map(|p| p.data.view()).collect();
        Ok(BinaryMask::from_valid(merge_patches(&views, grid_side)?))
    }
}

/// The `P`-driven decomposition of a square `S x S` map into
/// `k = (S/P)^2` disjoint patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub side: usize,
    pub patch_size: usize,
    pub grid_side: usize,
    pub patch_count: usize,
}

impl PatchGrid {
    pub fn new(side: usize, patch_size: usize) -> Result<Self> {
        let patch_count = patch_count(side, patch_size)?;
        Ok(Self {
            side,
            patch_size,
            grid_side: side / patch_size,
            patch_count,
        })
    }
}

/// Number of disjoint patches: `(side / patch_size)^2`.
pub fn patch_count(side: usize, patch_size: usize) -> Result<usize> {
    if side == 0 || patch_size == 0 || side % patch_size != 0 {
        return Err(Error::NotDivisible { side, patch_size });
    }
    let g = side / patch_size;
    Ok(g * g)
}

/// Splits a grid into `grid_side^2` equal patches in row-major order.
///
/// Works on any element type so logit maps, masks and feature planes share
/// one implementation. The concatenation of all patch pixels is a
/// permutation of the input pixels.
pub fn split_patches<A: Copy>(map: &ArrayView2<'_, A>, grid_side: usize) -> Result<Vec<Array2<A>>> {
    let (h, w) = map.dim();
    if grid_side == 0 || h % grid_side != 0 {
        return Err(Error::NotDivisible {
            side: h,
            patch_size: grid_side.max(1),
        });
    }
    if w % grid_side != 0 {
        return Err(Error::NotDivisible {
            side: w,
            patch_size: grid_side,
        });
    }
    let (ph, pw) = (h / grid_side, w / grid_side);
    let mut out = Vec::with_capacity(grid_side * grid_side);
    for pi in 0..grid_side {
        for pj in 0..grid_side {
            out.push(
                map.slice(s![pi * ph..(pi + 1) * ph, pj * pw..(pj + 1) * pw])
                    .to_owned(),
            );
        }
    }
    Ok(out)
}

/// Exact inverse of [`split_patches`].
pub fn merge_patches<A: Copy + Default>(
    patches: &[ArrayView2<'_, A>],
    grid_side: usize,
) -> Result<Array2<A>> {
    if patches.is_empty() {
        return Err(Error::EmptyInput("patch list"));
    }
    if patches.len() != grid_side * grid_side {
        return Err(Error::InvalidConfig(format!(
            "expected {} patches for grid side {grid_side}, got {}",
            grid_side * grid_side,
            patches.len()
        )));
    }
    let (ph, pw) = patches[0].dim();
    if patches.iter().any(|p| p.dim() != (ph, pw)) {
        return Err(Error::InvalidConfig(
            "patches must all have the same shape".into(),
        ));
    }
    let mut out = Array2::default((ph * grid_side, pw * grid_side));
    for pi in 0..grid_side {
        for pj in 0..grid_side {
            out.slice_mut(s![pi * ph..(pi + 1) * ph, pj * pw..(pj + 1) * pw])
                .assign(&patches[pi * grid_side + pj]);
        }
    }
    Ok(out)
}

/// Thresholds a logit map with the inclusive rule: pixel = 1 iff
/// `score >= threshold`.
pub fn binarize(map: &LogitMap, threshold: f32) -> BinaryMask {
    BinaryMask::from_valid(map.values().mapv(|v| u8::from(v >= threshold)))
}

/// Resizes to a `target_side x target_side` square with corner-aligned
/// bilinear interpolation, clamping the result back into `[0, 1]`.
pub fn resize_to_input(map: &LogitMap, target_side: usize) -> Result<LogitMap> {
    if target_side == 0 {
        return Err(Error::InvalidConfig("target side must be positive".into()));
    }
    let (h, w) = map.shape();
    if (h, w) == (target_side, target_side) {
        return Ok(map.clone());
    }
    let src = map.values();
    // Corner-aligned sampling: output corner pixels land exactly on input
    // corner pixels. A length-1 output samples the source center.
    let coord = |dst_len: usize, src_len: usize, i: usize| -> f64 {
        if dst_len == 1 {
            (src_len as f64 - 1.0) / 2.0
        } else {
            i as f64 * (src_len as f64 - 1.0) / (dst_len as f64 - 1.0)
        }
    };
    let mut out = Array2::zeros((target_side, target_side));
    for oi in 0..target_side {
        let y = coord(target_side, h, oi);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for oj in 0..target_side {
            let x = coord(target_side, w, oj);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let v00 = src[[y0, x0]] as f64;
            let v01 = src[[y0, x1]] as f64;
            let v10 = src[[y1, x0]] as f64;
            let v11 = src[[y1, x1]] as f64;
            let v = v00 * (1.0 - fy) * (1.0 - fx)
                + v01 * (1.0 - fy) * fx
                + v10 * fy * (1.0 - fx)
                + v11 * fy * fx;
            out[[oi, oj]] = (v as f32).clamp(0.0, 1.0);
        }
    }
    Ok(LogitMap::from_valid(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn map_from(values: Vec<Vec<f32>>) -> LogitMap {
        let h = values.len();
        let w = values[0].len();
        let flat: Vec<f32> = values.into_iter().flatten().collect();
        LogitMap::new(Array2::from_shape_vec((h, w), flat).unwrap()).unwrap()
    }

    #[test]
    fn patch_count_matches_grid_arithmetic() {
        assert_eq!(patch_count(512, 256).unwrap(), 4);
        assert_eq!(patch_count(512, 64).unwrap(), 64);
        assert_eq!(patch_count(512, 512).unwrap(), 1);
    }

    #[test]
    fn patch_count_rejects_non_divisible() {
        let err = patch_count(512, 100).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("100") && msg.contains("512"), "{msg}");
    }

    #[test]
    fn split_is_row_major_quadrants() {
        let m = array![
            [1.0f32, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [9.0, 10.0, 11.0, 12.0],
            [13.0, 14.0, 15.0, 16.0]
        ];
        let patches = split_patches(&m.view(), 2).unwrap();
        assert_eq!(patches.len(), 4);
        assert_eq!(patches[0], array![[1.0, 2.0], [5.0, 6.0]]);
        assert_eq!(patches[1], array![[3.0, 4.0], [7.0, 8.0]]);
        assert_eq!(patches[2], array![[9.0, 10.0], [13.0, 14.0]]);
        assert_eq!(patches[3], array![[11.0, 12.0], [15.0, 16.0]]);
        let views: Vec<_> = patches.iter().map(|p| p.view()).collect();
        assert_eq!(merge_patches(&views, 2).unwrap(), m);
    }

    #[test]
    fn split_grid_side_one_is_identity() {
        let m = array![[0.1f32, 0.2], [0.3, 0.4]];
        let patches = split_patches(&m.view(), 1).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0], m);
    }

    #[test]
    fn merge_rejects_wrong_count_and_shape() {
        let p = array![[1.0f32]];
        assert!(merge_patches(&[p.view()], 2).is_err());
        let q = array![[1.0f32, 2.0]];
        assert!(merge_patches(&[p.view(), q.view(), p.view(), p.view()], 2).is_err());
    }

    #[test]
    fn binarize_is_inclusive_at_threshold() {
        let m = map_from(vec![vec![0.5, 0.49], vec![0.51, 0.5]]);
        let b = binarize(&m, 0.5);
        assert_eq!(b.values(), array![[1u8, 0], [1, 1]].view());
    }

    #[test]
    fn binarize_zero_threshold_is_all_ones() {
        let m = LogitMap::constant(3, 3, 0.0).unwrap();
        assert_eq!(binarize(&m, 0.0).foreground_count(), 9);
    }

    #[test]
    fn binarize_above_max_is_all_zeros() {
        let m = map_from(vec![vec![0.2, 0.9], vec![0.4, 0.1]]);
        assert_eq!(binarize(&m, 0.95).foreground_count(), 0);
    }

    #[test]
    fn resize_identity_when_already_target() {
        let m = map_from(vec![vec![0.2, 0.9], vec![0.4, 0.1]]);
        assert_eq!(resize_to_input(&m, 2).unwrap(), m);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let m = LogitMap::constant(3, 3, 0.3).unwrap();
        let r = resize_to_input(&m, 7).unwrap();
        for &v in r.values().iter() {
            assert!((v - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_corner_aligned_preserves_corners() {
        // 2x2 -> 4x4: corner-aligned bilinear pins the four corners to the
        // source values; interior columns interpolate linearly at 1/3 steps.
        let m = map_from(vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
        let r = resize_to_input(&m, 4).unwrap();
        assert_eq!(r.values()[[0, 0]], 0.0);
        assert_eq!(r.values()[[0, 3]], 1.0);
        assert_eq!(r.values()[[3, 0]], 0.0);
        assert_eq!(r.values()[[3, 3]], 1.0);
        assert!((r.values()[[1, 1]] - 1.0 / 3.0).abs() < 1e-6);
        assert!((r.values()[[2, 2]] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn logit_map_rejects_out_of_range() {
        assert!(LogitMap::new(array![[0.5f32, 1.2]]).is_err());
        assert!(LogitMap::new(array![[-0.1f32]]).is_err());
        assert!(LogitMap::new(array![[f32::NAN]]).is_err());
    }

    #[test]
    fn binary_mask_rejects_non_binary() {
        assert!(BinaryMask::new(array![[0u8, 2]]).is_err());
    }

    proptest! {
        #[test]
        fn split_merge_round_trip(
            grid_side in 1usize..5,
            ph in 1usize..5,
            pw in 1usize..5,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let (h, w) = (grid_side * ph, grid_side * pw);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((h, w), |_| rng.gen::<f32>());
            let patches = split_patches(&m.view(), grid_side).unwrap();
            let views: Vec<_> = patches.iter().map(|p| p.view()).collect();
            let merged = merge_patches(&views, grid_side).unwrap();
            prop_assert_eq!(merged, m);
        }

        #[test]
        fn binarize_is_monotone_in_threshold(
            seed in any::<u64>(),
            t1 in 0.0f32..1.0,
            t2 in 0.0f32..1.0,
        ) {
            use rand::{Rng, SeedableRng};
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = LogitMap::new(Array2::from_shape_fn((8, 8), |_| rng.gen::<f32>())).unwrap();
            let coarse = binarize(&m, hi);
            let fine = binarize(&m, lo);
            // Every pixel predicted at the higher threshold is also predicted
            // at the lower one.
            for (c, f) in coarse.values().iter().zip(fine.values().iter()) {
                prop_assert!(c <= f);
            }
        }

        #[test]
        fn resize_stays_in_unit_range(
            seed in any::<u64>(),
            src in 2usize..9,
            dst in 1usize..17,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = LogitMap::new(Array2::from_shape_fn((src, src), |_| rng.gen::<f32>())).unwrap();
            let r = resize_to_input(&m, dst).unwrap();
            prop_assert_eq!(r.shape(), (dst, dst));
            for &v in r.values().iter() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
