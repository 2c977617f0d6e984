//! The refinement network: a shared residual encoder with pyramid pooling
//! feeding two attention-gated decoders. The global decoder sees whole
//! feature maps; the local decoder splits every level's features into the
//! `k = (S/P)^2` patch grid and processes patches independently with shared
//! weights (patches ride the batch dimension, so patch count never changes
//! the activation footprint). Inference averages the two branch maps and
//! thresholds at 0.5.

mod checkpoint;

pub use checkpoint::Checkpoint;

use ndarray::{Array2, Array4};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{binarize, BinaryMask, LogitMap};
use crate::nn::{EvalExec, Exec, Id, ParamId, ParamStore, ShapeExec, TapeExec};
use crate::scalar::Scalar;

/// Which decoder branches participate in training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    #[default]
    Both,
    GlobalOnly,
    LocalOnly,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_side: usize,
    pub encoder_widths: [usize; 4],
    pub pooling_sizes: Vec<usize>,
    pub patch_size: usize,
    pub width_scale: f64,
    pub branch_mode: BranchMode,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_side: 512,
            encoder_widths: [32, 64, 128, 256],
            pooling_sizes: vec![1, 2, 4, 8],
            patch_size: 64,
            width_scale: 1.0,
            branch_mode: BranchMode::Both,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Encoder widths after applying `width_scale`.
    pub fn effective_widths(&self) -> [usize; 4] {
        self.encoder_widths
            .map(|w| ((w as f64 * self.width_scale).round() as usize).max(1))
    }

    /// Spatial side of the bottleneck: three halvings across the four
    /// encoding levels.
    pub fn bottleneck_side(&self) -> usize {
        self.input_side / 8
    }

    /// Patch grid side used by the local decoder.
    pub fn grid_side(&self) -> usize {
        self.input_side / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.input_side;
        if s == 0 || s % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "network.input_side {s} must be a positive multiple of 8"
            )));
        }
        let w = self.effective_widths();
        if !(w[0] < w[1] && w[1] < w[2] && w[2] < w[3]) {
            return Err(Error::InvalidConfig(format!(
                "network.encoder_widths must be strictly increasing after scaling, got {w:?}"
            )));
        }
        if w[3] % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "scaled top width {} must be divisible by 4 for pyramid pooling",
                w[3]
            )));
        }
        if self.pooling_sizes.is_empty() {
            return Err(Error::InvalidConfig("pooling_sizes must not be empty".into()));
        }
        for &ps in &self.pooling_sizes {
            if ps == 0 || self.bottleneck_side() % ps != 0 {
                return Err(Error::InvalidConfig(format!(
                    "pooling size {ps} must divide the bottleneck side {}",
                    self.bottleneck_side()
                )));
            }
        }
        let p = self.patch_size;
        if p == 0 || s % p != 0 {
            return Err(Error::NotDivisible { side: s, patch_size: p });
        }
        if p % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch_size {p} must be a multiple of 8 so every decoding level tiles evenly"
            )));
        }
        if !(self.width_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "width_scale {} must be positive",
                self.width_scale
            )));
        }
        Ok(())
    }
}

/// Both branch logit maps from one forward pass.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub global_map: LogitMap,
    pub local_map: LogitMap,
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct ResBlockIds {
    c1: ConvIds,
    c2: ConvIds,
    proj: Option<ConvIds>,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wx: ConvIds,
    wg: ConvIds,
    psi: ConvIds,
}

#[derive(Debug, Clone, Copy)]
struct DecLevelIds {
    up: ConvIds,
    attn: AttnIds,
    fuse: ConvIds,
}

#[derive(Debug, Clone)]
struct DecoderIds {
    levels: [DecLevelIds; 3],
    head: ConvIds,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvIds,
    enc: [ResBlockIds; 4],
    pyramid_branches: Vec<ConvIds>,
    pyramid_fuse: ConvIds,
    global_dec: DecoderIds,
    local_dec: DecoderIds,
}

/// The refinement network: configuration plus named weights.
#[derive(Debug, Clone)]
pub struct PatchRefineNet<F = f32> {
    config: NetworkConfig,
    params: ParamStore<F>,
    layout: Layout,
}

impl<F: Scalar> PatchRefineNet<F> {
    /// Builds a freshly initialized network (He fan-in weights, zero biases,
    /// fully determined by `config.seed`).
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let w = config.effective_widths();

        let conv = |ps: &mut ParamStore<F>,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    c_out: usize,
                    c_in: usize,
                    k: usize|
         -> ConvIds {
            ConvIds {
                w: ps.add_conv_weight(format!("{name}.w"), c_out, c_in, k, k, rng),
                b: ps.add_zero_bias(format!("{name}.b"), c_out),
            }
        };
        let res_block = |ps: &mut ParamStore<F>,
                         rng: &mut ChaCha8Rng,
                         name: &str,
                         c_in: usize,
                         c_out: usize,
                         downsample: bool|
         -> ResBlockIds {
            ResBlockIds {
                c1: conv(ps, rng, &format!("{name}.c1"), c_out, c_in, 3),
                c2: conv(ps, rng, &format!("{name}.c2"), c_out, c_out, 3),
                proj: (downsample || c_in != c_out)
                    .then(|| conv(ps, rng, &format!("{name}.proj"), c_out, c_in, 1)),
            }
        };
        let decoder = |ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str| -> DecoderIds {
            // Level i consumes skip i (widths w2, w1, w0 going up).
            let mut levels = Vec::with_capacity(3);
            for (i, (c_in, c_out)) in [(w[3], w[2]), (w[2], w[1]), (w[1], w[0])]
                .into_iter()
                .enumerate()
            {
                let inter = (c_out / 2).max(1);
                levels.push(DecLevelIds {
                    up: conv(ps, rng, &format!("{name}.l{i}.up"), c_out, c_in, 3),
                    attn: AttnIds {
                        wx: conv(ps, rng, &format!("{name}.l{i}.attn.wx"), inter, c_out, 1),
                        wg: conv(ps, rng, &format!("{name}.l{i}.attn.wg"), inter, c_out, 1),
                        psi: conv(ps, rng, &format!("{name}.l{i}.attn.psi"), 1, inter, 1),
                    },
                    fuse: conv(ps, rng, &format!("{name}.l{i}.fuse"), c_out, 2 * c_out, 3),
                });
            }
            DecoderIds {
                levels: [levels[0], levels[1], levels[2]],
                head: conv(ps, rng, &format!("{name}.head"), 1, w[0], 1),
            }
        };

        let stem = conv(&mut ps, &mut rng, "enc.stem", w[0], 1, 3);
        let enc = [
            res_block(&mut ps, &mut rng, "enc.l1", w[0], w[0], false),
            res_block(&mut ps, &mut rng, "enc.l2", w[0], w[1], true),
            res_block(&mut ps, &mut rng, "enc.l3", w[1], w[2], true),
            res_block(&mut ps, &mut rng, "enc.l4", w[2], w[3], true),
        ];
        let quarter = w[3] / 4;
        let pyramid_branches: Vec<ConvIds> = (0..config.pooling_sizes.len())
            .map(|i| conv(&mut ps, &mut rng, &format!("pyramid.p{i}"), quarter, w[3], 1))
            .collect();
        let fuse_in = w[3] + quarter * config.pooling_sizes.len();
        let pyramid_fuse = conv(&mut ps, &mut rng, "pyramid.fuse", w[3], fuse_in, 1);
        let global_dec = decoder(&mut ps, &mut rng, "gdec");
        let local_dec = decoder(&mut ps, &mut rng, "ldec");

        Ok(Self {
            config,
            params: ps,
            layout: Layout {
                stem,
                enc,
                pyramid_branches,
                pyramid_fuse,
                global_dec,
                local_dec,
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    fn conv_relu<E: Exec<F>>(&self, ex: &mut E, ids: ConvIds, x: Id, stride: usize, pad: usize) -> Id {
        let c = ex.conv2d(&self.params, x, ids.w, Some(ids.b), stride, pad);
        ex.relu(c)
    }

    fn res_block<E: Exec<F>>(&self, ex: &mut E, ids: &ResBlockIds, x: Id, stride: usize) -> Id {
        let c1 = self.conv_relu(ex, ids.c1, x, stride, 1);
        let c2 = ex.conv2d(&self.params, c1, ids.c2.w, Some(ids.c2.b), 1, 1);
        let shortcut = match ids.proj {
            Some(p) => ex.conv2d(&self.params, x, p.w, Some(p.b), stride, 0),
            None => x,
        };
        let sum = ex.add(c2, shortcut);
        ex.relu(sum)
    }

    /// Four encoding levels; skips are captured before each downsampling.
    fn encode<E: Exec<F>>(&self, ex: &mut E, input: Id) -> (Id, [Id; 3]) {
        let stem = self.conv_relu(ex, self.layout.stem, input, 1, 1);
        let e1 = self.res_block(ex, &self.layout.enc[0], stem, 1);
        ex.note("enc1", e1);
        let e2 = self.res_block(ex, &self.layout.enc[1], e1, 2);
        ex.note("enc2", e2);
        let e3 = self.res_block(ex, &self.layout.enc[2], e2, 2);
        ex.note("enc3", e3);
        let e4 = self.res_block(ex, &self.layout.enc[3], e3, 2);
        ex.note("enc4", e4);
        (e4, [e1, e2, e3])
    }

    /// Pyramid pooling: pool to each size, project to a quarter of the top
    /// width, upsample back, concatenate with the input, fuse.
    fn pyramid_pool<E: Exec<F>>(&self, ex: &mut E, bottleneck: Id) -> Id {
        let (_, _, h, w) = ex.shape(bottleneck);
        let mut parts = vec![bottleneck];
        for (i, &size) in self.config.pooling_sizes.iter().enumerate() {
            let pooled = ex.avg_pool_to(bottleneck, size);
            let projected = self.conv_relu(ex, self.layout.pyramid_branches[i], pooled, 1, 0);
            parts.push(ex.upsample_bilinear(projected, h, w));
        }
        let cat = ex.concat_c(&parts);
        self.conv_relu(ex, self.layout.pyramid_fuse, cat, 1, 0)
    }

    /// Additive attention gate: coefficients from projected skip plus
    /// projected gate, squashed to one channel.
    fn attention_gate<E: Exec<F>>(&self, ex: &mut E, ids: &AttnIds, skip: Id, gate: Id) -> Id {
        let xs = ex.conv2d(&self.params, skip, ids.wx.w, Some(ids.wx.b), 1, 0);
        let gs = ex.conv2d(&self.params, gate, ids.wg.w, Some(ids.wg.b), 1, 0);
        let sum = ex.add(xs, gs);
        let act = ex.relu(sum);
        let psi = ex.conv2d(&self.params, act, ids.psi.w, Some(ids.psi.b), 1, 0);
        ex.sigmoid(psi)
    }

    /// One decoding level: split the incoming decoder features and the skip
    /// into the patch grid (identity at `grid == 1`, the global branch),
    /// upsample, attention-gate, concatenate and convolve each patch with
    /// shared weights, then merge. The rearrangement runs at every grid so
    /// the level allocates the same activation volume regardless of patch
    /// size.
    fn decode_level<E: Exec<F>>(
        &self,
        ex: &mut E,
        ids: &DecLevelIds,
        d: Id,
        skip: Id,
        grid: usize,
    ) -> Id {
        let d = ex.space_to_batch(d, grid);
        let skip = ex.space_to_batch(skip, grid);
        let (_, _, ph, pw) = ex.shape(d);
        let up = ex.upsample_bilinear(d, ph * 2, pw * 2);
        let g = self.conv_relu(ex, ids.up, up, 1, 1);
        let a = self.attention_gate(ex, &ids.attn, skip, g);
        let gated = ex.mul_gate(skip, a);
        let cat = ex.concat_c(&[gated, g]);
        let fused = self.conv_relu(ex, ids.fuse, cat, 1, 1);
        ex.batch_to_space(fused, grid)
    }

    fn decode<E: Exec<F>>(
        &self,
        ex: &mut E,
        dec: &DecoderIds,
        bottleneck: Id,
        skips: &[Id; 3],
        grid: usize,
    ) -> Id {
        let mut d = bottleneck;
        for (i, ids) in dec.levels.iter().enumerate() {
            d = self.decode_level(ex, ids, d, skips[2 - i], grid);
        }
        let logits = ex.conv2d(&self.params, d, dec.head.w, Some(dec.head.b), 1, 0);
        ex.sigmoid(logits)
    }

    fn decode_global<E: Exec<F>>(&self, ex: &mut E, bottleneck: Id, skips: &[Id; 3]) -> Id {
        let out = self.decode(ex, &self.layout.global_dec, bottleneck, skips, 1);
        ex.note("global_out", out);
        out
    }

    fn decode_local_grid<E: Exec<F>>(
        &self,
        ex: &mut E,
        bottleneck: Id,
        skips: &[Id; 3],
        grid: usize,
    ) -> Id {
        let out = self.decode(ex, &self.layout.local_dec, bottleneck, skips, grid);
        ex.note("local_out", out);
        out
    }

    fn decode_local<E: Exec<F>>(&self, ex: &mut E, bottleneck: Id, skips: &[Id; 3]) -> Id {
        self.decode_local_grid(ex, bottleneck, skips, self.config.grid_side())
    }

    /// Runs encoder + pyramid + the branches selected by `mode` under any
    /// executor. Returns `(global, local)` ids.
    fn forward_graph<E: Exec<F>>(
        &self,
        ex: &mut E,
        input: Array4<F>,
        mode: BranchMode,
    ) -> (Option<Id>, Option<Id>) {
        let x = ex.input(input);
        ex.note("input", x);
        let (e4, skips) = self.encode(ex, x);
        let bottleneck = self.pyramid_pool(ex, e4);
        ex.note("bottleneck", bottleneck);
        let global = (mode != BranchMode::LocalOnly).then(|| self.decode_global(ex, bottleneck, &skips));
        let local = (mode != BranchMode::GlobalOnly).then(|| self.decode_local(ex, bottleneck, &skips));
        (global, local)
    }

    fn check_batch_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let s = self.config.input_side;
        if c != 1 || h != s || w != s {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: (s, s),
                got: (h, w),
            });
        }
        Ok(())
    }

    /// Probe hook used by the bench example.
    #[doc(hidden)]
    pub fn forward_graph_public<E: Exec<F>>(
        &self,
        ex: &mut E,
        input: Array4<F>,
        mode: BranchMode,
    ) -> (Option<Id>, Option<Id>) {
        self.forward_graph(ex, input, mode)
    }

    /// Inference forward pass over a batch; returns the branch maps selected
    /// by `mode`.
    pub fn forward_eval_batch(
        &self,
        x: Array4<F>,
        mode: BranchMode,
    ) -> Result<(Option<Array4<F>>, Option<Array4<F>>)> {
        self.check_batch_input(&x)?;
        let mut ex = EvalExec::new();
        let (g, l) = self.forward_graph(&mut ex, x, mode);
        Ok((g.map(|id| ex.take(id)), l.map(|id| ex.take(id))))
    }

    /// Training forward pass: records a tape and returns it with the branch
    /// output ids so the caller can seed backpropagation.
    pub fn forward_train_batch(
        &self,
        x: Array4<F>,
        mode: BranchMode,
    ) -> Result<(TapeExec<F>, Option<Id>, Option<Id>)> {
        self.check_batch_input(&x)?;
        let mut ex = TapeExec::new();
        let (g, l) = self.forward_graph(&mut ex, x, mode);
        Ok((ex, g, l))
    }

    fn logit_map_to_batch(&self, input: &LogitMap) -> Result<Array4<F>> {
        let s = self.config.input_side;
        if input.shape() != (s, s) {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: (s, s),
                got: input.shape(),
            });
        }
        let mut x = Array4::zeros((1, 1, s, s));
        x.slice_mut(ndarray::s![0, 0, .., ..])
            .assign(&input.values().mapv(|v| F::from_f64c(v as f64)));
        Ok(x)
    }

    fn plane_to_map(&self, y: &Array4<F>) -> LogitMap {
        let s = self.config.input_side;
        let plane: Array2<f32> = Array2::from_shape_fn((s, s), |(r, c)| {
            (y[[0, 0, r, c]].to_f64().unwrap() as f32).clamp(0.0, 1.0)
        });
        LogitMap::new(plane).expect("sigmoid output is in range")
    }

    /// Full forward pass producing both branch maps.
    pub fn forward(&self, input: &LogitMap) -> Result<BranchOutputs> {
        let x = self.logit_map_to_batch(input)?;
        let (g, l) = self.forward_eval_batch(x, BranchMode::Both)?;
        Ok(BranchOutputs {
            global_map: self.plane_to_map(&g.unwrap()),
            local_map: self.plane_to_map(&l.unwrap()),
        })
    }

    /// Inference: average the branch maps selected by the configured mode
    /// and threshold at 0.5.
    pub fn refine(&self, input: &LogitMap) -> Result<(LogitMap, BinaryMask)> {
        let x = self.logit_map_to_batch(input)?;
        let (g, l) = self.forward_eval_batch(x, self.config.branch_mode)?;
        let final_map = match (g, l) {
            (Some(g), Some(l)) => {
                let half = F::from_f64c(0.5);
                let avg = (&g + &l).mapv(|v| v * half);
                self.plane_to_map(&avg)
            }
            (Some(g), None) => self.plane_to_map(&g),
            (None, Some(l)) => self.plane_to_map(&l),
            (None, None) => unreachable!("at least one branch always runs"),
        };
        let pred = binarize(&final_map, 0.5);
        Ok((final_map, pred))
    }

    /// Labeled shape trace of a batch-1 forward pass; no feature maps are
    /// allocated.
    pub fn shape_trace(&self) -> Vec<(&'static str, (usize, usize, usize, usize))> {
        let s = self.config.input_side;
        let mut ex = ShapeExec::<F>::new();
        let input = Array4::zeros((1, 1, s, s));
        let _ = self.forward_graph(&mut ex, input, BranchMode::Both);
        ex.trace
    }

    /// Activation elements the local decoder allocates for one batch-1
    /// forward pass at the given patch size (shape-level accounting).
    pub fn local_decode_footprint(&self, patch_size: usize) -> Result<u64> {
        let cfg = NetworkConfig {
            patch_size,
            ..self.config.clone()
        };
        cfg.validate()?;
        let s = self.config.input_side;
        let mut ex = ShapeExec::<F>::new();
        let input = Array4::zeros((1, 1, s, s));
        let x = ex.input(input);
        let (e4, skips) = self.encode(&mut ex, x);
        let bottleneck = self.pyramid_pool(&mut ex, e4);
        let before = ex.elements_allocated;
        let _ = self.decode_local_grid(&mut ex, bottleneck, &skips, cfg.grid_side());
        Ok(ex.elements_allocated - before)
    }

    /// Converts the weights to another scalar type (used by f64 gradient
    /// checks against the f32 training configuration).
    pub fn map_to<G: Scalar>(&self) -> PatchRefineNet<G> {
        PatchRefineNet {
            config: self.config.clone(),
            params: self.params.map_to(),
            layout: self.layout.clone(),
        }
    }
}
