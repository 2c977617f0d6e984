//! Execution contexts: one forward definition, three interpreters.
//!
//! Network code is written once against [`Exec`]; running it under
//! [`EvalExec`] computes values (inference), under [`TapeExec`] it records a
//! reverse-mode tape for backpropagation, and under [`ShapeExec`] it
//! propagates only shapes — used for shape-contract assertions and
//! activation-footprint accounting without allocating feature maps.

use ndarray::{Array1, Array4};

use super::ops;
use super::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to an intermediate value inside an executor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

pub trait Exec<F: Scalar> {
    fn input(&mut self, v: Array4<F>) -> Id;
    fn conv2d(
        &mut self,
        ps: &ParamStore<F>,
        x: Id,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Id;
    fn relu(&mut self, x: Id) -> Id;
    fn sigmoid(&mut self, x: Id) -> Id;
    fn add(&mut self, a: Id, b: Id) -> Id;
    fn mul_gate(&mut self, x: Id, gate: Id) -> Id;
    fn upsample_bilinear(&mut self, x: Id, out_h: usize, out_w: usize) -> Id;
    fn avg_pool_to(&mut self, x: Id, size: usize) -> Id;
    fn concat_c(&mut self, xs: &[Id]) -> Id;
    fn space_to_batch(&mut self, x: Id, grid: usize) -> Id;
    fn batch_to_space(&mut self, x: Id, grid: usize) -> Id;

    fn shape(&self, x: Id) -> (usize, usize, usize, usize);
    /// Concrete value; `None` for shape-only execution.
    fn value(&self, x: Id) -> Option<&Array4<F>>;
    /// Optional stage label for tracing executors.
    fn note(&mut self, _label: &'static str, _x: Id) {}
}

// ---------------------------------------------------------------------------
// EvalExec

/// Computes values directly; keeps every intermediate in an arena and counts
/// allocated activation elements.
pub struct EvalExec<F> {
    values: Vec<Array4<F>>,
    pub elements_allocated: u64,
}

impl<F: Scalar> EvalExec<F> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            elements_allocated: 0,
        }
    }

    fn push(&mut self, v: Array4<F>) -> Id {
        self.elements_allocated += v.len() as u64;
        self.values.push(v);
        Id(self.values.len() - 1)
    }

    pub fn take(&mut self, id: Id) -> Array4<F> {
        self.values[id.0].clone()
    }
}

impl<F: Scalar> Default for EvalExec<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Exec<F> for EvalExec<F> {
    fn input(&mut self, v: Array4<F>) -> Id {
        self.push(v)
    }

    fn conv2d(
        &mut self,
        ps: &ParamStore<F>,
        x: Id,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Id {
        let bias = b.map(|id| ps.as_bias(id).to_owned());
        let y = ops::conv2d_fwd(
            &self.values[x.0].view(),
            &ps.as_conv_weight(w),
            bias.as_ref().map(|b| b.view()).as_ref(),
            stride,
            pad,
        );
        self.push(y)
    }

    fn relu(&mut self, x: Id) -> Id {
        let y = ops::relu_fwd(&self.values[x.0].view());
        self.push(y)
    }

    fn sigmoid(&mut self, x: Id) -> Id {
        let y = ops::sigmoid_fwd(&self.values[x.0].view());
        self.push(y)
    }

    fn add(&mut self, a: Id, b: Id) -> Id {
        let y = &self.values[a.0] + &self.values[b.0];
        self.push(y)
    }

    fn mul_gate(&mut self, x: Id, gate: Id) -> Id {
        let y = ops::mul_gate_fwd(&self.values[x.0].view(), &self.values[gate.0].view());
        self.push(y)
    }

    fn upsample_bilinear(&mut self, x: Id, out_h: usize, out_w: usize) -> Id {
        let y = ops::upsample_bilinear_fwd(&self.values[x.0].view(), out_h, out_w);
        self.push(y)
    }

    fn avg_pool_to(&mut self, x: Id, size: usize) -> Id {
        let y = ops::avg_pool_to_fwd(&self.values[x.0].view(), size);
        self.push(y)
    }

    fn concat_c(&mut self, xs: &[Id]) -> Id {
        let views: Vec<_> = xs.iter().map(|id| self.values[id.0].view()).collect();
        let y = ops::concat_c_fwd(&views);
        self.push(y)
    }

    fn space_to_batch(&mut self, x: Id, grid: usize) -> Id {
        let y = ops::space_to_batch_fwd(&self.values[x.0].view(), grid);
        self.push(y)
    }

    fn batch_to_space(&mut self, x: Id, grid: usize) -> Id {
        let y = ops::batch_to_space_fwd(&self.values[x.0].view(), grid);
        self.push(y)
    }

    fn shape(&self, x: Id) -> (usize, usize, usize, usize) {
        self.values[x.0].dim()
    }

    fn value(&self, x: Id) -> Option<&Array4<F>> {
        Some(&self.values[x.0])
    }
}

// ---------------------------------------------------------------------------
// TapeExec

enum Op {
    Input,
    Conv2d {
        x: Id,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    Relu {
        x: Id,
    },
    Sigmoid {
        x: Id,
    },
    Add {
        a: Id,
        b: Id,
    },
    MulGate {
        x: Id,
        gate: Id,
    },
    Upsample {
        x: Id,
    },
    AvgPoolTo {
        x: Id,
    },
    ConcatC {
        xs: Vec<Id>,
    },
    SpaceToBatch {
        x: Id,
        grid: usize,
    },
    BatchToSpace {
        x: Id,
        grid: usize,
    },
}

struct Node<F> {
    value: Array4<F>,
    op: Op,
}

/// Records every op during the forward pass; [`TapeExec::backward`] walks
/// the tape in reverse, accumulating gradients for inputs and parameters.
pub struct TapeExec<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> TapeExec<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array4<F>, op: Op) -> Id {
        self.nodes.push(Node { value, op });
        Id(self.nodes.len() - 1)
    }

    /// Probe hook: reverse pass with per-op-kind timing.
    #[doc(hidden)]
    pub fn backward_timed(
        &self,
        ps: &ParamStore<F>,
        seeds: Vec<(Id, Array4<F>)>,
    ) -> (ParamGrads<F>, Vec<(&'static str, std::time::Duration)>) {
        let mut times: std::collections::BTreeMap<&'static str, std::time::Duration> =
            Default::default();
        let mut grads: Vec<Option<Array4<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            match &mut grads[id.0] {
                Some(g) => *g += &seed,
                slot => *slot = Some(seed),
            }
        }
        let mut pgrads = ParamGrads::zeros_like(ps);
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let t0 = std::time::Instant::now();
            let kind = self.backward_step(ps, idx, dy, &mut grads, &mut pgrads);
            *times.entry(kind).or_default() += t0.elapsed();
        }
        let mut v: Vec<_> = times.into_iter().collect();
        v.sort_by_key(|(_, d)| std::cmp::Reverse(*d));
        (pgrads, v)
    }

    fn backward_step(
        &self,
        ps: &ParamStore<F>,
        idx: usize,
        dy: Array4<F>,
        grads: &mut Vec<Option<Array4<F>>>,
        pgrads: &mut ParamGrads<F>,
    ) -> &'static str {
        let acc = |grads: &mut Vec<Option<Array4<F>>>, id: Id, g: Array4<F>| {
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };
        match &self.nodes[idx].op {
            Op::Input => "input",
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = ops::conv2d_bwd(
                    &self.nodes[x.0].value.view(),
                    &ps.as_conv_weight(*w),
                    *stride,
                    *pad,
                    &dy.view(),
                );
                acc(grads, *x, dx);
                pgrads.accumulate(*w, dw.into_dyn());
                if let Some(b) = b {
                    pgrads.accumulate(*b, bias_to_dyn(db));
                }
                if ps.value(*w).shape()[2] == 1 { "conv1x1" } else { "conv3x3" }
            }
            Op::Relu { x } => {
                let dx = ops::relu_bwd(&self.nodes[x.0].value.view(), &dy.view());
                acc(grads, *x, dx);
                "relu"
            }
            Op::Sigmoid { x } => {
                let dx = ops::sigmoid_bwd(&self.nodes[idx].value.view(), &dy.view());
                acc(grads, *x, dx);
                "sigmoid"
            }
            Op::Add { a, b } => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy);
                "add"
            }
            Op::MulGate { x, gate } => {
                let (dx, da) = ops::mul_gate_bwd(
                    &self.nodes[x.0].value.view(),
                    &self.nodes[gate.0].value.view(),
                    &dy.view(),
                );
                acc(grads, *x, dx);
                acc(grads, *gate, da);
                "mul_gate"
            }
            Op::Upsample { x } => {
                let dx = ops::upsample_bilinear_bwd(self.nodes[x.0].value.dim(), &dy.view());
                acc(grads, *x, dx);
                "upsample"
            }
            Op::AvgPoolTo { x } => {
                let dx = ops::avg_pool_to_bwd(self.nodes[x.0].value.dim(), &dy.view());
                acc(grads, *x, dx);
                "pool"
            }
            Op::ConcatC { xs } => {
                let channels: Vec<usize> =
                    xs.iter().map(|id| self.nodes[id.0].value.dim().1).collect();
                let parts = ops::concat_c_bwd(&channels, &dy.view());
                for (id, part) in xs.clone().into_iter().zip(parts) {
                    acc(grads, id, part);
                }
                "concat"
            }
            Op::SpaceToBatch { x, grid } => {
                let dx = ops::batch_to_space_fwd(&dy.view(), *grid);
                acc(grads, *x, dx);
                "s2b"
            }
            Op::BatchToSpace { x, grid } => {
                let dx = ops::space_to_batch_fwd(&dy.view(), *grid);
                acc(grads, *x, dx);
                "b2s"
            }
        }
    }

    /// Reverse pass. `seeds` assigns an output gradient to one or more
    /// nodes; returns parameter gradients.
    pub fn backward(&self, ps: &ParamStore<F>, seeds: Vec<(Id, Array4<F>)>) -> ParamGrads<F> {
        let mut grads: Vec<Option<Array4<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            assert_eq!(self.nodes[id.0].value.dim(), seed.dim(), "seed shape");
            match &mut grads[id.0] {
                Some(g) => *g += &seed,
                slot => *slot = Some(seed),
            }
        }
        let mut pgrads = ParamGrads::zeros_like(ps);
        let acc = |grads: &mut Vec<Option<Array4<F>>>, id: Id, g: Array4<F>| {
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = ops::conv2d_bwd(
                        &self.nodes[x.0].value.view(),
                        &ps.as_conv_weight(*w),
                        *stride,
                        *pad,
                        &dy.view(),
                    );
                    acc(&mut grads, *x, dx);
                    pgrads.accumulate(*w, dw.into_dyn());
                    if let Some(b) = b {
                        pgrads.accumulate(*b, bias_to_dyn(db));
                    }
                }
                Op::Relu { x } => {
                    let dx = ops::relu_bwd(&self.nodes[x.0].value.view(), &dy.view());
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let dx = ops::sigmoid_bwd(&self.nodes[idx].value.view(), &dy.view());
                    acc(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::MulGate { x, gate } => {
                    let (dx, da) = ops::mul_gate_bwd(
                        &self.nodes[x.0].value.view(),
                        &self.nodes[gate.0].value.view(),
                        &dy.view(),
                    );
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gate, da);
                }
                Op::Upsample { x } => {
                    let dx = ops::upsample_bilinear_bwd(self.nodes[x.0].value.dim(), &dy.view());
                    acc(&mut grads, *x, dx);
                }
                Op::AvgPoolTo { x } => {
                    let dx = ops::avg_pool_to_bwd(self.nodes[x.0].value.dim(), &dy.view());
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatC { xs } => {
                    let channels: Vec<usize> =
                        xs.iter().map(|id| self.nodes[id.0].value.dim().1).collect();
                    let parts = ops::concat_c_bwd(&channels, &dy.view());
                    for (id, part) in xs.clone().into_iter().zip(parts) {
                        acc(&mut grads, id, part);
                    }
                }
                Op::SpaceToBatch { x, grid } => {
                    let dx = ops::batch_to_space_fwd(&dy.view(), *grid);
                    acc(&mut grads, *x, dx);
                }
                Op::BatchToSpace { x, grid } => {
                    let dx = ops::space_to_batch_fwd(&dy.view(), *grid);
                    acc(&mut grads, *x, dx);
                }
            }
        }
        pgrads
    }
}

fn bias_to_dyn<F: Scalar>(b: Array1<F>) -> ndarray::ArrayD<F> {
    b.into_dyn()
}

impl<F: Scalar> Default for TapeExec<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Exec<F> for TapeExec<F> {
    fn input(&mut self, v: Array4<F>) -> Id {
        self.push(v, Op::Input)
    }

    fn conv2d(
        &mut self,
        ps: &ParamStore<F>,
        x: Id,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Id {
        let bias = b.map(|id| ps.as_bias(id).to_owned());
        let y = ops::conv2d_fwd(
            &self.nodes[x.0].value.view(),
            &ps.as_conv_weight(w),
            bias.as_ref().map(|b| b.view()).as_ref(),
            stride,
            pad,
        );
        self.push(y, Op::Conv2d { x, w, b, stride, pad })
    }

    fn relu(&mut self, x: Id) -> Id {
        let y = ops::relu_fwd(&self.nodes[x.0].value.view());
        self.push(y, Op::Relu { x })
    }

    fn sigmoid(&mut self, x: Id) -> Id {
        let y = ops::sigmoid_fwd(&self.nodes[x.0].value.view());
        self.push(y, Op::Sigmoid { x })
    }

    fn add(&mut self, a: Id, b: Id) -> Id {
        let y = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(y, Op::Add { a, b })
    }

    fn mul_gate(&mut self, x: Id, gate: Id) -> Id {
        let y = ops::mul_gate_fwd(
            &self.nodes[x.0].value.view(),
            &self.nodes[gate.0].value.view(),
        );
        self.push(y, Op::MulGate { x, gate })
    }

    fn upsample_bilinear(&mut self, x: Id, out_h: usize, out_w: usize) -> Id {
        let y = ops::upsample_bilinear_fwd(&self.nodes[x.0].value.view(), out_h, out_w);
        self.push(y, Op::Upsample { x })
    }

    fn avg_pool_to(&mut self, x: Id, size: usize) -> Id {
        let y = ops::avg_pool_to_fwd(&self.nodes[x.0].value.view(), size);
        self.push(y, Op::AvgPoolTo { x })
    }

    fn concat_c(&mut self, xs: &[Id]) -> Id {
        let views: Vec<_> = xs.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let y = ops::concat_c_fwd(&views);
        self.push(y, Op::ConcatC { xs: xs.to_vec() })
    }

    fn space_to_batch(&mut self, x: Id, grid: usize) -> Id {
        let y = ops::space_to_batch_fwd(&self.nodes[x.0].value.view(), grid);
        self.push(y, Op::SpaceToBatch { x, grid })
    }

    fn batch_to_space(&mut self, x: Id, grid: usize) -> Id {
        let y = ops::batch_to_space_fwd(&self.nodes[x.0].value.view(), grid);
        self.push(y, Op::BatchToSpace { x, grid })
    }

    fn shape(&self, x: Id) -> (usize, usize, usize, usize) {
        self.nodes[x.0].value.dim()
    }

    fn value(&self, x: Id) -> Option<&Array4<F>> {
        Some(&self.nodes[x.0].value)
    }
}

// ---------------------------------------------------------------------------
// ShapeExec

/// Propagates shapes only; no feature maps are allocated. Records labeled
/// stages for shape-contract tests and counts the activation elements the
/// same graph would allocate under [`EvalExec`].
pub struct ShapeExec<F> {
    shapes: Vec<(usize, usize, usize, usize)>,
    pub elements_allocated: u64,
    pub trace: Vec<(&'static str, (usize, usize, usize, usize))>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> ShapeExec<F> {
    pub fn new() -> Self {
        Self {
            shapes: Vec::new(),
            elements_allocated: 0,
            trace: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }

    fn push(&mut self, shape: (usize, usize, usize, usize)) -> Id {
        let (n, c, h, w) = shape;
        self.elements_allocated += (n * c * h * w) as u64;
        self.shapes.push(shape);
        Id(self.shapes.len() - 1)
    }

    pub fn traced(&self, label: &str) -> Option<(usize, usize, usize, usize)> {
        self.trace
            .iter()
            .find(|(l, _)| *l == label)
            .map(|(_, s)| *s)
    }
}

impl<F: Scalar> Default for ShapeExec<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Exec<F> for ShapeExec<F> {
    fn input(&mut self, v: Array4<F>) -> Id {
        self.push(v.dim())
    }

    fn conv2d(
        &mut self,
        ps: &ParamStore<F>,
        x: Id,
        w: ParamId,
        _b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Id {
        let (n, _, h, wd) = self.shapes[x.0];
        let wshape = ps.value(w).shape();
        let (c_out, kh, kw) = (wshape[0], wshape[2], wshape[3]);
        self.push((
            n,
            c_out,
            ops::conv_out_side(h, kh, stride, pad),
            ops::conv_out_side(wd, kw, stride, pad),
        ))
    }

    fn relu(&mut self, x: Id) -> Id {
        let s = self.shapes[x.0];
        self.push(s)
    }

    fn sigmoid(&mut self, x: Id) -> Id {
        let s = self.shapes[x.0];
        self.push(s)
    }

    fn add(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shapes[a.0], self.shapes[b.0]);
        let s = self.shapes[a.0];
        self.push(s)
    }

    fn mul_gate(&mut self, x: Id, gate: Id) -> Id {
        let (n, _, h, w) = self.shapes[x.0];
        assert_eq!(self.shapes[gate.0], (n, 1, h, w));
        let s = self.shapes[x.0];
        self.push(s)
    }

    fn upsample_bilinear(&mut self, x: Id, out_h: usize, out_w: usize) -> Id {
        let (n, c, _, _) = self.shapes[x.0];
        self.push((n, c, out_h, out_w))
    }

    fn avg_pool_to(&mut self, x: Id, size: usize) -> Id {
        let (n, c, _, _) = self.shapes[x.0];
        self.push((n, c, size, size))
    }

    fn concat_c(&mut self, xs: &[Id]) -> Id {
        let (n, _, h, w) = self.shapes[xs[0].0];
        let c: usize = xs.iter().map(|id| self.shapes[id.0].1).sum();
        self.push((n, c, h, w))
    }

    fn space_to_batch(&mut self, x: Id, grid: usize) -> Id {
        let (n, c, h, w) = self.shapes[x.0];
        self.push((n * grid * grid, c, h / grid, w / grid))
    }

    fn batch_to_space(&mut self, x: Id, grid: usize) -> Id {
        let (nk, c, h, w) = self.shapes[x.0];
        self.push((nk / (grid * grid), c, h * grid, w * grid))
    }

    fn shape(&self, x: Id) -> (usize, usize, usize, usize) {
        self.shapes[x.0]
    }

    fn value(&self, _x: Id) -> Option<&Array4<F>> {
        None
    }

    fn note(&mut self, label: &'static str, x: Id) {
        self.trace.push((label, self.shapes[x.0]));
    }
}
