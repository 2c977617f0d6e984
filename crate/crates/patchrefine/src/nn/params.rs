//! Named parameter storage, seeded initialization, and Adam.

use ndarray::{Array1, Array4, ArrayD, ArrayView1, ArrayView4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors. Creation order is fixed by the
/// network constructor, which makes initialization and serialization
/// deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    /// He fan-in normal initialization for a convolution weight.
    pub fn add_conv_weight(
        &mut self,
        name: impl Into<String>,
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let fan_in = (c_in * kh * kw) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let w = Array4::from_shape_simple_fn((c_out, c_in, kh, kw), || {
            F::from_f64c(normal.sample(rng))
        });
        self.add(name, w.into_dyn())
    }

    pub fn add_zero_bias(&mut self, name: impl Into<String>, c_out: usize) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(&[c_out])))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn as_conv_weight(&self, id: ParamId) -> ArrayView4<'_, F> {
        self.values[id.0]
            .view()
            .into_dimensionality()
            .expect("conv weight is 4-d")
    }

    pub fn as_bias(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.values[id.0]
            .view()
            .into_dimensionality()
            .expect("bias is 1-d")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn map_to<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::from_f64c(x.to_f64().unwrap())))
                .collect(),
        }
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug)]
pub struct ParamGrads<F> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> ParamGrads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: ArrayD<F>) {
        match &mut self.grads[id.0] {
            Some(g) => *g += &grad,
            slot => *slot = Some(grad),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Adam optimizer with the standard bias-corrected moment estimates.
#[derive(Debug)]
pub struct Adam<F> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
            v: store.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>) {
        self.t += 1;
        let b1 = F::from_f64c(self.beta1);
        let b2 = F::from_f64c(self.beta2);
        let one = F::one();
        let bc1 = F::from_f64c(1.0 - self.beta1.powi(self.t));
        let bc2 = F::from_f64c(1.0 - self.beta2.powi(self.t));
        let lr = F::from_f64c(self.lr);
        let eps = F::from_f64c(self.eps);
        for (idx, grad) in grads.grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(g, |mv, &gv| *mv = b1 * *mv + (one - b1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = b2 * *vv + (one - b2) * gv * gv);
            let param = &mut store.values[idx];
            ndarray::Zip::from(param.view_mut())
                .and(m.view())
                .and(v.view())
                .for_each(|p, &mv, &vv| {
                    let m_hat = mv / bc1;
                    let v_hat = vv / bc2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

pub fn bias_view<F: Scalar>(b: &Array1<F>) -> ArrayView1<'_, F> {
    b.view()
}
