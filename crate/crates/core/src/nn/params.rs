//! Flat parameter storage.
//!
//! All trainable tensors live in one contiguous `Vec` so the optimizer,
//! checkpoints, and finite-difference checks can treat the model as a single
//! vector. Layers hold [`ParamId`]s and view their slice through the store.

use std::collections::HashMap;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;

use crate::scalar::Scalar;

/// Handle to one registered tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Shape and placement of a registered tensor.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Initialization rule applied at registration.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// U(-a, a).
    Uniform(f64),
    /// Kaiming-style U(-b, b) with b = sqrt(1 / fan_in); the conventional
    /// default for conv/linear weights here.
    KaimingUniform { fan_in: usize },
}

/// Contiguous storage for every trainable tensor of a model.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    values: Vec<F>,
    specs: Vec<ParamSpec>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { values: Vec::new(), specs: Vec::new(), by_name: HashMap::new() }
    }

    /// Register a tensor; names must be unique within a store.
    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let len: usize = shape.iter().product();
        let offset = self.values.len();
        match init {
            Init::Zeros => self.values.extend(std::iter::repeat_n(F::zero(), len)),
            Init::Constant(c) => self
                .values
                .extend(std::iter::repeat_n(F::from_f64(c), len)),
            Init::Uniform(a) => {
                let a = F::from_f64(a);
                self.values
                    .extend((0..len).map(|_| F::uniform(rng, -a, a)));
            }
            Init::KaimingUniform { fan_in } => {
                let b = F::from_f64((1.0 / fan_in as f64).sqrt());
                self.values
                    .extend((0..len).map(|_| F::uniform(rng, -b, b)));
            }
        }
        let id = ParamId(self.specs.len());
        self.specs.push(ParamSpec { name: name.to_string(), shape: shape.to_vec(), offset, len });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn num_values(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn slice(&self, id: ParamId) -> &[F] {
        let s = &self.specs[id.0];
        &self.values[s.offset..s.offset + s.len]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [F] {
        let s = self.specs[id.0].clone();
        &mut self.values[s.offset..s.offset + s.len]
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, F> {
        let s = &self.specs[id.0];
        debug_assert_eq!(s.shape.len(), 1);
        ArrayView1::from_shape(s.shape[0], self.slice(id)).unwrap()
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, F> {
        let s = &self.specs[id.0];
        debug_assert_eq!(s.shape.len(), 2);
        ArrayView2::from_shape((s.shape[0], s.shape[1]), self.slice(id)).unwrap()
    }

    pub fn view1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        let n = self.specs[id.0].shape[0];
        ArrayViewMut1::from_shape(n, self.slice_mut(id)).unwrap()
    }

    pub fn view2_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        let (a, b) = {
            let s = &self.specs[id.0];
            (s.shape[0], s.shape[1])
        };
        ArrayViewMut2::from_shape((a, b), self.slice_mut(id)).unwrap()
    }
}

/// Gradient buffer aligned with a [`ParamStore`] layout.
///
/// Backward passes accumulate into it; per-item buffers are reduced
/// sequentially (in item order) so training is bitwise reproducible.
#[derive(Debug, Clone)]
pub struct GradStore<F> {
    data: Vec<F>,
}

impl<F: Scalar> GradStore<F> {
    pub fn zeros_for(params: &ParamStore<F>) -> Self {
        Self { data: vec![F::zero(); params.num_values()] }
    }

    pub fn reset(&mut self) {
        self.data.fill(F::zero());
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn slice(&self, params: &ParamStore<F>, id: ParamId) -> &[F] {
        let s = params.spec(id);
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn slice_mut(&mut self, params: &ParamStore<F>, id: ParamId) -> &mut [F] {
        let s = params.spec(id);
        &mut self.data[s.offset..s.offset + s.len]
    }

    /// Accumulate `src` into the gradient of `id`.
    pub fn add(&mut self, params: &ParamStore<F>, id: ParamId, src: &[F]) {
        let dst = self.slice_mut(params, id);
        assert_eq!(dst.len(), src.len(), "gradient length mismatch");
        for (d, s) in dst.iter_mut().zip(src) {
            *d += *s;
        }
    }

    /// Accumulate a matrix gradient in logical row-major order, independent
    /// of its memory layout.
    pub fn add2(&mut self, params: &ParamStore<F>, id: ParamId, src: &ndarray::ArrayView2<'_, F>) {
        let dst = self.slice_mut(params, id);
        assert_eq!(dst.len(), src.len(), "gradient length mismatch");
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            *d += *s;
        }
    }

    /// Accumulate the outer product `a ⊗ b` into a [len(a), len(b)] gradient
    /// without materializing it.
    pub fn add_outer(
        &mut self,
        params: &ParamStore<F>,
        id: ParamId,
        a: &ndarray::ArrayView1<'_, F>,
        b: &ndarray::ArrayView1<'_, F>,
    ) {
        let dst = self.slice_mut(params, id);
        assert_eq!(dst.len(), a.len() * b.len(), "gradient length mismatch");
        let b = b.as_standard_layout();
        let bs = b.as_slice().unwrap();
        for (i, &av) in a.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let row = &mut dst[i * bs.len()..(i + 1) * bs.len()];
            for (d, &bv) in row.iter_mut().zip(bs) {
                *d += av * bv;
            }
        }
    }

    /// Reduction of per-item buffers; call order is fixed by the caller and
    /// the elementwise sum itself is order-independent per entry.
    pub fn merge(&mut self, other: &GradStore<F>) {
        use rayon::prelude::*;
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .par_chunks_mut(1 << 15)
            .zip(other.data.par_chunks(1 << 15))
            .for_each(|(d, s)| {
                for i in 0..d.len() {
                    d[i] += s[i];
                }
            });
    }

    pub fn scale(&mut self, factor: F) {
        use rayon::prelude::*;
        self.data.par_chunks_mut(1 << 15).for_each(|c| {
            for d in c {
                *d = *d * factor;
            }
        });
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.into_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}
