//! Parameter storage and the small layer vocabulary the architecture is
//! built from.
//!
//! All trainable parameters of a model live in one flat [`ParamStore`];
//! layers hold [`ParamId`]s and bind them into the current step's tape at
//! forward time. Keeping the values flat makes the optimizer, parameter
//! file I/O and finite-difference checks over whole models trivial.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a registered parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Flat, named storage for every trainable tensor of one model.
pub struct ParamStore<F> {
    data: Vec<F>,
    entries: Vec<Entry>,
    stamp: u64,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        use std::sync::atomic::{AtomicU64, Ordering};
        static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);
        ParamStore {
            data: Vec::new(),
            entries: Vec::new(),
            stamp: NEXT_STAMP.fetch_add(1, Ordering::Relaxed),
        }
    }

    /// Identity token: a tape binds parameters from exactly one store.
    pub(crate) fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<F>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let len: usize = shape.iter().product();
        assert_eq!(len, values.len(), "parameter {name}: shape/value mismatch");
        let offset = self.data.len();
        self.data.extend(values);
        self.entries.push(Entry {
            name,
            shape: shape.to_vec(),
            offset,
            len,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn param_count(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.data.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn values(&self, id: ParamId) -> &[F] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn set_values(&mut self, id: ParamId, values: &[F]) {
        let e = &self.entries[id.0];
        assert_eq!(e.len, values.len(), "parameter {}: wrong length", e.name);
        self.data[e.offset..e.offset + e.len].copy_from_slice(values);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Flat range of a parameter inside [`ParamStore::flat`].
    pub fn flat_range(&self, id: ParamId) -> std::ops::Range<usize> {
        let e = &self.entries[id.0];
        e.offset..e.offset + e.len
    }

    pub fn flat(&self) -> &[F] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Sets every parameter of the store to zero.
    pub fn zero_all(&mut self) {
        for v in &mut self.data {
            *v = F::zero();
        }
    }
}

/// Glorot-uniform draw for a `[d_in, d_out]` weight matrix.
fn glorot<F: Scalar>(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Vec<F> {
    let limit = (6.0 / (d_in + d_out) as f64).sqrt();
    (0..d_in * d_out)
        .map(|_| F::of(rng.gen_range(-limit..limit)))
        .collect()
}

/// Affine layer `x W + b` with `W: [d_in, d_out]`, `b: [1, d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.register(format!("{name}.w"), &[d_in, d_out], glorot(rng, d_in, d_out));
        let b = store.register(format!("{name}.b"), &[1, d_out], vec![F::zero(); d_out]);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        if tape.shape(x).last() != Some(&self.d_in) {
            return Err(Error::Shape {
                op: "linear",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

/// Two affine layers with a ReLU between: the "2-layer perceptron" used for
/// encoders, experts, heads and adapters throughout.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, d_hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), d_hidden, d_out),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, store, h)
    }
}
