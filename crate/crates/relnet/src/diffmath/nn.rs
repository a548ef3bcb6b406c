//! Linear layers and small MLPs on top of the tape.

use rand::Rng;

use super::array::{Array, Scalar};
use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};

/// Fully connected layer: `x @ w + b` with `w: in x out`, `b: out`.
#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_xavier(format!("{name}.w"), in_dim, out_dim, rng);
        let b = store.add(format!("{name}.b"), Array::zeros(vec![out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, bound.var(self.w));
        tape.add_row_broadcast(h, bound.var(self.b))
    }
}

/// MLP with tanh on every layer except the last.
#[derive(Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every layer width, input first: `[in, h1, .., out]`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h);
            if i < last {
                h = tape.tanh(h);
            }
        }
        h
    }
}
