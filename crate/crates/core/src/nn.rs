//! Shared layers built on the autodiff tape.

use rand::Rng;

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::tensor::Matrix;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// `x · W + b` for a row vector (or a batch of rows).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            init_uniform(rng, d_in, d_out, d_in),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Matrix::zeros(1, d_out)));
        Self { weight, bias }
    }

    pub fn lookup(store: &ParamStore, name: &str) -> Option<Self> {
        Some(Self {
            weight: store.id(&format!("{name}.weight"))?,
            bias: store.id(&format!("{name}.bias")),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }
}

/// Single LSTM cell with fused gates in the order input, forget, candidate,
/// output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        let input = store.add(
            format!("{name}.input"),
            group,
            init_uniform(rng, d_in, 4 * hidden, hidden),
        );
        let recurrent = store.add(
            format!("{name}.recurrent"),
            group,
            init_uniform(rng, hidden, 4 * hidden, hidden),
        );
        let mut b = Matrix::zeros(1, 4 * hidden);
        // forget gate starts open
        for k in hidden..2 * hidden {
            b.set(0, k, 1.0);
        }
        let bias = store.add(format!("{name}.bias"), group, b);
        Self {
            input,
            recurrent,
            bias,
            hidden,
        }
    }

    pub fn lookup(store: &ParamStore, name: &str) -> Option<Self> {
        let recurrent = store.id(&format!("{name}.recurrent"))?;
        Some(Self {
            input: store.id(&format!("{name}.input"))?,
            recurrent,
            bias: store.id(&format!("{name}.bias"))?,
            hidden: store.get(recurrent).rows(),
        })
    }

    /// Returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> (Var, Var) {
        let (wi, wh, b) = (
            g.param(self.input),
            g.param(self.recurrent),
            g.param(self.bias),
        );
        let xi = g.matmul(x, wi);
        let hh = g.matmul(h, wh);
        let z = g.add(xi, hh);
        let z = g.add_row(z, b);
        let k = self.hidden;
        let i = g.slice_cols(z, 0, k);
        let f = g.slice_cols(z, k, k);
        let cand = g.slice_cols(z, 2 * k, k);
        let o = g.slice_cols(z, 3 * k, k);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c_next = g.add(keep, write);
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed);
        (h_next, c_next)
    }
}
