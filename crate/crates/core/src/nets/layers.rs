use rand::Rng as _;

use crate::scalar::{c, Scalar};
use crate::seeding::Rng;
use crate::tensor::{Mat, ParamId, ParamStore, Segments, Tape, Var};

/// Forward-pass context binding a tape to one parameter store.
///
/// With `frozen`, parameters enter the tape as constants so the pass can feed a
/// loss that must not update them.
pub struct Fwd<'a, T> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    frozen: bool,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            frozen: false,
        }
    }

    pub fn frozen(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            frozen: true,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if self.frozen {
            self.tape.frozen(self.store, id)
        } else {
            self.tape.param(self.store, id)
        }
    }
}

pub fn glorot<T: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Mat<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| c(rng.gen_range(-limit..limit)))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(in_dim, out_dim, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros((1, out_dim))));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let w = f.p(self.weight);
        let y = f.tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = f.p(b);
                f.tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Mat::ones((1, width))),
            shift: store.add(format!("{name}.shift"), Mat::zeros((1, width))),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let z = f.tape.row_standardize(x);
        let g = f.p(self.gain);
        let z = f.tape.mul_row(z, g);
        let b = f.p(self.shift);
        f.tape.add_row(z, b)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, true, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, true, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, true, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, true, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        x: Var,
        x_segs: &Segments,
        memory: Var,
        memory_segs: &Segments,
        causal: bool,
    ) -> Var {
        let q = self.query.forward(f, x);
        let k = self.key.forward(f, memory);
        let v = self.value.forward(f, memory);
        let a = f
            .tape
            .attention(q, k, v, x_segs, memory_segs, self.heads, causal);
        self.output.forward(f, a)
    }
}

/// Inverted dropout mask with keep probability `1 - rate`.
pub fn dropout_mask<T: Scalar>(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Mat<T> {
    let keep = 1.0 - rate;
    let scale: T = c(1.0 / keep);
    Mat::from_shape_fn((rows, cols), |_| {
        if rng.gen::<f64>() < keep {
            scale
        } else {
            T::zero()
        }
    })
}
