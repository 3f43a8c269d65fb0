//! Transformer building blocks on top of [`Graph`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Forward-pass mode. Dropout only fires in training.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

pub fn dropout<T: Scalar>(g: &mut Graph<'_, T>, x: Var, mode: &mut Mode<'_>) -> Var {
    match mode {
        Mode::Train { dropout, rng } if *dropout > 0.0 => {
            let keep = T::lit(1.0 / (1.0 - *dropout));
            let n = g.value(x).len();
            let mask = (0..n).map(|_| if rng.random::<f64>() < *dropout { T::zero() } else { keep }).collect();
            g.dropout(x, mask)
        }
        _ => x,
    }
}

/// Creates named, randomly initialised parameters.
pub struct ParamBuilder<'a, T> {
    pub store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self { store: ParamStore::new(), rng }
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std is finite");
        let data = (0..rows * cols).map(|_| T::lit(dist.sample(self.rng))).collect();
        self.store.insert(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.insert(name, Matrix::filled(rows, cols, T::lit(value)))
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

/// `y = x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weight: b.normal(&format!("{name}.weight"), fan_in, fan_out, std),
            bias: b.constant(&format!("{name}.bias"), 1, fan_out, 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, width: usize) -> Self {
        Self {
            gamma: b.constant(&format!("{name}.gamma"), 1, width, 1.0),
            beta: b.constant(&format!("{name}.beta"), 1, width, 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, width: usize, heads: usize) -> Self {
        Self {
            query: Linear::new(b, &format!("{name}.query"), width, width),
            key: Linear::new(b, &format!("{name}.key"), width, width),
            value: Linear::new(b, &format!("{name}.value"), width, width),
            output: Linear::new(b, &format!("{name}.output"), width, width),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, query: Var, key: Var, value: Var) -> Var {
        let q = self.query.forward(g, query);
        let k = self.key.forward(g, key);
        let v = self.value.forward(g, value);
        let a = g.attention(q, k, v, self.heads);
        self.output.forward(g, a)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl Block {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, width: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), width),
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), width, heads),
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), width),
            ff_in: Linear::new(b, &format!("{name}.ff_in"), width, 2 * width),
            ff_out: Linear::new(b, &format!("{name}.ff_out"), 2 * width, width),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mode: &mut Mode<'_>) -> Var {
        let h = self.norm1.forward(g, x);
        let a = self.attn.forward(g, h, h, h);
        let a = dropout(g, a, mode);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let f = self.ff_in.forward(g, h);
        let f = g.gelu(f);
        let f = self.ff_out.forward(g, f);
        let f = dropout(g, f, mode);
        g.add(x, f)
    }
}

/// A stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack {
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Stack {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, layers: usize, width: usize, heads: usize) -> Self {
        Self {
            blocks: (0..layers).map(|i| Block::new(b, &format!("{name}.{i}"), width, heads)).collect(),
            norm: LayerNorm::new(b, &format!("{name}.norm"), width),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var, mode: &mut Mode<'_>) -> Var {
        for block in &self.blocks {
            x = block.forward(g, x, mode);
        }
        self.norm.forward(g, x)
    }
}
