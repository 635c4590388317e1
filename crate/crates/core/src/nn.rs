//! Parameter storage and the small layer set shared by the encoders and
//! decoders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Learning-rate group. Backbone parameters train with a reduced step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Glorot-uniform weight matrix.
    pub fn add_weight(
        &mut self,
        rng: &mut impl Rng,
        name: impl Into<String>,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, group, Tensor::from_vec(fan_in, fan_out, data))
    }

    pub fn add_normal_like(
        &mut self,
        rng: &mut impl Rng,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        scale: f64,
    ) -> ParamId {
        // sum of uniforms; close enough to gaussian for initialization
        let data = (0..rows * cols)
            .map(|_| (rng.gen::<f64>() + rng.gen::<f64>() + rng.gen::<f64>() - 1.5) * 2.0 * scale)
            .collect();
        self.add(name, group, Tensor::from_vec(rows, cols, data))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add_weight(rng, format!("{name}.weight"), group, fan_in, fan_out);
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Learned affine applied after a parameter-free layer norm.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), group, Tensor::filled(1, dim, 1.0));
        let shift = store.add(format!("{name}.shift"), group, Tensor::zeros(1, dim));
        Self { gain, shift }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }
}

/// Scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim must split evenly across heads");
        Self {
            query: Linear::new(store, rng, &format!("{name}.q"), group, dim, dim),
            key: Linear::new(store, rng, &format!("{name}.k"), group, dim, dim),
            value: Linear::new(store, rng, &format!("{name}.v"), group, dim, dim),
            output: Linear::new(store, rng, &format!("{name}.o"), group, dim, dim),
            heads,
            dim,
        }
    }

    /// `queries` attend over `keys`. `bias` is an optional additive
    /// `queries x keys` constant (use a large negative value to mask).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        bias: Option<Var>,
    ) -> Var {
        let attn = self.weights_and_values(g, store, queries, keys, bias);
        self.output.forward(g, store, attn)
    }

    fn weights_and_values(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        bias: Option<Var>,
    ) -> Var {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, keys);
        let v = self.value.forward(g, store, keys);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, (h + 1) * dh),
                    g.slice_cols(k, h * dh, (h + 1) * dh),
                    g.slice_cols(v, h * dh, (h + 1) * dh),
                )
            };
            let scores = g.matmul_t(qh, kh, false, true);
            let mut scores = g.scale(scores, scale);
            if let Some(b) = bias {
                scores = g.add(scores, b);
            }
            let w = g.softmax(scores);
            outs.push(g.matmul(w, vh));
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), group, dim, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), group, hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}
