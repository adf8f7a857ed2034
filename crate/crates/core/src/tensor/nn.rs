//! Named parameter storage and the transformer building blocks shared by the
//! relation encoder and the activity transformer.

use std::collections::HashMap;

use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::{Result, Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;

/// Ordered name -> tensor map holding every learnable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Records every parameter as a gradient-tracked leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Params<'_> {
        let vars = self.entries.iter().map(|(_, t)| g.param(t.clone())).collect();
        Params { store: self, vars }
    }

    /// Sets every scalar to zero.
    pub fn zero_all(&mut self) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Parameters of a [`ParamStore`] bound onto one graph.
pub struct Params<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Params<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Gradient per parameter in store order; parameters the loss never
    /// touched get zeros.
    pub fn grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.store
            .entries
            .iter()
            .zip(&self.vars)
            .map(|((_, t), v)| Some(grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))))
            .collect()
    }
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) {
    store.insert(format!("{prefix}.weight"), xavier(rng, fan_in, fan_out));
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
    }
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]));
}

/// Query, key, value and output projections. The key projection carries no
/// bias: a key bias only shifts every logit of a query row by the same amount.
pub fn init_attention(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize) {
    init_linear(store, rng, &format!("{prefix}.q"), d, d, true);
    init_linear(store, rng, &format!("{prefix}.k"), d, d, false);
    init_linear(store, rng, &format!("{prefix}.v"), d, d, true);
    init_linear(store, rng, &format!("{prefix}.out"), d, d, true);
}

/// Pre-norm encoder block: attention and a 4d-wide feed-forward, each behind
/// a layer norm and a residual.
pub fn init_encoder_block(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_attention(store, rng, &format!("{prefix}.attn"), d);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, rng, &format!("{prefix}.ff1"), d, 4 * d, true);
    init_linear(store, rng, &format!("{prefix}.ff2"), 4 * d, d, true);
}

/// `x @ W (+ b)` over the last axis of a rank-2 input.
pub fn linear(g: &mut Graph, p: &Params, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let y = g.matmul(x, w)?;
    let bias = format!("{prefix}.bias");
    if p.has(&bias) {
        let b = p.var(&bias)?;
        g.add(y, b)
    } else {
        Ok(y)
    }
}

/// Applies [`linear`] to an input of any rank by flattening leading axes.
pub fn linear_nd(g: &mut Graph, p: &Params, prefix: &str, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() == 2 {
        return linear(g, p, prefix, x);
    }
    let d = *shape.last().unwrap();
    let rows = shape.iter().product::<usize>() / d;
    let flat = g.reshape(x, &[rows, d])?;
    let y = linear(g, p, prefix, flat)?;
    let out = g.shape(y)[1];
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = out;
    g.reshape(y, &out_shape)
}

pub fn layer_norm(g: &mut Graph, p: &Params, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{prefix}.gain"))?;
    let bias = p.var(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Scaled dot-product multi-head self-attention over `[S, d]` or a batch of
/// sequences `[B, S, d]`.
pub fn multi_head_self_attention(g: &mut Graph, p: &Params, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, s, d) = match shape.as_slice() {
        [s, d] => (1, *s, *d),
        [b, s, d] => (*b, *s, *d),
        _ => {
            return Err(TensorError::Config(format!(
                "attention input must be rank 2 or 3, got {shape:?}"
            )))
        }
    };
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let flat = g.reshape(x, &[b * s, d])?;
    let split = |g: &mut Graph, name: &str| -> Result<Var> {
        let y = linear(g, p, &format!("{prefix}.{name}"), flat)?;
        let y = g.reshape(y, &[b, s, heads, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, &[b * heads, s, dh])
    };
    let q = split(g, "q")?;
    let k = split(g, "k")?;
    let v = split(g, "v")?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(logits, 2)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, &[b, heads, s, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b * s, d])?;
    let out = linear(g, p, &format!("{prefix}.out"), ctx)?;
    g.reshape(out, &shape)
}

pub fn encoder_block(g: &mut Graph, p: &Params, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_self_attention(g, p, &format!("{prefix}.attn"), h, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, &format!("{prefix}.ln2"), x)?;
    let h = linear_nd(g, p, &format!("{prefix}.ff1"), h)?;
    let h = g.relu(h);
    let h = linear_nd(g, p, &format!("{prefix}.ff2"), h)?;
    g.add(x, h)
}
