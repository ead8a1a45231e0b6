//! Named parameter store and the small layer vocabulary the model is built
//! from: linear projections, multi-head attention, two-layer MLP heads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Scalar, Tensor, VarId};

/// Stable 64-bit name hash so each parameter gets its own seed stream.
/// Two configurations sharing a block name therefore share its init.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name))
}

/// Named parameters with unique string paths, ordered deterministically.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        let prev = self.params.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name `{}`", name);
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{}`", name))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{}`", name))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }
}

/// Parameters bound into a graph as gradient-carrying inputs.
pub struct BoundParams {
    vars: BTreeMap<String, VarId>,
}

impl BoundParams {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>) -> Self {
        let mut vars = BTreeMap::new();
        for (name, value) in store.iter() {
            vars.insert(name.clone(), g.input(value.clone()));
        }
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> VarId {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{}` not bound", name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &VarId)> {
        self.vars.iter()
    }
}

fn uniform_init<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// y = x W^T (+ b), x: [n, in], W: [out, in], b: [out].
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear { name: name.to_string(), in_dim, out_dim, bias }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let wname = format!("{}.weight", self.name);
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        let w = uniform_init(&[self.out_dim, self.in_dim], bound, &mut rng_for(seed, &wname));
        store.insert(&wname, w);
        if self.bias {
            store.insert(&format!("{}.bias", self.name), Tensor::zeros(&[self.out_dim]));
        }
    }

    /// Weight and bias start at exactly zero, so the layer output is zero.
    pub fn init_zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(
            &format!("{}.weight", self.name),
            Tensor::zeros(&[self.out_dim, self.in_dim]),
        );
        if self.bias {
            store.insert(&format!("{}.bias", self.name), Tensor::zeros(&[self.out_dim]));
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, x: VarId) -> VarId {
        let w = p.var(&format!("{}.weight", self.name));
        let wt = g.transpose(w);
        let y = g.matmul(x, wt);
        if self.bias {
            let b = p.var(&format!("{}.bias", self.name));
            g.add_row_broadcast(y, b)
        } else {
            y
        }
    }
}

/// Scaled dot-product attention over row sets, multi-head, output-projected.
/// With `bias` off and all-zero inputs the output is exactly zero.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub bias: bool,
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize, bias: bool) -> Self {
        assert!(
            dim % heads == 0,
            "attention dim {} not divisible by {} heads",
            dim,
            heads
        );
        MultiHeadAttention {
            name: name.to_string(),
            dim,
            heads,
            bias,
            q_proj: Linear::new(&format!("{name}.q_proj"), dim, dim, bias),
            k_proj: Linear::new(&format!("{name}.k_proj"), dim, dim, bias),
            v_proj: Linear::new(&format!("{name}.v_proj"), dim, dim, bias),
            out_proj: Linear::new(&format!("{name}.out_proj"), dim, dim, bias),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        self.q_proj.init(store, seed);
        self.k_proj.init(store, seed);
        self.v_proj.init(store, seed);
        self.out_proj.init(store, seed);
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        q: VarId,
        k: VarId,
        v: VarId,
    ) -> VarId {
        let hd = self.dim / self.heads;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let qp = self.q_proj.forward(g, p, q);
        let kp = self.k_proj.forward(g, p, k);
        let vp = self.v_proj.forward(g, p, v);
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(qp, h * hd, hd);
            let kh = g.slice_cols(kp, h * hd, hd);
            let vh = g.slice_cols(vp, h * hd, hd);
            let kht = g.transpose(kh);
            let scores = g.matmul(qh, kht);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            head_outs.push(g.matmul(attn, vh));
        }
        let concat = g.concat_cols(&head_outs);
        self.out_proj.forward(g, p, concat)
    }
}

/// Two-layer MLP head with ReLU; the final layer may start at exact zero.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
    pub zero_init_last: bool,
}

impl Mlp2 {
    pub fn new(name: &str, in_dim: usize, hidden: usize, out_dim: usize, zero_init_last: bool) -> Self {
        Mlp2 {
            l1: Linear::new(&format!("{name}.l1"), in_dim, hidden, true),
            l2: Linear::new(&format!("{name}.l2"), hidden, out_dim, true),
            zero_init_last,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        self.l1.init(store, seed);
        if self.zero_init_last {
            self.l2.init_zero(store);
        } else {
            self.l2.init(store, seed);
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, x: VarId) -> VarId {
        let h = self.l1.forward(g, p, x);
        let h = g.relu(h);
        self.l2.forward(g, p, h)
    }
}
