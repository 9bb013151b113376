//! Parameter storage, layer building blocks, and the Adam optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// Pushes every parameter onto `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.values.iter().map(|m| tape.param(m.clone())).collect() }
    }
}

/// Tape variables for a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Stable 64-bit FNV-1a, used to derive per-parameter init streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic RNG for one parameter. Depends only on the seed and the name,
/// so adding or removing other parameters never perturbs this one.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    let normal = Normal::new(0.0, std).expect("valid std");
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// `y = x W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let wname = format!("{name}.weight");
        let weight = xavier(fan_in, fan_out, &mut param_rng(seed, &wname));
        Self {
            weight: store.add(wname, weight),
            bias: Some(store.add(format!("{name}.bias"), Mat::zeros(1, fan_out))),
        }
    }

    /// `y = x W` only.
    pub fn without_bias(store: &mut ParamStore, seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let wname = format!("{name}.weight");
        let weight = xavier(fan_in, fan_out, &mut param_rng(seed, &wname));
        Self { weight: store.add(wname, weight), bias: None }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, p.var(self.weight));
        match self.bias {
            Some(b) => tape.add_row(h, p.var(b)),
            None => h,
        }
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, seed, &format!("{name}.query"), dim, dim),
            // a key bias shifts every score of a query equally, which softmax cancels
            key: Linear::without_bias(store, seed, &format!("{name}.key"), dim, dim),
            value: Linear::new(store, seed, &format!("{name}.value"), dim, dim),
            out: Linear::new(store, seed, &format!("{name}.out"), dim, dim),
            heads,
            dim,
        }
    }

    /// Queries from `x` attend over `context`; returns the projected output
    /// (no residual).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, context: Var) -> Var {
        let q = self.query.forward(tape, p, x);
        let k = self.key.forward(tape, p, context);
        let v = self.value.forward(tape, p, context);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.out.forward(tape, p, joined)
    }

    pub fn zero_output(&self, store: &mut ParamStore) {
        for id in [Some(self.out.weight), self.out.bias].into_iter().flatten() {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Two-layer feed-forward block with a GELU between the layers.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, dims: (usize, usize, usize)) -> Self {
        Self {
            hidden: Linear::new(store, seed, &format!("{name}.hidden"), dims.0, dims.1),
            output: Linear::new(store, seed, &format!("{name}.output"), dims.1, dims.2),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.hidden.forward(tape, p, x);
        let h = tape.gelu(h);
        self.output.forward(tape, p, h)
    }
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// Adam with bias correction and constant step size.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, m)| Mat::zeros(m.rows, m.cols)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `grads[i]` pairs with parameter `i` of `store`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let w = store.get_mut(id);
            for k in 0..w.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m.data[k] / c1;
                let vhat = v.data[k] / c2;
                w.data[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_init_is_independent_of_siblings() {
        let mut a = ParamStore::new();
        let la = Linear::new(&mut a, 9, "x", 4, 3);
        let mut b = ParamStore::new();
        Linear::new(&mut b, 9, "other", 7, 7);
        let lb = Linear::new(&mut b, 9, "x", 4, 3);
        assert_eq!(a.get(la.weight), b.get(lb.weight));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..2000 {
            let w = store.get(id).clone();
            let g = Mat::from_vec(1, 2, w.data.iter().map(|x| 2.0 * (x - 1.0)).collect());
            opt.update(&mut store, &[g]);
        }
        for v in &store.get(id).data {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::from_vec(1, 1, vec![0.25]));
        let mut opt = Adam::new(&store, 0.1);
        opt.update(&mut store, &[Mat::zeros(1, 1)]);
        assert_eq!(store.get(id).data[0], 0.25);
    }

    #[test]
    fn positions_are_bounded() {
        let p = sinusoidal_positions(10, 8);
        assert!(p.data.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(p.get(0, 1), 1.0);
    }
}
