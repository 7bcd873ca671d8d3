//! Trainable parameters, layers and the optimizer.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Arr, ConvSpec, ConvTSpec, Tape, T};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

pub struct ParamEntry {
    pub name: String,
    pub value: Arr,
    pub grad: Arr,
    pub m: Arr,
    pub v: Arr,
}

/// Flat registry of all trainable tensors of a model.
#[derive(Default)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        let zeros = Arr::zeros(value.raw_dim());
        self.entries.push(ParamEntry {
            name: name.into(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn leaf(&self, tape: &Tape, pid: ParamId) -> T {
        tape.leaf(self.entries[pid.0].value.clone(), pid.0)
    }

    pub fn value(&self, pid: ParamId) -> &Arr {
        &self.entries[pid.0].value
    }

    pub fn value_mut(&mut self, pid: ParamId) -> &mut Arr {
        &mut self.entries[pid.0].value
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Run the reverse pass of `tape` from `loss`, accumulating into grads.
    pub fn backward(&mut self, tape: &Tape, loss: T) {
        let mut grads: Vec<(usize, Arr)> = Vec::new();
        tape.backward(loss, &mut |pid, g| grads.push((pid, g.clone())));
        for (pid, g) in grads {
            self.entries[pid].grad += &g;
        }
    }

    /// Global-norm gradient clipping. Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f32) -> f32 {
        let mut sq = 0.0f64;
        for e in &self.entries {
            sq += e.grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>();
        }
        let norm = sq.sqrt() as f32;
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for e in &mut self.entries {
                e.grad *= s;
            }
        }
        norm
    }
}

/// Adam with the default moment coefficients.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step_count: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for e in &mut store.entries {
            e.m.zip_mut_with(&e.grad, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            e.v.zip_mut_with(&e.grad, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut e.value)
                .and(&e.m)
                .and(&e.v)
                .for_each(|p, m, v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
        }
    }
}

/// Learning-rate reduction on a plateau of the monitored metric.
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f32,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f32) -> Self {
        PlateauScheduler { patience, factor, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Feed one epoch's metric; halves `lr` in place after `patience + 1`
    /// consecutive non-improving epochs. Returns true when lr was reduced.
    pub fn observe(&mut self, metric: f64, lr: &mut f32) -> bool {
        if metric < self.best {
            self.best = metric;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            *lr *= self.factor;
            self.bad_epochs = 0;
            true
        } else {
            false
        }
    }
}

/// Standard normal via Box-Muller, deterministic under a seeded RNG.
pub fn randn(rng: &mut impl Rng) -> f32 {
    loop {
        let u1: f64 = rng.random::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        return (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32;
    }
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f32).sqrt();
    let mut a = ArrayD::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = randn(rng) * std;
    }
    a
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), he_normal(rng, &[out_ch, in_ch, k, k], in_ch * k * k));
        let b = store.add(format!("{name}.b"), Arr::zeros(IxDyn(&[out_ch])));
        Conv2d { w, b, in_ch, out_ch, k, spec: ConvSpec { stride, pad } }
    }

    pub fn forward(&self, t: &Tape, ps: &ParamStore, x: T) -> T {
        let w = ps.leaf(t, self.w);
        let b = ps.leaf(t, self.b);
        t.conv2d(x, w, Some(b), self.spec)
    }

    /// Forward with the kernel multiplied by a constant spatial mask
    /// (`[1,1,k,k]` or full `[Cout,Cin,k,k]`), for causally masked context.
    pub fn forward_masked(&self, t: &Tape, ps: &ParamStore, x: T, mask: &Arr) -> T {
        let w = ps.leaf(t, self.w);
        let full = if mask.shape() == [self.out_ch, self.in_ch, self.k, self.k] {
            mask.clone()
        } else {
            let mut m = Arr::zeros(IxDyn(&[self.out_ch, self.in_ch, self.k, self.k]));
            for co in 0..self.out_ch {
                for ci in 0..self.in_ch {
                    for i in 0..self.k {
                        for j in 0..self.k {
                            m[[co, ci, i, j]] = mask[[0, 0, i, j]];
                        }
                    }
                }
            }
            m
        };
        let wm = t.mul_const(w, &full);
        let b = ps.leaf(t, self.b);
        t.conv2d(x, wm, Some(b), self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.k * self.k * self.in_ch * self.out_ch + self.out_ch
    }

    /// MACs for one image of `h x w` input to this layer.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let oh = crate::tensor::conv_out_dim(h, self.k, self.spec.stride, self.spec.pad);
        let ow = crate::tensor::conv_out_dim(w, self.k, self.spec.stride, self.spec.pad);
        (self.k * self.k * self.in_ch * self.out_ch) as u64 * (oh * ow) as u64
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            crate::tensor::conv_out_dim(h, self.k, self.spec.stride, self.spec.pad),
            crate::tensor::conv_out_dim(w, self.k, self.spec.stride, self.spec.pad),
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvT2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub spec: ConvTSpec,
}

impl ConvT2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), he_normal(rng, &[in_ch, out_ch, k, k], in_ch * k * k));
        let b = store.add(format!("{name}.b"), Arr::zeros(IxDyn(&[out_ch])));
        ConvT2d { w, b, in_ch, out_ch, k, spec: ConvTSpec { stride, pad, out_pad } }
    }

    pub fn forward(&self, t: &Tape, ps: &ParamStore, x: T) -> T {
        let w = ps.leaf(t, self.w);
        let b = ps.leaf(t, self.b);
        t.conv_transpose2d(x, w, Some(b), self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.k * self.k * self.in_ch * self.out_ch + self.out_ch
    }

    /// MACs for one image whose input to this layer is `h x w`
    /// (each input position scatters a k*k*Cout patch).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.k * self.k * self.in_ch * self.out_ch) as u64 * (h * w) as u64
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            crate::tensor::convt_out_dim(h, self.k, self.spec.stride, self.spec.pad, self.spec.out_pad),
            crate::tensor::convt_out_dim(w, self.k, self.spec.stride, self.spec.pad, self.spec.out_pad),
        )
    }
}

/// Generalized divisive normalization: `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`,
/// or its inverse (multiplication) for the synthesis path. Parameters are
/// stored reparametrized (squared on use) to stay positive.
#[derive(Debug, Clone, Copy)]
pub struct Gdn {
    pub beta_r: ParamId,
    pub gamma_r: ParamId,
    pub channels: usize,
    pub inverse: bool,
}

impl Gdn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, inverse: bool) -> Self {
        let beta = Arr::ones(IxDyn(&[channels]));
        let mut gamma = Arr::zeros(IxDyn(&[channels, channels, 1, 1]));
        for c in 0..channels {
            gamma[[c, c, 0, 0]] = 0.1f32.sqrt();
        }
        let beta_r = store.add(format!("{name}.beta"), beta);
        let gamma_r = store.add(format!("{name}.gamma"), gamma);
        Gdn { beta_r, gamma_r, channels, inverse }
    }

    pub fn forward(&self, t: &Tape, ps: &ParamStore, x: T) -> T {
        let gamma = t.square(ps.leaf(t, self.gamma_r));
        let beta_raw = t.square(ps.leaf(t, self.beta_r));
        let beta = t.add_const(beta_raw, &Arr::from_elem(IxDyn(&[self.channels]), 1e-6));
        let x2 = t.square(x);
        let pooled = t.conv2d(x2, gamma, Some(beta), ConvSpec { stride: 1, pad: 0 });
        let denom = t.sqrt(pooled);
        if self.inverse {
            t.mul(x, denom)
        } else {
            t.div(x, denom)
        }
    }

    pub fn param_count(&self) -> usize {
        self.channels + self.channels * self.channels
    }

    /// The channel-mixing pool is a 1x1 conv over squared activations.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.channels * self.channels) as u64 * (h * w) as u64
    }
}
