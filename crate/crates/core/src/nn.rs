//! Minimal feed-forward network with exact reverse-mode gradients and
//! an adaptive-moment optimizer. All math is in 64-bit floats; there is
//! no graph autodiff, just the feed-forward chain rule, which keeps the
//! finite-difference contract easy to state and easy to test.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::io::Artifact;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// Derivative given pre-activation `z` and output `a = apply(z)`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }

    fn from_tag(s: &str) -> Result<Activation> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Checkpoint(format!("unknown activation `{other}`"))),
        }
    }
}

/// Fully-connected network. Weights are row-major `(fan_out, fan_in)`
/// per layer; dropout (inverted convention) applies to the activation
/// output of every non-final layer with the given rate.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub acts: Vec<Activation>,
    pub dropout: Vec<f64>,
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// Retained intermediates of one train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    pub output: Vec<f64>,
}

/// Gradients shaped like the network parameters.
#[derive(Debug, Clone)]
pub struct Grads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Grads {
        Grads {
            w: net.w.iter().map(|m| vec![0.0; m.len()]).collect(),
            b: net.b.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.w.iter_mut().chain(self.b.iter_mut()) {
            for x in m {
                *x *= s;
            }
        }
    }
}

impl Mlp {
    /// Seed-controlled scaled-uniform fan-in init: weights uniform in
    /// ±gain·√(3/fan_in) with gain 1 for tanh/linear and √2 for relu;
    /// biases zero.
    pub fn new(
        sizes: Vec<usize>,
        acts: Vec<Activation>,
        dropout: Vec<f64>,
        rng: &mut ChaCha12Rng,
    ) -> Mlp {
        assert!(sizes.len() >= 2, "need at least one layer");
        assert_eq!(acts.len(), sizes.len() - 1);
        assert_eq!(dropout.len(), sizes.len() - 1);
        assert!(dropout.iter().all(|p| (0.0..1.0).contains(p)));
        assert_eq!(
            *dropout.last().unwrap(),
            0.0,
            "no dropout after the output layer"
        );
        let mut w = Vec::new();
        let mut b = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let gain = match acts[l] {
                Activation::Relu => std::f64::consts::SQRT_2,
                _ => 1.0,
            };
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            w.push(
                (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            );
            b.push(vec![0.0; fan_out]);
        }
        Mlp {
            sizes,
            acts,
            dropout,
            w,
            b,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    fn affine(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let mut z = self.b[l].clone();
        for o in 0..fan_out {
            let row = &self.w[l][o * fan_in..(o + 1) * fan_in];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            z[o] += acc;
        }
        z
    }

    /// Deterministic forward pass; dropout is the identity.
    pub fn forward_eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Argument(format!(
                "input dimension {} does not match first layer {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut h = x.to_vec();
        for l in 0..self.layer_count() {
            let z = self.affine(l, &h);
            h = z.into_iter().map(|v| self.acts[l].apply(v)).collect();
        }
        Ok(h)
    }

    /// Forward pass retaining intermediates; dropout masks (0 or
    /// 1/(1−p) per unit) are drawn from `rng` and kept for backward.
    pub fn forward_train(&self, x: &[f64], rng: &mut ChaCha12Rng) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::Argument(format!(
                "input dimension {} does not match first layer {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layer_count());
        let mut pre = Vec::with_capacity(self.layer_count());
        let mut post = Vec::with_capacity(self.layer_count());
        let mut masks = Vec::with_capacity(self.layer_count());
        let mut h = x.to_vec();
        for l in 0..self.layer_count() {
            inputs.push(h.clone());
            let z = self.affine(l, &h);
            let a: Vec<f64> = z.iter().map(|v| self.acts[l].apply(*v)).collect();
            let p = self.dropout[l];
            let mask = if p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                Some(
                    (0..a.len())
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect::<Vec<f64>>(),
                )
            } else {
                None
            };
            h = match &mask {
                Some(m) => a.iter().zip(m).map(|(v, s)| v * s).collect(),
                None => a.clone(),
            };
            pre.push(z);
            post.push(a);
            masks.push(mask);
        }
        Ok(ForwardTrace {
            inputs,
            pre,
            post,
            masks,
            output: h,
        })
    }

    /// Exact reverse-mode gradients for a retained forward pass.
    /// Returns parameter gradients and the loss gradient with respect
    /// to the network input (for upstream embedding tables).
    pub fn backward(&self, trace: &ForwardTrace, dl_dy: &[f64]) -> (Grads, Vec<f64>) {
        assert_eq!(dl_dy.len(), self.output_dim());
        let mut grads = Grads::zeros_like(self);
        let mut up = dl_dy.to_vec();
        for l in (0..self.layer_count()).rev() {
            if let Some(m) = &trace.masks[l] {
                for (u, s) in up.iter_mut().zip(m) {
                    *u *= s;
                }
            }
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut dz = vec![0.0; fan_out];
            for o in 0..fan_out {
                dz[o] = up[o] * self.acts[l].derivative(trace.pre[l][o], trace.post[l][o]);
            }
            let x = &trace.inputs[l];
            for o in 0..fan_out {
                let row = &mut grads.w[l][o * fan_in..(o + 1) * fan_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += dz[o] * xi;
                }
                grads.b[l][o] += dz[o];
            }
            let mut dx = vec![0.0; fan_in];
            for o in 0..fan_out {
                let row = &self.w[l][o * fan_in..(o + 1) * fan_in];
                for (d, wi) in dx.iter_mut().zip(row) {
                    *d += dz[o] * wi;
                }
            }
            up = dx;
        }
        (grads, up)
    }

    pub fn param_count(&self) -> usize {
        self.w.iter().map(Vec::len).sum::<usize>() + self.b.iter().map(Vec::len).sum::<usize>()
    }

    /// Flat parameter order: w0, b0, w1, b1, ...
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.layer_count() {
            out.extend_from_slice(&self.w[l]);
            out.extend_from_slice(&self.b[l]);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        for l in 0..self.layer_count() {
            let nw = self.w[l].len();
            self.w[l].copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = self.b[l].len();
            self.b[l].copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }

    pub fn flatten_grads(&self, g: &Grads) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.layer_count() {
            out.extend_from_slice(&g.w[l]);
            out.extend_from_slice(&g.b[l]);
        }
        out
    }

    /// Writes the network under `prefix` into an artifact, including a
    /// shape manifest used to validate loads.
    pub fn store(&self, artifact: &mut Artifact, prefix: &str) {
        let sizes = self
            .sizes
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let acts = self
            .acts
            .iter()
            .map(|a| a.tag().to_string())
            .collect::<Vec<_>>()
            .join(",");
        let dropout = self
            .dropout
            .iter()
            .map(|p| format!("{p:?}"))
            .collect::<Vec<_>>()
            .join(",");
        artifact.put_meta(&format!("{prefix}sizes"), sizes);
        artifact.put_meta(&format!("{prefix}acts"), acts);
        artifact.put_meta(&format!("{prefix}dropout"), dropout);
        for l in 0..self.layer_count() {
            artifact.put_f64(&format!("{prefix}w{l}"), self.w[l].clone());
            artifact.put_f64(&format!("{prefix}b{l}"), self.b[l].clone());
        }
    }

    pub fn load(artifact: &Artifact, prefix: &str) -> Result<Mlp> {
        let sizes = artifact
            .meta_str(&format!("{prefix}sizes"))?
            .split(',')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad layer size `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let acts = artifact
            .meta_str(&format!("{prefix}acts"))?
            .split(',')
            .map(Activation::from_tag)
            .collect::<Result<Vec<_>>>()?;
        let dropout = artifact
            .meta_str(&format!("{prefix}dropout"))?
            .split(',')
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Checkpoint(format!("bad dropout rate `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if sizes.len() < 2 || acts.len() != sizes.len() - 1 || dropout.len() != sizes.len() - 1 {
            return Err(Error::Checkpoint("inconsistent shape manifest".to_string()));
        }
        let mut w = Vec::new();
        let mut b = Vec::new();
        for l in 0..sizes.len() - 1 {
            let wl = artifact.f64s(&format!("{prefix}w{l}"))?;
            let bl = artifact.f64s(&format!("{prefix}b{l}"))?;
            if wl.len() != sizes[l] * sizes[l + 1] || bl.len() != sizes[l + 1] {
                return Err(Error::Checkpoint(format!(
                    "layer {l} payload does not match the shape manifest"
                )));
            }
            w.push(wl.to_vec());
            b.push(bl.to_vec());
        }
        Ok(Mlp {
            sizes,
            acts,
            dropout,
            w,
            b,
        })
    }
}

/// Bias-corrected adaptive-moment optimizer over a flat parameter
/// vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
