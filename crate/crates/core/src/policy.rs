//! Expert-conditioned denoising diffusion policy over action
//! sequences: variance schedule, closed-form forward corruption,
//! noise-prediction training loss, and the reverse sampling chain.
//!
//! The denoiser is an MLP over `[flattened noisy sequence | sinusoidal
//! timestep code | conditioning]`; the conditioning vector is
//! `[features | expert embedding]`, with the embedding block absent for
//! unconditioned policies. Latent chains are never clamped — actions
//! are clamped to the speed limit only at execution time.

use rand_distr::StandardNormal;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::io::Artifact;
use crate::nn::{Activation, Adam, Grads, Mlp};
use crate::{Error, Result};

/// Actions per control step.
pub const N_U: usize = 2;

#[derive(Debug, Clone)]
pub struct VarianceSchedule {
    pub i_diff: usize,
    /// `alpha[i-1]` holds α_i for i = 1..=I_diff.
    pub alpha: Vec<f64>,
    /// `alpha_bar[i-1]` holds ᾱ_i; ᾱ_0 := 1 is implicit.
    pub alpha_bar: Vec<f64>,
    /// Reverse-step posterior std; σ_1 = 0 by the ᾱ_0 convention.
    pub sigma: Vec<f64>,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl VarianceSchedule {
    pub fn alpha_bar_prev(&self, i: usize) -> f64 {
        if i <= 1 {
            1.0
        } else {
            self.alpha_bar[i - 2]
        }
    }
}

/// Linear β interpolation between the endpoints, α_i = 1 − β_i,
/// cumulative products, and the reverse posterior variance
/// σ_i² = (1 − ᾱ_{i−1}) / (1 − ᾱ_i) · (1 − α_i) with ᾱ_0 := 1.
pub fn make_schedule(i_diff: usize, beta_start: f64, beta_end: f64) -> Result<VarianceSchedule> {
    if i_diff == 0 {
        return Err(Error::Argument("need at least one diffusion step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Argument(format!(
            "invalid beta range [{beta_start}, {beta_end}]"
        )));
    }
    let mut alpha = Vec::with_capacity(i_diff);
    let mut alpha_bar = Vec::with_capacity(i_diff);
    let mut prod = 1.0;
    for i in 0..i_diff {
        let frac = if i_diff == 1 {
            0.0
        } else {
            i as f64 / (i_diff - 1) as f64
        };
        let beta = beta_start + (beta_end - beta_start) * frac;
        let a = 1.0 - beta;
        prod *= a;
        alpha.push(a);
        alpha_bar.push(prod);
    }
    let mut sigma = Vec::with_capacity(i_diff);
    for i in 1..=i_diff {
        let prev = if i == 1 { 1.0 } else { alpha_bar[i - 2] };
        let var = (1.0 - prev) / (1.0 - alpha_bar[i - 1]) * (1.0 - alpha[i - 1]);
        sigma.push(var.max(0.0).sqrt());
    }
    Ok(VarianceSchedule {
        i_diff,
        alpha,
        alpha_bar,
        sigma,
        beta_start,
        beta_end,
    })
}

/// Noisy sample at step i: √ᾱ_i·a0 + √(1−ᾱ_i)·eps.
pub fn forward_diffuse(
    a0: &[f64],
    i: usize,
    eps: &[f64],
    sched: &VarianceSchedule,
) -> Result<Vec<f64>> {
    if i < 1 || i > sched.i_diff {
        return Err(Error::Argument(format!(
            "diffusion step {i} outside 1..={}",
            sched.i_diff
        )));
    }
    if a0.len() != eps.len() {
        return Err(Error::Argument("noise shape must match the sequence".into()));
    }
    let ab = sched.alpha_bar[i - 1];
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(a0.iter().zip(eps).map(|(a, e)| s * a + n * e).collect())
}

/// Sinusoidal code for the diffusion timestep, dimension `dim` (even).
pub fn timestep_code(i: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = 10_000f64.powf(-(j as f64) / half as f64);
        let angle = i as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Learnable embedding table, one row per expert.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub n: usize,
    pub dim: usize,
    pub table: Vec<f64>,
}

impl Embedding {
    pub fn new(n: usize, dim: usize, rng: &mut ChaCha12Rng) -> Embedding {
        let bound = if dim > 0 { (3.0 / dim as f64).sqrt() } else { 0.0 };
        Embedding {
            n,
            dim,
            table: (0..n * dim).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    pub fn row(&self, k: usize) -> Result<&[f64]> {
        if k >= self.n {
            return Err(Error::Argument(format!(
                "expert index {k} out of range 0..{}",
                self.n
            )));
        }
        Ok(&self.table[k * self.dim..(k + 1) * self.dim])
    }
}

/// Anything that predicts the noise component of a noisy sequence.
pub trait NoisePredictor {
    fn action_dim(&self) -> usize;
    fn predict(&self, a: &[f64], i: usize, c: &[f64]) -> Vec<f64>;
}

/// The trained noise model: MLP plus expert embedding table.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: Mlp,
    pub embeddings: Embedding,
    pub action_dim: usize,
    pub time_dim: usize,
    pub d_feat: usize,
}

impl Denoiser {
    pub fn new(
        action_dim: usize,
        d_feat: usize,
        n_experts: usize,
        d_e: usize,
        time_dim: usize,
        hidden: (usize, usize),
        rng: &mut ChaCha12Rng,
    ) -> Denoiser {
        let emb_dim = if n_experts > 0 { d_e } else { 0 };
        let input = action_dim + time_dim + d_feat + emb_dim;
        let net = Mlp::new(
            vec![input, hidden.0, hidden.1, action_dim],
            vec![Activation::Relu, Activation::Relu, Activation::Linear],
            vec![0.0, 0.0, 0.0],
            rng,
        );
        Denoiser {
            net,
            embeddings: Embedding::new(n_experts, emb_dim, rng),
            action_dim,
            time_dim,
            d_feat,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.embeddings.n
    }

    pub fn cond_dim(&self) -> usize {
        self.d_feat + self.embeddings.dim
    }

    /// Conditioning vector `[features | e_k]`; the embedding block is
    /// absent for an unconditioned model (and then `expert` must be
    /// `None`).
    pub fn conditioning(&self, features: &[f64], expert: Option<usize>) -> Result<Vec<f64>> {
        if features.len() != self.d_feat {
            return Err(Error::Argument(format!(
                "feature dimension {} does not match {}",
                features.len(),
                self.d_feat
            )));
        }
        let mut c = features.to_vec();
        match (self.embeddings.n, expert) {
            (0, None) => {}
            (0, Some(_)) => {
                return Err(Error::Argument(
                    "model is unconditioned; no expert id applies".into(),
                ))
            }
            (_, None) => {
                return Err(Error::Argument(
                    "conditioned model requires an expert id".into(),
                ))
            }
            (_, Some(k)) => c.extend_from_slice(self.embeddings.row(k)?),
        }
        Ok(c)
    }

    fn input(&self, a: &[f64], i: usize, c: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.net.input_dim());
        x.extend_from_slice(a);
        x.extend(timestep_code(i, self.time_dim));
        x.extend_from_slice(c);
        x
    }

    pub fn store(&self, artifact: &mut Artifact) {
        artifact.put_meta("policy.action_dim", self.action_dim);
        artifact.put_meta("policy.time_dim", self.time_dim);
        artifact.put_meta("policy.d_feat", self.d_feat);
        artifact.put_meta("emb.n", self.embeddings.n);
        artifact.put_meta("emb.dim", self.embeddings.dim);
        artifact.put_f64("emb.table", self.embeddings.table.clone());
        self.net.store(artifact, "net.");
    }

    pub fn load(artifact: &Artifact) -> Result<Denoiser> {
        let n: usize = artifact.meta_parse("emb.n")?;
        let dim: usize = artifact.meta_parse("emb.dim")?;
        let table = artifact.f64s("emb.table")?.to_vec();
        if table.len() != n * dim {
            return Err(Error::Checkpoint("embedding table shape mismatch".into()));
        }
        Ok(Denoiser {
            net: Mlp::load(artifact, "net.")?,
            embeddings: Embedding { n, dim, table },
            action_dim: artifact.meta_parse("policy.action_dim")?,
            time_dim: artifact.meta_parse("policy.time_dim")?,
            d_feat: artifact.meta_parse("policy.d_feat")?,
        })
    }
}

impl NoisePredictor for Denoiser {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn predict(&self, a: &[f64], i: usize, c: &[f64]) -> Vec<f64> {
        self.net
            .forward_eval(&self.input(a, i, c))
            .expect("denoiser input assembled to the declared dimension")
    }
}

/// One training sample: flattened expert action sequence, encoded
/// observation features, and (for conditioned policies) the expert id.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub a0: Vec<f64>,
    pub feats: Vec<f64>,
    pub expert: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    pub net: Grads,
    pub emb: Vec<f64>,
}

/// Deterministic loss given fixed per-sample draws of (i, ε): the mean
/// over the batch of ‖ε − ε_θ(a^{(i)}, i, c)‖². Returns gradients for
/// the network and the embedding table.
pub fn diffusion_loss_with_draws(
    den: &Denoiser,
    samples: &[TrainSample],
    draws: &[(usize, Vec<f64>)],
    sched: &VarianceSchedule,
) -> Result<(f64, DenoiserGrads)> {
    if samples.is_empty() || samples.len() != draws.len() {
        return Err(Error::Argument("batch and draws must align".into()));
    }
    let mut total = 0.0;
    let mut net_grads = Grads::zeros_like(&den.net);
    let mut emb_grads = vec![0.0; den.embeddings.table.len()];
    let scale = 1.0 / samples.len() as f64;
    // the denoiser has no dropout, so this stream is never consumed
    let mut dummy = ChaCha12Rng::seed_from_u64(0);
    for (s, (i, eps)) in samples.iter().zip(draws) {
        let a_i = forward_diffuse(&s.a0, *i, eps, sched)?;
        let c = den.conditioning(&s.feats, s.expert)?;
        let x = den.input(&a_i, *i, &c);
        let trace = den.net.forward_train(&x, &mut dummy)?;
        let mut dl = Vec::with_capacity(den.action_dim);
        for (y, e) in trace.output.iter().zip(eps) {
            let diff = e - y;
            total += diff * diff * scale;
            dl.push(-2.0 * diff * scale);
        }
        let (g, dx) = den.net.backward(&trace, &dl);
        net_grads.accumulate(&g);
        if let Some(k) = s.expert {
            let off = den.action_dim + den.time_dim + den.d_feat;
            let row = &mut emb_grads[k * den.embeddings.dim..(k + 1) * den.embeddings.dim];
            for (r, d) in row.iter_mut().zip(&dx[off..off + den.embeddings.dim]) {
                *r += d;
            }
        }
    }
    Ok((
        total,
        DenoiserGrads {
            net: net_grads,
            emb: emb_grads,
        },
    ))
}

/// Stochastic estimator of the training objective: per sample, i drawn
/// uniformly from 1..=I_diff and ε from a standard normal. The full sum
/// over i in the objective is estimated by this uniform draw.
pub fn diffusion_loss(
    den: &Denoiser,
    samples: &[TrainSample],
    sched: &VarianceSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, DenoiserGrads)> {
    let draws: Vec<(usize, Vec<f64>)> = samples
        .iter()
        .map(|_| {
            let i = rng.random_range(1..=sched.i_diff);
            let eps = (0..den.action_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            (i, eps)
        })
        .collect();
    diffusion_loss_with_draws(den, samples, &draws, sched)
}

/// One reverse step of the chain; `z = 0` when i = 1.
pub fn denoise_step(
    pred: &dyn NoisePredictor,
    a: &[f64],
    i: usize,
    c: &[f64],
    sched: &VarianceSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    if i < 1 || i > sched.i_diff {
        return Err(Error::Argument(format!(
            "diffusion step {i} outside 1..={}",
            sched.i_diff
        )));
    }
    let eps = pred.predict(a, i, c);
    let alpha = sched.alpha[i - 1];
    let ab = sched.alpha_bar[i - 1];
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let inv_sqrt = 1.0 / alpha.sqrt();
    let sigma = sched.sigma[i - 1];
    let mut out = Vec::with_capacity(a.len());
    for (av, ev) in a.iter().zip(&eps) {
        let mean = inv_sqrt * (av - coef * ev);
        let z: f64 = if i > 1 { rng.sample(StandardNormal) } else { 0.0 };
        out.push(mean + sigma * z);
    }
    Ok(out)
}

/// Full reverse chain from pure Gaussian noise; deterministic given the
/// rng state.
pub fn sample_actions(
    pred: &dyn NoisePredictor,
    c: &[f64],
    sched: &VarianceSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    let dim = pred.action_dim();
    let mut a: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for i in (1..=sched.i_diff).rev() {
        a = denoise_step(pred, &a, i, c, sched, rng)?;
    }
    Ok(a)
}

/// Training configuration for the denoiser.
#[derive(Debug, Clone)]
pub struct PolicyTrainConfig {
    pub hidden: (usize, usize),
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub time_dim: usize,
    pub d_e: usize,
}

/// Trains a denoiser (and embedding table when `n_experts > 0`) on a
/// demonstration dataset. Returns the model and the per-epoch mean
/// loss curve.
pub fn train_denoiser(
    samples: &[TrainSample],
    action_dim: usize,
    d_feat: usize,
    n_experts: usize,
    sched: &VarianceSchedule,
    tc: &PolicyTrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(Denoiser, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    for s in samples {
        if s.a0.len() != action_dim || s.feats.len() != d_feat {
            return Err(Error::Argument("sample dimensions inconsistent".into()));
        }
        match (n_experts, s.expert) {
            (0, None) => {}
            (0, Some(_)) => {
                return Err(Error::Argument(
                    "unconditioned training cannot take expert labels".into(),
                ))
            }
            (_, None) => {
                return Err(Error::Argument(
                    "conditioned training requires expert labels".into(),
                ))
            }
            (n, Some(k)) if k >= n => {
                return Err(Error::Argument(format!("expert label {k} out of range")))
            }
            _ => {}
        }
    }
    let mut den = Denoiser::new(
        action_dim,
        d_feat,
        n_experts,
        tc.d_e,
        tc.time_dim,
        tc.hidden,
        rng,
    );
    let n_net = den.net.param_count();
    let n_emb = den.embeddings.table.len();
    let mut opt = Adam::new(n_net + n_emb, tc.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(tc.epochs);
    for _ in 0..tc.epochs {
        // Fisher-Yates shuffle from the training stream
        for j in (1..order.len()).rev() {
            order.swap(j, rng.random_range(0..=j));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(tc.batch.max(1)) {
            let batch: Vec<TrainSample> =
                chunk.iter().map(|&i| samples[i].clone()).collect();
            let (loss, grads) = diffusion_loss(&den, &batch, sched, rng)?;
            epoch_loss += loss;
            batches += 1.0;
            let mut params = den.net.flatten_params();
            params.extend_from_slice(&den.embeddings.table);
            let mut flat = den.net.flatten_grads(&grads.net);
            flat.extend_from_slice(&grads.emb);
            opt.step(&mut params, &flat);
            den.net.set_params(&params[..n_net]);
            den.embeddings.table.copy_from_slice(&params[n_net..]);
        }
        curve.push(epoch_loss / batches);
    }
    Ok((den, curve))
}
