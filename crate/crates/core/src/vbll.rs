//! Multi-head variational Bayesian last-layer reward model.
//!
//! Each expert k gets an independent Bayesian linear-regression head
//! r = φᵀβ + η over the frozen feature vector, with a Gaussian
//! variational posterior q(β) = N(μ_N, Σ_N) trained by maximizing a
//! closed-form evidence lower bound. The posterior covariance is
//! parameterized through its Cholesky factor with a log-diagonal, so it
//! stays positive definite by construction and the conjugate
//! Bayesian-linear-regression posterior (which the variational family
//! contains) is exactly recoverable.
//!
//! Note on the likelihood constant: the expected log-likelihood of M
//! samples contributes −(M/2)·log(2πσ_η²), i.e. the constant scales
//! with the per-head sample count. The Monte-Carlo oracle in the tests
//! pins this convention.

use nalgebra::{DMatrix, DVector};

use crate::io::Artifact;
use crate::nn::Adam;
use crate::{Error, Result};

/// One reward regression sample: features, realized reward, expert id.
#[derive(Debug, Clone)]
pub struct RewardSample {
    pub phi: Vec<f64>,
    pub r: f64,
    pub k: usize,
}

/// Reward target: negative mean of the per-step tracking NLL over an
/// execution window. Steps with no defined metric are excluded; a
/// window with no defined step yields `None` and the sample is dropped
/// by the caller.
pub fn reward_target(nll_series: &[Option<f64>]) -> Option<f64> {
    assert!(!nll_series.is_empty());
    let present: Vec<f64> = nll_series.iter().filter_map(|x| *x).collect();
    if present.is_empty() {
        None
    } else {
        Some(-present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Gaussian prior N(0, σ_β² I) over head weights.
#[derive(Debug, Clone, Copy)]
pub struct VbllPrior {
    pub sigma_beta_sq: f64,
}

/// Posterior head: mean, lower-triangular covariance factor
/// (Σ_N = LLᵀ, diag(L) > 0), and log observation-noise variance.
#[derive(Debug, Clone)]
pub struct VbllHead {
    pub d: usize,
    pub mu: DVector<f64>,
    pub l: DMatrix<f64>,
    pub log_noise_sq: f64,
}

impl VbllHead {
    pub fn new(d: usize, init_noise_sq: f64) -> VbllHead {
        VbllHead {
            d,
            mu: DVector::zeros(d),
            l: DMatrix::identity(d, d),
            log_noise_sq: init_noise_sq.ln(),
        }
    }

    pub fn noise_sq(&self) -> f64 {
        self.log_noise_sq.exp()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// Flat parameter layout: [μ | log diag L | strict lower L rows | s].
    pub fn param_count(&self) -> usize {
        2 * self.d + self.d * (self.d - 1) / 2 + 1
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.mu.iter());
        for i in 0..self.d {
            out.push(self.l[(i, i)].ln());
        }
        for i in 1..self.d {
            for j in 0..i {
                out.push(self.l[(i, j)]);
            }
        }
        out.push(self.log_noise_sq);
        out
    }

    pub fn unpack(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let d = self.d;
        for i in 0..d {
            self.mu[i] = flat[i];
        }
        for i in 0..d {
            self.l[(i, i)] = flat[d + i].exp();
        }
        let mut at = 2 * d;
        for i in 1..d {
            for j in 0..i {
                self.l[(i, j)] = flat[at];
                at += 1;
            }
        }
        self.log_noise_sq = flat[at];
    }

    /// Predictive law: mean φᵀμ_N, variance φᵀΣ_Nφ + σ_η². Single
    /// forward pass, no sampling.
    pub fn predict(&self, phi: &[f64]) -> (f64, f64) {
        assert_eq!(phi.len(), self.d);
        let p = DVector::from_column_slice(phi);
        let mean = self.mu.dot(&p);
        let lt_p = self.l.transpose() * &p;
        let epistemic = lt_p.norm_squared();
        (mean, epistemic + self.noise_sq())
    }
}

/// Sufficient statistics of a per-head sample set.
#[derive(Debug, Clone)]
pub struct SuffStats {
    pub m: usize,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub rr: f64,
}

impl SuffStats {
    pub fn from_samples<'a, I>(samples: I, d: usize) -> SuffStats
    where
        I: IntoIterator<Item = &'a RewardSample>,
    {
        let mut a = DMatrix::zeros(d, d);
        let mut b = DVector::zeros(d);
        let mut rr = 0.0;
        let mut m = 0;
        for s in samples {
            assert_eq!(s.phi.len(), d);
            let p = DVector::from_column_slice(&s.phi);
            a.syger(1.0, &p, &p, 1.0);
            b.axpy(s.r, &p, 1.0);
            rr += s.r * s.r;
            m += 1;
        }
        // syger fills the lower triangle; mirror it
        for i in 0..d {
            for j in i + 1..d {
                a[(i, j)] = a[(j, i)];
            }
        }
        SuffStats { m, a, b, rr }
    }
}

/// The five closed-form ELBO terms, separated for testability.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    /// −(M/2)·log(2πσ_η²)
    pub lik_const: f64,
    /// −(1/2σ_β²)(tr Σ_N + μᵀμ)
    pub prior_moment: f64,
    /// −(1/2σ_η²)·Σ (r − φᵀμ)²
    pub data_fit: f64,
    /// −(1/2σ_η²)·Σ φᵀΣ_Nφ
    pub data_spread: f64,
    /// +(1/2)[d + log(|Σ_N|/σ_β^{2d})]
    pub kl_remainder: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.lik_const + self.prior_moment + self.data_fit + self.data_spread + self.kl_remainder
    }
}

pub fn elbo_terms(head: &VbllHead, stats: &SuffStats, prior: &VbllPrior) -> ElboTerms {
    let d = head.d;
    let sb = prior.sigma_beta_sq;
    let noise = head.noise_sq();
    let sigma = head.covariance();
    let m = stats.m as f64;

    let lik_const = -(m / 2.0) * (2.0 * std::f64::consts::PI * noise).ln();
    let prior_moment = -(sigma.trace() + head.mu.norm_squared()) / (2.0 * sb);
    let quad = stats.rr - 2.0 * head.mu.dot(&stats.b) + (&stats.a * &head.mu).dot(&head.mu);
    let data_fit = -quad / (2.0 * noise);
    let spread = (&stats.a * &sigma).trace();
    let data_spread = -spread / (2.0 * noise);
    let logdet: f64 = (0..d).map(|i| head.l[(i, i)].ln()).sum::<f64>() * 2.0;
    let kl_remainder = 0.5 * (d as f64 + logdet - d as f64 * sb.ln());
    ElboTerms {
        lik_const,
        prior_moment,
        data_fit,
        data_spread,
        kl_remainder,
    }
}

/// Closed-form ELBO of one head on its expert's samples.
pub fn elbo(head: &VbllHead, samples: &[RewardSample], prior: &VbllPrior) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("ELBO needs at least one sample".into()));
    }
    let k = samples[0].k;
    for s in samples {
        if s.k != k {
            return Err(Error::Argument("mixed expert ids in one head's batch".into()));
        }
        if !s.r.is_finite() || s.phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::Argument("non-finite reward sample".into()));
        }
    }
    let stats = SuffStats::from_samples(samples.iter(), head.d);
    Ok(elbo_terms(head, &stats, prior).total())
}

/// Analytic gradient of the ELBO with respect to the flat parameters.
pub fn elbo_grad(
    head: &VbllHead,
    stats: &SuffStats,
    prior: &VbllPrior,
    freeze_noise: bool,
) -> Vec<f64> {
    let d = head.d;
    let sb = prior.sigma_beta_sq;
    let noise = head.noise_sq();
    let m = stats.m as f64;

    // dE/dμ = (b − Aμ)/σ_η² − μ/σ_β²
    let d_mu = (&stats.b - &stats.a * &head.mu) / noise - &head.mu / sb;
    // matrix gradient wrt L: −L/σ_β² − (A L)/σ_η²
    let d_l_mat = -(&head.l) / sb - (&stats.a * &head.l) / noise;

    let mut out = Vec::with_capacity(head.param_count());
    out.extend(d_mu.iter());
    for i in 0..d {
        // chain through L_ii = exp(ℓ_i); log-det contributes +1
        out.push(d_l_mat[(i, i)] * head.l[(i, i)] + 1.0);
    }
    for i in 1..d {
        for j in 0..i {
            out.push(d_l_mat[(i, j)]);
        }
    }
    if freeze_noise {
        out.push(0.0);
    } else {
        let quad = stats.rr - 2.0 * head.mu.dot(&stats.b) + (&stats.a * &head.mu).dot(&head.mu);
        let spread = (&stats.a * &head.covariance()).trace();
        out.push(-m / 2.0 + (quad + spread) / (2.0 * noise));
    }
    out
}

/// The multi-head model.
#[derive(Debug, Clone)]
pub struct VbllModel {
    pub d: usize,
    pub prior: VbllPrior,
    pub heads: Vec<VbllHead>,
}

impl VbllModel {
    pub fn new(k: usize, d: usize, prior: VbllPrior, init_noise_sq: f64) -> VbllModel {
        VbllModel {
            d,
            prior,
            heads: (0..k).map(|_| VbllHead::new(d, init_noise_sq)).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn predict(&self, k: usize, phi: &[f64]) -> Result<(f64, f64)> {
        self.heads
            .get(k)
            .map(|h| h.predict(phi))
            .ok_or_else(|| Error::Argument(format!("head {k} out of range")))
    }

    pub fn store(&self, artifact: &mut Artifact) {
        artifact.put_meta("vbll.k", self.heads.len());
        artifact.put_meta("vbll.d", self.d);
        artifact.put_meta("vbll.sigma_beta_sq", format!("{:?}", self.prior.sigma_beta_sq));
        for (k, h) in self.heads.iter().enumerate() {
            artifact.put_f64(&format!("vbll.h{k}.mu"), h.mu.iter().copied().collect());
            artifact.put_f64(
                &format!("vbll.h{k}.l"),
                h.l.row_iter()
                    .flat_map(|r| r.iter().copied().collect::<Vec<f64>>())
                    .collect(),
            );
            artifact.put_meta(&format!("vbll.h{k}.log_noise_sq"), format!("{:?}", h.log_noise_sq));
        }
    }

    pub fn load(artifact: &Artifact) -> Result<VbllModel> {
        let k: usize = artifact.meta_parse("vbll.k")?;
        let d: usize = artifact.meta_parse("vbll.d")?;
        let sigma_beta_sq: f64 = artifact.meta_parse("vbll.sigma_beta_sq")?;
        let mut heads = Vec::with_capacity(k);
        for i in 0..k {
            let mu = artifact.f64s(&format!("vbll.h{i}.mu"))?;
            let l = artifact.f64s(&format!("vbll.h{i}.l"))?;
            if mu.len() != d || l.len() != d * d {
                return Err(Error::Checkpoint(format!("head {i} shape mismatch")));
            }
            let lmat = DMatrix::from_row_slice(d, d, l);
            for r in 0..d {
                if lmat[(r, r)] <= 0.0 {
                    return Err(Error::Checkpoint(format!(
                        "head {i} factor diagonal must stay positive"
                    )));
                }
            }
            heads.push(VbllHead {
                d,
                mu: DVector::from_column_slice(mu),
                l: lmat,
                log_noise_sq: artifact.meta_parse(&format!("vbll.h{i}.log_noise_sq"))?,
            });
        }
        Ok(VbllModel {
            d,
            prior: VbllPrior { sigma_beta_sq },
            heads,
        })
    }
}

/// Mini-batch training loss: Σ_k (|B_k|/B)·(−ELBO_k) over experts
/// present in the batch, with gradients per head.
pub fn vbll_loss(
    model: &VbllModel,
    batch: &[RewardSample],
    freeze_noise: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty training batch".into()));
    }
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(model.k());
    for (k, head) in model.heads.iter().enumerate() {
        let subset: Vec<&RewardSample> = batch.iter().filter(|s| s.k == k).collect();
        if subset.is_empty() {
            grads.push(vec![0.0; head.param_count()]);
            continue;
        }
        let stats = SuffStats::from_samples(subset.iter().copied(), model.d);
        let w = stats.m as f64 / b;
        loss += w * -elbo_terms(head, &stats, &model.prior).total();
        let mut g = elbo_grad(head, &stats, &model.prior, freeze_noise);
        for x in &mut g {
            *x *= -w;
        }
        grads.push(g);
    }
    for s in batch {
        if s.k >= model.k() {
            return Err(Error::Argument(format!("expert id {} out of range", s.k)));
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct VbllFitConfig {
    pub lr: f64,
    pub epochs: usize,
    pub grad_tol: f64,
    pub sigma_beta_sq: f64,
    pub freeze_noise: bool,
    pub init_noise_sq: f64,
}

impl VbllFitConfig {
    pub fn from_config(cfg: &crate::config::Config) -> VbllFitConfig {
        VbllFitConfig {
            lr: cfg.vbll_lr,
            epochs: cfg.vbll_epochs,
            grad_tol: cfg.vbll_grad_tol,
            sigma_beta_sq: cfg.vbll_sigma_beta_sq,
            freeze_noise: cfg.vbll_freeze_noise,
            init_noise_sq: cfg.vbll_init_noise_sq,
        }
    }
}

/// Full-batch fit. Heads are independent given the dataset split, so
/// each is optimized on its own sample-mean negative ELBO (the
/// mini-batch weighting of `vbll_loss` rescales but does not move the
/// optimum). Adaptive-moment steps with an exponentially decaying
/// learning rate run until the gradient norm falls below the tolerance
/// or the epoch budget is spent.
pub fn fit(
    dataset: &[RewardSample],
    k_experts: usize,
    d: usize,
    cfg: &VbllFitConfig,
) -> Result<VbllModel> {
    let prior = VbllPrior {
        sigma_beta_sq: cfg.sigma_beta_sq,
    };
    for s in dataset {
        if s.k >= k_experts {
            return Err(Error::Argument(format!("expert id {} out of range", s.k)));
        }
        if !s.r.is_finite() || s.phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::Argument("non-finite reward sample".into()));
        }
    }
    let mut model = VbllModel::new(k_experts, d, prior, cfg.init_noise_sq);
    for k in 0..k_experts {
        let subset: Vec<&RewardSample> = dataset.iter().filter(|s| s.k == k).collect();
        if subset.is_empty() {
            return Err(Error::Config(format!(
                "expert {k} has no reward samples; every head needs data"
            )));
        }
        let stats = SuffStats::from_samples(subset.into_iter(), d);
        let head = &mut model.heads[k];
        let mut params = head.pack();
        let mut opt = Adam::new(params.len(), cfg.lr);
        let scale = 1.0 / stats.m as f64;
        for epoch in 0..cfg.epochs {
            let mut g = elbo_grad(head, &stats, &prior, cfg.freeze_noise);
            let mut norm = 0.0;
            for x in &mut g {
                *x *= -scale;
                norm += *x * *x;
            }
            if norm.sqrt() < cfg.grad_tol {
                break;
            }
            // decay to lr/1000 across the budget for a tight final polish
            opt.lr = cfg.lr * 1e-4f64.powf(epoch as f64 / cfg.epochs as f64);
            opt.step(&mut params, &g);
            head.unpack(&params);
        }
    }
    Ok(model)
}

/// Exact conjugate Bayesian-linear-regression posterior with known
/// noise: Σ* = (ΦᵀΦ/σ_η² + I/σ_β²)⁻¹, μ* = Σ*Φᵀr/σ_η².
pub fn conjugate_posterior(
    samples: &[RewardSample],
    prior: &VbllPrior,
    sigma_eta_sq: f64,
    d: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    assert!(sigma_eta_sq > 0.0);
    let stats = SuffStats::from_samples(samples.iter(), d);
    let precision = &stats.a / sigma_eta_sq + DMatrix::identity(d, d) / prior.sigma_beta_sq;
    let chol = precision
        .cholesky()
        .expect("posterior precision is positive definite by construction");
    let cov = chol.inverse();
    let mean = &cov * (&stats.b / sigma_eta_sq);
    (mean, cov)
}
