//! Two-stage training: the expert-conditioned diffusion policy (plus
//! an unconditioned variant), then the selector bank — Bayesian reward
//! heads, a gating classifier, a deterministic per-expert regressor,
//! and a dropout-ensemble head — all over the same frozen features.

use std::path::Path;

use crate::bandit::{train_classifier, train_regressor};
use crate::config::Config;
use crate::experts::K_EXPERTS;
use crate::features::{Normalizer, D_FEAT};
use crate::io::Artifact;
use crate::nn::Mlp;
use crate::policy::{
    make_schedule, train_denoiser, Denoiser, PolicyTrainConfig, TrainSample, VarianceSchedule,
};
use crate::rng::SeedNode;
use crate::vbll::{fit, RewardSample, VbllFitConfig, VbllModel};
use crate::{Error, Result};

use super::dataset::Dataset;

/// Trains the diffusion policy on the demonstration set. Expert labels
/// are attached when `conditioned`; otherwise the same windows train an
/// expert-agnostic model. Returns the model and per-epoch loss curve.
pub fn train_policy(
    ds: &Dataset,
    cfg: &Config,
    conditioned: bool,
    seed: u64,
) -> Result<(Denoiser, Vec<f64>)> {
    if ds.samples.is_empty() {
        return Err(Error::Config("cannot train policy on empty dataset".into()));
    }
    let samples: Vec<TrainSample> = ds
        .samples
        .iter()
        .map(|s| TrainSample {
            a0: s.actions.clone(),
            feats: ds.normalizer.apply(&s.feats_raw),
            expert: conditioned.then_some(s.expert),
        })
        .collect();
    let sched = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
    let tc = PolicyTrainConfig {
        hidden: (cfg.denoiser_hidden1, cfg.denoiser_hidden2),
        epochs: cfg.policy_epochs,
        batch: cfg.policy_batch,
        lr: cfg.policy_lr,
        time_dim: cfg.time_dim,
        d_e: cfg.embed_dim,
    };
    let stream = if conditioned { "cond" } else { "uncond" };
    let mut rng = SeedNode::root(seed).child("train-policy").stream(stream);
    let n_experts = if conditioned { K_EXPERTS } else { 0 };
    let (den, curve) = train_denoiser(
        &samples,
        2 * ds.t_pred,
        D_FEAT,
        n_experts,
        &sched,
        &tc,
        &mut rng,
    )?;
    if curve.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numerical(format!(
            "policy training diverged (loss curve {:?})",
            curve
        )));
    }
    Ok((den, curve))
}

/// Writes a policy checkpoint: denoiser weights, variance-schedule
/// parameters, and the frozen normalization constants whose manifest
/// hash binds the checkpoint to its feature layout.
pub fn store_policy(
    den: &Denoiser,
    norm: &Normalizer,
    cfg: &Config,
    path: &Path,
) -> Result<()> {
    let mut a = Artifact::new("policy");
    a.put_meta("schedule.steps", cfg.diffusion_steps);
    a.put_meta("schedule.beta_start", cfg.beta_start);
    a.put_meta("schedule.beta_end", cfg.beta_end);
    a.put_meta("horizon.t_pred", den.action_dim / 2);
    den.store(&mut a);
    norm.store(&mut a);
    a.write(path)
}

pub fn load_policy(path: &Path) -> Result<(Denoiser, Normalizer, VarianceSchedule)> {
    let a = Artifact::read_kind(path, "policy")?;
    let den = Denoiser::load(&a)?;
    let norm = Normalizer::load(&a)?;
    let sched = make_schedule(
        a.meta_parse("schedule.steps")?,
        a.meta_parse("schedule.beta_start")?,
        a.meta_parse("schedule.beta_end")?,
    )?;
    Ok((den, norm, sched))
}

/// The trained selector bank. All members consume the same normalized
/// features the policy conditions on.
#[derive(Debug, Clone)]
pub struct SelectorBundle {
    pub vbll: VbllModel,
    pub moe: Mlp,
    pub regress: Mlp,
    pub mcdrop: Mlp,
}

/// Offline gating labels: best expert per context under a k-nearest
/// neighbour reward estimate. For each context, each expert's reward is
/// estimated from that expert's nearest logged samples in feature
/// space; the label is the argmax (lowest index on ties). Logged data
/// observes one expert per context, so direct best-arm labels do not
/// exist; this local estimate is the label source for the classifier.
pub fn knn_best_expert_labels(phis: &[Vec<f64>], experts: &[usize], rewards: &[f64], j: usize) -> Vec<usize> {
    let n = phis.len();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for k in 0..K_EXPERTS {
            // distances to expert-k samples
            let mut dists: Vec<(f64, usize)> = (0..n)
                .filter(|&m| experts[m] == k)
                .map(|m| {
                    let d2: f64 = phis[i]
                        .iter()
                        .zip(&phis[m])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d2, m)
                })
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let take = j.min(dists.len()).max(1).min(dists.len());
            if dists.is_empty() {
                continue;
            }
            let est = dists[..take].iter().map(|(_, m)| rewards[*m]).sum::<f64>() / take as f64;
            if est > best.0 {
                best = (est, k);
            }
        }
        labels.push(best.1);
    }
    labels
}

/// Trains the full selector bank. Every expert must have samples; the
/// Bayesian heads train per-expert (head k sees only expert-k data),
/// the regression heads mask their loss to the observed expert, and the
/// classifier trains on nearest-neighbour best-expert labels.
pub fn train_selector(ds: &Dataset, cfg: &Config, seed: u64) -> Result<SelectorBundle> {
    let nk = ds.n_k();
    if nk.iter().any(|&c| c == 0) {
        return Err(Error::Config(format!(
            "every expert needs demonstration samples, got counts {nk:?}"
        )));
    }
    let phis: Vec<Vec<f64>> = (0..ds.samples.len()).map(|i| ds.phi(i)).collect();
    let experts: Vec<usize> = ds.samples.iter().map(|s| s.expert).collect();
    let rewards: Vec<f64> = ds.samples.iter().map(|s| s.reward).collect();

    // Bayesian last-layer heads on (features -> reward), per expert
    let reward_samples: Vec<RewardSample> = (0..ds.samples.len())
        .map(|i| RewardSample {
            phi: phis[i].clone(),
            r: rewards[i],
            k: experts[i],
        })
        .collect();
    let vbll = fit(
        &reward_samples,
        K_EXPERTS,
        D_FEAT,
        &VbllFitConfig::from_config(cfg),
    )?;

    let node = SeedNode::root(seed).child("train-selector");

    // gating classifier on locally-best-expert labels
    let labels = knn_best_expert_labels(&phis, &experts, &rewards, 5);
    let clf_samples: Vec<(Vec<f64>, usize)> = phis
        .iter()
        .cloned()
        .zip(labels.iter().copied())
        .collect();
    let moe = train_classifier(
        &clf_samples,
        K_EXPERTS,
        cfg.selector_net_hidden,
        cfg.selector_net_epochs,
        cfg.policy_batch,
        cfg.selector_net_lr,
        &mut node.stream("moe"),
    )?;

    // per-expert NLL regression, masked to the observed expert
    let reg_samples: Vec<(Vec<f64>, usize, f64)> = (0..ds.samples.len())
        .map(|i| (phis[i].clone(), experts[i], -rewards[i]))
        .collect();
    let regress = train_regressor(
        &reg_samples,
        K_EXPERTS,
        cfg.selector_net_hidden,
        cfg.selector_net_epochs,
        cfg.policy_batch,
        cfg.selector_net_lr,
        0.0,
        &mut node.stream("mlpreg"),
    )?;
    let mcdrop = train_regressor(
        &reg_samples,
        K_EXPERTS,
        cfg.selector_net_hidden,
        cfg.selector_net_epochs,
        cfg.policy_batch,
        cfg.selector_net_lr,
        cfg.selector_dropout,
        &mut node.stream("mcdrop"),
    )?;
    Ok(SelectorBundle {
        vbll,
        moe,
        regress,
        mcdrop,
    })
}

/// One checkpoint bundle for the whole selector bank, carrying the
/// same normalization manifest as the policy checkpoint.
pub fn store_selector(
    bundle: &SelectorBundle,
    norm: &Normalizer,
    path: &Path,
) -> Result<()> {
    let mut a = Artifact::new("selector");
    bundle.vbll.store(&mut a);
    bundle.moe.store(&mut a, "moe.");
    bundle.regress.store(&mut a, "reg.");
    bundle.mcdrop.store(&mut a, "mc.");
    norm.store(&mut a);
    a.write(path)
}

pub fn load_selector(path: &Path) -> Result<(SelectorBundle, Normalizer)> {
    let a = Artifact::read_kind(path, "selector")?;
    let bundle = SelectorBundle {
        vbll: VbllModel::load(&a)?,
        moe: Mlp::load(&a, "moe.")?,
        regress: Mlp::load(&a, "reg.")?,
        mcdrop: Mlp::load(&a, "mc.")?,
    };
    let norm = Normalizer::load(&a)?;
    Ok((bundle, norm))
}

/// Verifies two checkpoints were built over the same feature layout
/// and normalization constants.
pub fn check_artifacts_match(a: &Path, b: &Path) -> Result<()> {
    let aa = Artifact::read(a)?;
    let bb = Artifact::read(b)?;
    Normalizer::check_match(&aa, &bb)
}
