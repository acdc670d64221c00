//! Expert selection over per-head predictive distributions, plus the
//! deterministic-gating and dropout-ensemble baseline machinery.
//!
//! Sign convention: selection maximizes reward (negative tracking NLL).
//! The regression-gating baseline predicts NLL per expert and uses
//! argmin, which a test pins to the same choices on shared fixtures.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::config::StrategyKind;
use crate::nn::{Activation, Adam, Grads, Mlp};
use crate::{Error, Result};

/// Per-expert predictive (mean, std) pairs.
#[derive(Debug, Clone)]
pub struct ExpertPredictions {
    pub preds: Vec<(f64, f64)>,
}

impl ExpertPredictions {
    pub fn new(preds: Vec<(f64, f64)>) -> Result<ExpertPredictions> {
        if preds.is_empty() {
            return Err(Error::Argument("need at least one expert".into()));
        }
        for (m, s) in &preds {
            if !m.is_finite() || !s.is_finite() || *s < 0.0 {
                return Err(Error::Argument(format!(
                    "invalid prediction (mean {m}, std {s})"
                )));
            }
        }
        Ok(ExpertPredictions { preds })
    }
}

/// Deterministic per-head scores for the non-sampling strategies.
/// Thompson has no deterministic score and is handled in selection.
pub fn strategy_scores(preds: &ExpertPredictions, strategy: StrategyKind, lambda: f64) -> Vec<f64> {
    preds
        .preds
        .iter()
        .map(|(m, s)| match strategy {
            StrategyKind::Greedy => *m,
            StrategyKind::Lcb => m - lambda * s,
            StrategyKind::Ucb => m + lambda * s,
            StrategyKind::Thompson => *m,
        })
        .collect()
}

fn argmax_lowest_tie(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Selects an expert index. Greedy maximizes the mean; LCB maximizes
/// mean − λ·std; UCB maximizes mean + λ·std; Thompson maximizes one
/// Gaussian draw per head (drawn in index order from `rng`). Ties break
/// to the lowest index.
pub fn select_expert(
    preds: &ExpertPredictions,
    strategy: StrategyKind,
    lambda: f64,
    rng: &mut ChaCha12Rng,
) -> Result<usize> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Argument(format!(
            "pessimism coefficient must be finite and non-negative, got {lambda}"
        )));
    }
    for (m, s) in &preds.preds {
        if !m.is_finite() || !s.is_finite() || *s < 0.0 {
            return Err(Error::Argument(format!(
                "invalid prediction (mean {m}, std {s})"
            )));
        }
    }
    let scores = match strategy {
        StrategyKind::Thompson => preds
            .preds
            .iter()
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        _ => strategy_scores(preds, strategy, lambda),
    };
    Ok(argmax_lowest_tie(&scores))
}

/// Gating-classifier selection: argmax of the logits (softmax is
/// monotone, so probabilities and logits share their argmax).
pub fn moe_select(classifier: &Mlp, features: &[f64]) -> Result<usize> {
    let logits = classifier.forward_eval(features)?;
    Ok(argmax_lowest_tie(&logits))
}

/// Regression-gating selection: the regressor predicts NLL per expert;
/// pick the argmin (lowest predicted NLL = highest predicted reward).
pub fn mlp_regress_select(regressor: &Mlp, features: &[f64]) -> Result<usize> {
    let nll = regressor.forward_eval(features)?;
    let neg: Vec<f64> = nll.iter().map(|x| -x).collect();
    Ok(argmax_lowest_tie(&neg))
}

/// Dropout-ensemble predictive moments: `t` stochastic train-mode
/// forward passes; per-output sample mean and unbiased sample variance.
pub fn mc_dropout_predict(
    head: &Mlp,
    features: &[f64],
    t: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<(f64, f64)>> {
    if t < 2 {
        return Err(Error::Argument(
            "need at least two stochastic passes for a variance".into(),
        ));
    }
    let k = head.output_dim();
    let mut outs = Vec::with_capacity(t);
    for _ in 0..t {
        outs.push(head.forward_train(features, rng)?.output);
    }
    let mut result = Vec::with_capacity(k);
    for j in 0..k {
        let mean = outs.iter().map(|o| o[j]).sum::<f64>() / t as f64;
        let var = outs
            .iter()
            .map(|o| (o[j] - mean) * (o[j] - mean))
            .sum::<f64>()
            / (t as f64 - 1.0);
        result.push((mean, var));
    }
    Ok(result)
}

/// Softmax cross-entropy classifier trainer for the gating baseline.
pub fn train_classifier(
    samples: &[(Vec<f64>, usize)],
    k: usize,
    hidden: usize,
    epochs: usize,
    batch: usize,
    lr: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Mlp> {
    if samples.is_empty() {
        return Err(Error::Argument("empty classifier training set".into()));
    }
    let d = samples[0].0.len();
    if samples.iter().any(|(f, y)| f.len() != d || *y >= k) {
        return Err(Error::Argument("inconsistent classifier sample".into()));
    }
    let mut net = Mlp::new(
        vec![d, hidden, hidden, k],
        vec![Activation::Relu, Activation::Relu, Activation::Linear],
        vec![0.0, 0.0, 0.0],
        rng,
    );
    let mut opt = Adam::new(net.param_count(), lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..epochs {
        for j in (1..order.len()).rev() {
            order.swap(j, rng.random_range(0..=j));
        }
        for chunk in order.chunks(batch.max(1)) {
            let mut grads = Grads::zeros_like(&net);
            for &idx in chunk {
                let (f, y) = &samples[idx];
                let trace = net.forward_train(f, rng)?;
                // softmax with max-shift for stability
                let mx = trace.output.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = trace.output.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                let dl: Vec<f64> = exps
                    .iter()
                    .enumerate()
                    .map(|(i, e)| e / z - if i == *y { 1.0 } else { 0.0 })
                    .collect();
                let (g, _) = net.backward(&trace, &dl);
                grads.accumulate(&g);
            }
            grads.scale(1.0 / chunk.len() as f64);
            let mut params = net.flatten_params();
            opt.step(&mut params, &net.flatten_grads(&grads));
            net.set_params(&params);
        }
    }
    Ok(net)
}

/// Per-arm regression trainer: each sample observes one arm's target,
/// so the squared error is masked to that output. Used by both the
/// deterministic regression baseline and (with dropout > 0) the
/// dropout-ensemble head.
pub fn train_regressor(
    samples: &[(Vec<f64>, usize, f64)],
    k: usize,
    hidden: usize,
    epochs: usize,
    batch: usize,
    lr: f64,
    dropout: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Mlp> {
    if samples.is_empty() {
        return Err(Error::Argument("empty regressor training set".into()));
    }
    let d = samples[0].0.len();
    if samples.iter().any(|(f, a, y)| f.len() != d || *a >= k || !y.is_finite()) {
        return Err(Error::Argument("inconsistent regressor sample".into()));
    }
    let mut net = Mlp::new(
        vec![d, hidden, hidden, k],
        vec![Activation::Relu, Activation::Relu, Activation::Linear],
        vec![dropout, dropout, 0.0],
        rng,
    );
    let mut opt = Adam::new(net.param_count(), lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..epochs {
        for j in (1..order.len()).rev() {
            order.swap(j, rng.random_range(0..=j));
        }
        for chunk in order.chunks(batch.max(1)) {
            let mut grads = Grads::zeros_like(&net);
            for &idx in chunk {
                let (f, arm, target) = &samples[idx];
                let trace = net.forward_train(f, rng)?;
                let mut dl = vec![0.0; k];
                dl[*arm] = 2.0 * (trace.output[*arm] - target);
                let (g, _) = net.backward(&trace, &dl);
                grads.accumulate(&g);
            }
            grads.scale(1.0 / chunk.len() as f64);
            let mut params = net.flatten_params();
            opt.step(&mut params, &net.flatten_grads(&grads));
            net.set_params(&params);
        }
    }
    Ok(net)
}
