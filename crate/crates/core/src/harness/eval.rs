//! The evaluation matrix: every configured method runs on the same
//! seed list (shared world streams), producing per-seed metrics and
//! mean ± std summaries, plus strategy and pessimism ablations that
//! reuse one trained checkpoint, and the replan-latency table.

use serde::{Deserialize, Serialize};

use crate::config::{Config, StrategyKind};
use crate::controller::{
    measure_replan_latency, run_episode, ActionGenerator, EpisodeMetrics, EpisodeSetup,
    LatencyStats, SelectorPolicy,
};
use crate::experts::{ExpertId, K_EXPERTS};
use crate::features::Normalizer;
use crate::maps;
use crate::policy::{Denoiser, VarianceSchedule};
use crate::{Error, Result};

use super::dataset::episode_setup;
use super::train::SelectorBundle;

/// The method taxonomy: rule-based execution, then learned execution
/// with fixed/deterministic selection, then uncertainty-aware
/// selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    RuleExpert(usize),
    RuleRandom,
    RuleVbll,
    DdpmUncond,
    DdpmExpert(usize),
    DdpmRandom,
    DdpmMoe,
    DdpmMlpReg,
    DdpmMcDropout,
    DdpmVbll,
}

pub const CATEGORY_RULE: &str = "rule-based";
pub const CATEGORY_FIXED: &str = "fixed-deterministic";
pub const CATEGORY_UNCERTAINTY: &str = "uncertainty-aware";

impl Method {
    /// Evaluation order: category structure is preserved in output.
    pub fn all() -> Vec<Method> {
        let mut v = vec![
            Method::RuleExpert(0),
            Method::RuleExpert(1),
            Method::RuleExpert(2),
            Method::RuleRandom,
            Method::RuleVbll,
            Method::DdpmUncond,
        ];
        for k in 0..K_EXPERTS {
            v.push(Method::DdpmExpert(k));
        }
        v.extend([
            Method::DdpmRandom,
            Method::DdpmMoe,
            Method::DdpmMlpReg,
            Method::DdpmMcDropout,
            Method::DdpmVbll,
        ]);
        v
    }

    pub fn label(&self) -> String {
        match self {
            Method::RuleExpert(k) => format!("{}-rule", ExpertId::from_index(*k).name()),
            Method::RuleRandom => "random-rule".into(),
            Method::RuleVbll => "vbll-rule".into(),
            Method::DdpmUncond => "ddpm-uncond".into(),
            Method::DdpmExpert(k) => format!("ddpm-{}", ExpertId::from_index(*k).name()),
            Method::DdpmRandom => "ddpm-random".into(),
            Method::DdpmMoe => "ddpm-moe".into(),
            Method::DdpmMlpReg => "ddpm-mlpreg".into(),
            Method::DdpmMcDropout => "ddpm-mcdropout".into(),
            Method::DdpmVbll => "ddpm-vbll".into(),
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Method::RuleExpert(_) | Method::RuleRandom | Method::RuleVbll => CATEGORY_RULE,
            Method::DdpmUncond
            | Method::DdpmExpert(_)
            | Method::DdpmRandom
            | Method::DdpmMoe
            | Method::DdpmMlpReg => CATEGORY_FIXED,
            Method::DdpmMcDropout | Method::DdpmVbll => CATEGORY_UNCERTAINTY,
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::all()
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    /// Parses the config's method list (`all` or comma-separated labels).
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        if s.trim() == "all" {
            return Ok(Method::all());
        }
        s.split(',')
            .map(|t| Method::parse(t.trim()))
            .collect()
    }
}

/// Frozen trained pieces the matrix may draw on; absent pieces cause
/// the methods that need them to be skipped with a warning.
pub struct EvalArtifacts<'a> {
    pub policy: Option<(&'a Denoiser, VarianceSchedule)>,
    pub policy_uncond: Option<(&'a Denoiser, VarianceSchedule)>,
    pub selector: Option<&'a SelectorBundle>,
    pub normalizer: &'a Normalizer,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerSeed {
    pub seed: u64,
    pub nll: Option<f64>,
    pub rmse: Option<f64>,
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MethodRow {
    pub label: String,
    pub category: String,
    pub episodes: usize,
    pub per_seed: Vec<PerSeed>,
    pub mean_nll: Option<f64>,
    pub std_nll: Option<f64>,
    pub mean_rmse: Option<f64>,
    pub std_rmse: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub std_entropy: Option<f64>,
}

fn mean_std(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
    let xs: Vec<f64> = values.flatten().collect();
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(std))
}

fn summarize(label: String, category: String, per_seed: Vec<PerSeed>) -> MethodRow {
    let (mean_nll, std_nll) = mean_std(per_seed.iter().map(|p| p.nll));
    let (mean_rmse, std_rmse) = mean_std(per_seed.iter().map(|p| p.rmse));
    let (mean_entropy, std_entropy) = mean_std(per_seed.iter().map(|p| p.entropy));
    MethodRow {
        label,
        category,
        episodes: per_seed.len(),
        per_seed,
        mean_nll,
        std_nll,
        mean_rmse,
        std_rmse,
        mean_entropy,
        std_entropy,
    }
}

/// Runs one (selector, generator) pipeline over the seed list.
pub fn evaluate_pipeline(
    setup: &EpisodeSetup,
    selector: &SelectorPolicy,
    generator: &ActionGenerator,
    seeds: &[u64],
) -> Result<Vec<(u64, EpisodeMetrics)>> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let m = run_episode(setup, selector, generator, seed)?;
        out.push((seed, m));
    }
    Ok(out)
}

struct Assembled<'a> {
    selector: SelectorPolicy<'a>,
    generator: ActionGenerator<'a>,
}

fn assemble<'a>(
    method: Method,
    cfg: &Config,
    art: &'a EvalArtifacts<'a>,
) -> Result<Option<Assembled<'a>>> {
    let learned = |which: &Option<(&'a Denoiser, VarianceSchedule)>| {
        which.as_ref().map(|(d, s)| ActionGenerator::Learned {
            denoiser: d,
            schedule: s.clone(),
        })
    };
    let need_sel = |sel: Option<&'a SelectorBundle>| -> Option<&'a SelectorBundle> { sel };
    let a = match method {
        Method::RuleExpert(k) => Some(Assembled {
            selector: SelectorPolicy::Fixed(k),
            generator: ActionGenerator::Rule,
        }),
        Method::RuleRandom => Some(Assembled {
            selector: SelectorPolicy::Random,
            generator: ActionGenerator::Rule,
        }),
        Method::RuleVbll => need_sel(art.selector).map(|b| Assembled {
            selector: SelectorPolicy::Vbll {
                model: &b.vbll,
                strategy: cfg.strategy,
                lambda: cfg.lambda,
            },
            generator: ActionGenerator::Rule,
        }),
        Method::DdpmUncond => learned(&art.policy_uncond).map(|g| Assembled {
            selector: SelectorPolicy::Uncond,
            generator: g,
        }),
        Method::DdpmExpert(k) => learned(&art.policy).map(|g| Assembled {
            selector: SelectorPolicy::Fixed(k),
            generator: g,
        }),
        Method::DdpmRandom => learned(&art.policy).map(|g| Assembled {
            selector: SelectorPolicy::Random,
            generator: g,
        }),
        Method::DdpmMoe => match (learned(&art.policy), art.selector) {
            (Some(g), Some(b)) => Some(Assembled {
                selector: SelectorPolicy::Moe { net: &b.moe },
                generator: g,
            }),
            _ => None,
        },
        Method::DdpmMlpReg => match (learned(&art.policy), art.selector) {
            (Some(g), Some(b)) => Some(Assembled {
                selector: SelectorPolicy::MlpRegress { net: &b.regress },
                generator: g,
            }),
            _ => None,
        },
        Method::DdpmMcDropout => match (learned(&art.policy), art.selector) {
            (Some(g), Some(b)) => Some(Assembled {
                selector: SelectorPolicy::McDropout {
                    net: &b.mcdrop,
                    passes: cfg.mc_passes,
                    lambda: cfg.lambda,
                },
                generator: g,
            }),
            _ => None,
        },
        Method::DdpmVbll => match (learned(&art.policy), art.selector) {
            (Some(g), Some(b)) => Some(Assembled {
                selector: SelectorPolicy::Vbll {
                    model: &b.vbll,
                    strategy: cfg.strategy,
                    lambda: cfg.lambda,
                },
                generator: g,
            }),
            _ => None,
        },
    };
    Ok(a)
}

/// Output of one evaluation run: summary rows, per-episode traces
/// keyed by (method label, seed), and skip warnings.
pub struct EvalOutput {
    pub rows: Vec<MethodRow>,
    pub traces: Vec<(String, u64, EpisodeMetrics)>,
    pub warnings: Vec<String>,
}

/// Runs every requested method over the shared seed list. Methods with
/// missing checkpoints are skipped with a warning; the run continues.
pub fn evaluate(
    cfg: &Config,
    methods: &[Method],
    seeds: &[u64],
    art: &EvalArtifacts,
) -> Result<EvalOutput> {
    let map_text = maps::resolve(&cfg.map)?;
    let setup = episode_setup(cfg, &map_text, art.normalizer)?;
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut warnings = Vec::new();
    for &method in methods {
        let label = method.label();
        match assemble(method, cfg, art)? {
            None => {
                warnings.push(format!("method `{label}` skipped: checkpoint missing"));
            }
            Some(asm) => {
                let episodes = evaluate_pipeline(&setup, &asm.selector, &asm.generator, seeds)?;
                let per_seed = episodes
                    .iter()
                    .map(|(seed, m)| PerSeed {
                        seed: *seed,
                        nll: m.aggregates.mean_nll,
                        rmse: m.aggregates.mean_rmse,
                        entropy: m.aggregates.mean_entropy,
                    })
                    .collect();
                rows.push(summarize(label.clone(), method.category().to_string(), per_seed));
                for (seed, m) in episodes {
                    traces.push((label.clone(), seed, m));
                }
            }
        }
    }
    Ok(EvalOutput {
        rows,
        traces,
        warnings,
    })
}

/// Ablation axis: expert-selection strategy or pessimism coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateKind {
    Strategy,
    Lambda,
}

/// Sweeps strategies {greedy, ucb, thompson, lcb} or the pessimism
/// grid, reusing one trained checkpoint and the shared seeds.
pub fn ablate(
    cfg: &Config,
    kind: AblateKind,
    seeds: &[u64],
    art: &EvalArtifacts,
) -> Result<EvalOutput> {
    let bundle = art
        .selector
        .ok_or_else(|| Error::Config("ablation needs a trained selector checkpoint".into()))?;
    let (den, sched) = art
        .policy
        .as_ref()
        .ok_or_else(|| Error::Config("ablation needs a trained policy checkpoint".into()))?;
    let map_text = maps::resolve(&cfg.map)?;
    let setup = episode_setup(cfg, &map_text, art.normalizer)?;
    let cells: Vec<(String, StrategyKind, f64)> = match kind {
        AblateKind::Strategy => [
            StrategyKind::Greedy,
            StrategyKind::Ucb,
            StrategyKind::Thompson,
            StrategyKind::Lcb,
        ]
        .into_iter()
        .map(|s| (s.as_str().to_string(), s, cfg.lambda))
        .collect(),
        AblateKind::Lambda => cfg
            .ablate_lambda_grid
            .iter()
            .map(|&l| (format!("lambda-{l}"), StrategyKind::Lcb, l))
            .collect(),
    };
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (label, strategy, lambda) in cells {
        let selector = SelectorPolicy::Vbll {
            model: &bundle.vbll,
            strategy,
            lambda,
        };
        let generator = ActionGenerator::Learned {
            denoiser: den,
            schedule: sched.clone(),
        };
        let episodes = evaluate_pipeline(&setup, &selector, &generator, seeds)?;
        let per_seed = episodes
            .iter()
            .map(|(seed, m)| PerSeed {
                seed: *seed,
                nll: m.aggregates.mean_nll,
                rmse: m.aggregates.mean_rmse,
                entropy: m.aggregates.mean_entropy,
            })
            .collect();
        rows.push(summarize(label.clone(), "ablation".to_string(), per_seed));
        for (seed, m) in episodes {
            traces.push((label.clone(), seed, m));
        }
    }
    Ok(EvalOutput {
        rows,
        traces,
        warnings: Vec::new(),
    })
}

/// Replan-latency table over representative pipelines: the rule-based
/// experts and, when checkpoints exist, the learned pipelines.
pub fn latency_table(
    cfg: &Config,
    art: &EvalArtifacts,
    trials: usize,
    seed: u64,
) -> Result<Vec<(String, LatencyStats)>> {
    let map_text = maps::resolve(&cfg.map)?;
    let setup = episode_setup(cfg, &map_text, art.normalizer)?;
    let mut out = Vec::new();
    for k in 0..K_EXPERTS {
        let stats = measure_replan_latency(
            &setup,
            &SelectorPolicy::Fixed(k),
            &ActionGenerator::Rule,
            trials,
            seed,
        )?;
        out.push((format!("{}-rule", ExpertId::from_index(k).name()), stats));
    }
    if let Some((den, sched)) = &art.policy_uncond {
        let g = ActionGenerator::Learned {
            denoiser: den,
            schedule: sched.clone(),
        };
        let stats = measure_replan_latency(&setup, &SelectorPolicy::Uncond, &g, trials, seed)?;
        out.push(("ddpm-uncond".into(), stats));
    }
    if let (Some((den, sched)), Some(bundle)) = (&art.policy, art.selector) {
        let g = ActionGenerator::Learned {
            denoiser: den,
            schedule: sched.clone(),
        };
        let sel = SelectorPolicy::Vbll {
            model: &bundle.vbll,
            strategy: cfg.strategy,
            lambda: cfg.lambda,
        };
        let stats = measure_replan_latency(&setup, &sel, &g, trials, seed)?;
        out.push(("ddpm-vbll".into(), stats));
    }
    Ok(out)
}
