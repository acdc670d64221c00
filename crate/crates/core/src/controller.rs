//! Receding-horizon execution: observe, select an expert, generate a
//! T_pred action sequence, execute the first T_act steps, repeat.
//!
//! Rule-based planners and the learned sampler sit behind one generator
//! interface; expert choice sits behind one selector interface. Policy
//! randomness is salted by the selector family and generator identity
//! but NOT by strategy or pessimism coefficient, so two strategies that
//! make identical choices (e.g. the zero-pessimism lower bound and the
//! greedy rule) replay bit-identical episodes under a shared seed.

use std::time::Instant;

use nalgebra::Vector2;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::{mc_dropout_predict, moe_select, mlp_regress_select, select_expert, ExpertPredictions};
use crate::belief::{BeliefSet, FilterModel, StepMetrics};
use crate::config::{Config, StrategyKind};
use crate::env::{World, WorldConfig};
use crate::experts::{plan_expert, ExpertId, PlannerCtx, PlannerState, K_EXPERTS};
use crate::features::{Encoder, Normalizer, ObsSnapshot, ObservationHistory};
use crate::nn::Mlp;
use crate::policy::{sample_actions, VarianceSchedule, Denoiser, N_U};
use crate::rng::SeedNode;
use crate::vbll::VbllModel;
use crate::{Error, Result};

/// Planning horizons: observation window, prediction length, execution
/// length. Only the first `t_act` of each planned sequence is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HorizonConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    pub t_act: usize,
}

impl HorizonConfig {
    pub fn new(t_obs: usize, t_pred: usize, t_act: usize) -> Result<HorizonConfig> {
        if t_obs < 1 || t_pred < 1 || t_act < 1 {
            return Err(Error::Config("horizons must be positive".into()));
        }
        if t_act > t_pred {
            return Err(Error::Config(format!(
                "execution horizon {t_act} exceeds prediction horizon {t_pred}"
            )));
        }
        Ok(HorizonConfig { t_obs, t_pred, t_act })
    }

    pub fn from_config(cfg: &Config) -> Result<HorizonConfig> {
        HorizonConfig::new(cfg.t_obs, cfg.t_pred, cfg.t_act)
    }
}

/// How the next action sequence is produced.
pub enum ActionGenerator<'a> {
    /// Dispatch to the rule-based planner for the selected expert.
    Rule,
    /// Diffusion sampler; conditioned iff the model carries embeddings.
    Learned {
        denoiser: &'a Denoiser,
        schedule: VarianceSchedule,
    },
    /// Fixed sequences cycled per replan (tests and latency floors).
    Scripted { seqs: Vec<Vec<Vector2<f64>>> },
}

impl ActionGenerator<'_> {
    /// Stream-salt identity; strategy-free by construction.
    pub fn family(&self) -> &'static str {
        match self {
            ActionGenerator::Rule => "rule",
            ActionGenerator::Learned { denoiser, .. } => {
                if denoiser.n_experts() > 0 {
                    "ddpm"
                } else {
                    "ddpm-uncond"
                }
            }
            ActionGenerator::Scripted { .. } => "scripted",
        }
    }
}

/// How the expert index is chosen at each replan.
pub enum SelectorPolicy<'a> {
    /// Always expert `k`.
    Fixed(usize),
    /// Uniform over the expert set.
    Random,
    /// Per-head Bayesian predictions plus a bandit strategy.
    Vbll {
        model: &'a VbllModel,
        strategy: StrategyKind,
        lambda: f64,
    },
    /// Gating classifier argmax.
    Moe { net: &'a Mlp },
    /// Deterministic per-expert NLL regressor, argmin.
    MlpRegress { net: &'a Mlp },
    /// Dropout-ensemble NLL head with pessimistic selection.
    McDropout {
        net: &'a Mlp,
        passes: usize,
        lambda: f64,
    },
    /// No expert input at all (pairs only with an unconditioned model).
    Uncond,
}

impl SelectorPolicy<'_> {
    /// Stream-salt identity. Deliberately excludes the strategy tag and
    /// pessimism coefficient so strategy ablations share streams.
    pub fn family(&self) -> String {
        match self {
            SelectorPolicy::Fixed(k) => format!("fixed{k}"),
            SelectorPolicy::Random => "random".into(),
            SelectorPolicy::Vbll { .. } => "vbll".into(),
            SelectorPolicy::Moe { .. } => "moe".into(),
            SelectorPolicy::MlpRegress { .. } => "mlpreg".into(),
            SelectorPolicy::McDropout { .. } => "mcdrop".into(),
            SelectorPolicy::Uncond => "uncond".into(),
        }
    }
}

/// Rejects selector/generator pairings that cannot run: expert-less
/// selection with a conditioned (or rule) generator and vice versa.
/// Called at episode assembly, never mid-episode.
pub fn validate_pairing(selector: &SelectorPolicy, generator: &ActionGenerator) -> Result<()> {
    let selects_expert = !matches!(selector, SelectorPolicy::Uncond);
    match generator {
        ActionGenerator::Rule => {
            if !selects_expert {
                return Err(Error::Config(
                    "rule-based generation needs an expert-producing selector".into(),
                ));
            }
        }
        ActionGenerator::Learned { denoiser, .. } => {
            let conditioned = denoiser.n_experts() > 0;
            if conditioned && !selects_expert {
                return Err(Error::Config(
                    "conditioned model paired with expert-less selector".into(),
                ));
            }
            if !conditioned && selects_expert {
                return Err(Error::Config(
                    "unconditioned model paired with expert-producing selector".into(),
                ));
            }
            if conditioned && denoiser.n_experts() != K_EXPERTS {
                return Err(Error::Config(format!(
                    "model conditions on {} experts, expected {}",
                    denoiser.n_experts(),
                    K_EXPERTS
                )));
            }
        }
        ActionGenerator::Scripted { seqs } => {
            if seqs.is_empty() {
                return Err(Error::Config("scripted generator needs sequences".into()));
            }
        }
    }
    if let SelectorPolicy::Fixed(k) = selector {
        if *k >= K_EXPERTS {
            return Err(Error::Config(format!("fixed expert {k} out of range")));
        }
    }
    Ok(())
}

/// Evaluates the selector on encoded features. Returns the chosen
/// expert (none for expert-less mode) and, for uncertainty-aware
/// selectors, the per-head predictions the choice was made from, in
/// reward space (mean, std).
pub fn evaluate_selector(
    selector: &SelectorPolicy,
    phi: &[f64],
    rng: &mut ChaCha12Rng,
) -> Result<(Option<usize>, Option<Vec<(f64, f64)>>)> {
    use rand::Rng;
    match selector {
        SelectorPolicy::Fixed(k) => Ok((Some(*k), None)),
        SelectorPolicy::Random => Ok((Some(rng.random_range(0..K_EXPERTS)), None)),
        SelectorPolicy::Vbll {
            model,
            strategy,
            lambda,
        } => {
            let mut preds = Vec::with_capacity(model.k());
            for k in 0..model.k() {
                let (m, v) = model.predict(k, phi)?;
                preds.push((m, v.sqrt()));
            }
            let ep = ExpertPredictions::new(preds.clone())?;
            let k = select_expert(&ep, *strategy, *lambda, rng)?;
            Ok((Some(k), Some(preds)))
        }
        SelectorPolicy::Moe { net } => Ok((Some(moe_select(net, phi)?), None)),
        SelectorPolicy::MlpRegress { net } => Ok((Some(mlp_regress_select(net, phi)?), None)),
        SelectorPolicy::McDropout { net, passes, lambda } => {
            // heads predict NLL; selection runs in reward space
            let nll = mc_dropout_predict(net, phi, *passes, rng)?;
            let preds: Vec<(f64, f64)> = nll.iter().map(|(m, v)| (-m, v.sqrt())).collect();
            let ep = ExpertPredictions::new(preds.clone())?;
            let k = select_expert(&ep, StrategyKind::Lcb, *lambda, rng)?;
            Ok((Some(k), Some(preds)))
        }
        SelectorPolicy::Uncond => Ok((None, None)),
    }
}

/// One replan event: what was seen, chosen, predicted, and planned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplanRecord {
    pub step: u64,
    pub features: Vec<f64>,
    pub expert: Option<usize>,
    pub preds: Option<Vec<(f64, f64)>>,
    /// Planned sequence, length `t_pred` (flattened xy pairs).
    pub actions: Vec<(f64, f64)>,
    /// Wall time of the replan; excluded from serialized traces so
    /// trace files stay byte-identical across reruns.
    #[serde(skip)]
    pub latency_ms: f64,
}

/// Per-target line in the step trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetLine {
    pub id: usize,
    pub truth: (f64, f64),
    pub belief: Option<(f64, f64)>,
    pub cov_trace: Option<f64>,
}

/// One executed environment step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub robot: (f64, f64),
    /// Commanded action before the speed clamp.
    pub action: (f64, f64),
    pub nll: Option<f64>,
    pub rmse: Option<f64>,
    pub entropy: Option<f64>,
    pub detected: usize,
    pub targets: Vec<TargetLine>,
}

/// Episode-level aggregates over the per-step means (steps with no
/// belief yet are excluded from the corresponding mean).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Aggregates {
    pub mean_nll: Option<f64>,
    pub mean_rmse: Option<f64>,
    pub mean_entropy: Option<f64>,
}

/// Everything one episode produced.
#[derive(Debug, Clone)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub replans: Vec<ReplanRecord>,
    pub aggregates: Aggregates,
    pub expert_hist: Vec<usize>,
}

fn option_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Recomputes episode aggregates from the per-step records; the stored
/// aggregates are produced by this same function.
pub fn recompute_aggregates(steps: &[StepRecord]) -> Aggregates {
    Aggregates {
        mean_nll: option_mean(steps.iter().map(|s| s.nll)),
        mean_rmse: option_mean(steps.iter().map(|s| s.rmse)),
        mean_entropy: option_mean(steps.iter().map(|s| s.entropy)),
    }
}

/// Frozen per-method pieces an episode runs with. Models referenced
/// here are read-only; per-episode mutable state lives in the loop.
pub struct EpisodeSetup<'a> {
    pub map_text: &'a str,
    pub world_cfg: WorldConfig,
    pub horizon: HorizonConfig,
    pub filter: FilterModel,
    pub planner_proto: PlannerState,
    pub encoder: Encoder,
    pub normalizer: &'a Normalizer,
}

fn snapshot(world: &World, beliefs: &BeliefSet) -> ObsSnapshot {
    ObsSnapshot {
        ego: world.ego.clone(),
        beliefs: beliefs.clone(),
        robot: world.robot,
        visits: world.visits.clone(),
    }
}

struct ReplanOutcome {
    expert: Option<usize>,
    preds: Option<Vec<(f64, f64)>>,
    features: Vec<f64>,
    actions: Vec<Vector2<f64>>,
    latency_ms: f64,
}

#[allow(clippy::too_many_arguments)]
fn replan_inner(
    setup: &EpisodeSetup,
    selector: &SelectorPolicy,
    generator: &ActionGenerator,
    history: &ObservationHistory,
    planner_state: &PlannerState,
    replan_idx: usize,
    select_rng: &mut ChaCha12Rng,
    sample_rng: &mut ChaCha12Rng,
) -> Result<ReplanOutcome> {
    let started = Instant::now();
    let snap = history.latest();
    let phi = setup.normalizer.apply(&setup.encoder.encode_raw(history));
    let (expert, preds) = evaluate_selector(selector, &phi, select_rng)?;
    let actions = match generator {
        ActionGenerator::Rule => {
            let k = expert.expect("pairing validated");
            let ctx = PlannerCtx {
                grid: &snap.ego,
                robot: &snap.robot,
                visits: &snap.visits,
                fov_radius: setup.world_cfg.fov_radius,
                v_max: setup.world_cfg.v_max,
                t_pred: setup.horizon.t_pred,
            };
            plan_expert(ExpertId::from_index(k), &ctx, &snap.beliefs, planner_state).actions
        }
        ActionGenerator::Learned { denoiser, schedule } => {
            let c = denoiser.conditioning(&phi, expert)?;
            let flat = sample_actions(*denoiser, &c, schedule, sample_rng)?;
            flat.chunks(N_U).map(|p| Vector2::new(p[0], p[1])).collect()
        }
        ActionGenerator::Scripted { seqs } => seqs[replan_idx % seqs.len()].clone(),
    };
    if actions.len() != setup.horizon.t_pred {
        return Err(Error::Numerical(format!(
            "generator produced {} actions, expected {}",
            actions.len(),
            setup.horizon.t_pred
        )));
    }
    Ok(ReplanOutcome {
        expert,
        preds,
        features: phi,
        actions,
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Replans from an observation history: encode, select, generate.
/// Public wrapper used by tests and latency probes; the episode loop
/// calls the same inner path.
#[allow(clippy::too_many_arguments)]
pub fn replan(
    setup: &EpisodeSetup,
    selector: &SelectorPolicy,
    generator: &ActionGenerator,
    history: &ObservationHistory,
    planner_state: &PlannerState,
    replan_idx: usize,
    select_rng: &mut ChaCha12Rng,
    sample_rng: &mut ChaCha12Rng,
) -> Result<(Option<usize>, Vec<Vector2<f64>>)> {
    validate_pairing(selector, generator)?;
    if history.is_empty() {
        return Err(Error::Argument("replan needs an observation history".into()));
    }
    let out = replan_inner(
        setup,
        selector,
        generator,
        history,
        planner_state,
        replan_idx,
        select_rng,
        sample_rng,
    )?;
    Ok((out.expert, out.actions))
}

fn target_lines(world: &World, beliefs: &BeliefSet) -> Vec<TargetLine> {
    world
        .targets
        .iter()
        .map(|t| {
            let b = beliefs.get(t.id);
            TargetLine {
                id: t.id,
                truth: (t.pos.x, t.pos.y),
                belief: b.map(|b| (b.mean[0], b.mean[1])),
                cov_trace: b.map(|b| b.cov[(0, 0)] + b.cov[(1, 1)]),
            }
        })
        .collect()
}

/// Runs one full episode: Kalman prediction every step, updates on
/// detections, a replan every `t_act` steps, metrics per step. Fully
/// deterministic given the seed and frozen models.
pub fn run_episode(
    setup: &EpisodeSetup,
    selector: &SelectorPolicy,
    generator: &ActionGenerator,
    seed: u64,
) -> Result<EpisodeMetrics> {
    validate_pairing(selector, generator)?;
    let root = SeedNode::root(seed);
    let episode = root.child("episode");
    let mut spawn_rng = episode.stream("spawn");
    let mut target_rng = episode.stream("targets");
    let mut sensor_rng = episode.stream("sensor");
    let salt = format!("{}/{}", selector.family(), generator.family());
    let policy = root.child("policy").child(&salt);
    let mut select_rng = policy.stream("select");
    let mut sample_rng = policy.stream("sample");

    let mut world = World::init(setup.map_text, setup.world_cfg.clone(), &mut spawn_rng)?;
    let mut beliefs = BeliefSet::new();
    let mut planner_state = setup.planner_proto.clone();
    let mut history = ObservationHistory::new(setup.horizon.t_obs);
    history.push(snapshot(&world, &beliefs));

    let mut steps = Vec::with_capacity(setup.world_cfg.episode_length);
    let mut replans = Vec::new();
    let mut expert_hist = vec![0usize; K_EXPERTS];
    let mut plan_buf: Vec<Vector2<f64>> = Vec::new();

    for t in 0..setup.world_cfg.episode_length {
        if t % setup.horizon.t_act == 0 {
            let out = replan_inner(
                setup,
                selector,
                generator,
                &history,
                &planner_state,
                replans.len(),
                &mut select_rng,
                &mut sample_rng,
            )?;
            if let Some(k) = out.expert {
                expert_hist[k] += 1;
            }
            replans.push(ReplanRecord {
                step: t as u64,
                features: out.features,
                expert: out.expert,
                preds: out.preds,
                actions: out.actions.iter().map(|a| (a.x, a.y)).collect(),
                latency_ms: out.latency_ms,
            });
            plan_buf = out.actions;
        }
        let action = plan_buf[t % setup.horizon.t_act];
        let (measurements, _blocked) = world.step(action, &mut target_rng, &mut sensor_rng);
        beliefs.predict_all(&setup.filter);
        let mut measured_ids = Vec::with_capacity(measurements.len());
        for m in &measurements {
            beliefs.observe(m.id, &m.value, &setup.filter, m.step)?;
            measured_ids.push(m.id);
        }
        planner_state.update_mode(world.robot.clock, &measured_ids);
        history.push(snapshot(&world, &beliefs));
        let StepMetrics {
            nll,
            rmse,
            entropy,
            detected,
        } = beliefs.metrics(&world.targets)?;
        steps.push(StepRecord {
            step: world.robot.clock,
            robot: (world.robot.pos.x, world.robot.pos.y),
            action: (action.x, action.y),
            nll,
            rmse,
            entropy,
            detected,
            targets: target_lines(&world, &beliefs),
        });
    }

    let aggregates = recompute_aggregates(&steps);
    Ok(EpisodeMetrics {
        seed,
        steps,
        replans,
        aggregates,
        expert_hist,
    })
}

/// Wall-time statistics of a full replan (encode + select + generate),
/// measured on a warmed-up mid-episode state.
#[derive(Debug, Clone)]
pub struct LatencyStats {
    pub trials_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Median amortized over the executed steps of one plan.
    pub per_step_ms: f64,
    /// Coefficient of variation (std/mean) of the trial times.
    pub cov: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Times `n_trials` replans against a frozen state reached by running
/// the pipeline for a short warm-up prefix. A monotonic clock measures
/// each full replan; the per-step figure divides the median by `t_act`.
pub fn measure_replan_latency(
    setup: &EpisodeSetup,
    selector: &SelectorPolicy,
    generator: &ActionGenerator,
    n_trials: usize,
    seed: u64,
) -> Result<LatencyStats> {
    validate_pairing(selector, generator)?;
    if n_trials == 0 {
        return Err(Error::Argument("need at least one trial".into()));
    }
    let root = SeedNode::root(seed);
    let episode = root.child("episode");
    let mut spawn_rng = episode.stream("spawn");
    let mut target_rng = episode.stream("targets");
    let mut sensor_rng = episode.stream("sensor");
    let policy = root.child("policy").child("latency");
    let mut select_rng = policy.stream("select");
    let mut sample_rng = policy.stream("sample");

    let mut world = World::init(setup.map_text, setup.world_cfg.clone(), &mut spawn_rng)?;
    let mut beliefs = BeliefSet::new();
    let mut planner_state = setup.planner_proto.clone();
    let mut history = ObservationHistory::new(setup.horizon.t_obs);
    history.push(snapshot(&world, &beliefs));

    // warm-up prefix: drive the pipeline to a representative
    // mid-episode state (frontier structure and belief set matter for
    // planner cost, so a fresh map would understate rule latency)
    let warm_steps = (setup.world_cfg.episode_length / 2)
        .max(2 * setup.horizon.t_act)
        .max(setup.horizon.t_obs);
    let mut plan_buf: Vec<Vector2<f64>> = Vec::new();
    let mut replan_idx = 0usize;
    for t in 0..warm_steps {
        if t % setup.horizon.t_act == 0 {
            let out = replan_inner(
                setup,
                selector,
                generator,
                &history,
                &planner_state,
                replan_idx,
                &mut select_rng,
                &mut sample_rng,
            )?;
            plan_buf = out.actions;
            replan_idx += 1;
        }
        let action = plan_buf[t % setup.horizon.t_act];
        let (measurements, _) = world.step(action, &mut target_rng, &mut sensor_rng);
        beliefs.predict_all(&setup.filter);
        let mut ids = Vec::new();
        for m in &measurements {
            beliefs.observe(m.id, &m.value, &setup.filter, m.step)?;
            ids.push(m.id);
        }
        planner_state.update_mode(world.robot.clock, &ids);
        history.push(snapshot(&world, &beliefs));
    }

    // untimed warm passes, then timed trials on the frozen state
    for _ in 0..3 {
        replan_inner(
            setup,
            selector,
            generator,
            &history,
            &planner_state,
            replan_idx,
            &mut select_rng,
            &mut sample_rng,
        )?;
    }
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let out = replan_inner(
            setup,
            selector,
            generator,
            &history,
            &planner_state,
            replan_idx,
            &mut select_rng,
            &mut sample_rng,
        )?;
        trials.push(out.latency_ms);
    }
    let mut sorted = trials.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let mean = trials.iter().sum::<f64>() / trials.len() as f64;
    let var = trials.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / trials.len() as f64;
    Ok(LatencyStats {
        median_ms: median,
        p95_ms: percentile(&sorted, 0.95),
        per_step_ms: median / setup.horizon.t_act as f64,
        cov: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
        trials_ms: trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps;
    use crate::vbll::{fit, VbllFitConfig};

    fn base_world_cfg(length: usize) -> WorldConfig {
        WorldConfig {
            q_vel: [0.09, 0.04],
            r_diag: [0.0025; 4],
            fov_radius: 4.0,
            v_max: 1.0,
            targets_min: 2,
            targets_max: 2,
            episode_length: length,
        }
    }

    fn filter_model() -> FilterModel {
        let cfg = Config::default();
        FilterModel::from_config(&cfg)
    }

    fn planner_proto() -> PlannerState {
        PlannerState::from_config(&Config::default())
    }

    fn setup<'a>(map_text: &'a str, norm: &'a Normalizer, length: usize) -> EpisodeSetup<'a> {
        EpisodeSetup {
            map_text,
            world_cfg: base_world_cfg(length),
            horizon: HorizonConfig::new(3, 8, 4).unwrap(),
            filter: filter_model(),
            planner_proto: planner_proto(),
            encoder: Encoder { fov_radius: 4.0 },
            normalizer: norm,
        }
    }

    #[test]
    fn horizon_validation_rejects_bad_shapes() {
        assert!(HorizonConfig::new(0, 8, 4).is_err());
        assert!(HorizonConfig::new(3, 0, 0).is_err());
        assert!(HorizonConfig::new(3, 4, 8).is_err());
        assert!(HorizonConfig::new(1, 4, 4).is_ok());
    }

    #[test]
    fn pairing_validation_catches_mismatches() {
        let norm = Normalizer::identity(crate::features::D_FEAT);
        let _ = &norm;
        assert!(validate_pairing(&SelectorPolicy::Uncond, &ActionGenerator::Rule).is_err());
        assert!(validate_pairing(&SelectorPolicy::Fixed(7), &ActionGenerator::Rule).is_err());
        assert!(validate_pairing(&SelectorPolicy::Fixed(1), &ActionGenerator::Rule).is_ok());
        let mut rng = SeedNode::root(1).stream("m");
        let cond = Denoiser::new(4, 8, K_EXPERTS, 4, 4, (8, 8), &mut rng);
        let uncond = Denoiser::new(4, 8, 0, 0, 4, (8, 8), &mut rng);
        let sched = crate::policy::make_schedule(5, 1e-4, 0.02).unwrap();
        let g_cond = ActionGenerator::Learned {
            denoiser: &cond,
            schedule: sched.clone(),
        };
        let g_uncond = ActionGenerator::Learned {
            denoiser: &uncond,
            schedule: sched,
        };
        assert!(validate_pairing(&SelectorPolicy::Uncond, &g_cond).is_err());
        assert!(validate_pairing(&SelectorPolicy::Fixed(0), &g_uncond).is_err());
        assert!(validate_pairing(&SelectorPolicy::Uncond, &g_uncond).is_ok());
        assert!(validate_pairing(&SelectorPolicy::Fixed(0), &g_cond).is_ok());
        assert!(validate_pairing(
            &SelectorPolicy::Fixed(0),
            &ActionGenerator::Scripted { seqs: vec![] }
        )
        .is_err());
    }

    #[test]
    fn fixed_selector_is_constant_across_replans() {
        let map = maps::resolve("builtin:arena").unwrap();
        let norm = Normalizer::identity(crate::features::D_FEAT);
        let s = setup(&map, &norm, 24);
        let m = run_episode(&s, &SelectorPolicy::Fixed(2), &ActionGenerator::Rule, 5).unwrap();
        assert_eq!(m.replans.len(), 6);
        for r in &m.replans {
            assert_eq!(r.expert, Some(2));
        }
        assert_eq!(m.expert_hist, vec![0, 0, 6]);
    }

    #[test]
    fn random_selector_frequencies_within_binomial_bounds() {
        let mut rng = SeedNode::root(9).stream("rand-sel");
        let mut counts = [0usize; K_EXPERTS];
        let phi = vec![0.0; 4];
        for _ in 0..3000 {
            let (k, _) = evaluate_selector(&SelectorPolicy::Random, &phi, &mut rng).unwrap();
            counts[k.unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 3000.0;
            assert!((0.30..=0.37).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn zero_length_episode_is_empty() {
        let map = maps::resolve("builtin:arena").unwrap();
        let norm = Normalizer::identity(crate::features::D_FEAT);
        let s = setup(&map, &norm, 0);
        let m = run_episode(&s, &SelectorPolicy::Fixed(0), &ActionGenerator::Rule, 3).unwrap();
        assert!(m.steps.is_empty());
        assert!(m.replans.is_empty());
        assert_eq!(m.aggregates.mean_nll, None);
    }

    #[test]
    fn replan_count_is_ceiling_of_length_over_t_act() {
        let map = maps::resolve("builtin:arena").unwrap();
        let norm = Normalizer::identity(crate::features::D_FEAT);
        for (len, expect) in [(10usize, 3usize), (12, 3), (13, 4), (1, 1)] {
            let mut s = setup(&map, &norm, len);
            s.horizon = HorizonConfig::new(3, 8, 4).unwrap();
            let m = run_episode(&s, &SelectorPolicy::Fixed(0), &ActionGenerator::Rule, 11).unwrap();
            assert_eq!(m.replans.len(), expect, "length {len}");
            assert_eq!(m.steps.len(), len);
        }
    }

    #[test]
    fn scripted_no_truncation_concatenates_sequences_exactly() {
        let map = maps::resolve("builtin:arena").unwrap();
        let norm = Normalizer::identity(crate::features::D_FEAT);
        let mut s = setup(&map, &norm, 12);
        s.horizon = HorizonConfig::new(2, 4, 4).unwrap(); // t_act == t_pred
        let seqs: Vec<Vec<Vector2<f64>>> = (0..3)
            .map(|r| {
                (0..4)
                    .map(|i| Vector2::new(0.1 * r as f64 + 0.01 * i as f64, -0.05 * i as f64))
                    .collect()
            })
            .collect();
        let m = run_episode(
            &s,
            &SelectorPolicy::Fixed(0),
            &ActionGenerator::Scripted { seqs: seqs.clone() },
            2,
        )
        .unwrap();
        let expect: Vec<(f64, f64)> = seqs
            .iter()
            .flat_map(|sq| sq.iter().map(|a| (a.x, a.y)))
            .collect();
        let got: Vec<(f64, f64)> = m.steps.iter().map(|st| st.action).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn executed_actions_are_prefix_of_each_plan() {
        let map = maps::resolve("builtin:arena").unwrap();
        let norm = Normalizer::identity(crate::features::D_FEAT);
        let s = setup(&map, &norm, 20); // t_act 4 < t_pred 8
        let m = run_episode(&s, &SelectorPolicy::Fixed(1), &ActionGenerator::Rule, 6).unwrap();
        for (ri, r) in m.replans.iter().enumerate() {
            let start = ri * 4;
            let end = (start + 4).min(m.steps.len());
            for (j, st) in m.steps[start..end].iter().enumerate() {
                assert_eq!(st.action, r.actions[j]);
            }
        }
    }

    #[test]
    fn same_seed_replays_bit_identical_traces() {
        let map = maps::resolve("builtin:maze").unwrap();
        let norm = Normalizer::identity(crate::features::D_FEAT);
        let s = setup(&map, &norm, 40);
        let run = || run_episode(&s, &SelectorPolicy::Fixed(1), &ActionGenerator::Rule, 17).unwrap();
        let (a, b) = (run(), run());
        let ser = |m: &EpisodeMetrics| {
            let mut buf = String::new();
            for st in &m.steps {
                buf.push_str(&serde_json::to_string(st).unwrap());
            }
            for r in &m.replans {
                buf.push_str(&serde_json::to_string(r).unwrap());
            }
            buf
        };
        assert_eq!(ser(&a), ser(&b));
        assert_eq!(a.expert_hist, b.expert_hist);
    }

    fn tiny_vbll(seed: u64) -> VbllModel {
        // well-separated synthetic heads over a small feature space
        let mut rng = SeedNode::root(seed).stream("vbll-data");
        use rand::Rng;
        let d = crate::features::D_FEAT;
        let data: Vec<crate::vbll::RewardSample> = (0..120)
            .map(|i| {
                let k = i % K_EXPERTS;
                let phi: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
                let r = phi[0] - 0.2 * k as f64;
                crate::vbll::RewardSample { phi, r, k }
            })
            .collect();
        let cfg = VbllFitConfig {
            lr: 0.05,
            epochs: 400,
            grad_tol: 1e-10,
            sigma_beta_sq: 1.0,
            freeze_noise: true,
            init_noise_sq: 0.04,
        };
        fit(&data, K_EXPERTS, d, &cfg).unwrap()
    }

    #[test]
    fn vbll_trace_replays_from_logged_predictions() {
        let map = maps::resolve("builtin:arena").unwrap();
        let norm = Normalizer::identity(crate::features::D_FEAT);
        let s = setup(&map, &norm, 24);
        let model = tiny_vbll(23);
        let sel = SelectorPolicy::Vbll {
            model: &model,
            strategy: StrategyKind::Lcb,
            lambda: 1.0,
        };
        let m = run_episode(&s, &sel, &ActionGenerator::Rule, 29).unwrap();
        assert!(!m.replans.is_empty());
        let mut dummy = SeedNode::root(0).stream("d");
        for r in &m.replans {
            let preds = r.preds.clone().expect("vbll logs predictions");
            let ep = ExpertPredictions::new(preds).unwrap();
            let k = select_expert(&ep, StrategyKind::Lcb, 1.0, &mut dummy).unwrap();
            assert_eq!(Some(k), r.expert);
            // the logged choice also replays from the logged features
            let (m2, v2) = model.predict(k, &r.features).unwrap();
            let logged = r.preds.as_ref().unwrap()[k];
            assert_eq!(logged.0, m2);
            assert_eq!(logged.1, v2.sqrt());
        }
    }

    #[test]
    fn aggregates_recompute_from_step_records() {
        let map = maps::resolve("builtin:arena").unwrap();
        let norm = Normalizer::identity(crate::features::D_FEAT);
        let s = setup(&map, &norm, 30);
        let m = run_episode(&s, &SelectorPolicy::Fixed(2), &ActionGenerator::Rule, 41).unwrap();
        assert_eq!(m.aggregates, recompute_aggregates(&m.steps));
        // with a fov this size some step should carry metrics
        assert!(m.aggregates.mean_rmse.is_some());
        assert!(m.steps.iter().any(|st| st.detected > 0));
    }

    #[test]
    fn latency_stub_nonzero_and_stable() {
        let map = maps::resolve("builtin:arena").unwrap();
        let norm = Normalizer::identity(crate::features::D_FEAT);
        let s = setup(&map, &norm, 16);
        let seqs = vec![vec![Vector2::new(0.0, 0.0); 8]];
        let stats = measure_replan_latency(
            &s,
            &SelectorPolicy::Fixed(0),
            &ActionGenerator::Scripted { seqs },
            100,
            3,
        )
        .unwrap();
        assert!(stats.median_ms > 0.0);
        assert!(stats.p95_ms >= stats.median_ms);
        assert!((stats.per_step_ms - stats.median_ms / 4.0).abs() < 1e-12);
        assert!(stats.cov < 0.5, "timing coefficient of variation {}", stats.cov);
        assert_eq!(stats.trials_ms.len(), 100);
    }

    #[test]
    fn replan_errors_on_empty_history() {
        let map = maps::resolve("builtin:arena").unwrap();
        let norm = Normalizer::identity(crate::features::D_FEAT);
        let s = setup(&map, &norm, 8);
        let h = ObservationHistory::new(3);
        let mut r1 = SeedNode::root(0).stream("a");
        let mut r2 = SeedNode::root(0).stream("b");
        let got = replan(
            &s,
            &SelectorPolicy::Fixed(0),
            &ActionGenerator::Rule,
            &h,
            &planner_proto(),
            0,
            &mut r1,
            &mut r2,
        );
        assert!(got.is_err());
    }
}
