//! Flat key-value run configuration.
//!
//! The on-disk format is plain text, one `key = value` pair per line,
//! `#` starts a comment. Every numeric default of the pipeline lives here
//! so a dumped default file doubles as the schema reference. The format is
//! versioned through the `config_version` key; [`Config::to_text`] emits
//! keys in a fixed order so identical configs serialize byte-identically.

use crate::{Error, Result};

pub const CONFIG_VERSION: u64 = 1;

/// Expert-selection strategy tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StrategyKind {
    Greedy,
    Lcb,
    Ucb,
    Thompson,
}

impl StrategyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(StrategyKind::Greedy),
            "lcb" => Ok(StrategyKind::Lcb),
            "ucb" => Ok(StrategyKind::Ucb),
            "thompson" => Ok(StrategyKind::Thompson),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Greedy => "greedy",
            StrategyKind::Lcb => "lcb",
            StrategyKind::Ucb => "ucb",
            StrategyKind::Thompson => "thompson",
        }
    }
}

/// All tunables of the pipeline, with the documented defaults.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Config {
    pub seed: u64,
    /// Map reference: `builtin:<name>` or a file path.
    pub map: String,

    // episode
    pub episode_length: usize,
    pub targets_min: usize,
    pub targets_max: usize,

    // environment
    pub fov_radius: f64,
    pub v_max: f64,
    pub resolution: f64,
    /// Per-step velocity-increment variance, x component.
    pub process_noise_vx: f64,
    /// Per-step velocity-increment variance, y component.
    pub process_noise_vy: f64,
    /// Measurement noise variance on each position component.
    pub meas_noise_pos: f64,
    /// Measurement noise variance on each velocity component.
    pub meas_noise_vel: f64,

    // filter (conservative noise inflation)
    pub filter_kappa_q: f64,
    pub filter_kappa_r: f64,
    pub filter_sigma_init: f64,

    // expert planners
    pub expert_weight_gain: f64,
    pub expert_weight_distance: f64,
    pub expert_weight_visits: f64,
    pub expert_tau_unc: f64,
    pub expert_tau_track: usize,
    pub expert_frontier_cap: usize,

    // features
    pub d_map: usize,
    pub d_target: usize,

    // horizons
    pub t_obs: usize,
    pub t_pred: usize,
    pub t_act: usize,

    // diffusion policy
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub denoiser_hidden1: usize,
    pub denoiser_hidden2: usize,

    // policy training
    pub policy_epochs: usize,
    pub policy_batch: usize,
    pub policy_lr: f64,

    // selector training
    pub vbll_lr: f64,
    pub vbll_epochs: usize,
    pub vbll_grad_tol: f64,
    pub vbll_sigma_beta_sq: f64,
    pub vbll_freeze_noise: bool,
    pub vbll_init_noise_sq: f64,
    pub selector_net_hidden: usize,
    pub selector_net_epochs: usize,
    pub selector_net_lr: f64,
    pub selector_dropout: f64,

    // deployment-time selection
    pub strategy: StrategyKind,
    pub lambda: f64,
    pub mc_passes: usize,

    // harness
    pub collect_episodes: usize,
    pub eval_episodes: usize,
    pub eval_methods: String,
    pub ablate_lambda_grid: Vec<f64>,
    pub latency_trials: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            map: "builtin:arena".to_string(),
            episode_length: 400,
            targets_min: 3,
            targets_max: 6,
            fov_radius: 8.0,
            v_max: 1.0,
            resolution: 1.0,
            process_noise_vx: 90.0,
            process_noise_vy: 40.0,
            meas_noise_pos: 0.0025,
            meas_noise_vel: 0.0025,
            filter_kappa_q: 2.0,
            filter_kappa_r: 2.0,
            filter_sigma_init: 10.0,
            expert_weight_gain: 1.0,
            expert_weight_distance: 0.5,
            expert_weight_visits: 0.2,
            expert_tau_unc: 25.0,
            expert_tau_track: 30,
            expert_frontier_cap: 32,
            d_map: 32,
            d_target: 32,
            t_obs: 2,
            t_pred: 16,
            t_act: 8,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            embed_dim: 8,
            time_dim: 8,
            denoiser_hidden1: 128,
            denoiser_hidden2: 128,
            policy_epochs: 60,
            policy_batch: 64,
            policy_lr: 1e-3,
            vbll_lr: 0.05,
            vbll_epochs: 16000,
            vbll_grad_tol: 1e-6,
            vbll_sigma_beta_sq: 1.0,
            vbll_freeze_noise: false,
            vbll_init_noise_sq: 1.0,
            selector_net_hidden: 64,
            selector_net_epochs: 300,
            selector_net_lr: 3e-3,
            selector_dropout: 0.1,
            strategy: StrategyKind::Lcb,
            lambda: 1.0,
            mc_passes: 20,
            collect_episodes: 12,
            eval_episodes: 20,
            eval_methods: "all".to_string(),
            ablate_lambda_grid: vec![0.0, 0.1, 1.0, 3.0],
            latency_trials: 100,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("invalid bool `{v}` for `{key}`"))),
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

impl Config {
    /// Parses the flat text format, starting from defaults.
    pub fn from_text(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    column: 1,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        Config::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies one key-value assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "config_version" => {
                let v: u64 = parse_num(key, value)?;
                if v != CONFIG_VERSION {
                    return Err(Error::Config(format!(
                        "unsupported config_version {v} (expected {CONFIG_VERSION})"
                    )));
                }
            }
            "seed" => self.seed = parse_num(key, value)?,
            "map" => self.map = value.to_string(),
            "episode.length" => self.episode_length = parse_num(key, value)?,
            "episode.targets_min" => self.targets_min = parse_num(key, value)?,
            "episode.targets_max" => self.targets_max = parse_num(key, value)?,
            "env.fov_radius" => self.fov_radius = parse_num(key, value)?,
            "env.v_max" => self.v_max = parse_num(key, value)?,
            "env.resolution" => self.resolution = parse_num(key, value)?,
            "env.process_noise_vx" => self.process_noise_vx = parse_num(key, value)?,
            "env.process_noise_vy" => self.process_noise_vy = parse_num(key, value)?,
            "env.meas_noise_pos" => self.meas_noise_pos = parse_num(key, value)?,
            "env.meas_noise_vel" => self.meas_noise_vel = parse_num(key, value)?,
            "filter.kappa_q" => self.filter_kappa_q = parse_num(key, value)?,
            "filter.kappa_r" => self.filter_kappa_r = parse_num(key, value)?,
            "filter.sigma_init" => self.filter_sigma_init = parse_num(key, value)?,
            "experts.weight_gain" => self.expert_weight_gain = parse_num(key, value)?,
            "experts.weight_distance" => self.expert_weight_distance = parse_num(key, value)?,
            "experts.weight_visits" => self.expert_weight_visits = parse_num(key, value)?,
            "experts.tau_unc" => self.expert_tau_unc = parse_num(key, value)?,
            "experts.tau_track" => self.expert_tau_track = parse_num(key, value)?,
            "experts.frontier_cap" => self.expert_frontier_cap = parse_num(key, value)?,
            "features.d_map" => self.d_map = parse_num(key, value)?,
            "features.d_target" => self.d_target = parse_num(key, value)?,
            "horizon.t_obs" => self.t_obs = parse_num(key, value)?,
            "horizon.t_pred" => self.t_pred = parse_num(key, value)?,
            "horizon.t_act" => self.t_act = parse_num(key, value)?,
            "diffusion.steps" => self.diffusion_steps = parse_num(key, value)?,
            "diffusion.beta_start" => self.beta_start = parse_num(key, value)?,
            "diffusion.beta_end" => self.beta_end = parse_num(key, value)?,
            "diffusion.embed_dim" => self.embed_dim = parse_num(key, value)?,
            "diffusion.time_dim" => self.time_dim = parse_num(key, value)?,
            "diffusion.hidden1" => self.denoiser_hidden1 = parse_num(key, value)?,
            "diffusion.hidden2" => self.denoiser_hidden2 = parse_num(key, value)?,
            "train.policy.epochs" => self.policy_epochs = parse_num(key, value)?,
            "train.policy.batch" => self.policy_batch = parse_num(key, value)?,
            "train.policy.lr" => self.policy_lr = parse_num(key, value)?,
            "train.vbll.lr" => self.vbll_lr = parse_num(key, value)?,
            "train.vbll.epochs" => self.vbll_epochs = parse_num(key, value)?,
            "train.vbll.grad_tol" => self.vbll_grad_tol = parse_num(key, value)?,
            "train.vbll.sigma_beta_sq" => self.vbll_sigma_beta_sq = parse_num(key, value)?,
            "train.vbll.freeze_noise" => self.vbll_freeze_noise = parse_bool(key, value)?,
            "train.vbll.init_noise_sq" => self.vbll_init_noise_sq = parse_num(key, value)?,
            "train.selector.hidden" => self.selector_net_hidden = parse_num(key, value)?,
            "train.selector.epochs" => self.selector_net_epochs = parse_num(key, value)?,
            "train.selector.lr" => self.selector_net_lr = parse_num(key, value)?,
            "train.selector.dropout" => self.selector_dropout = parse_num(key, value)?,
            "selector.strategy" => self.strategy = StrategyKind::parse(value)?,
            "selector.lambda" => self.lambda = parse_num(key, value)?,
            "selector.mc_passes" => self.mc_passes = parse_num(key, value)?,
            "collect.episodes" => self.collect_episodes = parse_num(key, value)?,
            "eval.episodes" => self.eval_episodes = parse_num(key, value)?,
            "eval.methods" => self.eval_methods = value.to_string(),
            "ablate.lambda_grid" => {
                let mut grid = Vec::new();
                for part in value.split(',') {
                    grid.push(parse_num(key, part.trim())?);
                }
                self.ablate_lambda_grid = grid;
            }
            "latency.trials" => self.latency_trials = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Serializes every key in fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("config_version", CONFIG_VERSION.to_string());
        put("seed", self.seed.to_string());
        put("map", self.map.clone());
        put("episode.length", self.episode_length.to_string());
        put("episode.targets_min", self.targets_min.to_string());
        put("episode.targets_max", self.targets_max.to_string());
        put("env.fov_radius", fmt_f64(self.fov_radius));
        put("env.v_max", fmt_f64(self.v_max));
        put("env.resolution", fmt_f64(self.resolution));
        put("env.process_noise_vx", fmt_f64(self.process_noise_vx));
        put("env.process_noise_vy", fmt_f64(self.process_noise_vy));
        put("env.meas_noise_pos", fmt_f64(self.meas_noise_pos));
        put("env.meas_noise_vel", fmt_f64(self.meas_noise_vel));
        put("filter.kappa_q", fmt_f64(self.filter_kappa_q));
        put("filter.kappa_r", fmt_f64(self.filter_kappa_r));
        put("filter.sigma_init", fmt_f64(self.filter_sigma_init));
        put("experts.weight_gain", fmt_f64(self.expert_weight_gain));
        put("experts.weight_distance", fmt_f64(self.expert_weight_distance));
        put("experts.weight_visits", fmt_f64(self.expert_weight_visits));
        put("experts.tau_unc", fmt_f64(self.expert_tau_unc));
        put("experts.tau_track", self.expert_tau_track.to_string());
        put("experts.frontier_cap", self.expert_frontier_cap.to_string());
        put("features.d_map", self.d_map.to_string());
        put("features.d_target", self.d_target.to_string());
        put("horizon.t_obs", self.t_obs.to_string());
        put("horizon.t_pred", self.t_pred.to_string());
        put("horizon.t_act", self.t_act.to_string());
        put("diffusion.steps", self.diffusion_steps.to_string());
        put("diffusion.beta_start", fmt_f64(self.beta_start));
        put("diffusion.beta_end", fmt_f64(self.beta_end));
        put("diffusion.embed_dim", self.embed_dim.to_string());
        put("diffusion.time_dim", self.time_dim.to_string());
        put("diffusion.hidden1", self.denoiser_hidden1.to_string());
        put("diffusion.hidden2", self.denoiser_hidden2.to_string());
        put("train.policy.epochs", self.policy_epochs.to_string());
        put("train.policy.batch", self.policy_batch.to_string());
        put("train.policy.lr", fmt_f64(self.policy_lr));
        put("train.vbll.lr", fmt_f64(self.vbll_lr));
        put("train.vbll.epochs", self.vbll_epochs.to_string());
        put("train.vbll.grad_tol", fmt_f64(self.vbll_grad_tol));
        put("train.vbll.sigma_beta_sq", fmt_f64(self.vbll_sigma_beta_sq));
        put("train.vbll.freeze_noise", self.vbll_freeze_noise.to_string());
        put("train.vbll.init_noise_sq", fmt_f64(self.vbll_init_noise_sq));
        put("train.selector.hidden", self.selector_net_hidden.to_string());
        put("train.selector.epochs", self.selector_net_epochs.to_string());
        put("train.selector.lr", fmt_f64(self.selector_net_lr));
        put("train.selector.dropout", fmt_f64(self.selector_dropout));
        put("selector.strategy", self.strategy.as_str().to_string());
        put("selector.lambda", fmt_f64(self.lambda));
        put("selector.mc_passes", self.mc_passes.to_string());
        put("collect.episodes", self.collect_episodes.to_string());
        put("eval.episodes", self.eval_episodes.to_string());
        put("eval.methods", self.eval_methods.clone());
        put(
            "ablate.lambda_grid",
            self.ablate_lambda_grid
                .iter()
                .map(|x| fmt_f64(*x))
                .collect::<Vec<_>>()
                .join(","),
        );
        put("latency.trials", self.latency_trials.to_string());
        s
    }

    /// Stable hash of the serialized config, embedded in reports.
    pub fn version_hash(&self) -> String {
        format!("{:016x}", crate::rng::fnv1a64(self.to_text().as_bytes()))
    }
}
