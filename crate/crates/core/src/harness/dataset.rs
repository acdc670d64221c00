//! Demonstration collection: run each rule-based expert in rotation,
//! slice episodes into (features, action-sequence) windows stamped with
//! the generating expert and its realized reward, and freeze the
//! feature normalization constants.

use crate::config::Config;
use crate::controller::{run_episode, ActionGenerator, EpisodeSetup, HorizonConfig, SelectorPolicy};
use crate::belief::FilterModel;
use crate::env::WorldConfig;
use crate::experts::{PlannerState, K_EXPERTS};
use crate::features::{Encoder, Normalizer, D_FEAT};
use crate::io::Artifact;
use crate::maps;
use crate::rng::child_seed;
use crate::vbll::reward_target;
use crate::{Error, Result};

/// One training window: what was observed, what the expert then did,
/// and how well tracking went over the executed portion.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSample {
    /// Raw (un-normalized) features at the window anchor.
    pub feats_raw: Vec<f64>,
    /// Executed actions over the prediction horizon, flattened xy pairs.
    pub actions: Vec<f64>,
    pub expert: usize,
    /// Realized reward: negative mean tracking NLL over the execution
    /// horizon following the anchor. Always finite (windows with no
    /// defined metric are excluded at collection).
    pub reward: f64,
    pub episode: usize,
    pub step: u64,
}

/// The collected demonstration set plus its frozen normalization.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<DemoSample>,
    pub t_pred: usize,
    pub t_act: usize,
    pub normalizer: Normalizer,
    /// Collection configuration snapshot (flat text form).
    pub config_text: String,
}

impl Dataset {
    /// Per-expert sample counts.
    pub fn n_k(&self) -> [usize; K_EXPERTS] {
        let mut counts = [0usize; K_EXPERTS];
        for s in &self.samples {
            counts[s.expert] += 1;
        }
        counts
    }

    /// Normalized features of sample `i`.
    pub fn phi(&self, i: usize) -> Vec<f64> {
        self.normalizer.apply(&self.samples[i].feats_raw)
    }

    pub fn store(&self, artifact: &mut Artifact) {
        let n = self.samples.len();
        artifact.put_meta("dataset.n", n);
        artifact.put_meta("dataset.t_pred", self.t_pred);
        artifact.put_meta("dataset.t_act", self.t_act);
        artifact.put_meta("dataset.config", &self.config_text);
        self.normalizer.store(artifact);
        let mut feats = Vec::with_capacity(n * D_FEAT);
        let mut actions = Vec::with_capacity(n * 2 * self.t_pred);
        let mut rewards = Vec::with_capacity(n);
        let mut experts = Vec::with_capacity(n);
        let mut episodes = Vec::with_capacity(n);
        let mut steps = Vec::with_capacity(n);
        for s in &self.samples {
            feats.extend_from_slice(&s.feats_raw);
            actions.extend_from_slice(&s.actions);
            rewards.push(s.reward);
            experts.push(s.expert as u32);
            episodes.push(s.episode as u32);
            steps.push(s.step as u32);
        }
        artifact.put_f64("dataset.feats", feats);
        artifact.put_f64("dataset.actions", actions);
        artifact.put_f64("dataset.rewards", rewards);
        artifact.put_u32("dataset.experts", experts);
        artifact.put_u32("dataset.episodes", episodes);
        artifact.put_u32("dataset.steps", steps);
    }

    pub fn load(artifact: &Artifact) -> Result<Dataset> {
        let n: usize = artifact.meta_parse("dataset.n")?;
        let t_pred: usize = artifact.meta_parse("dataset.t_pred")?;
        let t_act: usize = artifact.meta_parse("dataset.t_act")?;
        let config_text = artifact.meta_str("dataset.config")?.to_string();
        let normalizer = Normalizer::load(artifact)?;
        let feats = artifact.f64s("dataset.feats")?;
        let actions = artifact.f64s("dataset.actions")?;
        let rewards = artifact.f64s("dataset.rewards")?;
        let experts = artifact.u32s("dataset.experts")?;
        let episodes = artifact.u32s("dataset.episodes")?;
        let steps = artifact.u32s("dataset.steps")?;
        let a_len = 2 * t_pred;
        if feats.len() != n * D_FEAT
            || actions.len() != n * a_len
            || rewards.len() != n
            || experts.len() != n
            || episodes.len() != n
            || steps.len() != n
        {
            return Err(Error::Checkpoint("dataset arrays inconsistent".into()));
        }
        let samples = (0..n)
            .map(|i| DemoSample {
                feats_raw: feats[i * D_FEAT..(i + 1) * D_FEAT].to_vec(),
                actions: actions[i * a_len..(i + 1) * a_len].to_vec(),
                expert: experts[i] as usize,
                reward: rewards[i],
                episode: episodes[i] as usize,
                step: steps[i] as u64,
            })
            .collect();
        Ok(Dataset {
            samples,
            t_pred,
            t_act,
            normalizer,
            config_text,
        })
    }
}

/// Sliced window count for one episode before reward exclusion:
/// anchors at every execution boundary whose prediction horizon fits.
pub fn windows_per_episode(episode_length: usize, t_pred: usize, t_act: usize) -> usize {
    if episode_length < t_pred {
        0
    } else {
        (episode_length - t_pred) / t_act + 1
    }
}

/// Builds the episode machinery for the configured world. The
/// normalizer is identity during collection (features are stored raw).
pub fn episode_setup<'a>(cfg: &Config, map_text: &'a str, normalizer: &'a Normalizer) -> Result<EpisodeSetup<'a>> {
    Ok(EpisodeSetup {
        map_text,
        world_cfg: WorldConfig::from_config(cfg),
        horizon: HorizonConfig::from_config(cfg)?,
        filter: FilterModel::from_config(cfg),
        planner_proto: PlannerState::from_config(cfg),
        encoder: Encoder {
            fov_radius: cfg.fov_radius,
        },
        normalizer,
    })
}

/// Runs the three experts in rotation and slices every episode into
/// training windows. Episodes that error out are dropped and noted in
/// the returned log; windows whose reward is undefined (no tracked
/// target during the execution span) are excluded.
pub fn collect_demos(cfg: &Config, seed: u64) -> Result<(Dataset, Vec<String>)> {
    let map_text = maps::resolve(&cfg.map)?;
    let identity = Normalizer::identity(D_FEAT);
    let setup = episode_setup(cfg, &map_text, &identity)?;
    let mut samples = Vec::new();
    let mut log = Vec::new();
    let mut dropped_windows = 0usize;
    for e in 0..cfg.collect_episodes {
        let k = e % K_EXPERTS;
        let ep_seed = child_seed(seed, &format!("collect/ep{e}"));
        let metrics = match run_episode(
            &setup,
            &SelectorPolicy::Fixed(k),
            &ActionGenerator::Rule,
            ep_seed,
        ) {
            Ok(m) => m,
            Err(err) => {
                log.push(format!("episode {e} (expert {k}) dropped: {err}"));
                continue;
            }
        };
        let length = metrics.steps.len();
        for (ri, rec) in metrics.replans.iter().enumerate() {
            let tau = ri * cfg.t_act;
            if tau + cfg.t_pred > length {
                break;
            }
            let mut actions = Vec::with_capacity(2 * cfg.t_pred);
            for st in &metrics.steps[tau..tau + cfg.t_pred] {
                actions.push(st.action.0);
                actions.push(st.action.1);
            }
            let nlls: Vec<Option<f64>> = metrics.steps[tau..tau + cfg.t_act]
                .iter()
                .map(|st| st.nll)
                .collect();
            let reward = match reward_target(&nlls) {
                Some(r) if r.is_finite() => r,
                _ => {
                    dropped_windows += 1;
                    continue;
                }
            };
            samples.push(DemoSample {
                feats_raw: rec.features.clone(),
                actions,
                expert: k,
                reward,
                episode: e,
                step: tau as u64,
            });
        }
    }
    if dropped_windows > 0 {
        log.push(format!(
            "{dropped_windows} windows excluded (no tracking metric in execution span)"
        ));
    }
    let raw: Vec<Vec<f64>> = samples.iter().map(|s| s.feats_raw.clone()).collect();
    let normalizer = if raw.is_empty() {
        Normalizer::identity(D_FEAT)
    } else {
        Normalizer::fit(&raw)
    };
    Ok((
        Dataset {
            samples,
            t_pred: cfg.t_pred,
            t_act: cfg.t_act,
            normalizer,
            config_text: cfg.to_text(),
        },
        log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> Config {
        Config {
            collect_episodes: 3,
            episode_length: 60,
            targets_min: 3,
            targets_max: 3,
            t_obs: 2,
            t_pred: 8,
            t_act: 4,
            ..Config::default()
        }
    }

    #[test]
    fn window_count_matches_closed_form_when_nothing_drops() {
        // a fov spanning the whole arena makes every target visible
        // from step one, so no window lacks a tracking metric
        let cfg = Config {
            fov_radius: 80.0,
            ..small_cfg()
        };
        let (ds, log) = collect_demos(&cfg, 7).unwrap();
        let expect = 3 * windows_per_episode(60, 8, 4);
        assert_eq!(ds.samples.len(), expect, "log: {log:?}");
        assert_eq!(windows_per_episode(1000, 8, 4), (1000 - 8) / 4 + 1);
        assert_eq!(windows_per_episode(4, 8, 4), 0);
    }

    #[test]
    fn experts_rotate_across_episodes() {
        let cfg = Config {
            fov_radius: 80.0,
            ..small_cfg()
        };
        let (ds, _) = collect_demos(&cfg, 3).unwrap();
        for s in &ds.samples {
            assert_eq!(s.expert, s.episode % K_EXPERTS);
        }
        let nk = ds.n_k();
        assert!(nk.iter().all(|&c| c > 0));
        assert_eq!(nk.iter().sum::<usize>(), ds.samples.len());
    }

    #[test]
    fn zero_episodes_gives_empty_dataset() {
        let cfg = Config {
            collect_episodes: 0,
            ..small_cfg()
        };
        let (ds, _) = collect_demos(&cfg, 1).unwrap();
        assert!(ds.samples.is_empty());
        assert_eq!(ds.n_k(), [0, 0, 0]);
    }

    #[test]
    fn same_seed_gives_byte_identical_dataset_file() {
        let cfg = small_cfg();
        let bytes = |seed| {
            let (ds, _) = collect_demos(&cfg, seed).unwrap();
            let mut a = Artifact::new("dataset");
            ds.store(&mut a);
            a.to_bytes()
        };
        assert_eq!(bytes(5), bytes(5));
        assert_ne!(bytes(5), bytes(6));
    }

    #[test]
    fn dataset_round_trips_through_artifact() {
        let cfg = small_cfg();
        let (ds, _) = collect_demos(&cfg, 9).unwrap();
        assert!(!ds.samples.is_empty());
        let mut a = Artifact::new("dataset");
        ds.store(&mut a);
        let back = Dataset::load(&a).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.t_pred, ds.t_pred);
        assert_eq!(back.config_text, ds.config_text);
        // normalization constants survive exactly
        let phi_a = ds.phi(0);
        let phi_b = back.phi(0);
        assert_eq!(phi_a, phi_b);
    }

    #[test]
    fn rewards_are_finite_and_actions_have_horizon_length() {
        let cfg = small_cfg();
        let (ds, _) = collect_demos(&cfg, 11).unwrap();
        for s in &ds.samples {
            assert!(s.reward.is_finite());
            assert_eq!(s.actions.len(), 2 * cfg.t_pred);
            assert_eq!(s.feats_raw.len(), D_FEAT);
        }
    }
}
