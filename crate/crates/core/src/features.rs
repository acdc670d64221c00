//! Deterministic observation encoder.
//!
//! Replaces a learned encoder with fixed statistics over the egocentric
//! map and target beliefs. Layout is frozen and versioned; per-feature
//! affine normalization constants are fitted once on the demonstration
//! dataset and shipped with every trained artifact, and a layout or
//! constant mismatch at load time is an error.

use nalgebra::Vector2;

use crate::belief::BeliefSet;
use crate::env::{CellState, OccupancyGrid, RobotState};
use crate::io::Artifact;
use crate::rng::fnv1a64;
use crate::{Error, Result};

pub const D_MAP: usize = 32;
pub const D_TARGET: usize = 32;
pub const D_FEAT: usize = D_MAP + D_TARGET;
pub const FEATURE_LAYOUT_VERSION: &str = "stats-64/v1";

/// Everything the encoder may see at one step.
#[derive(Debug, Clone)]
pub struct ObsSnapshot {
    pub ego: OccupancyGrid,
    pub beliefs: BeliefSet,
    pub robot: RobotState,
    pub visits: Vec<u32>,
}

/// Sliding window of the last `t_obs` snapshots, oldest first,
/// front-padded by repetition at episode start.
#[derive(Debug, Clone)]
pub struct ObservationHistory {
    t_obs: usize,
    snaps: Vec<ObsSnapshot>,
}

impl ObservationHistory {
    pub fn new(t_obs: usize) -> ObservationHistory {
        assert!(t_obs >= 1);
        ObservationHistory {
            t_obs,
            snaps: Vec::new(),
        }
    }

    pub fn push(&mut self, snap: ObsSnapshot) {
        if self.snaps.len() == self.t_obs {
            self.snaps.remove(0);
        }
        self.snaps.push(snap);
    }

    pub fn is_empty(&self) -> bool {
        self.snaps.is_empty()
    }

    /// Latest snapshot; panics on an empty history.
    pub fn latest(&self) -> &ObsSnapshot {
        self.snaps.last().expect("history has at least one snapshot")
    }

    /// Oldest snapshot within the padded window.
    pub fn oldest(&self) -> &ObsSnapshot {
        self.snaps.first().expect("history has at least one snapshot")
    }
}

pub struct Encoder {
    pub fov_radius: f64,
}

impl Encoder {
    /// Map statistics from the latest snapshot. Layout:
    /// 0 revealed fraction, 1 frontier count / 32 capped, 2 nearest
    /// frontier distance / map diagonal (1 when none), 3 normalized
    /// visitation entropy, 4..20 occupied fractions of a 4x4 pooling of
    /// the 16x16 robot-centered window (off-map occupied), 20..24
    /// unknown fractions of a 2x2 pooling of the same window, 24..28
    /// unknown fraction per sensing-disc quadrant, 28..32 occupied
    /// fraction per sensing-disc quadrant.
    pub fn encode_map(&self, h: &ObservationHistory) -> Vec<f64> {
        let s = h.latest();
        let g = &s.ego;
        let total = (g.width * g.height) as f64;
        let mut out = vec![0.0; D_MAP];
        out[0] = 1.0 - g.unknown_count() as f64 / total;

        let frontiers = crate::experts::detect_frontiers(g);
        out[1] = (frontiers.len() as f64 / 32.0).min(1.0);
        let diag = ((g.width * g.width + g.height * g.height) as f64).sqrt();
        out[2] = frontiers
            .iter()
            .map(|f| {
                let (cx, cy) = g.cell_center(f.centroid.0, f.centroid.1);
                ((cx - s.robot.pos.x).powi(2) + (cy - s.robot.pos.y).powi(2)).sqrt() / diag
            })
            .fold(f64::INFINITY, f64::min)
            .min(1.0);
        if !out[2].is_finite() {
            out[2] = 1.0;
        }

        let total_visits: u64 = s.visits.iter().map(|v| *v as u64).sum();
        if total_visits > 0 {
            let mut entropy = 0.0;
            for v in &s.visits {
                if *v > 0 {
                    let p = *v as f64 / total_visits as f64;
                    entropy -= p * p.ln();
                }
            }
            out[3] = entropy / (g.free_count().max(2) as f64).ln();
        }

        let (rcx, rcy) = g.pos_to_cell(s.robot.pos.x, s.robot.pos.y);
        for py in 0..4 {
            for px in 0..4 {
                let mut occ = 0usize;
                for dy in 0..4 {
                    for dx in 0..4 {
                        let x = rcx - 8 + (px * 4 + dx) as i64;
                        let y = rcy - 8 + (py * 4 + dy) as i64;
                        let occupied = !g.in_bounds(x, y)
                            || g.get(x as usize, y as usize) == CellState::Occupied;
                        if occupied {
                            occ += 1;
                        }
                    }
                }
                out[4 + py * 4 + px] = occ as f64 / 16.0;
            }
        }
        for py in 0..2 {
            for px in 0..2 {
                let mut unk = 0usize;
                for dy in 0..8 {
                    for dx in 0..8 {
                        let x = rcx - 8 + (px * 8 + dx) as i64;
                        let y = rcy - 8 + (py * 8 + dy) as i64;
                        if g.in_bounds(x, y) && g.get(x as usize, y as usize) == CellState::Unknown
                        {
                            unk += 1;
                        }
                    }
                }
                out[20 + py * 2 + px] = unk as f64 / 64.0;
            }
        }

        // sensing-disc quadrants in robot-relative axes
        let r2 = self.fov_radius * self.fov_radius;
        let mut count = [0usize; 4];
        let mut unknown = [0usize; 4];
        let mut occupied = [0usize; 4];
        let x_lo = ((s.robot.pos.x - self.fov_radius).floor().max(0.0)) as usize;
        let x_hi = ((s.robot.pos.x + self.fov_radius).ceil() as usize).min(g.width - 1);
        let y_lo = ((s.robot.pos.y - self.fov_radius).floor().max(0.0)) as usize;
        let y_hi = ((s.robot.pos.y + self.fov_radius).ceil() as usize).min(g.height - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let (cx, cy) = g.cell_center(x, y);
                let dx = cx - s.robot.pos.x;
                let dy = cy - s.robot.pos.y;
                if dx * dx + dy * dy > r2 {
                    continue;
                }
                let q = match (dx >= 0.0, dy >= 0.0) {
                    (true, true) => 0,
                    (false, true) => 1,
                    (false, false) => 2,
                    (true, false) => 3,
                };
                count[q] += 1;
                match g.get(x, y) {
                    CellState::Unknown => unknown[q] += 1,
                    CellState::Occupied => occupied[q] += 1,
                    CellState::Free => {}
                }
            }
        }
        for q in 0..4 {
            if count[q] > 0 {
                out[24 + q] = unknown[q] as f64 / count[q] as f64;
                out[28 + q] = occupied[q] as f64 / count[q] as f64;
            }
        }
        out
    }

    /// Per-detected-target statistics pooled by (mean, max, counts).
    /// Per-target layout (15): robot-frame relative position (2), range,
    /// bearing sin/cos, world velocity (2), speed, position and velocity
    /// covariance traces, covariance log-det, staleness, detected-now
    /// flag, position std, belief entropy.
    pub fn encode_targets(&self, h: &ObservationHistory) -> Vec<f64> {
        const S: usize = 15;
        let snap = h.latest();
        let mut rows: Vec<[f64; S]> = Vec::new();
        let mut now = 0usize;
        for id in snap.beliefs.ids() {
            let b = snap.beliefs.get(id).unwrap();
            let rel_world = Vector2::new(b.mean[0], b.mean[1]) - snap.robot.pos;
            let (sin_h, cos_h) = snap.robot.heading.sin_cos();
            // rotate into the robot frame
            let rel = Vector2::new(
                cos_h * rel_world.x + sin_h * rel_world.y,
                -sin_h * rel_world.x + cos_h * rel_world.y,
            );
            let range = rel.norm();
            let bearing = rel.y.atan2(rel.x);
            let vel = Vector2::new(b.mean[2], b.mean[3]);
            let trace_pos = b.cov[(0, 0)] + b.cov[(1, 1)];
            let trace_vel = b.cov[(2, 2)] + b.cov[(3, 3)];
            let logdet = b
                .cov
                .cholesky()
                .map(|c| 2.0 * (0..4).map(|i| c.l()[(i, i)].ln()).sum::<f64>())
                .unwrap_or(0.0);
            let staleness = (snap.robot.clock - b.last_detected) as f64;
            let detected_now = if staleness == 0.0 { 1.0 } else { 0.0 };
            now += detected_now as usize;
            let entropy = crate::belief::entropy_single(b).unwrap_or(0.0);
            rows.push([
                rel.x,
                rel.y,
                range,
                bearing.sin(),
                bearing.cos(),
                vel.x,
                vel.y,
                vel.norm(),
                trace_pos,
                trace_vel,
                logdet,
                staleness,
                detected_now,
                trace_pos.sqrt(),
                entropy,
            ]);
        }
        let mut out = vec![0.0; D_TARGET];
        if !rows.is_empty() {
            // order-canonical pooling: exact permutation invariance
            rows.sort_by(|a, b| {
                for i in 0..S {
                    match a[i].total_cmp(&b[i]) {
                        std::cmp::Ordering::Equal => continue,
                        other => return other,
                    }
                }
                std::cmp::Ordering::Equal
            });
            for i in 0..S {
                let mut sum = 0.0;
                let mut max = f64::NEG_INFINITY;
                for r in &rows {
                    sum += r[i];
                    max = max.max(r[i]);
                }
                out[i] = sum / rows.len() as f64;
                out[S + i] = max;
            }
            out[2 * S] = now as f64;
            out[2 * S + 1] = rows.len() as f64;
        }
        out
    }

    /// Raw (pre-normalization) feature vector: map block then targets.
    pub fn encode_raw(&self, h: &ObservationHistory) -> Vec<f64> {
        let mut v = self.encode_map(h);
        v.extend(self.encode_targets(h));
        debug_assert_eq!(v.len(), D_FEAT);
        debug_assert!(v.iter().all(|x| x.is_finite()));
        v
    }
}

/// Frozen per-feature affine normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits constants on a calibration set of raw vectors. A feature
    /// with (near-)zero spread keeps scale 1 so it maps to a constant 0.
    pub fn fit(raw: &[Vec<f64>]) -> Normalizer {
        assert!(!raw.is_empty());
        let d = raw[0].len();
        let n = raw.len() as f64;
        let mut mean = vec![0.0; d];
        for v in raw {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; d];
        for v in raw {
            for i in 0..d {
                std[i] += (v[i] - mean[i]).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s < 1e-9 {
                *s = 1.0;
            }
        }
        Normalizer { mean, std }
    }

    pub fn identity(d: usize) -> Normalizer {
        Normalizer {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        assert_eq!(raw.len(), self.mean.len());
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Stable identity of layout + constants, embedded in artifacts so
    /// a trained model can never run against the wrong feature map.
    pub fn manifest_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(FEATURE_LAYOUT_VERSION.as_bytes());
        for x in self.mean.iter().chain(&self.std) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    pub fn store(&self, artifact: &mut Artifact) {
        artifact.put_meta("feature_layout", FEATURE_LAYOUT_VERSION);
        artifact.put_meta("feature_manifest", format!("{:016x}", self.manifest_hash()));
        artifact.put_f64("norm_mean", self.mean.clone());
        artifact.put_f64("norm_std", self.std.clone());
    }

    pub fn load(artifact: &Artifact) -> Result<Normalizer> {
        let layout = artifact.meta_str("feature_layout")?;
        if layout != FEATURE_LAYOUT_VERSION {
            return Err(Error::Checkpoint(format!(
                "feature layout `{layout}` does not match `{FEATURE_LAYOUT_VERSION}`"
            )));
        }
        let n = Normalizer {
            mean: artifact.f64s("norm_mean")?.to_vec(),
            std: artifact.f64s("norm_std")?.to_vec(),
        };
        let stored: String = artifact.meta_parse("feature_manifest")?;
        if stored != format!("{:016x}", n.manifest_hash()) {
            return Err(Error::Checkpoint(
                "feature manifest hash mismatch".to_string(),
            ));
        }
        Ok(n)
    }

    /// Cross-artifact check: both sides must carry the same manifest.
    pub fn check_match(a: &Artifact, b: &Artifact) -> Result<()> {
        let ha = a.meta_str("feature_manifest")?;
        let hb = b.meta_str("feature_manifest")?;
        if ha != hb {
            return Err(Error::Checkpoint(format!(
                "feature manifest mismatch: `{}` has {ha}, `{}` has {hb}",
                a.kind, b.kind
            )));
        }
        Ok(())
    }
}
