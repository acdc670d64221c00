//! Robot kinematics, Brownian-velocity targets, and the noisy sensor.

use nalgebra::{Vector2, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use super::grid::OccupancyGrid;
use crate::config::Config;

/// Observed state dimension (position + velocity, identity observation).
pub const N_Z: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub pos: Vector2<f64>,
    /// Radians in [-pi, pi).
    pub heading: f64,
    pub clock: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetState {
    pub id: usize,
    pub pos: Vector2<f64>,
    pub vel: Vector2<f64>,
}

impl TargetState {
    pub fn state_vec(&self) -> Vector4<f64> {
        Vector4::new(self.pos.x, self.pos.y, self.vel.x, self.vel.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub id: usize,
    pub value: Vector4<f64>,
    pub step: u64,
}

/// Environment parameters; the observation matrix is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    /// Per-step velocity-increment variances (x, y), cell units.
    pub q_vel: [f64; 2],
    /// Measurement noise variance per observed component.
    pub r_diag: [f64; N_Z],
    pub fov_radius: f64,
    pub v_max: f64,
    pub targets_min: usize,
    pub targets_max: usize,
    pub episode_length: usize,
}

impl WorldConfig {
    pub fn from_config(cfg: &Config) -> WorldConfig {
        WorldConfig {
            q_vel: [cfg.process_noise_vx, cfg.process_noise_vy],
            r_diag: [
                cfg.meas_noise_pos,
                cfg.meas_noise_pos,
                cfg.meas_noise_vel,
                cfg.meas_noise_vel,
            ],
            fov_radius: cfg.fov_radius,
            v_max: cfg.v_max,
            targets_min: cfg.targets_min,
            targets_max: cfg.targets_max,
            episode_length: cfg.episode_length,
        }
    }
}

/// Scales a velocity command down to the speed cap when needed.
pub fn clamp_action(a: Vector2<f64>, v_max: f64) -> Vector2<f64> {
    let n = a.norm();
    if n > v_max && n > 0.0 {
        a * (v_max / n)
    } else {
        a
    }
}

/// Holonomic velocity integrator with wall blocking.
/// Returns the new state and whether the move was blocked.
pub fn step_robot(
    grid: &OccupancyGrid,
    state: &RobotState,
    action: Vector2<f64>,
) -> (RobotState, bool) {
    let dest = state.pos + action;
    let (cx, cy) = grid.pos_to_cell(dest.x, dest.y);
    let blocked = !grid.is_free(cx, cy);
    let pos = if blocked { state.pos } else { dest };
    let heading = if action.norm() > 0.0 {
        action.y.atan2(action.x)
    } else {
        state.heading
    };
    (
        RobotState {
            pos,
            heading,
            clock: state.clock + 1,
        },
        blocked,
    )
}

/// One Brownian-velocity step for every target, in id order.
/// Velocity gains a N(0, Q) increment, then position advances by the new
/// velocity, swept in substeps so large velocities cannot tunnel through
/// walls; a blocked axis flips that velocity component (speed conserved).
pub fn step_targets<R: Rng>(
    grid: &OccupancyGrid,
    targets: &mut [TargetState],
    cfg: &WorldConfig,
    rng: &mut R,
) {
    let sx = cfg.q_vel[0].sqrt();
    let sy = cfg.q_vel[1].sqrt();
    for t in targets.iter_mut() {
        let wx: f64 = rng.sample::<f64, _>(StandardNormal) * sx;
        let wy: f64 = rng.sample::<f64, _>(StandardNormal) * sy;
        t.vel.x += wx;
        t.vel.y += wy;
        let steps = (2.0 * t.vel.x.abs().max(t.vel.y.abs())).ceil().max(1.0) as usize;
        let mut dx = t.vel.x / steps as f64;
        let mut dy = t.vel.y / steps as f64;
        for _ in 0..steps {
            let nx = t.pos.x + dx;
            let (cx, cy) = grid.pos_to_cell(nx, t.pos.y);
            if grid.is_free(cx, cy) {
                t.pos.x = nx;
            } else {
                t.vel.x = -t.vel.x;
                dx = -dx;
            }
            let ny = t.pos.y + dy;
            let (cx, cy) = grid.pos_to_cell(t.pos.x, ny);
            if grid.is_free(cx, cy) {
                t.pos.y = ny;
            } else {
                t.vel.y = -t.vel.y;
                dy = -dy;
            }
        }
    }
}

/// Emits one measurement per target within the sensing disc, in id order.
pub fn sense<R: Rng>(
    robot: &RobotState,
    targets: &[TargetState],
    cfg: &WorldConfig,
    rng: &mut R,
) -> Vec<Measurement> {
    let mut out = Vec::new();
    for t in targets {
        if (t.pos - robot.pos).norm() <= cfg.fov_radius {
            let mut value = t.state_vec();
            for (i, r) in cfg.r_diag.iter().enumerate() {
                value[i] += rng.sample::<f64, _>(StandardNormal) * r.sqrt();
            }
            out.push(Measurement {
                id: t.id,
                value,
                step: robot.clock,
            });
        }
    }
    out
}

/// Deterministic spawn cell: the free cell closest to the map center,
/// lowest row-major index on ties.
pub fn robot_spawn(grid: &OccupancyGrid) -> Vector2<f64> {
    let cx = grid.width as f64 / 2.0;
    let cy = grid.height as f64 / 2.0;
    let mut best: Option<(f64, f64, f64)> = None;
    for (x, y) in grid.free_cells() {
        let (px, py) = grid.cell_center(x, y);
        let d2 = (px - cx).powi(2) + (py - cy).powi(2);
        match best {
            None => best = Some((d2, px, py)),
            Some((bd2, ..)) if d2 < bd2 => best = Some((d2, px, py)),
            _ => {}
        }
    }
    let (_, px, py) = best.expect("map has free cells");
    Vector2::new(px, py)
}

/// Spawns targets uniformly over free cells, zero initial velocity.
pub fn spawn_targets<R: Rng>(
    grid: &OccupancyGrid,
    cfg: &WorldConfig,
    rng: &mut R,
) -> Vec<TargetState> {
    let n = rng.random_range(cfg.targets_min..=cfg.targets_max);
    let free = grid.free_cells();
    (0..n)
        .map(|id| {
            let (x, y) = free[rng.random_range(0..free.len())];
            let (px, py) = grid.cell_center(x, y);
            TargetState {
                id,
                pos: Vector2::new(px, py),
                vel: Vector2::zeros(),
            }
        })
        .collect()
}
