//! Frontier detection and scoring over the egocentric map.

use crate::env::{CellState, OccupancyGrid};

use super::path::shortest_path;

/// One frontier component: member cells and the representative cell
/// (member nearest the float centroid, lowest index on ties).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frontier {
    pub cells: Vec<(usize, usize)>,
    pub centroid: (usize, usize),
}

fn is_frontier_cell(grid: &OccupancyGrid, x: usize, y: usize) -> bool {
    if grid.get(x, y) != CellState::Free {
        return false;
    }
    let (xi, yi) = (x as i64, y as i64);
    for (dx, dy) in [(0i64, -1i64), (-1, 0), (1, 0), (0, 1)] {
        let (nx, ny) = (xi + dx, yi + dy);
        if grid.in_bounds(nx, ny) && grid.get(nx as usize, ny as usize) == CellState::Unknown {
            return true;
        }
    }
    false
}

/// Known-free cells 4-adjacent to Unknown space, clustered into
/// 8-connected components in row-major discovery order.
pub fn detect_frontiers(grid: &OccupancyGrid) -> Vec<Frontier> {
    let mut member = vec![false; grid.width * grid.height];
    for y in 0..grid.height {
        for x in 0..grid.width {
            member[grid.idx(x, y)] = is_frontier_cell(grid, x, y);
        }
    }
    let mut seen = vec![false; member.len()];
    let mut out = Vec::new();
    for y in 0..grid.height {
        for x in 0..grid.width {
            let i = grid.idx(x, y);
            if !member[i] || seen[i] {
                continue;
            }
            let mut cells = Vec::new();
            let mut queue = std::collections::VecDeque::new();
            seen[i] = true;
            queue.push_back((x, y));
            while let Some((cx, cy)) = queue.pop_front() {
                cells.push((cx, cy));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                        if !grid.in_bounds(nx, ny) {
                            continue;
                        }
                        let ni = grid.idx(nx as usize, ny as usize);
                        if member[ni] && !seen[ni] {
                            seen[ni] = true;
                            queue.push_back((nx as usize, ny as usize));
                        }
                    }
                }
            }
            cells.sort_unstable_by_key(|&(cx, cy)| (cy, cx));
            let fx = cells.iter().map(|c| c.0 as f64).sum::<f64>() / cells.len() as f64;
            let fy = cells.iter().map(|c| c.1 as f64).sum::<f64>() / cells.len() as f64;
            let centroid = cells
                .iter()
                .copied()
                .min_by(|a, b| {
                    let da = (a.0 as f64 - fx).powi(2) + (a.1 as f64 - fy).powi(2);
                    let db = (b.0 as f64 - fx).powi(2) + (b.1 as f64 - fy).powi(2);
                    da.total_cmp(&db).then((a.1, a.0).cmp(&(b.1, b.0)))
                })
                .unwrap();
            out.push(Frontier { cells, centroid });
        }
    }
    out
}

/// Unknown cells whose centers lie within the sensing radius of the
/// frontier representative: the coverage gain of visiting it.
pub fn coverage_gain(grid: &OccupancyGrid, cell: (usize, usize), fov_radius: f64) -> usize {
    let (cx, cy) = grid.cell_center(cell.0, cell.1);
    let r2 = fov_radius * fov_radius;
    let mut n = 0;
    for y in 0..grid.height {
        for x in 0..grid.width {
            if grid.get(x, y) != CellState::Unknown {
                continue;
            }
            let (px, py) = grid.cell_center(x, y);
            if (px - cx).powi(2) + (py - cy).powi(2) <= r2 {
                n += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreWeights {
    pub gain: f64,
    pub distance: f64,
    pub visits: f64,
}

/// Frontier utility: weighted coverage gain minus path distance minus
/// visitation count at the representative. Unreachable frontiers score
/// negative infinity. The online path search here is what makes the
/// rule-based exploration replan expensive.
pub fn score_frontier(
    grid: &OccupancyGrid,
    frontier: &Frontier,
    robot_cell: (usize, usize),
    visits: &[u32],
    fov_radius: f64,
    weights: &ScoreWeights,
) -> f64 {
    let path = match shortest_path(grid, robot_cell, frontier.centroid) {
        Ok(p) => p,
        Err(_) => return f64::NEG_INFINITY,
    };
    if path.is_empty() && robot_cell != frontier.centroid {
        return f64::NEG_INFINITY;
    }
    let gain = coverage_gain(grid, frontier.centroid, fov_radius) as f64;
    let dist = super::path::path_cost(&path);
    let v = visits[grid.idx(frontier.centroid.0, frontier.centroid.1)] as f64;
    weights.gain * gain - weights.distance * dist - weights.visits * v
}
