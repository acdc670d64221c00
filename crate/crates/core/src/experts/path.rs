//! Deterministic 8-connected shortest paths over known-free cells.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::env::{CellState, OccupancyGrid};
use crate::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[inline]
fn traversable(grid: &OccupancyGrid, x: i64, y: i64) -> bool {
    grid.in_bounds(x, y) && grid.get(x as usize, y as usize) == CellState::Free
}

/// 8-neighbourhood with corner-cutting forbidden: a diagonal move needs
/// both orthogonal cells free.
pub fn neighbors(grid: &OccupancyGrid, cell: (usize, usize)) -> Vec<((usize, usize), f64)> {
    let (x, y) = (cell.0 as i64, cell.1 as i64);
    let mut out = Vec::with_capacity(8);
    for (dx, dy) in [
        (0i64, -1i64),
        (-1, 0),
        (1, 0),
        (0, 1),
        (-1, -1),
        (1, -1),
        (-1, 1),
        (1, 1),
    ] {
        let (nx, ny) = (x + dx, y + dy);
        if !traversable(grid, nx, ny) {
            continue;
        }
        if dx != 0 && dy != 0 {
            if !traversable(grid, x + dx, y) || !traversable(grid, x, y + dy) {
                continue;
            }
            out.push(((nx as usize, ny as usize), SQRT_2));
        } else {
            out.push(((nx as usize, ny as usize), 1.0));
        }
    }
    out
}

struct Node {
    f: f64,
    idx: usize,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.f == other.f && self.idx == other.idx
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // max-heap: reverse on f, then prefer the lower cell index
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(other.idx.cmp(&self.idx))
    }
}

fn euclid(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Optimal 8-connected path under Euclidean step costs, endpoints
/// included, deterministic tie-breaking by cell index. Returns an empty
/// path when the goal is unreachable.
pub fn shortest_path(
    grid: &OccupancyGrid,
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    for (label, c) in [("from", from), ("to", to)] {
        if !traversable(grid, c.0 as i64, c.1 as i64) {
            return Err(Error::Argument(format!(
                "{label} cell ({}, {}) is not known free",
                c.0, c.1
            )));
        }
    }
    if from == to {
        return Ok(vec![from]);
    }
    let n = grid.width * grid.height;
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let start = grid.idx(from.0, from.1);
    let goal = grid.idx(to.0, to.1);
    g[start] = 0.0;
    let mut open = BinaryHeap::new();
    open.push(Node {
        f: euclid(from, to),
        idx: start,
    });
    while let Some(Node { f, idx }) = open.pop() {
        let cell = (idx % grid.width, idx / grid.width);
        let stale = f - euclid(cell, to) > g[idx] + 1e-12;
        if stale {
            continue;
        }
        if idx == goal {
            let mut path = vec![to];
            let mut cur = goal;
            while cur != start {
                cur = parent[cur];
                path.push((cur % grid.width, cur / grid.width));
            }
            path.reverse();
            return Ok(path);
        }
        for (next, cost) in neighbors(grid, cell) {
            let nidx = grid.idx(next.0, next.1);
            let cand = g[idx] + cost;
            if cand < g[nidx] - 1e-12 {
                g[nidx] = cand;
                parent[nidx] = idx;
                open.push(Node {
                    f: cand + euclid(next, to),
                    idx: nidx,
                });
            }
        }
    }
    Ok(Vec::new())
}

/// Total Euclidean cost of a returned path.
pub fn path_cost(path: &[(usize, usize)]) -> f64 {
    path.windows(2)
        .map(|w| {
            if w[0].0 != w[1].0 && w[0].1 != w[1].1 {
                SQRT_2
            } else {
                1.0
            }
        })
        .sum()
}

/// Single-source Dijkstra over the whole known-free region; returns the
/// cost and parent maps. Used for reachability-aware goal selection.
pub fn reach_costs(grid: &OccupancyGrid, from: (usize, usize)) -> (Vec<f64>, Vec<usize>) {
    let n = grid.width * grid.height;
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    if !traversable(grid, from.0 as i64, from.1 as i64) {
        return (g, parent);
    }
    let start = grid.idx(from.0, from.1);
    g[start] = 0.0;
    let mut open = BinaryHeap::new();
    open.push(Node { f: 0.0, idx: start });
    while let Some(Node { f, idx }) = open.pop() {
        if f > g[idx] + 1e-12 {
            continue;
        }
        let cell = (idx % grid.width, idx / grid.width);
        for (next, cost) in neighbors(grid, cell) {
            let nidx = grid.idx(next.0, next.1);
            let cand = g[idx] + cost;
            if cand < g[nidx] - 1e-12 {
                g[nidx] = cand;
                parent[nidx] = idx;
                open.push(Node { f: cand, idx: nidx });
            }
        }
    }
    (g, parent)
}

/// Reconstructs the path to `to` from a `reach_costs` parent map;
/// empty when unreachable.
pub fn path_from_parents(
    grid: &OccupancyGrid,
    parents: &[usize],
    costs: &[f64],
    from: (usize, usize),
    to: (usize, usize),
) -> Vec<(usize, usize)> {
    let goal = grid.idx(to.0, to.1);
    if costs[goal].is_infinite() {
        return Vec::new();
    }
    let start = grid.idx(from.0, from.1);
    let mut path = vec![to];
    let mut cur = goal;
    while cur != start {
        cur = parents[cur];
        path.push((cur % grid.width, cur / grid.width));
    }
    path.reverse();
    path
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(text: &str) -> OccupancyGrid {
        OccupancyGrid::from_text(text).unwrap()
    }

    #[test]
    fn trivial_same_cell() {
        let g = grid("5 5\n#####\n#...#\n#...#\n#...#\n#####\n");
        let p = shortest_path(&g, (2, 2), (2, 2)).unwrap();
        assert_eq!(p, vec![(2, 2)]);
        assert_eq!(path_cost(&p), 0.0);
    }

    #[test]
    fn straight_corridor_length() {
        let g = grid("9 3\n#########\n#.......#\n#########\n");
        let p = shortest_path(&g, (1, 1), (7, 1)).unwrap();
        assert_eq!(p.len(), 7);
        assert_relative_eq!(path_cost(&p), 6.0);
    }

    #[test]
    fn occupied_endpoints_rejected() {
        let g = grid("5 5\n#####\n#...#\n#...#\n#...#\n#####\n");
        assert!(shortest_path(&g, (0, 0), (2, 2)).is_err());
        assert!(shortest_path(&g, (2, 2), (4, 4)).is_err());
    }

    #[test]
    fn unreachable_returns_empty() {
        let g = grid("7 3\n#######\n#..#..#\n#######\n");
        assert_eq!(shortest_path(&g, (1, 1), (5, 1)).unwrap(), Vec::new());
    }

    #[test]
    fn no_corner_cutting() {
        // diagonal gap blocked by two occupied orthogonals
        let g = grid("5 5\n#####\n#.#.#\n##..#\n#...#\n#####\n");
        let p = shortest_path(&g, (1, 1), (3, 1)).unwrap();
        // must not step (1,1)->(2,2) diagonally through the two walls
        assert!(p.is_empty() || p.windows(2).all(|w| {
            let diag = w[0].0 != w[1].0 && w[0].1 != w[1].1;
            !diag
                || (g.get(w[1].0, w[0].1) == CellState::Free
                    && g.get(w[0].0, w[1].1) == CellState::Free)
        }));
    }

    // Exhaustive brute-force Dijkstra oracle without a priority queue.
    fn dijkstra_oracle(g: &OccupancyGrid, from: (usize, usize)) -> Vec<f64> {
        let n = g.width * g.height;
        let mut dist = vec![f64::INFINITY; n];
        let mut done = vec![false; n];
        dist[g.idx(from.0, from.1)] = 0.0;
        loop {
            let mut best = usize::MAX;
            let mut bd = f64::INFINITY;
            for i in 0..n {
                if !done[i] && dist[i] < bd {
                    bd = dist[i];
                    best = i;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            let cell = (best % g.width, best / g.width);
            for (next, cost) in neighbors(g, cell) {
                let ni = g.idx(next.0, next.1);
                if dist[best] + cost < dist[ni] {
                    dist[ni] = dist[best] + cost;
                }
            }
        }
        dist
    }

    #[test]
    fn maze_costs_match_dijkstra_oracle() {
        let g = grid(concat!(
            "11 11\n",
            "###########\n",
            "#.........#\n",
            "#.#######.#\n",
            "#.#.....#.#\n",
            "#.#.###.#.#\n",
            "#.#.#.#.#.#\n",
            "#.#.#.#.#.#\n",
            "#...#.#.#.#\n",
            "#####.#.#.#\n",
            "#.....#...#\n",
            "###########\n"
        ));
        let free = g.free_cells();
        for &from in &free {
            let oracle = dijkstra_oracle(&g, from);
            for &to in &free {
                let p = shortest_path(&g, from, to).unwrap();
                let od = oracle[g.idx(to.0, to.1)];
                if p.is_empty() && from != to {
                    assert!(od.is_infinite(), "{from:?}->{to:?}");
                } else {
                    assert!(
                        (path_cost(&p) - od).abs() < 1e-9,
                        "{from:?}->{to:?}: {} vs {od}",
                        path_cost(&p)
                    );
                }
            }
        }
    }

    #[test]
    fn reach_costs_agree_with_pairwise_search() {
        let g = grid(concat!(
            "9 7\n",
            "#########\n",
            "#...#...#\n",
            "#.#.#.#.#\n",
            "#.#...#.#\n",
            "#.#####.#\n",
            "#.......#\n",
            "#########\n"
        ));
        let from = (1, 1);
        let (costs, parents) = reach_costs(&g, from);
        for &to in &g.free_cells() {
            let p = shortest_path(&g, from, to).unwrap();
            let q = path_from_parents(&g, &parents, &costs, from, to);
            if p.is_empty() && from != to {
                assert!(q.is_empty());
            } else {
                assert!((path_cost(&p) - costs[g.idx(to.0, to.1)]).abs() < 1e-9);
                assert!((path_cost(&q) - path_cost(&p)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unknown_cells_are_not_traversable() {
        let truth = grid("7 5\n#######\n#.....#\n#.....#\n#.....#\n#######\n");
        let mut ego = OccupancyGrid::unknown_like(&truth);
        ego.reveal(&truth, (1.5, 1.5), 1.6);
        let reachable = shortest_path(&ego, (1, 1), (2, 2));
        assert!(reachable.is_ok());
        // far corner is unknown in the ego map
        assert_eq!(ego.get(5, 3), CellState::Unknown);
        assert!(shortest_path(&ego, (1, 1), (5, 3)).is_err());
    }

    #[test]
    fn search_is_deterministic() {
        let g = grid(concat!(
            "9 9\n",
            "#########\n",
            "#.......#\n",
            "#.......#\n",
            "#...#...#\n",
            "#..###..#\n",
            "#...#...#\n",
            "#.......#\n",
            "#.......#\n",
            "#########\n"
        ));
        let a = shortest_path(&g, (1, 1), (7, 7)).unwrap();
        let b = shortest_path(&g, (1, 1), (7, 7)).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }
}
