//! Occupancy grids: the ground-truth map and the agent's egocentric copy.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    Free,
    Occupied,
    /// Only ever present in the egocentric copy.
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    cells: Vec<CellState>,
}

impl OccupancyGrid {
    /// Parses the text map format: first line `W H`, then `H` rows of
    /// `W` characters from `{#, .}`. The border must be fully `#`.
    pub fn from_text(text: &str) -> Result<OccupancyGrid> {
        let parse_err = |line: usize, column: usize, message: String| Error::Parse {
            line,
            column,
            message,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, 1, "empty map file".into()))?;
        let mut parts = header.split_whitespace();
        let width: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(1, 1, "header must be `W H`".into()))?;
        let height: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(1, 1, "header must be `W H`".into()))?;
        if parts.next().is_some() {
            return Err(parse_err(1, 1, "header must be exactly `W H`".into()));
        }
        if width < 3 || height < 3 {
            return Err(Error::Validation(format!(
                "map {width}x{height} too small for a closed border"
            )));
        }
        let mut cells = Vec::with_capacity(width * height);
        for y in 0..height {
            let row = lines
                .next()
                .ok_or_else(|| parse_err(y + 2, 1, format!("expected {height} rows")))?;
            let chars: Vec<char> = row.chars().collect();
            if chars.len() != width {
                return Err(parse_err(
                    y + 2,
                    chars.len().min(width) + 1,
                    format!("row has {} cells, expected {width}", chars.len()),
                ));
            }
            for (x, c) in chars.iter().enumerate() {
                cells.push(match c {
                    '#' => CellState::Occupied,
                    '.' => CellState::Free,
                    other => {
                        return Err(parse_err(y + 2, x + 1, format!("invalid symbol `{other}`")))
                    }
                });
            }
        }
        if let Some(extra) = lines.next() {
            if !extra.trim().is_empty() {
                return Err(parse_err(height + 2, 1, "trailing content after grid".into()));
            }
        }
        let grid = OccupancyGrid {
            width,
            height,
            resolution: 1.0,
            cells,
        };
        for x in 0..width {
            for y in [0, height - 1] {
                if grid.get(x, y) != CellState::Occupied {
                    return Err(Error::Validation(format!(
                        "open border at column {x}, row {y}"
                    )));
                }
            }
        }
        for y in 0..height {
            for x in [0, width - 1] {
                if grid.get(x, y) != CellState::Occupied {
                    return Err(Error::Validation(format!(
                        "open border at column {x}, row {y}"
                    )));
                }
            }
        }
        if grid.free_count() == 0 {
            return Err(Error::Validation("map has no free cells".into()));
        }
        Ok(grid)
    }

    /// Fully-unknown grid with the same shape, for the egocentric copy.
    pub fn unknown_like(other: &OccupancyGrid) -> OccupancyGrid {
        OccupancyGrid {
            width: other.width,
            height: other.height,
            resolution: other.resolution,
            cells: vec![CellState::Unknown; other.width * other.height],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> CellState {
        self.cells[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, state: CellState) {
        let i = self.idx(x, y);
        self.cells[i] = state;
    }

    #[inline]
    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn is_free(&self, x: i64, y: i64) -> bool {
        self.in_bounds(x, y) && self.get(x as usize, y as usize) == CellState::Free
    }

    pub fn free_count(&self) -> usize {
        self.cells.iter().filter(|c| **c == CellState::Free).count()
    }

    pub fn unknown_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| **c == CellState::Unknown)
            .count()
    }

    pub fn occupied_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| **c == CellState::Occupied)
            .count()
    }

    /// Free cells in row-major order.
    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) == CellState::Free {
                    out.push((x, y));
                }
            }
        }
        out
    }

    #[inline]
    pub fn cell_center(&self, x: usize, y: usize) -> (f64, f64) {
        (x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Continuous position to containing cell.
    #[inline]
    pub fn pos_to_cell(&self, px: f64, py: f64) -> (i64, i64) {
        (px.floor() as i64, py.floor() as i64)
    }

    /// Exact grid traversal of the segment between two cell centers.
    /// Returns every cell the open segment crosses, start included,
    /// endpoint excluded. An exact corner crossing steps diagonally.
    pub fn traverse_centers(
        &self,
        from: (usize, usize),
        to: (usize, usize),
    ) -> Vec<(usize, usize)> {
        let (x0, y0) = self.cell_center(from.0, from.1);
        let (x1, y1) = self.cell_center(to.0, to.1);
        let dx = x1 - x0;
        let dy = y1 - y0;
        let mut cx = from.0 as i64;
        let mut cy = from.1 as i64;
        let (ex, ey) = (to.0 as i64, to.1 as i64);
        let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
        let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
        // parametric distance to the next vertical / horizontal cell edge
        let mut t_max_x = if dx != 0.0 { 0.5 / dx.abs() } else { f64::INFINITY };
        let mut t_max_y = if dy != 0.0 { 0.5 / dy.abs() } else { f64::INFINITY };
        let t_delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
        let t_delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };
        let mut out = Vec::new();
        while (cx, cy) != (ex, ey) {
            out.push((cx as usize, cy as usize));
            if t_max_x < t_max_y {
                cx += step_x;
                t_max_x += t_delta_x;
            } else if t_max_y < t_max_x {
                cy += step_y;
                t_max_y += t_delta_y;
            } else {
                cx += step_x;
                cy += step_y;
                t_max_x += t_delta_x;
                t_max_y += t_delta_y;
            }
            debug_assert!(self.in_bounds(cx, cy));
        }
        out
    }

    /// True when no Occupied cell blocks the center-to-center segment.
    /// The endpoint cell itself never blocks, so walls are visible.
    pub fn line_of_sight(&self, from: (usize, usize), to: (usize, usize)) -> bool {
        self.traverse_centers(from, to)
            .into_iter()
            .all(|(x, y)| self.get(x, y) != CellState::Occupied)
    }

    /// Copies ground truth into this egocentric grid for every cell whose
    /// center lies within `fov_radius` of `robot_pos` with clear line of
    /// sight. Monotone: revealed cells never revert to Unknown.
    pub fn reveal(&mut self, truth: &OccupancyGrid, robot_pos: (f64, f64), fov_radius: f64) {
        assert_eq!(self.width, truth.width);
        assert_eq!(self.height, truth.height);
        let (rcx, rcy) = truth.pos_to_cell(robot_pos.0, robot_pos.1);
        debug_assert!(truth.is_free(rcx, rcy));
        let robot_cell = (rcx as usize, rcy as usize);
        let r2 = fov_radius * fov_radius;
        let x_lo = ((robot_pos.0 - fov_radius).floor().max(0.0)) as usize;
        let x_hi = ((robot_pos.0 + fov_radius).ceil() as usize).min(self.width - 1);
        let y_lo = ((robot_pos.1 - fov_radius).floor().max(0.0)) as usize;
        let y_hi = ((robot_pos.1 + fov_radius).ceil() as usize).min(self.height - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let (cx, cy) = truth.cell_center(x, y);
                let d2 = (cx - robot_pos.0).powi(2) + (cy - robot_pos.1).powi(2);
                if d2 > r2 {
                    continue;
                }
                if truth.line_of_sight(robot_cell, (x, y)) {
                    self.set(x, y, truth.get(x, y));
                }
            }
        }
        // the robot's own cell is always known
        self.set(robot_cell.0, robot_cell.1, truth.get(robot_cell.0, robot_cell.1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open5() -> OccupancyGrid {
        OccupancyGrid::from_text("5 5\n#####\n#...#\n#...#\n#...#\n#####\n").unwrap()
    }

    #[test]
    fn smallest_valid_map() {
        let g = open5();
        assert_eq!((g.width, g.height), (5, 5));
        assert_eq!(g.free_count(), 9);
    }

    #[test]
    fn invalid_symbol_rejected() {
        let err = OccupancyGrid::from_text("3 3\n###\n#x#\n###\n").unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, 2);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn open_border_rejected() {
        assert!(matches!(
            OccupancyGrid::from_text("3 3\n#.#\n#.#\n###\n"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn wrong_row_width_rejected() {
        assert!(matches!(
            OccupancyGrid::from_text("4 3\n####\n#.#\n####\n"),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn missing_rows_rejected() {
        assert!(OccupancyGrid::from_text("3 3\n###\n#.#\n").is_err());
    }

    #[test]
    fn reveal_full_room() {
        let g = open5();
        let mut ego = OccupancyGrid::unknown_like(&g);
        ego.reveal(&g, (2.5, 2.5), 10.0);
        assert_eq!(ego.unknown_count(), 0);
        assert_eq!(ego, g);
    }

    #[test]
    fn reveal_zero_radius_only_own_cell() {
        let g = open5();
        let mut ego = OccupancyGrid::unknown_like(&g);
        ego.reveal(&g, (2.5, 2.5), 0.0);
        assert_eq!(ego.unknown_count(), g.width * g.height - 1);
        assert_eq!(ego.get(2, 2), CellState::Free);
    }

    // Independent ray-march oracle: sample the center-to-center segment
    // densely; blocked when any sample before the endpoint cell falls in
    // an Occupied cell.
    fn los_oracle(g: &OccupancyGrid, from: (usize, usize), to: (usize, usize)) -> bool {
        let (x0, y0) = g.cell_center(from.0, from.1);
        let (x1, y1) = g.cell_center(to.0, to.1);
        let n = 10_000;
        for i in 0..n {
            let t = i as f64 / n as f64;
            let px = x0 + t * (x1 - x0);
            let py = y0 + t * (y1 - y0);
            // points exactly on a cell boundary are ambiguous; the
            // traversal resolves exact corner ties by stepping
            // diagonally, so grazing contact does not block
            if px == px.floor() || py == py.floor() {
                continue;
            }
            let (cx, cy) = g.pos_to_cell(px, py);
            if (cx, cy) == (to.0 as i64, to.1 as i64) {
                break;
            }
            if g.get(cx as usize, cy as usize) == CellState::Occupied {
                return false;
            }
        }
        true
    }

    #[test]
    fn corner_occlusion_matches_ray_oracle() {
        // L-shaped corridor: the arm behind the corner is hidden
        let g = OccupancyGrid::from_text(concat!(
            "7 7\n", "#######\n", "#...###\n", "#.#.###\n", "#.#.###\n", "#.#...#\n",
            "#.#####\n", "#######\n"
        ))
        .unwrap();
        let robot = (1, 1);
        let mut ego = OccupancyGrid::unknown_like(&g);
        ego.reveal(&g, (1.5, 1.5), 20.0);
        for y in 0..7 {
            for x in 0..7 {
                let visible = los_oracle(&g, robot, (x, y))
                    && ((x as f64 + 0.5 - 1.5).powi(2) + (y as f64 + 0.5 - 1.5).powi(2)
                        <= 400.0);
                let revealed = ego.get(x, y) != CellState::Unknown;
                assert_eq!(revealed, visible, "cell ({x},{y})");
            }
        }
        // the far end of the lower arm is hidden from the corner's shadow
        assert_eq!(ego.get(5, 4), CellState::Unknown);
        assert_eq!(ego.get(4, 4), CellState::Unknown);
    }

    #[test]
    fn traversal_matches_ray_oracle_on_random_pairs() {
        let g = OccupancyGrid::from_text(concat!(
            "9 9\n",
            "#########\n",
            "#.......#\n",
            "#.##....#\n",
            "#.......#\n",
            "#...##..#\n",
            "#...##..#\n",
            "#.......#\n",
            "#..#....#\n",
            "#########\n"
        ))
        .unwrap();
        let free = g.free_cells();
        for (i, &a) in free.iter().enumerate() {
            for &b in free.iter().skip(i) {
                assert_eq!(
                    g.line_of_sight(a, b),
                    los_oracle(&g, a, b),
                    "{a:?} -> {b:?}"
                );
            }
        }
    }

    #[test]
    fn reveal_is_monotone() {
        let g = OccupancyGrid::from_text(concat!(
            "9 5\n",
            "#########\n",
            "#...#...#\n",
            "#...#...#\n",
            "#.......#\n",
            "#########\n"
        ))
        .unwrap();
        let mut ego = OccupancyGrid::unknown_like(&g);
        let mut last_unknown = ego.unknown_count();
        for pos in [(1.5, 1.5), (3.5, 3.5), (6.5, 3.5), (6.5, 1.5), (1.5, 3.5)] {
            ego.reveal(&g, pos, 2.5);
            let u = ego.unknown_count();
            assert!(u <= last_unknown);
            last_unknown = u;
        }
    }

    #[test]
    fn builtin_maps_parse() {
        for name in crate::maps::builtin_names() {
            let text = crate::maps::resolve(&format!("builtin:{name}")).unwrap();
            let g = OccupancyGrid::from_text(&text).unwrap();
            assert!(g.free_count() > 100, "{name}");
        }
    }

    #[test]
    fn corridor_free_count_matches_character_count() {
        // independent oracle: count '.' characters directly in the text
        let text = crate::maps::resolve("builtin:corridor").unwrap();
        let dots = text.chars().filter(|c| *c == '.').count();
        let g = OccupancyGrid::from_text(&text).unwrap();
        assert_eq!(g.free_count(), dots);
    }
}
