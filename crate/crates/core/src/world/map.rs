use std::collections::VecDeque;

use rand::Rng;

use super::pose::Pose;
use crate::error::{Error, Result};
use crate::rng;

/// Number of distinct wall textures.
pub const NUM_TEXTURES: u8 = 8;

/// Grid world with 1 m cells. Walls carry a texture id.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldMap {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Row-major over `(cx, cy)`: `cells[cy * width + cx]`, `None` = free.
    cells: Vec<Option<u8>>,
    /// Nominal distance covered by one expert step, in meters.
    pub average_step_size: f64,
}

/// Map generation knobs.
#[derive(Debug, Clone, Copy)]
pub struct MapParams {
    pub width: usize,
    pub height: usize,
    pub wall_density: f64,
    pub step_size: f64,
}

impl Default for MapParams {
    fn default() -> Self {
        MapParams { width: 12, height: 12, wall_density: 0.18, step_size: 0.25 }
    }
}

pub type Cell = (usize, usize);

impl WorldMap {
    /// Builds a map from explicit cells; `cells[cy * width + cx]`.
    pub fn from_cells(width: usize, height: usize, cells: Vec<Option<u8>>, step_size: f64) -> Result<Self> {
        if cells.len() != width * height {
            return Err(Error::invalid("cell count does not match map size"));
        }
        if !(step_size > 0.0) {
            return Err(Error::invalid("average_step_size must be positive"));
        }
        Ok(WorldMap { seed: 0, width, height, cells, average_step_size: step_size })
    }

    /// Walled square room of `size` x `size` cells with per-wall textures
    /// varying along each side.
    pub fn empty_room(size: usize, step_size: f64) -> Self {
        let mut cells = vec![None; size * size];
        for i in 0..size {
            let t = |k: usize, base: usize| Some(((base + k) % NUM_TEXTURES as usize) as u8);
            cells[i] = t(i, 0); // south
            cells[(size - 1) * size + i] = t(i, 2); // north
            cells[i * size] = t(i, 4); // west
            cells[i * size + size - 1] = t(i, 6); // east
        }
        WorldMap { seed: 0, width: size, height: size, cells, average_step_size: step_size }
    }

    pub fn cell(&self, cx: usize, cy: usize) -> Option<u8> {
        self.cells[cy * self.width + cx]
    }

    pub fn cells(&self) -> &[Option<u8>] {
        &self.cells
    }

    pub fn is_wall_cell(&self, cx: i64, cy: i64) -> bool {
        if cx < 0 || cy < 0 || cx as usize >= self.width || cy as usize >= self.height {
            return true;
        }
        self.cells[cy as usize * self.width + cx as usize].is_some()
    }

    pub fn wall_texture(&self, cx: i64, cy: i64) -> Option<u8> {
        if cx < 0 || cy < 0 || cx as usize >= self.width || cy as usize >= self.height {
            return Some(0);
        }
        self.cells[cy as usize * self.width + cx as usize]
    }

    pub fn is_free(&self, x: f64, y: f64) -> bool {
        x.is_finite() && y.is_finite() && !self.is_wall_cell(x.floor() as i64, y.floor() as i64)
    }

    /// True when a disc of `radius` around `(x, y)` touches no wall cell.
    pub fn is_clear(&self, x: f64, y: f64, radius: f64) -> bool {
        [(-radius, -radius), (-radius, radius), (radius, -radius), (radius, radius), (0.0, 0.0)]
            .iter()
            .all(|(dx, dy)| self.is_free(x + dx, y + dy))
    }

    pub fn cell_of(&self, pose: &Pose) -> Option<Cell> {
        if self.is_free(pose.x, pose.y) {
            Some((pose.x.floor() as usize, pose.y.floor() as usize))
        } else {
            None
        }
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for cy in 0..self.height {
            for cx in 0..self.width {
                if self.cell(cx, cy).is_none() {
                    out.push((cx, cy));
                }
            }
        }
        out
    }

    fn neighbors(&self, (cx, cy): Cell) -> impl Iterator<Item = Cell> + '_ {
        let c = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)];
        c.into_iter().filter_map(move |(dx, dy)| {
            let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
            (!self.is_wall_cell(nx, ny)).then_some((nx as usize, ny as usize))
        })
    }

    /// Breadth-first shortest path between free cells (inclusive of both
    /// ends). Neighbors are expanded in a fixed order, so ties resolve
    /// deterministically.
    pub fn bfs_path(&self, from: Cell, to: Cell) -> Option<Vec<Cell>> {
        let idx = |c: Cell| c.1 * self.width + c.0;
        let mut prev = vec![usize::MAX; self.width * self.height];
        let mut queue = VecDeque::from([from]);
        prev[idx(from)] = idx(from);
        while let Some(c) = queue.pop_front() {
            if c == to {
                let mut path = vec![to];
                let mut cur = idx(to);
                while cur != idx(from) {
                    cur = prev[cur];
                    path.push((cur % self.width, cur / self.width));
                }
                path.reverse();
                return Some(path);
            }
            for n in self.neighbors(c) {
                if prev[idx(n)] == usize::MAX {
                    prev[idx(n)] = idx(c);
                    queue.push_back(n);
                }
            }
        }
        None
    }

    /// Cells reachable from `start` by 4-connected flood fill.
    pub fn flood_fill(&self, start: Cell) -> Vec<bool> {
        let mut seen = vec![false; self.width * self.height];
        let mut stack = vec![start];
        seen[start.1 * self.width + start.0] = true;
        while let Some(c) = stack.pop() {
            for n in self.neighbors(c) {
                let i = n.1 * self.width + n.0;
                if !seen[i] {
                    seen[i] = true;
                    stack.push(n);
                }
            }
        }
        seen
    }

    pub fn is_connected(&self) -> bool {
        let free = self.free_cells();
        match free.first() {
            None => false,
            Some(&start) => {
                let seen = self.flood_fill(start);
                free.iter().all(|c| seen[c.1 * self.width + c.0])
            }
        }
    }
}

/// Deterministic procedural map: walled border, random interior blocks,
/// disconnected pockets filled in so free space is one component.
pub fn generate_map(seed: u64, params: &MapParams) -> WorldMap {
    let mut r = rng::stream(seed, "map");
    let (w, h) = (params.width.max(4), params.height.max(4));
    let mut cells = vec![None; w * h];
    for cy in 0..h {
        for cx in 0..w {
            let border = cx == 0 || cy == 0 || cx == w - 1 || cy == h - 1;
            let tex: u8 = r.random_range(0..NUM_TEXTURES);
            let wall = border || r.random::<f64>() < params.wall_density;
            if wall {
                cells[cy * w + cx] = Some(tex);
            }
        }
    }
    let mut map = WorldMap { seed, width: w, height: h, cells, average_step_size: params.step_size };
    // Guarantee a free cell to grow from.
    if map.free_cells().is_empty() {
        map.cells[(h / 2) * w + w / 2] = None;
    }
    // Keep the largest free component; fill the rest.
    let mut best: Vec<bool> = Vec::new();
    let mut best_count = 0;
    let mut visited = vec![false; w * h];
    for c in map.free_cells() {
        if visited[c.1 * w + c.0] {
            continue;
        }
        let comp = map.flood_fill(c);
        let count = comp.iter().filter(|&&b| b).count();
        for (v, &b) in visited.iter_mut().zip(&comp) {
            *v |= b;
        }
        if count > best_count {
            best_count = count;
            best = comp;
        }
    }
    for i in 0..w * h {
        if map.cells[i].is_none() && !best[i] {
            map.cells[i] = Some(r.random_range(0..NUM_TEXTURES));
        }
    }
    map
}
