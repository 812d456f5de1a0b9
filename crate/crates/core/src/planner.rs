//! Occupancy-grid A* used to produce collision-free initial trajectories.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};
use crate::geom::{resample, Point2, Trajectory, World, N_WAYPOINTS};

pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_OBSTACLE_RADIUS: f64 = 0.05;

/// Square boolean grid over the unit workspace. Cell `(col, row)` has index
/// `row * resolution + col` and covers `[col/res, (col+1)/res) × [row/res, (row+1)/res)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyGrid {
    resolution: usize,
    blocked: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(resolution: usize) -> Self {
        OccupancyGrid {
            resolution,
            blocked: vec![false; resolution * resolution],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.resolution + col
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.resolution, index / self.resolution)
    }

    pub fn is_blocked(&self, index: usize) -> bool {
        self.blocked[index]
    }

    pub fn set_blocked(&mut self, index: usize, blocked: bool) {
        self.blocked[index] = blocked;
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    pub fn cell_center(&self, index: usize) -> Point2 {
        let (c, r) = self.coords(index);
        let res = self.resolution as f64;
        Point2::new((c as f64 + 0.5) / res, (r as f64 + 0.5) / res)
    }

    pub fn cell_of(&self, p: Point2) -> usize {
        let res = self.resolution as f64;
        let clamp = |v: f64| ((v * res).floor().max(0.0) as usize).min(self.resolution - 1);
        self.index(clamp(p.x), clamp(p.y))
    }

    /// 8-connected neighbors with their step costs. Diagonal moves need both
    /// orthogonally adjacent cells free (no corner cutting).
    pub fn neighbors(&self, index: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (c, r) = self.coords(index);
        let n = self.resolution as isize;
        const STEPS: [(isize, isize); 8] = [
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ];
        STEPS.iter().filter_map(move |&(dc, dr)| {
            let nc = c as isize + dc;
            let nr = r as isize + dr;
            if nc < 0 || nr < 0 || nc >= n || nr >= n {
                return None;
            }
            let ni = self.index(nc as usize, nr as usize);
            if self.blocked[ni] {
                return None;
            }
            if dc != 0 && dr != 0 {
                let side_a = self.index(nc as usize, r);
                let side_b = self.index(c, nr as usize);
                if self.blocked[side_a] || self.blocked[side_b] {
                    return None;
                }
                Some((ni, SQRT_2))
            } else {
                Some((ni, 1.0))
            }
        })
    }

    fn octile(&self, a: usize, b: usize) -> f64 {
        let (ac, ar) = self.coords(a);
        let (bc, br) = self.coords(b);
        let dx = ac.abs_diff(bc) as f64;
        let dy = ar.abs_diff(br) as f64;
        dx.max(dy) + (SQRT_2 - 1.0) * dx.min(dy)
    }
}

/// Marks every cell whose center lies within `obstacle_radius` of an object.
pub fn rasterize(world: &World, resolution: usize, obstacle_radius: f64) -> Result<OccupancyGrid> {
    if resolution < 8 {
        return Err(Error::Argument(format!(
            "grid resolution must be >= 8, got {resolution}"
        )));
    }
    if !(obstacle_radius >= 0.0) {
        return Err(Error::Argument(format!(
            "obstacle radius must be >= 0, got {obstacle_radius}"
        )));
    }
    let mut grid = OccupancyGrid::new(resolution);
    let r2 = obstacle_radius * obstacle_radius;
    for i in 0..grid.blocked.len() {
        let c = grid.cell_center(i);
        grid.blocked[i] = world.objects.iter().any(|o| o.position.dist_sq(c) <= r2);
    }
    for (name, p) in [("start", world.start), ("goal", world.goal)] {
        if grid.blocked[grid.cell_of(p)] {
            return Err(Error::InfeasibleWorld(format!("{name} cell is blocked")));
        }
    }
    Ok(grid)
}

/// A cell path with its exact cost, counted as `straight + diagonal·√2`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPath {
    pub cells: Vec<usize>,
    pub straight_steps: usize,
    pub diagonal_steps: usize,
}

impl GridPath {
    pub fn cost(&self) -> f64 {
        self.straight_steps as f64 + self.diagonal_steps as f64 * SQRT_2
    }
}

#[derive(PartialEq)]
struct Frontier {
    f: f64,
    h: f64,
    cell: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (f, h, cell).
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.h.total_cmp(&self.h))
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Cost-optimal 8-connected A* between two cells.
pub fn astar_cells(grid: &OccupancyGrid, start: usize, goal: usize) -> Result<GridPath> {
    if grid.is_blocked(start) || grid.is_blocked(goal) {
        return Err(Error::Argument("start or goal cell is blocked".into()));
    }
    let n = grid.blocked.len();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    g[start] = 0.0;
    let h0 = grid.octile(start, goal);
    open.push(Frontier {
        f: h0,
        h: h0,
        cell: start,
    });
    while let Some(Frontier { cell, .. }) = open.pop() {
        if closed[cell] {
            continue;
        }
        closed[cell] = true;
        if cell == goal {
            return Ok(reconstruct(grid, &parent, start, goal));
        }
        for (next, step) in grid.neighbors(cell) {
            if closed[next] {
                continue;
            }
            let cand = g[cell] + step;
            if cand < g[next] {
                g[next] = cand;
                parent[next] = cell;
                let h = grid.octile(next, goal);
                open.push(Frontier {
                    f: cand + h,
                    h,
                    cell: next,
                });
            }
        }
    }
    Err(Error::PlanningInfeasible(format!(
        "no path from cell {start} to cell {goal}"
    )))
}

fn reconstruct(grid: &OccupancyGrid, parent: &[usize], start: usize, goal: usize) -> GridPath {
    let mut cells = vec![goal];
    let mut cur = goal;
    while cur != start {
        cur = parent[cur];
        cells.push(cur);
    }
    cells.reverse();
    let (mut straight, mut diagonal) = (0, 0);
    for w in cells.windows(2) {
        let (ac, ar) = grid.coords(w[0]);
        let (bc, br) = grid.coords(w[1]);
        if ac != bc && ar != br {
            diagonal += 1;
        } else {
            straight += 1;
        }
    }
    GridPath {
        cells,
        straight_steps: straight,
        diagonal_steps: diagonal,
    }
}

/// Plans from `start` to `goal` and returns the path as a canonical
/// 100-waypoint trajectory whose endpoints are exactly `start` and `goal`.
pub fn plan_astar(grid: &OccupancyGrid, start: Point2, goal: Point2) -> Result<Trajectory> {
    let path = astar_cells(grid, grid.cell_of(start), grid.cell_of(goal))?;
    let mut waypoints = Vec::with_capacity(path.cells.len() + 2);
    waypoints.push(start);
    waypoints.extend(path.cells.iter().map(|&c| grid.cell_center(c)));
    waypoints.push(goal);
    resample(&Trajectory::new(waypoints), N_WAYPOINTS)
}

/// Shortest-path cost by plain Dijkstra over the same neighbor relation as
/// [`astar_cells`], with no heuristic; `None` when `goal` is unreachable.
/// Quadratic in the cell count, meant as a test oracle.
pub fn dijkstra_cost(grid: &OccupancyGrid, start: usize, goal: usize) -> Option<f64> {
    let n = grid.resolution() * grid.resolution();
    // exact costs as (straight, diagonal) counts compared by value
    let mut dist: Vec<Option<(usize, usize)>> = vec![None; n];
    let value = |c: (usize, usize)| c.0 as f64 + c.1 as f64 * SQRT_2;
    let mut done = vec![false; n];
    dist[start] = Some((0, 0));
    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if let (false, Some(d)) = (done[i], dist[i]) {
                if best.is_none_or(|b| value(d) < value(dist[b].unwrap())) {
                    best = Some(i);
                }
            }
        }
        let u = best?;
        if u == goal {
            return Some(value(dist[u].unwrap()));
        }
        done[u] = true;
        let du = dist[u].unwrap();
        for (v, step) in grid.neighbors(u) {
            let cand = if step == 1.0 { (du.0 + 1, du.1) } else { (du.0, du.1 + 1) };
            if dist[v].is_none_or(|dv| value(cand) < value(dv)) {
                dist[v] = Some(cand);
            }
        }
    }
}
