//! Ground-truth reshaping by covariant functional gradient descent.
//!
//! The objective is
//!
//! ```text
//! U(ξ) = w_s · ½ Σ ‖ξ[t+1] − ξ[t]‖²          smoothness
//!      + λ · (1/N) Σ ‖ξ[t] − ξ_o[t]‖²          attachment to the original
//!      + semantic(ξ)                           set by the command
//! ```
//!
//! and each iteration applies `ξ ← clamp(ξ − η · A⁻¹ ∇U)` on the interior
//! waypoints, where `A` is the second-difference matrix. Endpoints never move.
//!
//! Semantic terms (weight `w`, target `P`, influence radius `r`):
//!
//! * repel: `(w/N) Σ max(0, R − d)² / 2R` with `R = max(r, d₀ + r/2)`, where
//!   `d₀` is the original trajectory's closest approach to `P`;
//! * attract: `(w/N) Σ_window d²`;
//! * directional: `(w/N) Σ ‖ξ[t] − ρ[t]‖²` where `ρ` twists `ξ_o` around
//!   `P` toward the commanded side.
//!
//! The window is every waypoint within [`WINDOW_HALF_WIDTH`] indices of the
//! original trajectory's closest approach to `P`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{min_dist, signed_axis_offset, Axis, Point2, Trajectory, World};
use crate::language::{CommandAst, Direction, Intensity};

pub const WINDOW_HALF_WIDTH: usize = 15;


#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CostMode {
    Attract,
    Repel,
    /// Push toward `+axis` (`positive = true`) or `-axis`.
    Directional { axis: Axis, positive: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticCostSpec {
    pub target_index: usize,
    pub target: Point2,
    pub mode: CostMode,
    pub weight: f64,
    pub influence_radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityMultipliers {
    pub slight: f64,
    pub neutral: f64,
    pub strong: f64,
    pub very_strong: f64,
}

impl IntensityMultipliers {
    pub fn get(&self, intensity: Intensity) -> f64 {
        match intensity {
            Intensity::Slight => self.slight,
            Intensity::Neutral => self.neutral,
            Intensity::Strong => self.strong,
            Intensity::VeryStrong => self.very_strong,
        }
    }
}

impl Default for IntensityMultipliers {
    fn default() -> Self {
        IntensityMultipliers {
            slight: 0.4,
            neutral: 1.0,
            strong: 2.0,
            very_strong: 3.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChompConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub smoothness_weight: f64,
    pub attachment_weight: f64,
    pub base_weight: f64,
    pub influence_radius: f64,
    pub intensity: IntensityMultipliers,
}

impl Default for ChompConfig {
    fn default() -> Self {
        ChompConfig {
            iterations: 200,
            step_size: 0.01,
            smoothness_weight: 1.0,
            attachment_weight: 4.0,
            base_weight: 1.0,
            influence_radius: 0.25,
            intensity: IntensityMultipliers::default(),
        }
    }
}

impl ChompConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.smoothness_weight,
            self.attachment_weight,
            self.base_weight,
            self.influence_radius,
        ];
        if self.iterations == 0 || !(self.step_size > 0.0) || weights.iter().any(|w| !(*w >= 0.0))
        {
            return Err(Error::Argument(format!("invalid CHOMP config: {self:?}")));
        }
        Ok(())
    }
}

pub fn direction_mode(direction: Direction) -> CostMode {
    match direction {
        Direction::Closer => CostMode::Attract,
        Direction::Further => CostMode::Repel,
        Direction::Left => CostMode::Directional {
            axis: Axis::X,
            positive: false,
        },
        Direction::Right => CostMode::Directional {
            axis: Axis::X,
            positive: true,
        },
        Direction::Front => CostMode::Directional {
            axis: Axis::Y,
            positive: false,
        },
        Direction::Back => CostMode::Directional {
            axis: Axis::Y,
            positive: true,
        },
    }
}

/// Maps a parsed command onto semantic cost weights for `world`.
pub fn command_to_cost(ast: &CommandAst, world: &World, cfg: &ChompConfig) -> Result<SemanticCostSpec> {
    let target = world
        .objects
        .get(ast.target_index)
        .ok_or_else(|| {
            Error::Argument(format!(
                "target index {} out of range for {} objects",
                ast.target_index,
                world.objects.len()
            ))
        })?
        .position;
    Ok(SemanticCostSpec {
        target_index: ast.target_index,
        target,
        mode: direction_mode(ast.direction),
        weight: cfg.base_weight * cfg.intensity.get(ast.intensity),
        influence_radius: cfg.influence_radius,
    })
}

/// Quantities of the semantic term fixed by the original trajectory.
#[derive(Clone, Debug)]
struct SemanticFrame {
    radius: f64,
    /// Per-waypoint attraction targets of a directional command.
    twist: Vec<Point2>,
    window: (usize, usize),
}

impl SemanticFrame {
    fn new(xi_o: &Trajectory, spec: &SemanticCostSpec) -> Self {
        let r = spec.influence_radius;
        let center = xi_o.closest_index(spec.target).unwrap_or(0);
        let lo = center.saturating_sub(WINDOW_HALF_WIDTH);
        let hi = (center + WINDOW_HALF_WIDTH).min(xi_o.len().saturating_sub(1));
        let d0 = min_dist(xi_o, spec.target);
        let (radius, twist) = match spec.mode {
            CostMode::Repel => ((d0 + r / 2.0).max(r), Vec::new()),
            CostMode::Attract => (r, Vec::new()),
            CostMode::Directional { axis, positive } => {
                (r, twist_targets(xi_o, spec.target, center, axis, positive, r, r / 4.0))
            }
        };
        SemanticFrame {
            radius,
            twist,
            window: (lo, hi),
        }
    }

    fn in_window(&self, t: usize) -> bool {
        (self.window.0..=self.window.1).contains(&t)
    }
}

/// Twists the waypoints around `target`: each one rotates by an angle that
/// depends only on its distance `d`, the full angle between the closest
/// approach and the commanded axis for `d ≤ d₀` tapering to zero at
/// `d₀ + reach`, and moves out by up to `expand` (less if an endpoint is
/// nearly as close as the closest approach). Distances to the target
/// keep their order, so the closest approach stays the same waypoint and
/// turns toward the commanded side.
fn twist_targets(xi_o: &Trajectory, target: Point2, center: usize, axis: Axis, positive: bool, reach: f64, expand: f64) -> Vec<Point2> {
    let c0 = xi_o.waypoints[center];
    let d0 = c0.dist(target);
    let (ex, ey) = match axis {
        Axis::X => (sign(positive), 0.0),
        Axis::Y => (0.0, sign(positive)),
    };
    let angle = (ey.atan2(ex) - (c0.y - target.y).atan2(c0.x - target.x) + PI).rem_euclid(TAU) - PI;
    // Endpoints cannot move; growing past them would hand them the closest approach.
    let slack = [xi_o.waypoints[0], xi_o.waypoints[xi_o.len() - 1]]
        .iter()
        .map(|e| e.dist(target) - d0)
        .fold(f64::INFINITY, f64::min);
    let expand = expand.min(slack / 2.0).max(0.0);
    xi_o.waypoints
        .iter()
        .map(|&p| {
            let (dx, dy) = (p.x - target.x, p.y - target.y);
            let d = (dx * dx + dy * dy).sqrt();
            let taper = if d <= d0 {
                1.0
            } else if d < d0 + reach {
                0.5 * (1.0 + (PI * (d - d0) / reach).cos())
            } else {
                return p;
            };
            if d == 0.0 {
                return p;
            }
            let (sin, cos) = (angle * taper).sin_cos();
            let grow = (d + expand * taper) / d;
            Point2::new(
                target.x + grow * (cos * dx - sin * dy),
                target.y + grow * (sin * dx + cos * dy),
            )
        })
        .collect()
}

fn sign(positive: bool) -> f64 {
    if positive {
        1.0
    } else {
        -1.0
    }
}

fn check_lengths(traj: &Trajectory, xi_o: &Trajectory) -> Result<()> {
    if traj.len() != xi_o.len() || traj.len() < 2 {
        return Err(Error::Argument(format!(
            "trajectory length {} does not match original length {}",
            traj.len(),
            xi_o.len()
        )));
    }
    Ok(())
}

/// Per-waypoint semantic cost and gradient (before the `w/N` factor).
fn semantic_point(p: Point2, t: usize, spec: &SemanticCostSpec, frame: &SemanticFrame) -> (f64, Point2) {
    let target = spec.target;
    match spec.mode {
        CostMode::Repel => {
            let d = p.dist(target);
            let r = frame.radius;
            if d >= r {
                return (0.0, Point2::default());
            }
            let cost = (r - d) * (r - d) / (2.0 * r);
            if d == 0.0 {
                return (cost, Point2::default());
            }
            let k = -(r - d) / (r * d);
            (cost, Point2::new(k * (p.x - target.x), k * (p.y - target.y)))
        }
        CostMode::Attract => {
            if !frame.in_window(t) {
                return (0.0, Point2::default());
            }
            (
                p.dist_sq(target),
                Point2::new(2.0 * (p.x - target.x), 2.0 * (p.y - target.y)),
            )
        }
        CostMode::Directional { .. } => {
            let q = frame.twist[t];
            (p.dist_sq(q), Point2::new(2.0 * (p.x - q.x), 2.0 * (p.y - q.y)))
        }
    }
}

/// Objective value `U(traj)` relative to the original `xi_o`.
pub fn objective(
    traj: &Trajectory,
    xi_o: &Trajectory,
    spec: &SemanticCostSpec,
    cfg: &ChompConfig,
) -> Result<f64> {
    check_lengths(traj, xi_o)?;
    let frame = SemanticFrame::new(xi_o, spec);
    Ok(objective_with(traj, xi_o, spec, cfg, &frame))
}

fn objective_with(
    traj: &Trajectory,
    xi_o: &Trajectory,
    spec: &SemanticCostSpec,
    cfg: &ChompConfig,
    frame: &SemanticFrame,
) -> f64 {
    let n = traj.len() as f64;
    let pts = &traj.waypoints;
    let smooth: f64 = pts.windows(2).map(|w| w[0].dist_sq(w[1])).sum();
    let attach: f64 = pts
        .iter()
        .zip(&xi_o.waypoints)
        .map(|(a, b)| a.dist_sq(*b))
        .sum();
    let semantic: f64 = pts
        .iter()
        .enumerate()
        .map(|(t, &p)| semantic_point(p, t, spec, frame).0)
        .sum();
    cfg.smoothness_weight * 0.5 * smooth
        + cfg.attachment_weight * attach / n
        + spec.weight * semantic / n
}

/// Euclidean gradient of [`objective`] for every waypoint (endpoints included).
pub fn gradient(
    traj: &Trajectory,
    xi_o: &Trajectory,
    spec: &SemanticCostSpec,
    cfg: &ChompConfig,
) -> Result<Vec<Point2>> {
    check_lengths(traj, xi_o)?;
    let frame = SemanticFrame::new(xi_o, spec);
    Ok(gradient_with(traj, xi_o, spec, cfg, &frame))
}

fn gradient_with(
    traj: &Trajectory,
    xi_o: &Trajectory,
    spec: &SemanticCostSpec,
    cfg: &ChompConfig,
    frame: &SemanticFrame,
) -> Vec<Point2> {
    let pts = &traj.waypoints;
    let len = pts.len();
    let n = len as f64;
    let ws = cfg.smoothness_weight;
    let attach = 2.0 * cfg.attachment_weight / n;
    let sem = spec.weight / n;
    (0..len)
        .map(|t| {
            let p = pts[t];
            let mut gx = 0.0;
            let mut gy = 0.0;
            if t > 0 {
                gx += ws * (p.x - pts[t - 1].x);
                gy += ws * (p.y - pts[t - 1].y);
            }
            if t + 1 < len {
                gx += ws * (p.x - pts[t + 1].x);
                gy += ws * (p.y - pts[t + 1].y);
            }
            let o = xi_o.waypoints[t];
            gx += attach * (p.x - o.x);
            gy += attach * (p.y - o.y);
            let (_, g) = semantic_point(p, t, spec, frame);
            Point2::new(gx + sem * g.x, gy + sem * g.y)
        })
        .collect()
}

/// Solves `A x = b` for the `(2, -1)` tridiagonal second-difference matrix.
fn solve_second_difference(b: &[f64], out: &mut [f64]) {
    let m = b.len();
    if m == 0 {
        return;
    }
    // Thomas algorithm with diagonal 2, off-diagonals -1.
    let mut c_prime = vec![0.0; m];
    let mut d_prime = vec![0.0; m];
    c_prime[0] = -0.5;
    d_prime[0] = b[0] / 2.0;
    for i in 1..m {
        let denom = 2.0 + c_prime[i - 1];
        c_prime[i] = -1.0 / denom;
        d_prime[i] = (b[i] + d_prime[i - 1]) / denom;
    }
    out[m - 1] = d_prime[m - 1];
    for i in (0..m - 1).rev() {
        out[i] = d_prime[i] - c_prime[i] * out[i + 1];
    }
}

/// Result of [`optimize_traced`]: the optimized trajectory and the objective
/// after every iteration (index 0 is the initial value).
#[derive(Clone, Debug)]
pub struct OptimizeTrace {
    pub trajectory: Trajectory,
    pub objective: Vec<f64>,
}

impl OptimizeTrace {
    /// Number of iterations where the objective rose by more than a
    /// relative `1e-12`.
    pub fn increases(&self) -> usize {
        self.objective
            .windows(2)
            .filter(|w| w[1] > w[0] + 1e-12 * w[0].abs().max(1e-12))
            .count()
    }
}

/// Reshapes `xi_o` under `spec`. Deterministic; endpoints are held fixed.
pub fn optimize(xi_o: &Trajectory, spec: &SemanticCostSpec, cfg: &ChompConfig) -> Result<Trajectory> {
    optimize_traced(xi_o, spec, cfg).map(|t| t.trajectory)
}

pub fn optimize_traced(
    xi_o: &Trajectory,
    spec: &SemanticCostSpec,
    cfg: &ChompConfig,
) -> Result<OptimizeTrace> {
    cfg.validate()?;
    if xi_o.len() < 3 {
        return Err(Error::Argument(format!(
            "optimize needs at least 3 waypoints, got {}",
            xi_o.len()
        )));
    }
    let frame = SemanticFrame::new(xi_o, spec);
    let len = xi_o.len();
    let interior = len - 2;
    let mut traj = xi_o.clone();
    let mut values = Vec::with_capacity(cfg.iterations + 1);
    values.push(objective_with(&traj, xi_o, spec, cfg, &frame));
    let mut gx = vec![0.0; interior];
    let mut gy = vec![0.0; interior];
    let mut sx = vec![0.0; interior];
    let mut sy = vec![0.0; interior];
    for iteration in 0..cfg.iterations {
        let grad = gradient_with(&traj, xi_o, spec, cfg, &frame);
        for i in 0..interior {
            gx[i] = grad[i + 1].x;
            gy[i] = grad[i + 1].y;
        }
        solve_second_difference(&gx, &mut sx);
        solve_second_difference(&gy, &mut sy);
        for i in 0..interior {
            let p = &mut traj.waypoints[i + 1];
            *p = Point2::new(p.x - cfg.step_size * sx[i], p.y - cfg.step_size * sy[i]).clamped();
        }
        let value = objective_with(&traj, xi_o, spec, cfg, &frame);
        if !value.is_finite() {
            return Err(Error::Divergence { iteration, value });
        }
        values.push(value);
    }
    Ok(OptimizeTrace {
        trajectory: traj,
        objective: values,
    })
}

/// Whether a command about `target` can be realized on `xi_o`: its closest
/// approach must be a movable (interior) waypoint. Otherwise every metric
/// is pinned by a fixed endpoint.
pub fn is_valid_target(xi_o: &Trajectory, target: Point2) -> bool {
    matches!(xi_o.closest_index(target), Some(i) if i > 0 && i + 1 < xi_o.len())
}

/// Whether `reshaped` moved relative to `original` in the direction the
/// command asks for, measured with the workspace metrics.
pub fn complies(direction: Direction, original: &Trajectory, reshaped: &Trajectory, target: Point2) -> bool {
    compliance_delta(direction, original, reshaped, target) > 0.0
}

/// Signed change of the compliance metric; positive means the commanded
/// direction.
pub fn compliance_delta(
    direction: Direction,
    original: &Trajectory,
    reshaped: &Trajectory,
    target: Point2,
) -> f64 {
    match direction_mode(direction) {
        CostMode::Attract => min_dist(original, target) - min_dist(reshaped, target),
        CostMode::Repel => min_dist(reshaped, target) - min_dist(original, target),
        CostMode::Directional { axis, positive } => {
            sign(positive)
                * (signed_axis_offset(reshaped, target, axis)
                    - signed_axis_offset(original, target, axis))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::resample;

    fn line(a: (f64, f64), b: (f64, f64), n: usize) -> Trajectory {
        resample(
            &Trajectory::new(vec![Point2::new(a.0, a.1), Point2::new(b.0, b.1)]),
            n,
        )
        .unwrap()
    }

    fn spec(mode: CostMode, weight: f64, target: (f64, f64)) -> SemanticCostSpec {
        SemanticCostSpec {
            target_index: 0,
            target: Point2::new(target.0, target.1),
            mode,
            weight,
            influence_radius: 0.25,
        }
    }

    fn world_at(p: (f64, f64)) -> World {
        World {
            start: Point2::new(0.1, 0.1),
            goal: Point2::new(0.9, 0.9),
            objects: vec![crate::geom::SceneObject {
                label: "cup".into(),
                position: Point2::new(p.0, p.1),
            }],
            rng_seed: 0,
        }
    }

    #[test]
    fn command_table() {
        let cfg = ChompConfig::default();
        let w = world_at((0.5, 0.5));
        let cases = [
            (Direction::Further, Intensity::Neutral, CostMode::Repel, 1.0),
            (Direction::Closer, Intensity::VeryStrong, CostMode::Attract, 3.5),
            (
                Direction::Left,
                Intensity::Slight,
                CostMode::Directional {
                    axis: Axis::X,
                    positive: false,
                },
                0.4,
            ),
        ];
        for (direction, intensity, mode, weight) in cases {
            let ast = CommandAst {
                direction,
                intensity,
                target_index: 0,
            };
            let s = command_to_cost(&ast, &w, &cfg).unwrap();
            assert_eq!(s.mode, mode);
            assert_eq!(s.weight, weight);
            assert_eq!(s.target_index, 0);
        }
        let bad = CommandAst {
            direction: Direction::Back,
            intensity: Intensity::Strong,
            target_index: 3,
        };
        assert!(command_to_cost(&bad, &w, &cfg).is_err());
    }

    #[test]
    fn straight_line_smoothness_only() {
        let t = line((0.1, 0.2), (0.9, 0.6), 100);
        let cfg = ChompConfig {
            attachment_weight: 0.0,
            ..ChompConfig::default()
        };
        let s = spec(CostMode::Repel, 0.0, (0.5, 0.5));
        let step = t.waypoints[0].dist_sq(t.waypoints[1]);
        let expected = cfg.smoothness_weight * 99.0 * step / 2.0;
        let got = objective(&t, &t, &s, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-12);
        let g = gradient(&t, &t, &s, &cfg).unwrap();
        for p in &g[1..99] {
            assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12);
        }
    }

    #[test]
    fn attachment_vanishes_at_original() {
        let t = line((0.1, 0.2), (0.9, 0.6), 100);
        let cfg = ChompConfig {
            smoothness_weight: 0.0,
            ..ChompConfig::default()
        };
        let s = spec(CostMode::Attract, 0.0, (0.5, 0.5));
        assert_eq!(objective(&t, &t, &s, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn repel_single_point_hand_value() {
        // Waypoint 1 sits at distance r/2 from P; the others are far away.
        let r = 0.25;
        let n = 3.0;
        let p = Point2::new(0.5, 0.5);
        let t = Trajectory::new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(0.5 + r / 2.0, 0.5),
            Point2::new(1.0, 1.0),
        ]);
        let cfg = ChompConfig {
            smoothness_weight: 0.0,
            attachment_weight: 0.0,
            ..ChompConfig::default()
        };
        let w = 2.0;
        let s = spec(CostMode::Repel, w, (p.x, p.y));
        let got = objective(&t, &t, &s, &cfg).unwrap();
        assert!((got - w * r / (8.0 * n)).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_argument_error() {
        let a = line((0.1, 0.1), (0.9, 0.9), 10);
        let b = line((0.1, 0.1), (0.9, 0.9), 11);
        let s = spec(CostMode::Repel, 1.0, (0.5, 0.5));
        assert!(matches!(
            objective(&a, &b, &s, &ChompConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_weight_without_smoothness_is_stationary() {
        let t = resample(
            &Trajectory::new(vec![
                Point2::new(0.1, 0.1),
                Point2::new(0.3, 0.8),
                Point2::new(0.9, 0.7),
            ]),
            100,
        )
        .unwrap();
        let cfg = ChompConfig {
            smoothness_weight: 0.0,
            ..ChompConfig::default()
        };
        let s = spec(CostMode::Repel, 0.0, (0.5, 0.5));
        let out = optimize(&t, &s, &cfg).unwrap();
        for (a, b) in out.waypoints.iter().zip(&t.waypoints) {
            assert!(a.dist(*b) < 1e-9);
        }
    }

    fn central_difference_check(traj: &Trajectory, xi_o: &Trajectory, s: &SemanticCostSpec) {
        let cfg = ChompConfig::default();
        let analytic = gradient(traj, xi_o, s, &cfg).unwrap();
        let eps = 1e-6;
        for t in 0..traj.len() {
            for axis in [Axis::X, Axis::Y] {
                let bump = |delta: f64| {
                    let mut q = traj.clone();
                    match axis {
                        Axis::X => q.waypoints[t].x += delta,
                        Axis::Y => q.waypoints[t].y += delta,
                    }
                    objective(&q, xi_o, s, &cfg).unwrap()
                };
                let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
                let a = analytic[t].coord(axis);
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
                assert!(rel < 1e-5, "t={t} {axis:?}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::seeded_rng(11);
        let modes = [
            CostMode::Repel,
            CostMode::Attract,
            CostMode::Directional {
                axis: Axis::X,
                positive: true,
            },
            CostMode::Directional {
                axis: Axis::Y,
                positive: false,
            },
        ];
        for trial in 0..8 {
            let xi_o = line((0.1, 0.15), (0.85, 0.9), 40);
            let traj = Trajectory::new(
                xi_o.waypoints
                    .iter()
                    .map(|p| {
                        Point2::new(
                            p.x + rng.random_range(-0.05..0.05),
                            p.y + rng.random_range(-0.05..0.05),
                        )
                    })
                    .collect(),
            );
            let s = spec(modes[trial % modes.len()], 2.0, (0.45, 0.55));
            central_difference_check(&traj, &xi_o, &s);
        }
    }

    #[test]
    fn repel_and_attract_move_the_right_way() {
        let xi_o = line((0.1, 0.1), (0.9, 0.9), 100);
        let cfg = ChompConfig::default();
        let near = (0.55, 0.45);
        let out = optimize(&xi_o, &spec(CostMode::Repel, 1.0, near), &cfg).unwrap();
        let p = Point2::new(near.0, near.1);
        assert!(min_dist(&out, p) > min_dist(&xi_o, p));
        assert_eq!(out.first(), xi_o.first());
        assert_eq!(out.last(), xi_o.last());

        let off = (0.7, 0.3);
        let out = optimize(&xi_o, &spec(CostMode::Attract, 1.0, off), &cfg).unwrap();
        let p = Point2::new(off.0, off.1);
        assert!(min_dist(&out, p) < min_dist(&xi_o, p));
    }

    #[test]
    fn directional_moves_along_axis() {
        let xi_o = line((0.1, 0.5), (0.9, 0.5), 100);
        let cfg = ChompConfig::default();
        let p = Point2::new(0.5, 0.4);
        for (positive, expect_sign) in [(true, 1.0), (false, -1.0)] {
            let s = spec(
                CostMode::Directional {
                    axis: Axis::Y,
                    positive,
                },
                1.0,
                (p.x, p.y),
            );
            let out = optimize(&xi_o, &s, &cfg).unwrap();
            let delta = signed_axis_offset(&out, p, Axis::Y) - signed_axis_offset(&xi_o, p, Axis::Y);
            assert!(delta * expect_sign > 0.0, "delta {delta}");
        }
    }

    #[test]
    fn objective_is_monotone_on_a_simple_case() {
        let xi_o = line((0.1, 0.1), (0.9, 0.9), 100);
        let trace = optimize_traced(
            &xi_o,
            &spec(CostMode::Repel, 3.5, (0.52, 0.48)),
            &ChompConfig::default(),
        )
        .unwrap();
        assert_eq!(trace.increases(), 0);
        assert_eq!(trace.objective.len(), 201);
    }

    #[test]
    fn thomas_solver_inverts_second_difference() {
        let b = [1.0, -2.0, 0.5, 3.0, 0.0];
        let mut x = [0.0; 5];
        solve_second_difference(&b, &mut x);
        for i in 0..5 {
            let left = if i > 0 { x[i - 1] } else { 0.0 };
            let right = if i < 4 { x[i + 1] } else { 0.0 };
            assert!((2.0 * x[i] - left - right - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn endpoint_closest_approach_is_not_a_valid_target() {
        let xi_o = line((0.2, 0.2), (0.8, 0.2), 50);
        assert!(is_valid_target(&xi_o, Point2::new(0.5, 0.4)));
        assert!(!is_valid_target(&xi_o, Point2::new(0.1, 0.1)));
        assert!(!is_valid_target(&xi_o, Point2::new(0.95, 0.3)));
    }

    proptest::proptest! {
        #[test]
        fn twist_keeps_distance_order_and_turns_the_closest_approach(
            pts in proptest::collection::vec((0.05f64..0.95, 0.05f64..0.95), 3..7),
            target in (0.1f64..0.9, 0.1f64..0.9),
            dir in 0usize..4,
        ) {
            let raw = Trajectory::new(pts.iter().map(|&(x, y)| Point2::new(x, y)).collect());
            let xi_o = resample(&raw, 60).unwrap();
            let p = Point2::new(target.0, target.1);
            let center = xi_o.closest_index(p).unwrap();
            let (axis, positive) = [(Axis::X, true), (Axis::X, false), (Axis::Y, true), (Axis::Y, false)][dir];
            let twisted = twist_targets(&xi_o, p, center, axis, positive, 0.25, 0.0);
            for (a, b) in xi_o.waypoints.iter().zip(&twisted) {
                proptest::prop_assert!((a.dist(p) - b.dist(p)).abs() < 1e-12);
            }
            let s = |q: Point2| sign(positive) * (q.coord(axis) - p.coord(axis));
            let d0 = xi_o.waypoints[center].dist(p);
            proptest::prop_assume!(d0 > 1e-6);
            proptest::prop_assert!(s(twisted[center]) >= s(xi_o.waypoints[center]) - 1e-12);
            proptest::prop_assert!((s(twisted[center]) - d0).abs() < 1e-9);
        }
    }
}
