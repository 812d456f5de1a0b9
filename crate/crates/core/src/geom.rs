//! Workspace geometry.
//!
//! Everything lives in the unit square `[0,1]²`. Axis convention (top-down
//! view): left is `-X`, right is `+X`, front is `-Y`, back is `+Y`.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

/// Canonical waypoint count of model-facing trajectories.
pub const N_WAYPOINTS: usize = 100;

/// Center of the workspace; augmentation rotates and scales about it.
pub const WORKSPACE_CENTER: Point2 = Point2 { x: 0.5, y: 0.5 };

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn dist_sq(self, other: Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn coord(self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
        }
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn in_workspace(self) -> bool {
        const SLACK: f64 = 1e-12;
        (-SLACK..=1.0 + SLACK).contains(&self.x) && (-SLACK..=1.0 + SLACK).contains(&self.y)
    }

    pub fn clamped(self) -> Point2 {
        Point2::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0))
    }
}

impl From<[f64; 2]> for Point2 {
    fn from([x, y]: [f64; 2]) -> Self {
        Point2 { x, y }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

/// Ordered waypoint sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    pub waypoints: Vec<Point2>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Point2>) -> Self {
        Trajectory { waypoints }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn first(&self) -> Option<Point2> {
        self.waypoints.first().copied()
    }

    pub fn last(&self) -> Option<Point2> {
        self.waypoints.last().copied()
    }

    pub fn arc_length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    /// Index of the waypoint closest to `p`; ties go to the lowest index.
    pub fn closest_index(&self, p: Point2) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, w) in self.waypoints.iter().enumerate() {
            let d = w.dist_sq(p);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Largest per-waypoint displacement between two equal-length trajectories.
    pub fn max_displacement(&self, other: &Trajectory) -> f64 {
        self.waypoints
            .iter()
            .zip(&other.waypoints)
            .map(|(a, b)| a.dist(*b))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.waypoints.iter().all(|p| p.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    #[serde(rename = "pos")]
    pub position: Point2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub start: Point2,
    pub goal: Point2,
    pub objects: Vec<SceneObject>,
    #[serde(skip)]
    pub rng_seed: u64,
}

impl World {
    pub fn labels(&self) -> Vec<&str> {
        self.objects.iter().map(|o| o.label.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_spacing: f64,
    pub min_endpoint_clearance: f64,
    pub min_start_goal_distance: f64,
    /// Objects are placed inside `[margin, 1 - margin]²`.
    pub object_margin: f64,
    /// Start and goal are placed inside `[margin, 1 - margin]²`.
    pub endpoint_margin: f64,
    /// Fixed `(start, goal)`; used by the corner-pinned fine-tuning set.
    pub pinned_endpoints: Option<(Point2, Point2)>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            min_objects: 3,
            max_objects: 6,
            min_object_spacing: 0.12,
            min_endpoint_clearance: 0.15,
            min_start_goal_distance: 0.5,
            object_margin: 0.1,
            endpoint_margin: 0.05,
            pinned_endpoints: None,
        }
    }
}

impl WorldConfig {
    pub fn corner_pinned() -> Self {
        WorldConfig {
            pinned_endpoints: Some((Point2::new(0.05, 0.05), Point2::new(0.95, 0.95))),
            ..WorldConfig::default()
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Rejection-samples a world. Deterministic in `(seed, cfg, labels)`; object
/// labels are drawn without replacement from `labels`.
pub fn gen_random_world(seed: u64, cfg: &WorldConfig, labels: &[String]) -> Result<World> {
    if cfg.min_objects < 1 || cfg.max_objects > 16 || cfg.min_objects > cfg.max_objects {
        return Err(Error::Argument(format!(
            "object count range [{}, {}] must lie within [1, 16]",
            cfg.min_objects, cfg.max_objects
        )));
    }
    if labels.len() < cfg.max_objects {
        return Err(Error::Argument(format!(
            "need at least {} labels, got {}",
            cfg.max_objects,
            labels.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    let m = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut attempts = 0usize;
    let mut draw = |rng: &mut rand_chacha::ChaCha8Rng, margin: f64| -> Result<Point2> {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Generation(format!(
                "no valid placement after {MAX_PLACEMENT_ATTEMPTS} attempts \
                 ({m} objects, spacing {})",
                cfg.min_object_spacing
            )));
        }
        Ok(Point2::new(
            rng.random_range(margin..=1.0 - margin),
            rng.random_range(margin..=1.0 - margin),
        ))
    };

    let (start, goal) = match cfg.pinned_endpoints {
        Some(pair) => pair,
        None => loop {
            let s = draw(&mut rng, cfg.endpoint_margin)?;
            let g = draw(&mut rng, cfg.endpoint_margin)?;
            if s.dist(g) >= cfg.min_start_goal_distance && s != g {
                break (s, g);
            }
        },
    };

    let mut positions: Vec<Point2> = Vec::with_capacity(m);
    while positions.len() < m {
        let p = draw(&mut rng, cfg.object_margin)?;
        let clear_of_endpoints = p.dist(start) >= cfg.min_endpoint_clearance
            && p.dist(goal) >= cfg.min_endpoint_clearance;
        let spaced = positions.iter().all(|q| q.dist(p) >= cfg.min_object_spacing);
        if clear_of_endpoints && spaced {
            positions.push(p);
        }
    }

    let picked = rand::seq::index::sample(&mut rng, labels.len(), m);
    let objects = positions
        .into_iter()
        .zip(picked.iter())
        .map(|(position, li)| SceneObject {
            label: labels[li].clone(),
            position,
        })
        .collect();
    Ok(World {
        start,
        goal,
        objects,
        rng_seed: seed,
    })
}

/// Checks the World invariants against `cfg`; returns a description of the
/// first violation.
pub fn check_world(world: &World, cfg: &WorldConfig) -> std::result::Result<(), String> {
    let m = world.objects.len();
    if m < cfg.min_objects || m > cfg.max_objects {
        return Err(format!("object count {m} outside configured range"));
    }
    if world.start == world.goal {
        return Err("start equals goal".into());
    }
    for (i, a) in world.objects.iter().enumerate() {
        if a.label.is_empty() {
            return Err(format!("object {i} has an empty label"));
        }
        if !a.position.in_workspace() {
            return Err(format!("object {i} outside workspace"));
        }
        for end in [world.start, world.goal] {
            if a.position.dist(end) < cfg.min_endpoint_clearance {
                return Err(format!("object {i} too close to an endpoint"));
            }
        }
        for (j, b) in world.objects.iter().enumerate().skip(i + 1) {
            if a.position.dist(b.position) < cfg.min_object_spacing {
                return Err(format!("objects {i} and {j} closer than spacing"));
            }
        }
    }
    Ok(())
}

/// Resamples `traj` to `n` waypoints equally spaced in arc length. Endpoints
/// are copied exactly.
pub fn resample(traj: &Trajectory, n: usize) -> Result<Trajectory> {
    if n < 2 {
        return Err(Error::Argument(format!("resample needs n >= 2, got {n}")));
    }
    let pts = &traj.waypoints;
    if pts.len() < 2 {
        return Err(Error::Argument(format!(
            "resample needs at least 2 waypoints, got {}",
            pts.len()
        )));
    }
    let mut cumulative = Vec::with_capacity(pts.len());
    let mut acc = 0.0;
    cumulative.push(0.0);
    for w in pts.windows(2) {
        acc += w[0].dist(w[1]);
        cumulative.push(acc);
    }
    let total = acc;
    let first = pts[0];
    let last = pts[pts.len() - 1];
    if total == 0.0 {
        return Ok(Trajectory::new(vec![first; n]));
    }

    let mut out = Vec::with_capacity(n);
    out.push(first);
    let mut seg = 0usize;
    for k in 1..n - 1 {
        let s = total * k as f64 / (n - 1) as f64;
        while seg + 2 < cumulative.len() && cumulative[seg + 1] < s {
            seg += 1;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let t = if len > 0.0 {
            ((s - cumulative[seg]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(pts[seg].lerp(pts[seg + 1], t));
    }
    out.push(last);
    Ok(Trajectory::new(out))
}

/// Minimum Euclidean distance from any waypoint to `p`.
pub fn min_dist(traj: &Trajectory, p: Point2) -> f64 {
    traj.waypoints
        .iter()
        .map(|w| w.dist(p))
        .fold(f64::INFINITY, f64::min)
}

/// Signed offset along `axis` between the closest-approach waypoint and
/// `target`. Positive means the trajectory passes on the `+axis` side.
pub fn signed_axis_offset(traj: &Trajectory, target: Point2, axis: Axis) -> f64 {
    match traj.closest_index(target) {
        Some(i) => traj.waypoints[i].coord(axis) - target.coord(axis),
        None => 0.0,
    }
}

/// Rotation about the workspace center followed by scaling about it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: f64,
    pub scale: f64,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity {
        rotation: 0.0,
        scale: 1.0,
    };

    pub fn inverse(self) -> Similarity {
        Similarity {
            rotation: (TAU - self.rotation).rem_euclid(TAU),
            scale: 1.0 / self.scale,
        }
    }

    pub fn apply(self, p: Point2) -> Point2 {
        let (sin, cos) = self.rotation.sin_cos();
        let dx = p.x - WORKSPACE_CENTER.x;
        let dy = p.y - WORKSPACE_CENTER.y;
        Point2::new(
            WORKSPACE_CENTER.x + self.scale * (cos * dx - sin * dy),
            WORKSPACE_CENTER.y + self.scale * (sin * dx + cos * dy),
        )
    }

    pub fn apply_traj(self, traj: &Trajectory) -> Result<Trajectory> {
        let waypoints: Vec<Point2> = traj.waypoints.iter().map(|&p| self.apply(p)).collect();
        if waypoints.iter().all(|p| p.in_workspace()) {
            Ok(Trajectory::new(waypoints))
        } else {
            Err(Error::OutOfWorkspace)
        }
    }

    pub fn apply_world(self, world: &World) -> Result<World> {
        let start = self.apply(world.start);
        let goal = self.apply(world.goal);
        let objects: Vec<SceneObject> = world
            .objects
            .iter()
            .map(|o| SceneObject {
                label: o.label.clone(),
                position: self.apply(o.position),
            })
            .collect();
        let inside = start.in_workspace()
            && goal.in_workspace()
            && objects.iter().all(|o| o.position.in_workspace());
        if !inside {
            return Err(Error::OutOfWorkspace);
        }
        Ok(World {
            start,
            goal,
            objects,
            rng_seed: world.rng_seed,
        })
    }
}

/// Jointly rotates and scales a world and a trajectory about the workspace
/// center. Fails with [`Error::OutOfWorkspace`] if anything leaves `[0,1]²`.
pub fn transform(
    world: &World,
    traj: &Trajectory,
    rotation: f64,
    scale: f64,
) -> Result<(World, Trajectory)> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Argument(format!("scale must be positive, got {scale}")));
    }
    if !(0.0..TAU).contains(&rotation) {
        return Err(Error::Argument(format!(
            "rotation must lie in [0, 2π), got {rotation}"
        )));
    }
    let sim = Similarity { rotation, scale };
    Ok((sim.apply_world(world)?, sim.apply_traj(traj)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels() -> Vec<String> {
        (0..32).map(|i| format!("thing{i}")).collect()
    }

    fn traj(points: &[(f64, f64)]) -> Trajectory {
        Trajectory::new(points.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    fn assert_close(a: Point2, b: Point2, tol: f64) {
        assert!(
            (a.x - b.x).abs() <= tol && (a.y - b.y).abs() <= tol,
            "{a:?} != {b:?}"
        );
    }

    #[test]
    fn world_generation_is_deterministic() {
        let cfg = WorldConfig::default();
        let a = gen_random_world(42, &cfg, &labels()).unwrap();
        let b = gen_random_world(42, &cfg, &labels()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rng_seed, 42);
    }

    #[test]
    fn generated_worlds_satisfy_invariants() {
        let cfg = WorldConfig::default();
        let labels = labels();
        for seed in 0..1000 {
            let w = gen_random_world(seed, &cfg, &labels).unwrap();
            check_world(&w, &cfg).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            assert!((3..=6).contains(&w.objects.len()));
            let mut seen: Vec<&str> = w.labels();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), w.objects.len(), "labels must be distinct");
        }
    }

    #[test]
    fn infeasible_spacing_is_a_generation_error() {
        let cfg = WorldConfig {
            min_objects: 16,
            max_objects: 16,
            min_object_spacing: 0.5,
            ..WorldConfig::default()
        };
        assert!(matches!(
            gen_random_world(1, &cfg, &labels()),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn object_range_outside_bounds_is_rejected() {
        let cfg = WorldConfig {
            max_objects: 17,
            ..WorldConfig::default()
        };
        assert!(matches!(
            gen_random_world(1, &cfg, &labels()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn pinned_endpoints_are_respected() {
        let cfg = WorldConfig::corner_pinned();
        let w = gen_random_world(3, &cfg, &labels()).unwrap();
        assert_eq!(w.start, Point2::new(0.05, 0.05));
        assert_eq!(w.goal, Point2::new(0.95, 0.95));
        check_world(&w, &cfg).unwrap();
    }

    #[test]
    fn resample_segment_midpoint() {
        let out = resample(&traj(&[(0.0, 0.0), (1.0, 1.0)]), 3).unwrap();
        assert_eq!(out.waypoints[0], Point2::new(0.0, 0.0));
        assert_close(out.waypoints[1], Point2::new(0.5, 0.5), 1e-12);
        assert_eq!(out.waypoints[2], Point2::new(1.0, 1.0));
    }

    #[test]
    fn resample_l_shape_by_arc_length() {
        let out = resample(&traj(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]), 5).unwrap();
        // arc lengths 0, 0.5, 1.0, 1.5, 2.0
        let expected = [(0.0, 0.0), (0.5, 0.0), (1.0, 0.0), (1.0, 0.5), (1.0, 1.0)];
        for (p, &(x, y)) in out.waypoints.iter().zip(&expected) {
            assert_close(*p, Point2::new(x, y), 1e-12);
        }
    }

    #[test]
    fn resample_identity_on_equally_spaced() {
        let t = traj(&[(0.0, 0.0), (0.25, 0.0), (0.5, 0.0), (0.75, 0.0), (1.0, 0.0)]);
        let out = resample(&t, 5).unwrap();
        for (a, b) in out.waypoints.iter().zip(&t.waypoints) {
            assert_close(*a, *b, 1e-9);
        }
    }

    #[test]
    fn resample_rejects_small_n() {
        let t = traj(&[(0.0, 0.0), (1.0, 0.0)]);
        assert!(matches!(resample(&t, 1), Err(Error::Argument(_))));
        assert!(matches!(resample(&traj(&[(0.0, 0.0)]), 4), Err(Error::Argument(_))));
    }

    #[test]
    fn min_dist_cases() {
        let line = resample(&traj(&[(0.0, 0.0), (1.0, 0.0)]), 100).unwrap();
        let p = Point2::new(0.5, 0.5);
        // brute force: nearest resampled x to 0.5 is 49/99 or 50/99
        let brute = (0..100)
            .map(|i| Point2::new(i as f64 / 99.0, 0.0).dist(p))
            .fold(f64::INFINITY, f64::min);
        assert!((min_dist(&line, p) - brute).abs() < 1e-12);
        assert!((min_dist(&line, p) - 0.5).abs() < 1e-4);
        assert_eq!(min_dist(&line, line.waypoints[17]), 0.0);
    }

    #[test]
    fn signed_axis_offset_cases() {
        let t = traj(&[(0.2, 0.6), (0.8, 0.6)]);
        let p = Point2::new(0.5, 0.5);
        assert!((signed_axis_offset(&t, p, Axis::Y) - 0.1).abs() < 1e-12);
        assert!((signed_axis_offset(&t, p, Axis::X) + 0.3).abs() < 1e-12);
        assert_eq!(signed_axis_offset(&t, Point2::new(0.8, 0.6), Axis::X), 0.0);

        let flipped = traj(&[(0.2, -0.6), (0.8, -0.6)]);
        let pf = Point2::new(0.5, -0.5);
        assert!((signed_axis_offset(&flipped, pf, Axis::Y) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn rotation_by_pi_about_center() {
        let q = Similarity {
            rotation: std::f64::consts::PI,
            scale: 1.0,
        }
        .apply(Point2::new(0.6, 0.5));
        assert_close(q, Point2::new(0.4, 0.5), 1e-12);
    }

    #[test]
    fn transform_identity_and_rejection() {
        let w = gen_random_world(5, &WorldConfig::default(), &labels()).unwrap();
        let t = traj(&[(w.start.x, w.start.y), (w.goal.x, w.goal.y)]);
        let (w2, t2) = transform(&w, &t, 0.0, 1.0).unwrap();
        assert_close(w.start, w2.start, 1e-15);
        assert_close(w.goal, w2.goal, 1e-15);
        for (a, b) in w.objects.iter().zip(&w2.objects) {
            assert_eq!(a.label, b.label);
            assert_close(a.position, b.position, 1e-15);
        }
        for (a, b) in t.waypoints.iter().zip(&t2.waypoints) {
            assert_close(*a, *b, 1e-15);
        }
        let corner = traj(&[(0.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(
            transform(&w, &corner, 0.0, 1.3),
            Err(Error::OutOfWorkspace)
        ));
    }

    proptest! {
        #[test]
        // Corners that fall between samples get cut, so idempotence is
        // exercised on polylines whose vertices sit on the sample grid.
        fn resample_is_idempotent(
            segs in prop::collection::vec((0.0f64..TAU, 1usize..20), 1..6),
            h in 0.001f64..0.05,
            origin in (0.0f64..1.0, 0.0f64..1.0),
        ) {
            let mut pts = vec![origin];
            for (angle, m) in &segs {
                let (x, y) = *pts.last().unwrap();
                let len = h * *m as f64;
                pts.push((x + len * angle.cos(), y + len * angle.sin()));
            }
            let n = segs.iter().map(|s| s.1).sum::<usize>() + 1;
            let t = traj(&pts);
            let once = resample(&t, n).unwrap();
            let twice = resample(&once, n).unwrap();
            for (a, b) in once.waypoints.iter().zip(&twice.waypoints) {
                prop_assert!((a.x - b.x).abs() <= 1e-9 && (a.y - b.y).abs() <= 1e-9);
            }
            prop_assert_eq!(once.first(), t.first());
            prop_assert_eq!(once.last(), t.last());
        }

        #[test]
        fn min_dist_is_translation_invariant(
            pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20),
            p in (0.0f64..1.0, 0.0f64..1.0),
            shift in (-1.0f64..1.0, -1.0f64..1.0),
        ) {
            let t = traj(&pts);
            let moved = Trajectory::new(
                t.waypoints.iter().map(|w| Point2::new(w.x + shift.0, w.y + shift.1)).collect(),
            );
            let a = min_dist(&t, Point2::new(p.0, p.1));
            let b = min_dist(&moved, Point2::new(p.0 + shift.0, p.1 + shift.1));
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn rotation_preserves_distances(rot in 0.0f64..TAU, seed in 0u64..200) {
            let cfg = WorldConfig { object_margin: 0.35, endpoint_margin: 0.3,
                min_start_goal_distance: 0.1, min_object_spacing: 0.02,
                min_endpoint_clearance: 0.02, ..WorldConfig::default() };
            let w = gen_random_world(seed, &cfg, &labels()).unwrap();
            let t = traj(&[(w.start.x, w.start.y), (w.goal.x, w.goal.y)]);
            let (w2, _) = transform(&w, &t, rot, 1.0).unwrap();
            let pts = |w: &World| {
                let mut v = vec![w.start, w.goal];
                v.extend(w.objects.iter().map(|o| o.position));
                v
            };
            let (a, b) = (pts(&w), pts(&w2));
            for i in 0..a.len() {
                for j in 0..a.len() {
                    prop_assert!((a[i].dist(a[j]) - b[i].dist(b[j])).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn transform_then_inverse_restores(rot in 0.0f64..TAU, scale in 0.7f64..1.3, seed in 0u64..200) {
            let cfg = WorldConfig { object_margin: 0.35, endpoint_margin: 0.3,
                min_start_goal_distance: 0.1, min_object_spacing: 0.02,
                min_endpoint_clearance: 0.02, ..WorldConfig::default() };
            let w = gen_random_world(seed, &cfg, &labels()).unwrap();
            let t = resample(&traj(&[(w.start.x, w.start.y), (w.goal.x, w.goal.y)]), 10).unwrap();
            let (w2, t2) = transform(&w, &t, rot, scale).unwrap();
            let inv = Similarity { rotation: rot, scale }.inverse();
            let (w3, t3) = transform(&w2, &t2, inv.rotation, inv.scale).unwrap();
            assert_close(w3.start, w.start, 1e-7);
            assert_close(w3.goal, w.goal, 1e-7);
            for (a, b) in w3.objects.iter().zip(&w.objects) {
                assert_close(a.position, b.position, 1e-7);
                prop_assert_eq!(&a.label, &b.label);
            }
            for (a, b) in t3.waypoints.iter().zip(&t.waypoints) {
                assert_close(*a, *b, 1e-7);
            }
        }
    }
}
