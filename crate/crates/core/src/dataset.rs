//! Synthetic (world, ξ_o, command, ξ_mod) samples and their line-oriented
//! file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chomp::{command_to_cost, compliance_delta, is_valid_target, optimize, ChompConfig};
use crate::error::{Error, Result};
use crate::geom::{gen_random_world, resample, Point2, SceneObject, Trajectory, World, WorldConfig, N_WAYPOINTS};
use crate::language::{
    contains_holdout, generate_command, parse_command, CommandAst, Direction, Intensity, LabelSet, Lexicon, Split,
};
use crate::planner::{plan_astar, rasterize, DEFAULT_OBSTACLE_RADIUS, DEFAULT_RESOLUTION};
use crate::seeded_rng;

pub const FORMAT_NAME: &str = "semtraj-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub world: World,
    pub xi_o: Trajectory,
    pub command_text: String,
    pub command_ast: CommandAst,
    pub xi_mod: Trajectory,
}

impl Sample {
    pub fn target(&self) -> Point2 {
        self.world.objects[self.command_ast.target_index].position
    }

    /// Checks the record-level invariants.
    pub fn validate(&self, lexicon: &Lexicon) -> std::result::Result<(), String> {
        if self.xi_o.len() != self.xi_mod.len() || self.xi_o.len() < 2 {
            return Err(format!(
                "trajectory lengths {} and {} differ or are too short",
                self.xi_o.len(),
                self.xi_mod.len()
            ));
        }
        if self.xi_o.first() != self.xi_mod.first() || self.xi_o.last() != self.xi_mod.last() {
            return Err("xi_o and xi_mod have different endpoints".into());
        }
        if self.command_ast.target_index >= self.world.objects.len() {
            return Err(format!(
                "target {} out of range for {} objects",
                self.command_ast.target_index,
                self.world.objects.len()
            ));
        }
        let parsed = parse_command(&self.command_text, lexicon, &self.world.labels())
            .map_err(|e| format!("command does not parse: {e}"))?;
        if parsed != self.command_ast {
            return Err(format!("command parses to {parsed:?}, record says {:?}", self.command_ast));
        }
        Ok(())
    }
}

/// Everything that determines a generated sample besides its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub world: WorldConfig,
    pub chomp: ChompConfig,
    pub grid_resolution: usize,
    pub obstacle_radius: f64,
    pub n_waypoints: usize,
    /// Attempts per seed before giving up.
    pub max_attempts: usize,
    /// Smallest compliance-metric change accepted as a label.
    pub min_compliance: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            world: WorldConfig::default(),
            chomp: ChompConfig::default(),
            grid_resolution: DEFAULT_RESOLUTION,
            obstacle_radius: DEFAULT_OBSTACLE_RADIUS,
            n_waypoints: N_WAYPOINTS,
            max_attempts: 64,
            min_compliance: 1e-3,
        }
    }
}

/// Vocabulary and configuration shared by every sample of a dataset.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: DatasetConfig,
    pub lexicon: Lexicon,
    pub labels: LabelSet,
}

impl Default for Generator {
    fn default() -> Self {
        Generator::new(DatasetConfig::default(), Lexicon::default(), LabelSet::default())
    }
}

/// Seed of attempt `k` for sample seed `seed`; attempt 0 uses the seed itself.
fn attempt_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17)
    }
}

impl Generator {
    pub fn new(cfg: DatasetConfig, lexicon: Lexicon, labels: LabelSet) -> Self {
        Generator { cfg, lexicon, labels }
    }

    /// A* trajectory for `world`, resampled to the configured length.
    pub fn initial_trajectory(&self, world: &World) -> Result<Trajectory> {
        let grid = rasterize(world, self.cfg.grid_resolution, self.cfg.obstacle_radius)?;
        let path = plan_astar(&grid, world.start, world.goal)?;
        resample(&path, self.cfg.n_waypoints)
    }

    /// Labels `(world, xi_o)` with a random command drawn from `rng_seed`,
    /// targeting an object whose closest approach is an interior waypoint.
    pub fn label(&self, rng_seed: u64, world: World, xi_o: Trajectory, split: Split) -> Result<Sample> {
        let mut rng = seeded_rng(rng_seed ^ 0x636f_6d6d_616e_64);
        let valid: Vec<usize> = (0..world.objects.len())
            .filter(|&i| is_valid_target(&xi_o, world.objects[i].position))
            .collect();
        if valid.is_empty() {
            return Err(Error::Generation("no object can be targeted".into()));
        }
        let ast = CommandAst {
            direction: Direction::ALL[rng.random_range(0..Direction::ALL.len())],
            intensity: Intensity::ALL[rng.random_range(0..Intensity::ALL.len())],
            target_index: valid[rng.random_range(0..valid.len())],
        };
        self.label_with(rng_seed, world, xi_o, ast, split)
    }

    /// Labels `(world, xi_o)` with the given command.
    pub fn label_with(&self, seed: u64, world: World, xi_o: Trajectory, ast: CommandAst, split: Split) -> Result<Sample> {
        let label = world.objects[ast.target_index].label.clone();
        let text = generate_command(&ast, &label, &self.lexicon, seed, split)?;
        let spec = command_to_cost(&ast, &world, &self.cfg.chomp)?;
        let xi_mod = optimize(&xi_o, &spec, &self.cfg.chomp)?;
        Ok(Sample {
            seed,
            world,
            xi_o,
            command_text: text,
            command_ast: ast,
            xi_mod,
        })
    }

    /// A random world and its initial trajectory; seeds whose world cannot
    /// be generated or planned are retried with derived seeds.
    pub fn random_scene(&self, seed: u64, world_cfg: &WorldConfig) -> Result<(World, Trajectory)> {
        let mut last = None;
        for k in 0..self.cfg.max_attempts {
            let scene = gen_random_world(attempt_seed(seed, k), world_cfg, self.labels.as_slice())
                .and_then(|w| self.initial_trajectory(&w).map(|t| (w, t)));
            match scene {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::Generation("max_attempts is zero".into())))
    }

    fn attempt(&self, seed: u64, world_cfg: &WorldConfig) -> Result<Sample> {
        let world = gen_random_world(seed, world_cfg, self.labels.as_slice())?;
        let xi_o = self.initial_trajectory(&world)?;
        self.label(seed, world, xi_o, Split::Train)
    }

    /// Why a generated sample would be rejected, if it would be.
    fn rejection(&self, sample: &Sample) -> Option<String> {
        if let Err(e) = sample.validate(&self.lexicon) {
            return Some(e);
        }
        let delta = compliance_delta(sample.command_ast.direction, &sample.xi_o, &sample.xi_mod, sample.target());
        (delta < self.cfg.min_compliance).then(|| format!("compliance delta {delta:.2e}"))
    }

    /// One sample for `seed`. Attempts whose planning or optimization fails,
    /// or whose label does not comply with its own command, are logged and
    /// retried with a derived seed. The returned sample records `seed`.
    pub fn generate_sample(&self, seed: u64) -> Result<Sample> {
        self.generate_sample_in(seed, &self.cfg.world)
    }

    pub fn generate_sample_in(&self, seed: u64, world_cfg: &WorldConfig) -> Result<Sample> {
        self.generate_counted(seed, world_cfg).map(|(s, _)| s)
    }

    /// [`Generator::generate_sample_in`] that also returns the number of
    /// rejected attempts.
    pub fn generate_counted(&self, seed: u64, world_cfg: &WorldConfig) -> Result<(Sample, usize)> {
        for k in 0..self.cfg.max_attempts {
            let reason = match self.attempt(attempt_seed(seed, k), world_cfg) {
                Ok(mut sample) => match self.rejection(&sample) {
                    None => {
                        sample.seed = seed;
                        return Ok((sample, k));
                    }
                    Some(r) => r,
                },
                Err(e) => e.to_string(),
            };
            log::debug!("seed {seed} attempt {k} rejected: {reason}");
        }
        Err(Error::Generation(format!(
            "seed {seed}: no acceptable sample in {} attempts",
            self.cfg.max_attempts
        )))
    }

    /// Samples for seeds `base_seed..base_seed + n`, in seed order.
    pub fn generate_many(&self, n: usize, base_seed: u64, world_cfg: &WorldConfig) -> Result<Vec<Sample>> {
        let results: Vec<Result<(Sample, usize)>> = (0..n as u64)
            .into_par_iter()
            .map(|i| self.generate_counted(base_seed + i, world_cfg))
            .collect();
        let mut samples = Vec::with_capacity(n);
        let mut rejected = 0;
        for r in results {
            let (s, k) = r?;
            rejected += k;
            samples.push(s);
        }
        log::info!(
            "generated {n} samples, {rejected} rejected attempts ({:.1}%)",
            100.0 * rejected as f64 / (n + rejected).max(1) as f64
        );
        Ok(samples)
    }

    /// Writes `n` samples for seeds `base_seed..` to `path`.
    pub fn generate_dataset(&self, n: usize, base_seed: u64, path: &Path) -> Result<Vec<Sample>> {
        if n == 0 {
            return Err(Error::Argument("dataset needs at least one sample".into()));
        }
        let samples = self.generate_many(n, base_seed, &self.cfg.world)?;
        write_dataset(path, &samples)?;
        Ok(samples)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    n_waypoints: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldRecord {
    start: Point2,
    goal: Point2,
    objects: Vec<SceneObject>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    seed: u64,
    world: WorldRecord,
    xi_o: Trajectory,
    command: String,
    ast: CommandAst,
    xi_mod: Trajectory,
}

fn header_line(n_waypoints: usize) -> String {
    serde_json::to_string(&Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        n_waypoints,
    })
    .expect("header serializes")
}

/// One canonical record line (no trailing newline).
pub fn sample_to_line(s: &Sample) -> String {
    let record = Record {
        seed: s.seed,
        world: WorldRecord {
            start: s.world.start,
            goal: s.world.goal,
            objects: s.world.objects.clone(),
        },
        xi_o: s.xi_o.clone(),
        command: s.command_text.clone(),
        ast: s.command_ast,
        xi_mod: s.xi_mod.clone(),
    };
    serde_json::to_string(&record).expect("record serializes")
}

pub fn sample_from_line(line: &str) -> std::result::Result<Sample, String> {
    let r: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    Ok(Sample {
        seed: r.seed,
        world: World {
            start: r.world.start,
            goal: r.world.goal,
            objects: r.world.objects,
            rng_seed: r.seed,
        },
        xi_o: r.xi_o,
        command_text: r.command,
        command_ast: r.ast,
        xi_mod: r.xi_mod,
    })
}

/// Serializes samples in the canonical format. Output depends only on the
/// samples.
pub fn dataset_to_string(samples: &[Sample]) -> String {
    let n = samples.first().map_or(N_WAYPOINTS, |s| s.xi_o.len());
    let mut out = header_line(n);
    out.push('\n');
    for s in samples {
        out.push_str(&sample_to_line(s));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(dataset_to_string(samples).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads and validates a dataset file.
pub fn load_dataset(path: &Path, lexicon: &Lexicon) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fail = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| fail(1, "empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&header).map_err(|e| fail(1, format!("bad header: {e}")))?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(fail(
            1,
            format!("unsupported format {:?} version {}", header.format, header.version),
        ));
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let sample = sample_from_line(&line).map_err(|e| fail(lineno, e))?;
        if sample.xi_o.len() != header.n_waypoints {
            return Err(fail(
                lineno,
                format!("{} waypoints, header says {}", sample.xi_o.len(), header.n_waypoints),
            ));
        }
        sample.validate(lexicon).map_err(|e| fail(lineno, e))?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Uniform value in `[0, 1)` derived from a sample seed.
fn seed_unit(seed: u64) -> f64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Partitions samples by a hash of their seed, so membership does not
/// depend on file order.
pub fn split_samples(samples: Vec<Sample>, fractions: [f64; 3]) -> Result<Splits> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split fractions {fractions:?} must be ≥ 0 and sum to 1")));
    }
    let mut out = Splits::default();
    for s in samples {
        let u = seed_unit(s.seed);
        if u < fractions[0] {
            out.train.push(s);
        } else if u < fractions[0] + fractions[1] || fractions[2] == 0.0 {
            out.val.push(s);
        } else {
            out.test.push(s);
        }
    }
    Ok(out)
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

/// Paths `<stem>.train.jsonl`, `<stem>.val.jsonl`, `<stem>.test.jsonl` next
/// to `path`.
pub fn split_paths(path: &Path) -> [PathBuf; 3] {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let dir = path.parent().unwrap_or(Path::new("."));
    ["train", "val", "test"].map(|part| dir.join(format!("{stem}.{part}.jsonl")))
}

/// Splits the dataset at `path` into three files; returns their paths.
pub fn split_file(path: &Path, fractions: [f64; 3], lexicon: &Lexicon) -> Result<[PathBuf; 3]> {
    let samples = load_dataset(path, lexicon)?;
    let splits = split_samples(samples, fractions)?;
    let paths = split_paths(path);
    if splits.train.iter().any(|s| contains_holdout(&s.command_text, lexicon)) {
        return Err(Error::Argument("train split contains holdout vocabulary".into()));
    }
    write_dataset(&paths[0], &splits.train)?;
    write_dataset(&paths[1], &splits.val)?;
    write_dataset(&paths[2], &splits.test)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_seed_same_sample() {
        let g = Generator::default();
        let a = g.generate_sample(5).unwrap();
        let b = g.generate_sample(5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed, 5);
        assert_eq!(a.xi_o.len(), N_WAYPOINTS);
        assert!(a.validate(&g.lexicon).is_ok());
        assert!(!contains_holdout(&a.command_text, &g.lexicon));
    }

    #[test]
    fn emitted_samples_comply() {
        let g = Generator::default();
        for s in g.generate_many(30, 100, &g.cfg.world).unwrap() {
            let delta = compliance_delta(s.command_ast.direction, &s.xi_o, &s.xi_mod, s.target());
            assert!(delta >= g.cfg.min_compliance, "seed {}: {delta}", s.seed);
        }
    }

    #[test]
    fn one_sample_file_has_two_lines_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let g = Generator::default();
        g.generate_dataset(1, 3, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"format":"semtraj-dataset","version":1,"n_waypoints":100}"#
        );
        assert!(text.lines().nth(1).unwrap().starts_with(r#"{"seed":3,"world":{"start":["#));
        let loaded = load_dataset(&path, &g.lexicon).unwrap();
        assert_eq!(dataset_to_string(&loaded), text);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        let g = Generator::default();
        g.generate_dataset(8, 7, &a).unwrap();
        g.generate_dataset(8, 7, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn malformed_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let g = Generator::default();
        g.generate_dataset(2, 1, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"seed\":9}\n");
        std::fs::write(&path, text).unwrap();
        match load_dataset(&path, &g.lexicon) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn tampered_command_fails_validation() {
        let g = Generator::default();
        let mut s = g.generate_sample(2).unwrap();
        s.command_ast.target_index = (s.command_ast.target_index + 1) % s.world.objects.len();
        assert!(s.validate(&g.lexicon).is_err());
    }

    #[test]
    fn degenerate_split_keeps_everything_in_train() {
        let g = Generator::default();
        let samples = g.generate_many(5, 0, &g.cfg.world).unwrap();
        let splits = split_samples(samples.clone(), [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(splits.train, samples);
        assert!(split_samples(samples, [0.5, 0.2, 0.2]).is_err());
    }

    fn fake(seed: u64) -> Sample {
        Sample {
            seed,
            world: World {
                start: Point2::new(0.1, 0.1),
                goal: Point2::new(0.9, 0.9),
                objects: vec![],
                rng_seed: seed,
            },
            xi_o: Trajectory::default(),
            command_text: String::new(),
            command_ast: CommandAst {
                direction: Direction::Closer,
                intensity: Intensity::Neutral,
                target_index: 0,
            },
            xi_mod: Trajectory::default(),
        }
    }

    proptest! {
        #[test]
        fn split_is_a_deterministic_partition(
            seeds in prop::collection::btree_set(any::<u64>(), 0..200),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let fractions = [lo, hi - lo, 1.0 - hi];
            let samples: Vec<Sample> = seeds.iter().map(|&s| fake(s)).collect();
            let s1 = split_samples(samples.clone(), fractions).unwrap();
            let s2 = split_samples(samples.iter().rev().cloned().collect(), fractions).unwrap();
            let ids = |v: &[Sample]| v.iter().map(|s| s.seed).collect::<std::collections::BTreeSet<_>>();
            prop_assert_eq!(ids(&s1.train), ids(&s2.train));
            prop_assert_eq!(ids(&s1.val), ids(&s2.val));
            prop_assert_eq!(ids(&s1.test), ids(&s2.test));
            let mut all = ids(&s1.train);
            all.extend(ids(&s1.val));
            all.extend(ids(&s1.test));
            prop_assert_eq!(all, seeds.clone());
            prop_assert_eq!(s1.train.len() + s1.val.len() + s1.test.len(), seeds.len());
        }
    }
}
