//! Losses, semantic compliance, direction × intensity sweeps and baseline
//! tables.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use crate::chomp::{command_to_cost, compliance_delta, optimize, ChompConfig};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::geom::{Trajectory, World};
use crate::language::{generate_command, parse_command, CommandAst, Direction, Intensity, Lexicon, Split};
use crate::model::{ModelInput, Reshaper};

/// Anything that maps model inputs to reshaped trajectories.
pub type Predictor<'a> = dyn Fn(&[ModelInput<'_>]) -> Result<Vec<Trajectory>> + Sync + 'a;

pub const HUBER_DELTA: f64 = 1.0;

pub fn huber(r: f64) -> f64 {
    let a = r.abs();
    if a <= HUBER_DELTA {
        0.5 * r * r
    } else {
        HUBER_DELTA * (a - 0.5 * HUBER_DELTA)
    }
}

/// Mean Huber loss over every waypoint coordinate.
pub fn trajectory_huber(pred: &Trajectory, target: &Trajectory) -> f64 {
    let total: f64 = pred
        .waypoints
        .iter()
        .zip(&target.waypoints)
        .map(|(p, t)| huber(p.x - t.x) + huber(p.y - t.y))
        .sum();
    total / (2 * target.len()) as f64
}

/// Mean of [`trajectory_huber`] over samples.
pub fn mean_huber(preds: &[Trajectory], targets: &[&Trajectory]) -> f64 {
    assert_eq!(preds.len(), targets.len(), "one prediction per target");
    preds.iter().zip(targets).map(|(p, t)| trajectory_huber(p, t)).sum::<f64>() / preds.len() as f64
}

/// Loss of the copy-the-input baseline; depends only on the data.
pub fn naive_loss(samples: &[Sample]) -> f64 {
    samples.iter().map(|s| trajectory_huber(&s.xi_o, &s.xi_mod)).sum::<f64>() / samples.len() as f64
}

pub fn sample_inputs(samples: &[Sample]) -> Vec<ModelInput<'_>> {
    samples
        .iter()
        .map(|s| ModelInput {
            world: &s.world,
            xi_o: &s.xi_o,
            command: &s.command_text,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub model: String,
    pub parameters: usize,
    pub autoregressive: f64,
    /// Only for sequential decoders.
    pub teacher_forced: Option<f64>,
    pub naive: f64,
    pub samples: usize,
}

pub fn evaluate_loss(model: &dyn Reshaper, samples: &[Sample]) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples to evaluate".into()));
    }
    let inputs = sample_inputs(samples);
    let targets: Vec<&Trajectory> = samples.iter().map(|s| &s.xi_mod).collect();
    let ar = mean_huber(&model.predict(&inputs)?, &targets);
    let teacher: Vec<Trajectory> = samples.iter().map(|s| s.xi_mod.clone()).collect();
    let tf = model
        .teacher_forced(&inputs, &teacher)?
        .map(|p| mean_huber(&p, &targets));
    Ok(LossReport {
        model: model.kind().name().into(),
        parameters: model.num_parameters(),
        autoregressive: ar,
        teacher_forced: tf,
        naive: naive_loss(samples),
        samples: samples.len(),
    })
}

/// Predictor that runs the CHOMP oracle on the parsed command.
pub fn oracle_predictor<'a>(chomp: &'a ChompConfig, lexicon: &'a Lexicon) -> impl Fn(&[ModelInput<'_>]) -> Result<Vec<Trajectory>> + Sync + 'a {
    move |inputs| {
        inputs
            .iter()
            .map(|inp| {
                let ast = parse_command(inp.command, lexicon, &inp.world.labels())?;
                let spec = command_to_cost(&ast, inp.world, chomp)?;
                optimize(inp.xi_o, &spec, chomp)
            })
            .collect()
    }
}

/// Predictor wrapping a model.
pub fn model_predictor(model: &dyn Reshaper) -> impl Fn(&[ModelInput<'_>]) -> Result<Vec<Trajectory>> + Sync + '_ {
    move |inputs| model.predict(inputs)
}

/// Command texts for `samples`: the recorded ones for the train split, or
/// the same commands re-rendered with holdout synonyms.
pub fn commands_for(samples: &[Sample], lexicon: &Lexicon, split: Split) -> Result<Vec<String>> {
    samples
        .iter()
        .map(|s| match split {
            Split::Train => Ok(s.command_text.clone()),
            Split::Holdout => render(&s.command_ast, &s.world, lexicon, s.seed, split),
        })
        .collect()
}

fn render(ast: &CommandAst, world: &World, lexicon: &Lexicon, seed: u64, split: Split) -> Result<String> {
    let label = &world
        .objects
        .get(ast.target_index)
        .ok_or_else(|| Error::Argument(format!("target {} out of range", ast.target_index)))?
        .label;
    generate_command(ast, label, lexicon, seed, split)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DirectionStats {
    pub n: usize,
    pub compliant: usize,
    pub rate: f64,
    pub mean_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SemanticReport {
    pub per_direction: BTreeMap<Direction, DirectionStats>,
    /// Compliance over all samples.
    pub overall: f64,
    /// Share of scenes whose displacement does not decrease with intensity.
    pub intensity_monotonicity: f64,
    pub monotonic_scenes: usize,
    pub samples: usize,
}

/// Direction-sign compliance of `predict` on `samples` (with `commands`
/// substituted for the recorded texts), and intensity monotonicity over the
/// first `monotonic_scenes` samples.
pub fn evaluate_semantics(
    predict: &Predictor<'_>,
    samples: &[Sample],
    commands: &[String],
    lexicon: &Lexicon,
    monotonic_scenes: usize,
) -> Result<SemanticReport> {
    if samples.is_empty() || commands.len() != samples.len() {
        return Err(Error::Argument(format!(
            "{} commands for {} samples",
            commands.len(),
            samples.len()
        )));
    }
    let inputs: Vec<ModelInput<'_>> = samples
        .iter()
        .zip(commands)
        .map(|(s, c)| ModelInput {
            world: &s.world,
            xi_o: &s.xi_o,
            command: c,
        })
        .collect();
    let preds = predict(&inputs)?;
    let mut per_direction: BTreeMap<Direction, DirectionStats> = BTreeMap::new();
    for (s, p) in samples.iter().zip(&preds) {
        let d = s.command_ast.direction;
        let delta = compliance_delta(d, &s.xi_o, p, s.target());
        let st = per_direction.entry(d).or_default();
        st.n += 1;
        st.compliant += usize::from(delta > 0.0);
        st.mean_delta += delta;
    }
    let mut compliant = 0;
    for st in per_direction.values_mut() {
        compliant += st.compliant;
        st.rate = st.compliant as f64 / st.n as f64;
        st.mean_delta /= st.n as f64;
    }

    let scenes = &samples[..monotonic_scenes.min(samples.len())];
    let mut texts = Vec::with_capacity(4 * scenes.len());
    for s in scenes {
        for &intensity in &Intensity::ALL {
            let ast = CommandAst {
                intensity,
                ..s.command_ast
            };
            texts.push(render(&ast, &s.world, lexicon, s.seed, Split::Train)?);
        }
    }
    let graded: Vec<ModelInput<'_>> = texts
        .iter()
        .enumerate()
        .map(|(k, t)| ModelInput {
            world: &scenes[k / 4].world,
            xi_o: &scenes[k / 4].xi_o,
            command: t,
        })
        .collect();
    let graded_preds = if graded.is_empty() { Vec::new() } else { predict(&graded)? };
    let monotone = graded_preds
        .chunks(4)
        .zip(scenes)
        .filter(|(ps, s)| {
            let d: Vec<f64> = ps.iter().map(|p| p.max_displacement(&s.xi_o)).collect();
            d.windows(2).all(|w| w[1] >= w[0])
        })
        .count();

    Ok(SemanticReport {
        per_direction,
        overall: compliant as f64 / samples.len() as f64,
        intensity_monotonicity: if scenes.is_empty() { 0.0 } else { monotone as f64 / scenes.len() as f64 },
        monotonic_scenes: scenes.len(),
        samples: samples.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub direction: Direction,
    pub intensity: Intensity,
    pub command: String,
    pub trajectory: Trajectory,
    /// Largest waypoint displacement from `ξ_o`.
    pub displacement: f64,
    pub compliance_delta: f64,
}

/// All 6 directions × 4 intensities applied to one scene, direction-major.
pub fn sweep(
    predict: &Predictor<'_>,
    world: &World,
    xi_o: &Trajectory,
    target_index: usize,
    lexicon: &Lexicon,
    split: Split,
    seed: u64,
) -> Result<Vec<SweepCell>> {
    let target = world
        .objects
        .get(target_index)
        .ok_or_else(|| Error::Argument(format!("target {target_index} out of range")))?
        .position;
    let mut asts = Vec::with_capacity(24);
    let mut texts = Vec::with_capacity(24);
    for &direction in &Direction::ALL {
        for &intensity in &Intensity::ALL {
            let ast = CommandAst {
                direction,
                intensity,
                target_index,
            };
            texts.push(render(&ast, world, lexicon, seed, split)?);
            asts.push(ast);
        }
    }
    let inputs: Vec<ModelInput<'_>> = texts.iter().map(|t| ModelInput { world, xi_o, command: t }).collect();
    let preds = predict(&inputs)?;
    Ok(asts
        .into_iter()
        .zip(texts)
        .zip(preds)
        .map(|((ast, command), trajectory)| SweepCell {
            direction: ast.direction,
            intensity: ast.intensity,
            displacement: trajectory.max_displacement(xi_o),
            compliance_delta: compliance_delta(ast.direction, xi_o, &trajectory, target),
            command,
            trajectory,
        })
        .collect())
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One row of a baseline comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineRow {
    pub model: String,
    pub parameters: usize,
    pub test_loss: f64,
}

/// Naive, then each model, on the same samples.
pub fn compare_baselines(models: &[&dyn Reshaper], samples: &[Sample]) -> Result<Vec<BaselineRow>> {
    let mut rows = vec![BaselineRow {
        model: "naive".into(),
        parameters: 0,
        test_loss: naive_loss(samples),
    }];
    for m in models {
        let r = evaluate_loss(*m, samples)?;
        rows.push(BaselineRow {
            model: r.model,
            parameters: r.parameters,
            test_loss: r.autoregressive,
        });
    }
    Ok(rows)
}

/// Tab-separated table with a header line.
pub fn baseline_table(rows: &[BaselineRow]) -> String {
    let mut out = String::from("model\tparameters\ttest_loss\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{:.6e}", r.model, r.parameters, r.test_loss);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_dataset, write_dataset, Generator};
    use crate::geom::WorldConfig;

    fn samples(n: usize, base: u64) -> Vec<Sample> {
        Generator::default().generate_many(n, base, &WorldConfig::default()).unwrap()
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.5), 0.125);
        assert_eq!(huber(-2.0), 1.5);
        assert_eq!(huber(1.0), 0.5);
    }

    #[test]
    fn naive_loss_matches_a_direct_file_scan() {
        let data = samples(8, 40);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &data).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let (mut total, mut count) = (0.0, 0);
        for line in text.lines().skip(1) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let (o, m) = (v["xi_o"].as_array().unwrap(), v["xi_mod"].as_array().unwrap());
            let mut s = 0.0;
            for (a, b) in o.iter().zip(m) {
                for k in 0..2 {
                    let r = a[k].as_f64().unwrap() - b[k].as_f64().unwrap();
                    s += if r.abs() <= 1.0 { 0.5 * r * r } else { r.abs() - 0.5 };
                }
            }
            total += s / (2 * o.len()) as f64;
            count += 1;
        }
        let loaded = load_dataset(&path, &Lexicon::default()).unwrap();
        assert!((naive_loss(&loaded) - total / count as f64).abs() < 1e-15);
        assert!(naive_loss(&loaded) > 0.0);
    }

    #[test]
    fn oracle_pass_through_complies() {
        let data = samples(60, 900);
        let gen = Generator::default();
        let oracle = oracle_predictor(&gen.cfg.chomp, &gen.lexicon);
        let commands = commands_for(&data, &gen.lexicon, Split::Train).unwrap();
        let report = evaluate_semantics(&oracle, &data, &commands, &gen.lexicon, 10).unwrap();
        assert!(report.overall >= 0.95, "{report:?}");
        assert!(report.intensity_monotonicity >= 0.9, "{report:?}");
        for st in report.per_direction.values() {
            assert!((0.0..=1.0).contains(&st.rate));
        }
    }

    #[test]
    fn copying_the_input_never_complies() {
        let data = samples(20, 950);
        let lexicon = Lexicon::default();
        let copy = |inputs: &[ModelInput<'_>]| Ok(inputs.iter().map(|i| i.xi_o.clone()).collect());
        let commands = commands_for(&data, &lexicon, Split::Holdout).unwrap();
        let report = evaluate_semantics(&copy, &data, &commands, &lexicon, 5).unwrap();
        assert_eq!(report.overall, 0.0);
        assert!(report.per_direction.values().all(|s| s.mean_delta == 0.0));
        assert_eq!(report.intensity_monotonicity, 1.0);
    }

    #[test]
    fn holdout_commands_keep_their_meaning() {
        let data = samples(20, 970);
        let lexicon = Lexicon::default();
        let held = commands_for(&data, &lexicon, Split::Holdout).unwrap();
        for (s, c) in data.iter().zip(&held) {
            assert_eq!(parse_command(c, &lexicon, &s.world.labels()).unwrap(), s.command_ast, "{c}");
        }
        assert!(held.iter().any(|c| crate::language::contains_holdout(c, &lexicon)));
    }

    #[test]
    fn oracle_sweep_has_24_cells_with_shared_endpoints() {
        let s = &samples(1, 12)[0];
        let gen = Generator::default();
        let oracle = oracle_predictor(&gen.cfg.chomp, &gen.lexicon);
        let cells = sweep(&oracle, &s.world, &s.xi_o, s.command_ast.target_index, &gen.lexicon, Split::Train, 3).unwrap();
        assert_eq!(cells.len(), 24);
        for c in &cells {
            assert_eq!(c.trajectory.len(), s.xi_o.len());
            assert_eq!(c.trajectory.first(), s.xi_o.first());
            assert_eq!(c.trajectory.last(), s.xi_o.last());
        }
        assert!(sweep(&oracle, &s.world, &s.xi_o, 99, &gen.lexicon, Split::Train, 3).is_err());
    }

    #[test]
    fn baseline_table_always_has_the_naive_row() {
        let data = samples(3, 5);
        let rows = compare_baselines(&[], &data).unwrap();
        let table = baseline_table(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "model\tparameters\ttest_loss");
        assert!(lines[1].starts_with("naive\t0\t"));
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
