//! Finite-difference checks of every differentiable op and of the tiny
//! end-to-end transformer, in 64-bit arithmetic.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{grad_check, grad_check_params, AttentionSpec, Axis, Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::geom::{gen_random_world, resample, Trajectory, World, WorldConfig};
use crate::language::{synthesize_synonym_embeddings, LabelSet, Lexicon, TableEncoder};
use crate::model::{EncoderChoice, ModelConfig, ModelInput, Transformer};
use crate::seeded_rng;

pub const EPS: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Smallest |input| of any relu at an accepted end-to-end check point.
const RELU_MARGIN: f64 = 2e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seeds: u64,
    /// Largest relative error over all seeds and coordinates.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

/// Random matrix with entries at least 0.05 away from zero, so relu kinks
/// stay outside the finite-difference stencil.
pub fn rand_mat(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            if x.abs() < 0.05 {
                x.signum() * 0.05 + x
            } else {
                x
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Reduces a matrix output to a scalar with fixed random weights so every
/// output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let t = g.value(y);
    let w = g.leaf(rand_mat(t.rows(), t.cols(), seed ^ 0xfeed));
    g.huber(y, w, 1e9)
}

type Unary = fn(&mut Graph<f64>, Var, u64) -> Result<Var>;

fn unary_ops() -> Vec<(&'static str, (usize, usize), Unary)> {
    vec![
        ("matmul_left", (3, 4), |g, x, s| {
            let w = g.leaf(rand_mat(4, 5, s + 100));
            g.matmul(x, w)
        }),
        ("matmul_right", (4, 5), |g, x, s| {
            let a = g.leaf(rand_mat(3, 4, s + 100));
            g.matmul(a, x)
        }),
        ("add", (3, 4), |g, x, s| {
            let b = g.leaf(rand_mat(3, 4, s + 7));
            let y = g.add(x, b)?;
            g.add(y, x)
        }),
        ("add_row", (3, 4), |g, x, _| {
            let bias = g.slice_rows(x, 1, 1)?;
            g.add_row(x, bias)
        }),
        ("scale", (2, 3), |g, x, _| Ok(g.scale(x, -1.7))),
        ("relu", (4, 4), |g, x, _| Ok(g.relu(x))),
        ("concat_rows", (3, 2), |g, x, _| {
            let top = g.slice_rows(x, 0, 2)?;
            g.concat_rows(&[x, top])
        }),
        ("concat_cols", (3, 2), |g, x, _| {
            let right = g.slice_cols(x, 1, 1)?;
            g.concat_cols(&[right, x])
        }),
        ("slice_rows", (5, 3), |g, x, _| g.slice_rows(x, 1, 3)),
        ("slice_cols", (3, 5), |g, x, _| g.slice_cols(x, 2, 2)),
        ("gather_rows", (5, 3), |g, x, _| g.gather_rows(x, &[4, 0, 0, 2])),
        ("embedding_lookup", (6, 3), |g, x, _| g.embedding_lookup(x, &[5, 1, 1])),
        ("dropout", (4, 5), |g, x, s| g.dropout(x, 0.3, s)),
        ("softmax_cols", (3, 5), |g, x, _| Ok(g.softmax(x, Axis::Cols))),
        ("softmax_rows", (3, 5), |g, x, _| Ok(g.softmax(x, Axis::Rows))),
        ("sum", (3, 3), |g, x, _| {
            let y = g.relu(x);
            Ok(g.sum(y))
        }),
    ]
}

fn check_unary(name: &str, (rows, cols): (usize, usize), f: Unary, seeds: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let err = grad_check(
            |g, x| {
                let y = f(g, x, seed)?;
                project(g, y, seed)
            },
            &rand_mat(rows, cols, seed),
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: name.into(),
        seeds,
        worst,
        tolerance: OP_TOLERANCE,
    })
}

fn check_params(
    name: &str,
    seeds: u64,
    build: impl Fn(u64) -> ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>, u64) -> Result<Var>,
) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let store = build(seed);
        worst = worst.max(grad_check_params(|g, s| f(g, s, seed), &store, EPS)?);
    }
    Ok(CheckResult {
        name: name.into(),
        seeds,
        worst,
        tolerance: OP_TOLERANCE,
    })
}

/// Every op, each over `seeds` random points.
pub fn op_checks(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, shape, f) in unary_ops() {
        out.push(check_unary(name, shape, f, seeds)?);
    }
    out.push(check_params(
        "layer_norm",
        seeds,
        |seed| {
            let mut s = ParamStore::new();
            s.add("x", rand_mat(3, 6, seed));
            s.add("gamma", rand_mat(1, 6, seed + 20));
            s.add("beta", rand_mat(1, 6, seed + 40));
            s
        },
        |g, s, seed| {
            let (x, ga, be) = (g.param(s, 0), g.param(s, 1), g.param(s, 2));
            let y = g.layer_norm(x, ga, be)?;
            project(g, y, seed)
        },
    )?);
    out.push(check_params(
        "huber",
        seeds,
        |seed| {
            let mut s = ParamStore::new();
            s.add("p", rand_mat(4, 3, seed).map(|x| 2.0 * x));
            s.add("t", rand_mat(4, 3, seed + 50));
            s
        },
        |g, s, _| {
            let (p, t) = (g.param(s, 0), g.param(s, 1));
            g.huber(p, t, 1.0)
        },
    )?);
    let (batch, lq, lk, heads, d) = (2, 3, 4, 2, 6);
    for causal in [None, Some(1)] {
        out.push(check_params(
            if causal.is_some() { "attention_causal" } else { "attention_masked" },
            seeds,
            |seed| {
                let mut s = ParamStore::new();
                s.add("q", rand_mat(batch * lq, d, seed));
                s.add("k", rand_mat(batch * lk, d, seed + 10));
                s.add("v", rand_mat(batch * lk, d, seed + 20));
                s
            },
            |g, s, seed| {
                let mut rng = seeded_rng(seed + 900);
                let mut mask: Vec<bool> = (0..batch * lk).map(|_| rng.random_bool(0.7)).collect();
                mask[0] = true;
                mask[lk] = true;
                let spec = AttentionSpec {
                    batch,
                    lq,
                    lk,
                    heads,
                    key_mask: Some(mask),
                    causal_offset: causal,
                };
                let (q, k, v) = (g.param(s, 0), g.param(s, 1), g.param(s, 2));
                let y = g.attention(q, k, v, spec)?;
                project(g, y, seed)
            },
        )?);
    }
    out.push(check_params(
        "linear_relu_mlp",
        seeds,
        |seed| {
            let mut s = ParamStore::new();
            s.add("x", rand_mat(5, 4, seed));
            s.add("w1", rand_mat(4, 8, seed + 1));
            s.add("b1", rand_mat(1, 8, seed + 2));
            s.add("w2", rand_mat(8, 2, seed + 3));
            s
        },
        |g, s, seed| {
            let x = g.param(s, 0);
            let (w1, b1, w2) = (g.param(s, 1), g.param(s, 2), g.param(s, 3));
            let h = g.linear(x, w1, Some(b1))?;
            let h = g.relu(h);
            let y = g.matmul(h, w2)?;
            project(g, y, seed)
        },
    )?);
    Ok(out)
}

struct Case {
    world: World,
    xi_o: Trajectory,
    target: Trajectory,
    command: String,
}

fn labels() -> Vec<String> {
    LabelSet::default().as_slice()[..40].to_vec()
}

fn cases(n: usize, seed: u64) -> Result<Vec<Case>> {
    (0..2)
        .map(|i| {
            let world = gen_random_world(seed * 100 + i, &WorldConfig::default(), &labels())?;
            let xi_o = resample(&Trajectory::new(vec![world.start, world.goal]), n)?;
            let mut target = xi_o.clone();
            for (k, p) in target.waypoints.iter_mut().enumerate().skip(1).take(n - 2) {
                p.y += 0.02 * (k as f64).sin();
            }
            let command = format!("stay much further away from the {}", world.objects[0].label);
            Ok(Case {
                world,
                xi_o,
                target,
                command,
            })
        })
        .collect()
}

/// Largest relative gradient error of the teacher-forced loss of a fresh
/// `cfg` model. Biases are redrawn until every relu input is at least
/// `RELU_MARGIN` from its kink, so the loss is smooth within the stencil.
pub fn model_check(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    let table: Option<Arc<TableEncoder>> = (cfg.encoder == EncoderChoice::Table)
        .then(|| Arc::new(synthesize_synonym_embeddings(&Lexicon::default(), &labels(), cfg.d_lang, 11)));
    let base = Transformer::<f64>::new(cfg.clone(), table, seed)?;
    let cs = cases(cfg.n_waypoints, seed + 40)?;
    let inputs: Vec<ModelInput<'_>> = cs
        .iter()
        .map(|c| ModelInput {
            world: &c.world,
            xi_o: &c.xi_o,
            command: &c.command,
        })
        .collect();
    let targets: Vec<&Trajectory> = cs.iter().map(|c| &c.target).collect();
    let mut rng = seeded_rng(seed);
    let mut model = None;
    for _ in 0..1000 {
        let mut params = base.params.clone();
        for id in 0..params.len() {
            if params.name(id).ends_with(".b") {
                for x in params.get_mut(id).data_mut() {
                    *x = rng.random_range(-0.1..0.1);
                }
            }
        }
        let candidate = base.with_params(params);
        let mut g = Graph::new();
        candidate.loss(&mut g, &inputs, &targets, None)?;
        if g.relu_margin().is_none_or(|m| m > RELU_MARGIN) {
            model = Some(candidate);
            break;
        }
    }
    let model = model.ok_or_else(|| crate::Error::Argument("no smooth check point found".into()))?;
    grad_check_params(
        |g, store| model.with_params(store.clone()).loss(g, &inputs, &targets, None),
        &model.params,
        EPS,
    )
}

/// The tiny model over `seeds` seeds, plus one check with normalization on.
pub fn model_checks(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        worst = worst.max(model_check(&ModelConfig::tiny(), seed)?);
    }
    let norm = ModelConfig {
        use_norm: true,
        ..ModelConfig::tiny()
    };
    Ok(vec![
        CheckResult {
            name: "transformer_end_to_end".into(),
            seeds,
            worst,
            tolerance: MODEL_TOLERANCE,
        },
        CheckResult {
            name: "transformer_end_to_end_norm".into(),
            seeds: 1,
            worst: model_check(&norm, 3)?,
            tolerance: MODEL_TOLERANCE,
        },
    ])
}

/// Ops and end-to-end checks.
pub fn run_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(seeds)?;
    out.extend(model_checks(seeds)?);
    Ok(out)
}
