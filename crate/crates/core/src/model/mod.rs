//! The language-conditioned reshaping transformer, the FCN baseline and the
//! naive copy baseline.

mod config;
mod fcn;
mod transformer;

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use config::{EncoderChoice, ModelConfig};
pub use fcn::Fcn;
pub use transformer::{DecodeMode, Transformer, PREDICT_BATCH};

use crate::autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{Trajectory, World};
use crate::language::{similarity_vector, tokenize, ScratchEncoder, TableEncoder, TextEncoder};
use crate::seeded_rng;

/// One query to a reshaping model.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub world: &'a World,
    pub xi_o: &'a Trajectory,
    pub command: &'a str,
}

/// Sentence embedding plus per-object similarity, padded to `max_objects`.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageFeatures {
    pub z_in: Vec<f32>,
    pub similarity: Vec<f32>,
}

pub fn language_features(command: &str, world: &World, encoder: &dyn TextEncoder) -> LanguageFeatures {
    let z_in = encoder.encode(&tokenize(command));
    let labels: Vec<&str> = world.objects.iter().map(|o| o.label.as_str()).collect();
    let similarity = similarity_vector(&z_in, &labels, encoder);
    LanguageFeatures { z_in, similarity }
}

/// Similarity-weighted object position with weights `s³ / Σ|s|³`: close to
/// the pose of the best-matching object, and zero when all similarities are.
pub fn grounded_target(similarity: &[f32], world: &World) -> [f64; 2] {
    let cubes: Vec<f64> = similarity.iter().map(|&s| (s as f64).powi(3)).collect();
    let norm: f64 = cubes.iter().map(|c| c.abs()).sum::<f64>() + 1e-6;
    let mut out = [0.0; 2];
    for (c, o) in cubes.iter().zip(&world.objects) {
        out[0] += c / norm * o.position.x;
        out[1] += c / norm * o.position.y;
    }
    out
}

/// Which architecture a set of weights belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Transformer,
    Fcn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Transformer => "transformer",
            ModelKind::Fcn => "fcn",
        }
    }
}

/// A trainable reshaping model with 32-bit weights.
pub trait Reshaper: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore<f32>;
    fn params_mut(&mut self) -> &mut ParamStore<f32>;
    fn table(&self) -> Option<&Arc<TableEncoder>>;
    /// Scalar training loss for one batch.
    fn batch_loss(
        &self,
        g: &mut Graph<f32>,
        inputs: &[ModelInput<'_>],
        targets: &[&Trajectory],
        dropout_seed: Option<u64>,
    ) -> Result<Var>;
    /// Reshaped trajectories (autoregressive for the transformer).
    fn predict(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<Trajectory>>;
    /// Predictions with the decoder fed `teacher`, for models that decode
    /// sequentially.
    fn teacher_forced(&self, _inputs: &[ModelInput<'_>], _teacher: &[Trajectory]) -> Result<Option<Vec<Trajectory>>> {
        Ok(None)
    }
    fn num_parameters(&self) -> usize {
        self.params().num_scalars()
    }
    /// Similarity of the command to each object of `world`, as the model sees it.
    fn similarity(&self, command: &str, world: &World) -> Vec<f32> {
        let text = ModelText::from_table(self.config(), self.table());
        let encoder = text.snapshot(self.config(), self.params());
        language_features(command, world, &encoder).similarity
    }
}

impl Reshaper for Transformer<f32> {
    fn kind(&self) -> ModelKind {
        ModelKind::Transformer
    }
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }
    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }
    fn table(&self) -> Option<&Arc<TableEncoder>> {
        Transformer::table(self)
    }
    fn batch_loss(
        &self,
        g: &mut Graph<f32>,
        inputs: &[ModelInput<'_>],
        targets: &[&Trajectory],
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        self.loss(g, inputs, targets, dropout_seed)
    }
    fn predict(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<Trajectory>> {
        Transformer::predict(self, inputs)
    }
    fn teacher_forced(&self, inputs: &[ModelInput<'_>], teacher: &[Trajectory]) -> Result<Option<Vec<Trajectory>>> {
        self.decode(inputs, DecodeMode::TeacherForced(teacher)).map(Some)
    }
}

impl Reshaper for Fcn<f32> {
    fn kind(&self) -> ModelKind {
        ModelKind::Fcn
    }
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }
    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }
    fn table(&self) -> Option<&Arc<TableEncoder>> {
        Fcn::table(self)
    }
    fn batch_loss(
        &self,
        g: &mut Graph<f32>,
        inputs: &[ModelInput<'_>],
        targets: &[&Trajectory],
        _dropout_seed: Option<u64>,
    ) -> Result<Var> {
        self.loss(g, inputs, targets)
    }
    fn predict(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<Trajectory>> {
        Fcn::predict(self, inputs)
    }
}

/// Builds a fresh model of the given kind.
pub fn build_model(
    kind: ModelKind,
    cfg: ModelConfig,
    table: Option<Arc<TableEncoder>>,
    seed: u64,
) -> Result<Box<dyn Reshaper>> {
    Ok(match kind {
        ModelKind::Transformer => Box::new(Transformer::<f32>::new(cfg, table, seed)?),
        ModelKind::Fcn => Box::new(Fcn::<f32>::new(cfg, table, seed)?),
    })
}

/// Rebuilds a model of the given kind around stored weights.
pub fn model_from_params(
    kind: ModelKind,
    cfg: ModelConfig,
    table: Option<Arc<TableEncoder>>,
    params: ParamStore<f32>,
) -> Result<Box<dyn Reshaper>> {
    Ok(match kind {
        ModelKind::Transformer => Box::new(Transformer::from_params(cfg, table, params)?),
        ModelKind::Fcn => Box::new(Fcn::from_params(cfg, table, params)?),
    })
}

/// The naive baseline: the original trajectory, unchanged.
pub fn naive_predict(xi_o: &Trajectory) -> Trajectory {
    xi_o.clone()
}

/// Sinusoidal encoding, `n × d`, row-major.
pub fn positional_encoding(n: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

pub(crate) fn tensor_from<T: Scalar>(rows: usize, cols: usize, data: impl IntoIterator<Item = f64>) -> Tensor<T> {
    Tensor::matrix(rows, cols, data.into_iter().map(T::lit).collect())
}

pub(crate) fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut impl rand::Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    tensor_from(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect::<Vec<_>>())
}

/// Source of the sentence embedding `z_in` for a batch.
#[derive(Clone, Debug)]
pub(crate) enum LangInput<T> {
    /// Precomputed (frozen encoder), `batch × d_lang`.
    Fixed(Tensor<T>),
    /// Bucket ids of every token in the batch plus the `batch × ids`
    /// mean-pooling matrix.
    Buckets { ids: Vec<usize>, pool: Tensor<T> },
}

/// Text encoder owned by a model.
#[derive(Clone, Debug)]
pub(crate) enum ModelText {
    Table(Arc<TableEncoder>),
    /// The trainable table lives in the model's parameter store under
    /// `scratch.table`.
    Scratch,
}

pub(crate) const SCRATCH_PARAM: &str = "scratch.table";

impl ModelText {
    pub(crate) fn new(cfg: &ModelConfig, table: Option<Arc<TableEncoder>>) -> Result<Self> {
        match (cfg.encoder, table) {
            (EncoderChoice::Table, Some(t)) => {
                if t.dim() != cfg.d_lang {
                    return Err(Error::Shape(format!(
                        "embedding file has width {}, model expects d_lang {}",
                        t.dim(),
                        cfg.d_lang
                    )));
                }
                Ok(ModelText::Table(t))
            }
            (EncoderChoice::Table, None) => Err(Error::Argument(
                "table encoder selected but no embedding table given".into(),
            )),
            (EncoderChoice::Scratch, _) => Ok(ModelText::Scratch),
        }
    }

    fn from_table(cfg: &ModelConfig, table: Option<&Arc<TableEncoder>>) -> Self {
        match (cfg.encoder, table) {
            (EncoderChoice::Table, Some(t)) => ModelText::Table(t.clone()),
            _ => ModelText::Scratch,
        }
    }

    pub(crate) fn table(&self) -> Option<&Arc<TableEncoder>> {
        match self {
            ModelText::Table(t) => Some(t),
            ModelText::Scratch => None,
        }
    }

    pub(crate) fn add_params<T: Scalar>(&self, cfg: &ModelConfig, params: &mut ParamStore<T>, seed: u64) {
        if let ModelText::Scratch = self {
            let enc = ScratchEncoder::new(cfg.d_lang, seed);
            params.add(
                SCRATCH_PARAM,
                tensor_from(crate::language::SCRATCH_BUCKETS, cfg.d_lang, enc.table.iter().map(|&x| x as f64)),
            );
        }
    }

    /// Current encoder, with the scratch table read from `params`.
    pub(crate) fn snapshot<T: Scalar>(&self, cfg: &ModelConfig, params: &ParamStore<T>) -> EncoderSnapshot<'_> {
        match self {
            ModelText::Table(t) => EncoderSnapshot::Table(t),
            ModelText::Scratch => {
                let id = params.id(SCRATCH_PARAM).expect("scratch table parameter");
                EncoderSnapshot::Scratch(ScratchEncoder {
                    dim: cfg.d_lang,
                    table: params.get(id).data().iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect(),
                })
            }
        }
    }
}

pub(crate) enum EncoderSnapshot<'a> {
    Table(&'a TableEncoder),
    Scratch(ScratchEncoder),
}

impl TextEncoder for EncoderSnapshot<'_> {
    fn dim(&self) -> usize {
        match self {
            EncoderSnapshot::Table(t) => t.dim(),
            EncoderSnapshot::Scratch(s) => s.dim(),
        }
    }

    fn encode(&self, tokens: &[String]) -> Vec<f32> {
        match self {
            EncoderSnapshot::Table(t) => t.encode(tokens),
            EncoderSnapshot::Scratch(s) => s.encode(tokens),
        }
    }
}

/// Model-independent tensors for a batch of queries.
#[derive(Clone, Debug)]
pub(crate) struct Prepared<T> {
    pub batch: usize,
    /// `batch × max_objects` poses; padding slots hold the zero pose.
    pub objects: Tensor<T>,
    pub object_mask: Vec<bool>,
    /// `batch × n` original waypoints.
    pub waypoints: Tensor<T>,
    pub lang: LangInput<T>,
    /// `batch × (max_objects + 2)`: similarity and grounded target pose.
    pub lang_side: Tensor<T>,
    pub starts: Vec<[f64; 2]>,
    pub goals: Vec<[f64; 2]>,
    pub xi_o: Vec<Vec<[f64; 2]>>,
}

pub(crate) fn prepare<T: Scalar>(
    cfg: &ModelConfig,
    text: &ModelText,
    params: &ParamStore<T>,
    inputs: &[ModelInput<'_>],
) -> Result<Prepared<T>> {
    let (m, n) = (cfg.max_objects, cfg.n_waypoints);
    let batch = inputs.len();
    if batch == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let encoder = text.snapshot(cfg, params);
    let mut objects = Vec::with_capacity(batch * m * 2);
    let mut object_mask = Vec::with_capacity(batch * m);
    let mut waypoints = Vec::with_capacity(batch * n * 2);
    let mut side = Vec::with_capacity(batch * (m + 2));
    let mut z = Vec::new();
    let mut ids = Vec::new();
    let mut lens = Vec::new();
    let (mut starts, mut goals, mut xi_o) = (Vec::new(), Vec::new(), Vec::new());
    for inp in inputs {
        if inp.xi_o.len() != n {
            return Err(Error::Shape(format!(
                "trajectory has {} waypoints, model expects {n}",
                inp.xi_o.len()
            )));
        }
        if inp.world.objects.len() > m {
            return Err(Error::Shape(format!(
                "world has {} objects, model supports {m}",
                inp.world.objects.len()
            )));
        }
        for k in 0..m {
            match inp.world.objects.get(k) {
                Some(o) => {
                    objects.extend([o.position.x, o.position.y]);
                    object_mask.push(true);
                }
                None => {
                    objects.extend([0.0, 0.0]);
                    object_mask.push(false);
                }
            }
        }
        for w in &inp.xi_o.waypoints {
            waypoints.extend([w.x, w.y]);
        }
        let feats = language_features(inp.command, inp.world, &encoder);
        let mut sim: Vec<f64> = feats.similarity.iter().map(|&s| s as f64).collect();
        let hint = grounded_target(&feats.similarity, inp.world);
        sim.resize(m, 0.0);
        side.extend(sim);
        side.extend(hint);
        match text {
            ModelText::Table(_) => z.extend(feats.z_in.iter().map(|&v| v as f64)),
            ModelText::Scratch => {
                let toks = tokenize(inp.command);
                lens.push(toks.len());
                ids.extend(ScratchEncoder::buckets(&toks));
            }
        }
        starts.push([inp.xi_o.waypoints[0].x, inp.xi_o.waypoints[0].y]);
        let g = inp.xi_o.waypoints[n - 1];
        goals.push([g.x, g.y]);
        xi_o.push(inp.xi_o.waypoints.iter().map(|p| [p.x, p.y]).collect());
    }
    let lang = match text {
        ModelText::Table(_) => LangInput::Fixed(tensor_from(batch, cfg.d_lang, z)),
        ModelText::Scratch => {
            let total = ids.len();
            let mut pool = vec![0.0; batch * total];
            let mut off = 0;
            for (b, &len) in lens.iter().enumerate() {
                for j in off..off + len {
                    pool[b * total + j] = 1.0 / len as f64;
                }
                off += len;
            }
            LangInput::Buckets {
                ids,
                pool: tensor_from(batch, total, pool),
            }
        }
    };
    Ok(Prepared {
        batch,
        objects: tensor_from(batch * m, 2, objects),
        object_mask,
        waypoints: tensor_from(batch * n, 2, waypoints),
        lang,
        lang_side: tensor_from(batch, m + 2, side),
        starts,
        goals,
        xi_o,
    })
}

/// `z_in` for the batch as a graph node.
pub(crate) fn z_in_var<T: Scalar>(g: &mut Graph<T>, params: &ParamStore<T>, prep: &Prepared<T>) -> Result<Var> {
    match &prep.lang {
        LangInput::Fixed(t) => Ok(g.leaf(t.clone())),
        LangInput::Buckets { ids, pool } => {
            let id = params.id(SCRATCH_PARAM).expect("scratch table parameter");
            let table = g.param(params, id);
            let rows = g.gather_rows(table, ids)?;
            let pool = g.leaf(pool.clone());
            g.matmul(pool, rows)
        }
    }
}

pub(crate) fn init_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    seeded_rng(seed ^ 0x6d6f_6465_6c00)
}

pub(crate) fn rows_to_trajectory<T: Scalar>(t: &Tensor<T>, b: usize, n: usize) -> Trajectory {
    Trajectory::new(
        (0..n)
            .map(|i| {
                let r = t.row(b * n + i);
                crate::geom::Point2::new(r[0].to_f64().unwrap_or(f64::NAN), r[1].to_f64().unwrap_or(f64::NAN))
            })
            .collect(),
    )
}
