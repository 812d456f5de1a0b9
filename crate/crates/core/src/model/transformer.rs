use std::cell::Cell;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::{gaussian, init_rng, positional_encoding, prepare, tensor_from, z_in_var, ModelInput, ModelText, Prepared};
use crate::autodiff::{AttentionSpec, Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{Point2, Trajectory};
use crate::language::TableEncoder;

/// How the decoder obtains its inputs.
#[derive(Clone, Copy, Debug)]
pub enum DecodeMode<'a> {
    /// Feed back the model's own predictions.
    Autoregressive,
    /// Feed the given trajectories (one per input).
    TeacherForced(&'a [Trajectory]),
}

/// Inverted-dropout settings for one forward pass.
struct Dropout {
    rate: f64,
    seed: u64,
    counter: Cell<u64>,
}

impl Dropout {
    fn off() -> Self {
        Dropout {
            rate: 0.0,
            seed: 0,
            counter: Cell::new(0),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let c = self.counter.get();
        self.counter.set(c + 1);
        g.dropout(x, self.rate, self.seed ^ c.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

/// Encoder–decoder transformer mapping (world, trajectory, command) to a
/// reshaped trajectory.
#[derive(Clone, Debug)]
pub struct Transformer<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    text: ModelText,
}

/// Rows of `mem`/`enc` in sample-major order, with key validity.
struct Memory {
    var: Var,
    mask: Vec<bool>,
    len: usize,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(cfg: ModelConfig, table: Option<Arc<TableEncoder>>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let text = ModelText::new(&cfg, table)?;
        let mut rng = init_rng(seed);
        let mut params = ParamStore::new();
        let d = cfg.d_model;
        params.add("geo.w", gaussian(2, d, 1.0, &mut rng));
        params.add("geo.b", Tensor::zeros(&[1, d]));
        params.add("dec_ref.w", gaussian(4, d, 1.0, &mut rng));
        let out_scale = 1.0 / ((2 * (cfg.enc_blocks + cfg.dec_blocks)) as f64).sqrt();
        for i in 0..cfg.enc_blocks {
            add_attention(&mut params, &cfg, &format!("enc{i}.attn"), out_scale, &mut rng);
            add_ffn(&mut params, &cfg, &format!("enc{i}.ffn"), out_scale, &mut rng);
        }
        for i in 0..cfg.dec_blocks {
            add_attention(&mut params, &cfg, &format!("dec{i}.self"), out_scale, &mut rng);
            add_attention(&mut params, &cfg, &format!("dec{i}.cross"), out_scale, &mut rng);
            add_ffn(&mut params, &cfg, &format!("dec{i}.ffn"), out_scale, &mut rng);
        }
        params.add("lang.w", gaussian(cfg.lang_input_width(), d, 1.0, &mut rng));
        params.add("lang.b", Tensor::zeros(&[1, d]));
        params.add("head.w", gaussian(d, 2, cfg.head_init, &mut rng));
        params.add("head.b", Tensor::zeros(&[1, 2]));
        text.add_params(&cfg, &mut params, seed ^ 0x7363_7261_7463_68);
        Ok(Transformer { cfg, params, text })
    }

    /// Rebuilds a model around stored parameters, checking every shape.
    pub fn from_params(cfg: ModelConfig, table: Option<Arc<TableEncoder>>, params: ParamStore<T>) -> Result<Self> {
        let fresh = Transformer::<T>::new(cfg.clone(), table.clone(), 0)?;
        check_same_layout(&fresh.params, &params)?;
        Ok(Transformer {
            cfg,
            params,
            text: fresh.text,
        })
    }

    pub fn table(&self) -> Option<&Arc<TableEncoder>> {
        self.text.table()
    }

    /// The same model with other weights of the same layout.
    pub fn with_params(&self, params: ParamStore<T>) -> Self {
        Transformer {
            cfg: self.cfg.clone(),
            params,
            text: self.text.clone(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn p(&self, g: &mut Graph<T>, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        g.param(&self.params, id)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.w"));
        let b = self.p(g, &format!("{prefix}.b"));
        g.linear(x, w, Some(b))
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        if !self.cfg.use_norm {
            return Ok(x);
        }
        let gamma = self.p(g, &format!("{prefix}.ln.g"));
        let beta = self.p(g, &format!("{prefix}.ln.b"));
        g.layer_norm(x, gamma, beta)
    }

    pub(crate) fn prepare(&self, inputs: &[ModelInput<'_>]) -> Result<Prepared<T>> {
        prepare(&self.cfg, &self.text, &self.params, inputs)
    }

    fn pe_rows(&self, batch: usize, positions: std::ops::Range<usize>) -> Tensor<T> {
        let d = self.cfg.d_model;
        let pe = positional_encoding(self.cfg.n_waypoints, d);
        let mut data = Vec::with_capacity(batch * positions.len() * d);
        for _ in 0..batch {
            for p in positions.clone() {
                data.extend_from_slice(&pe[p * d..(p + 1) * d]);
            }
        }
        tensor_from(batch * positions.len(), d, data)
    }

    /// Object tokens and waypoint tokens before positional encoding.
    fn embed_raw(&self, g: &mut Graph<T>, prep: &Prepared<T>) -> Result<(Var, Var)> {
        let w = self.p(g, "geo.w");
        let b = self.p(g, "geo.b");
        let obj = g.leaf(prep.objects.clone());
        let obj = g.linear(obj, w, Some(b))?;
        let wp = g.leaf(prep.waypoints.clone());
        let wp = g.linear(wp, w, Some(b))?;
        Ok((obj, wp))
    }

    /// Geometry tokens of one query, `(max_objects + n) × d_model`: object
    /// tokens first, then waypoint tokens (with positional encoding when
    /// `with_pe`).
    pub fn embed_geometry(&self, input: ModelInput<'_>, with_pe: bool) -> Result<Tensor<T>> {
        let prep = self.prepare(&[input])?;
        let mut g = Graph::new();
        let (obj, mut wp) = self.embed_raw(&mut g, &prep)?;
        if with_pe {
            let pe = g.leaf(self.pe_rows(1, 0..self.cfg.n_waypoints));
            wp = g.add(wp, pe)?;
        }
        let all = g.concat_rows(&[obj, wp])?;
        Ok(g.value(all).clone())
    }

    fn mha(&self, g: &mut Graph<T>, prefix: &str, x: Var, kv: Option<Var>, spec: AttentionSpec, drop: &Dropout) -> Result<Var> {
        let h = self.norm(g, x, prefix)?;
        let q = self.linear(g, h, &format!("{prefix}.q"))?;
        let src = kv.unwrap_or(h);
        let k = self.linear(g, src, &format!("{prefix}.k"))?;
        let v = self.linear(g, src, &format!("{prefix}.v"))?;
        let a = g.attention(q, k, v, spec)?;
        let o = self.linear(g, a, &format!("{prefix}.o"))?;
        let o = drop.apply(g, o)?;
        g.add(x, o)
    }

    fn ffn(&self, g: &mut Graph<T>, prefix: &str, x: Var, drop: &Dropout) -> Result<Var> {
        let mut h = self.norm(g, x, prefix)?;
        for j in 0..=self.cfg.ffn_layers {
            h = self.linear(g, h, &format!("{prefix}.{j}"))?;
            if j < self.cfg.ffn_layers {
                h = g.relu(h);
            }
        }
        let h = drop.apply(g, h)?;
        g.add(x, h)
    }

    /// Self-attention encoder over object and waypoint tokens.
    fn encode(&self, g: &mut Graph<T>, prep: &Prepared<T>, drop: &Dropout) -> Result<Memory> {
        let (m, n, b) = (self.cfg.max_objects, self.cfg.n_waypoints, prep.batch);
        let (obj, wp) = self.embed_raw(g, prep)?;
        let pe = g.leaf(self.pe_rows(b, 0..n));
        let wp = g.add(wp, pe)?;
        let all = g.concat_rows(&[obj, wp])?;
        let mut order = Vec::with_capacity(b * (m + n));
        let mut mask = Vec::with_capacity(b * (m + n));
        for s in 0..b {
            order.extend(s * m..(s + 1) * m);
            order.extend(b * m + s * n..b * m + (s + 1) * n);
            mask.extend_from_slice(&prep.object_mask[s * m..(s + 1) * m]);
            mask.extend(std::iter::repeat_n(true, n));
        }
        let mut x = g.gather_rows(all, &order)?;
        let spec = AttentionSpec {
            batch: b,
            lq: m + n,
            lk: m + n,
            heads: self.cfg.n_heads,
            key_mask: Some(mask.clone()),
            causal_offset: None,
        };
        for i in 0..self.cfg.enc_blocks {
            x = self.mha(g, &format!("enc{i}.attn"), x, None, spec.clone(), drop)?;
            x = self.ffn(g, &format!("enc{i}.ffn"), x, drop)?;
        }
        Ok(Memory {
            var: x,
            mask,
            len: m + n,
        })
    }

    /// Prepends the language token to the encoded geometry.
    fn build_memory(&self, g: &mut Graph<T>, prep: &Prepared<T>, enc: Memory) -> Result<Memory> {
        let b = prep.batch;
        let z = z_in_var(g, &self.params, prep)?;
        let side = g.leaf(prep.lang_side.clone());
        let lin = g.concat_cols(&[z, side])?;
        let lang = self.linear(g, lin, "lang")?;
        let all = g.concat_rows(&[lang, enc.var])?;
        let len = enc.len + 1;
        let mut order = Vec::with_capacity(b * len);
        let mut mask = Vec::with_capacity(b * len);
        for s in 0..b {
            order.push(s);
            order.extend(b + s * enc.len..b + (s + 1) * enc.len);
            mask.push(true);
            mask.extend_from_slice(&enc.mask[s * enc.len..(s + 1) * enc.len]);
        }
        let var = g.gather_rows(all, &order)?;
        Ok(Memory { var, mask, len })
    }

    /// Decoder input embeddings for positions `positions` of every sample:
    /// the fed-back waypoint through the shared geometry map, the aligned
    /// original waypoints `(ξ_o[t], ξ_o[t+1])`, and the positional encoding.
    fn decoder_inputs(&self, g: &mut Graph<T>, prep: &Prepared<T>, fed: Tensor<T>, positions: std::ops::Range<usize>) -> Result<Var> {
        let b = prep.batch;
        let mut refs = Vec::with_capacity(b * positions.len() * 4);
        for s in 0..b {
            for t in positions.clone() {
                let (a, c) = (prep.xi_o[s][t], prep.xi_o[s][t + 1]);
                refs.extend([a[0], a[1], c[0], c[1]]);
            }
        }
        let rows = b * positions.len();
        let w = self.p(g, "geo.w");
        let bias = self.p(g, "geo.b");
        let fed = g.leaf(fed);
        let x = g.linear(fed, w, Some(bias))?;
        let refs = g.leaf(tensor_from(rows, 4, refs));
        let wr = self.p(g, "dec_ref.w");
        let r = g.matmul(refs, wr)?;
        let x = g.add(x, r)?;
        let pe = g.leaf(self.pe_rows(b, positions));
        g.add(x, pe)
    }

    fn head(&self, g: &mut Graph<T>, prep: &Prepared<T>, x: Var, positions: std::ops::Range<usize>) -> Result<Var> {
        let out = self.linear(g, x, "head")?;
        let mut base = Vec::new();
        for s in 0..prep.batch {
            for t in positions.clone() {
                base.extend(prep.xi_o[s][t + 1]);
            }
        }
        let rows = g.value(out).rows();
        let base = g.leaf(tensor_from(rows, 2, base));
        g.add(out, base)
    }

    /// Teacher-forced predictions for waypoints `1..n`, `(batch·(n−1)) × 2`.
    fn forward_teacher(&self, g: &mut Graph<T>, prep: &Prepared<T>, teacher: &[&Trajectory], drop: &Dropout) -> Result<Var> {
        let (n, b) = (self.cfg.n_waypoints, prep.batch);
        if teacher.len() != b {
            return Err(Error::Shape(format!("{} teacher trajectories for {b} inputs", teacher.len())));
        }
        let enc = self.encode(g, prep, drop)?;
        let mem = self.build_memory(g, prep, enc)?;
        let mut fed = Vec::with_capacity(b * (n - 1) * 2);
        for t in teacher {
            if t.len() != n {
                return Err(Error::Shape(format!("teacher trajectory has {} waypoints, expected {n}", t.len())));
            }
            for p in &t.waypoints[..n - 1] {
                fed.extend([p.x, p.y]);
            }
        }
        let mut x = self.decoder_inputs(g, prep, tensor_from(b * (n - 1), 2, fed), 0..n - 1)?;
        let self_spec = AttentionSpec {
            batch: b,
            lq: n - 1,
            lk: n - 1,
            heads: self.cfg.n_heads,
            key_mask: None,
            causal_offset: Some(0),
        };
        let cross_spec = AttentionSpec {
            batch: b,
            lq: n - 1,
            lk: mem.len,
            heads: self.cfg.n_heads,
            key_mask: Some(mem.mask.clone()),
            causal_offset: None,
        };
        for i in 0..self.cfg.dec_blocks {
            x = self.mha(g, &format!("dec{i}.self"), x, None, self_spec.clone(), drop)?;
            x = self.mha(g, &format!("dec{i}.cross"), x, Some(mem.var), cross_spec.clone(), drop)?;
            x = self.ffn(g, &format!("dec{i}.ffn"), x, drop)?;
        }
        self.head(g, prep, x, 0..n - 1)
    }

    /// Mean teacher-forced Huber loss over interior waypoints.
    pub fn loss(&self, g: &mut Graph<T>, inputs: &[ModelInput<'_>], targets: &[&Trajectory], dropout_seed: Option<u64>) -> Result<Var> {
        let prep = self.prepare(inputs)?;
        let drop = match dropout_seed {
            Some(seed) => Dropout {
                rate: self.cfg.dropout,
                seed,
                counter: Cell::new(0),
            },
            None => Dropout::off(),
        };
        let fed = match dropout_seed {
            Some(seed) => self.training_teacher(inputs, targets, seed)?,
            None => None,
        };
        let teacher = match &fed {
            Some(f) => f.iter().collect::<Vec<_>>(),
            None => targets.to_vec(),
        };
        let pred = self.forward_teacher(g, &prep, &teacher, &drop)?;
        let n = self.cfg.n_waypoints;
        let interior: Vec<usize> = (0..prep.batch)
            .flat_map(|s| (0..n - 2).map(move |t| s * (n - 1) + t))
            .collect();
        let pred = g.gather_rows(pred, &interior)?;
        let mut want = Vec::with_capacity(interior.len() * 2);
        for t in targets {
            for p in &t.waypoints[1..n - 1] {
                want.extend([p.x, p.y]);
            }
        }
        let want = g.leaf(tensor_from(interior.len(), 2, want));
        g.huber(pred, want, 1.0)
    }

    /// The sequences fed to the decoder in a training step: the targets
    /// with teacher noise, except that a `self_feed` share of the samples
    /// get the model's own autoregressive rollout. `None` when neither is
    /// enabled.
    fn training_teacher(&self, inputs: &[ModelInput<'_>], targets: &[&Trajectory], seed: u64) -> Result<Option<Vec<Trajectory>>> {
        if self.cfg.teacher_noise == 0.0 && self.cfg.self_feed == 0.0 {
            return Ok(None);
        }
        let mut fed = if self.cfg.teacher_noise > 0.0 {
            self.perturb(targets, seed)?
        } else {
            targets.iter().map(|t| (*t).clone()).collect()
        };
        if self.cfg.self_feed > 0.0 {
            let mut rng = crate::seeded_rng(seed ^ 0x7365_6c66);
            let chosen: Vec<usize> = (0..inputs.len()).filter(|_| rng.random_bool(self.cfg.self_feed)).collect();
            if !chosen.is_empty() {
                let sub: Vec<ModelInput<'_>> = chosen.iter().map(|&i| inputs[i]).collect();
                for (&i, own) in chosen.iter().zip(self.decode_autoregressive(&sub)?) {
                    fed[i] = own;
                }
            }
        }
        Ok(Some(fed))
    }

    /// Copies of `targets` bent by a random smooth offset, zero at both
    /// endpoints, plus a little white noise. The offset resembles the slow
    /// drift of an autoregressive rollout.
    fn perturb(&self, targets: &[&Trajectory], seed: u64) -> Result<Vec<Trajectory>> {
        let sigma = self.cfg.teacher_noise;
        let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Argument(format!("teacher noise: {e}")))?;
        let mut rng = crate::seeded_rng(seed ^ 0x6e6f_6973_65);
        Ok(targets
            .iter()
            .map(|t| {
                let mut t = (*t).clone();
                let last = (t.len().max(2) - 1) as f64;
                let modes: Vec<[f64; 2]> = (0..NOISE_MODES)
                    .map(|_| [normal.sample(&mut rng) * sigma, normal.sample(&mut rng) * sigma])
                    .collect();
                for (i, p) in t.waypoints.iter_mut().enumerate().skip(1) {
                    let s = i as f64 / last;
                    for (k, a) in modes.iter().enumerate() {
                        let w = (std::f64::consts::PI * (k + 1) as f64 * s).sin();
                        p.x += a[0] * w;
                        p.y += a[1] * w;
                    }
                    p.x += normal.sample(&mut rng) * sigma * WHITE_NOISE;
                    p.y += normal.sample(&mut rng) * sigma * WHITE_NOISE;
                }
                t
            })
            .collect())
    }

    fn assemble(&self, prep: &Prepared<T>, s: usize, interior: impl Iterator<Item = [f64; 2]>) -> Trajectory {
        let mut pts = Vec::with_capacity(self.cfg.n_waypoints);
        let st = prep.starts[s];
        pts.push(Point2::new(st[0], st[1]));
        pts.extend(interior.map(|p| Point2::new(p[0], p[1])));
        let gl = prep.goals[s];
        pts.push(Point2::new(gl[0], gl[1]));
        Trajectory::new(pts)
    }

    /// Reshaped trajectories; endpoints are forced to those of `ξ_o`.
    pub fn decode(&self, inputs: &[ModelInput<'_>], mode: DecodeMode<'_>) -> Result<Vec<Trajectory>> {
        let mut out = Vec::with_capacity(inputs.len());
        for (c, chunk) in inputs.chunks(PREDICT_BATCH).enumerate() {
            let part = match mode {
                DecodeMode::Autoregressive => self.decode_autoregressive(chunk)?,
                DecodeMode::TeacherForced(t) => {
                    let lo = c * PREDICT_BATCH;
                    let teacher: Vec<&Trajectory> = t
                        .get(lo..lo + chunk.len())
                        .ok_or_else(|| Error::Shape(format!("{} teacher trajectories for {} inputs", t.len(), inputs.len())))?
                        .iter()
                        .collect();
                    self.decode_teacher(chunk, &teacher)?
                }
            };
            out.extend(part);
        }
        Ok(out)
    }

    pub fn predict(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<Trajectory>> {
        self.decode(inputs, DecodeMode::Autoregressive)
    }

    fn decode_teacher(&self, inputs: &[ModelInput<'_>], teacher: &[&Trajectory]) -> Result<Vec<Trajectory>> {
        let prep = self.prepare(inputs)?;
        let mut g = Graph::new();
        let pred = self.forward_teacher(&mut g, &prep, teacher, &Dropout::off())?;
        let n = self.cfg.n_waypoints;
        let v = g.value(pred);
        Ok((0..prep.batch)
            .map(|s| {
                let rows = (0..n - 2).map(|t| {
                    let r = v.row(s * (n - 1) + t);
                    [r[0].to_f64().unwrap_or(f64::NAN), r[1].to_f64().unwrap_or(f64::NAN)]
                });
                self.assemble(&prep, s, rows)
            })
            .collect())
    }

    /// Autoregressive decoding with cached keys and values; every step runs
    /// the same kernels over the same row layout as teacher forcing.
    fn decode_autoregressive(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<Trajectory>> {
        let prep = self.prepare(inputs)?;
        let (n, d, b) = (self.cfg.n_waypoints, self.cfg.d_model, prep.batch);
        let off = Dropout::off();

        let mut g0 = Graph::new();
        let enc = self.encode(&mut g0, &prep, &off)?;
        let mem = self.build_memory(&mut g0, &prep, enc)?;
        let mut cross_kv = Vec::with_capacity(self.cfg.dec_blocks);
        for i in 0..self.cfg.dec_blocks {
            let k = self.linear(&mut g0, mem.var, &format!("dec{i}.cross.k"))?;
            let v = self.linear(&mut g0, mem.var, &format!("dec{i}.cross.v"))?;
            cross_kv.push((g0.value(k).clone(), g0.value(v).clone()));
        }
        drop(g0);

        let mut self_kv: Vec<(Tensor<T>, Tensor<T>)> = (0..self.cfg.dec_blocks)
            .map(|_| (Tensor::zeros(&[b * (n - 1), d]), Tensor::zeros(&[b * (n - 1), d])))
            .collect();
        let mut fed: Vec<T> = prep.starts.iter().flat_map(|s| [T::lit(s[0]), T::lit(s[1])]).collect();
        let mut interior: Vec<Vec<[f64; 2]>> = vec![Vec::with_capacity(n - 2); b];
        for t in 0..n - 2 {
            let mut g = Graph::new();
            let mut x = self.decoder_inputs(&mut g, &prep, Tensor::matrix(b, 2, fed.clone()), t..t + 1)?;
            for (i, (ck, cv)) in cross_kv.iter().enumerate() {
                let prefix = format!("dec{i}.self");
                let h = self.norm(&mut g, x, &prefix)?;
                let q = self.linear(&mut g, h, &format!("{prefix}.q"))?;
                let k = self.linear(&mut g, h, &format!("{prefix}.k"))?;
                let v = self.linear(&mut g, h, &format!("{prefix}.v"))?;
                let (kc, vc) = &mut self_kv[i];
                for s in 0..b {
                    let row = s * (n - 1) + t;
                    kc.data_mut()[row * d..(row + 1) * d].copy_from_slice(g.value(k).row(s));
                    vc.data_mut()[row * d..(row + 1) * d].copy_from_slice(g.value(v).row(s));
                }
                let spec = AttentionSpec {
                    batch: b,
                    lq: 1,
                    lk: n - 1,
                    heads: self.cfg.n_heads,
                    key_mask: None,
                    causal_offset: Some(t),
                };
                let a = g.attention_fixed_kv(q, kc, vc, &spec)?;
                let o = self.linear(&mut g, a, &format!("{prefix}.o"))?;
                x = g.add(x, o)?;

                let prefix = format!("dec{i}.cross");
                let h = self.norm(&mut g, x, &prefix)?;
                let q = self.linear(&mut g, h, &format!("{prefix}.q"))?;
                let spec = AttentionSpec {
                    batch: b,
                    lq: 1,
                    lk: mem.len,
                    heads: self.cfg.n_heads,
                    key_mask: Some(mem.mask.clone()),
                    causal_offset: None,
                };
                let a = g.attention_fixed_kv(q, ck, cv, &spec)?;
                let o = self.linear(&mut g, a, &format!("{prefix}.o"))?;
                x = g.add(x, o)?;
                x = self.ffn(&mut g, &format!("dec{i}.ffn"), x, &off)?;
            }
            let y = self.head(&mut g, &prep, x, t..t + 1)?;
            let yv = g.value(y);
            if !yv.all_finite() {
                return Err(Error::Training(format!("non-finite prediction at step {t}")));
            }
            fed = yv.data().to_vec();
            for (s, pts) in interior.iter_mut().enumerate() {
                let r = yv.row(s);
                pts.push([r[0].to_f64().unwrap_or(f64::NAN), r[1].to_f64().unwrap_or(f64::NAN)]);
            }
        }
        Ok(interior
            .into_iter()
            .enumerate()
            .map(|(s, pts)| self.assemble(&prep, s, pts.into_iter()))
            .collect())
    }
}

/// Inputs per forward pass during inference.
pub const PREDICT_BATCH: usize = 64;

/// Sine modes in the smooth part of the teacher noise.
const NOISE_MODES: usize = 3;
/// White-noise std relative to the smooth amplitude.
const WHITE_NOISE: f64 = 0.2;

fn add_linear<T: Scalar>(params: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut impl rand::Rng) {
    params.add(format!("{name}.w"), gaussian(fan_in, fan_out, std, rng));
    params.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
}

fn add_norm<T: Scalar>(params: &mut ParamStore<T>, cfg: &ModelConfig, prefix: &str) {
    if cfg.use_norm {
        params.add(format!("{prefix}.ln.g"), Tensor::full(&[1, cfg.d_model], T::one()));
        params.add(format!("{prefix}.ln.b"), Tensor::zeros(&[1, cfg.d_model]));
    }
}

fn add_attention<T: Scalar>(params: &mut ParamStore<T>, cfg: &ModelConfig, prefix: &str, out_scale: f64, rng: &mut impl rand::Rng) {
    let d = cfg.d_model;
    let std = 1.0 / (d as f64).sqrt();
    add_norm(params, cfg, prefix);
    for p in ["q", "k", "v"] {
        add_linear(params, &format!("{prefix}.{p}"), d, d, std, rng);
    }
    add_linear(params, &format!("{prefix}.o"), d, d, std * out_scale, rng);
}

fn add_ffn<T: Scalar>(params: &mut ParamStore<T>, cfg: &ModelConfig, prefix: &str, out_scale: f64, rng: &mut impl rand::Rng) {
    add_norm(params, cfg, prefix);
    let mut widths = vec![cfg.d_model];
    widths.extend(std::iter::repeat_n(cfg.ffn_width, cfg.ffn_layers));
    widths.push(cfg.d_model);
    for j in 0..widths.len() - 1 {
        let fan_in = widths[j] as f64;
        let std = if j + 2 < widths.len() {
            (2.0 / fan_in).sqrt()
        } else {
            out_scale / fan_in.sqrt()
        };
        add_linear(params, &format!("{prefix}.{j}"), widths[j], widths[j + 1], std, rng);
    }
}

pub(crate) fn check_same_layout<T: Scalar>(expected: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Load(format!(
            "expected {} tensors, found {}",
            expected.len(),
            got.len()
        )));
    }
    for ((en, et), (gn, gt)) in expected.iter().zip(got.iter()) {
        if en != gn || et.shape() != gt.shape() {
            return Err(Error::Load(format!(
                "tensor {gn} {:?} does not match expected {en} {:?}",
                gt.shape(),
                et.shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::autodiff::AdamW;
    use crate::geom::{gen_random_world, resample, World, WorldConfig};
    use crate::language::{synthesize_synonym_embeddings, LabelSet, Lexicon};
    use crate::model::{EncoderChoice, Fcn};

    struct Case {
        world: World,
        xi_o: Trajectory,
        target: Trajectory,
        command: String,
    }

    fn labels() -> Vec<String> {
        LabelSet::default().as_slice()[..40].to_vec()
    }

    fn table(dim: usize) -> Arc<TableEncoder> {
        Arc::new(synthesize_synonym_embeddings(&Lexicon::default(), &labels(), dim, 11))
    }

    fn cases(n: usize, count: usize, seed: u64) -> Vec<Case> {
        (0..count as u64)
            .map(|i| {
                let world = gen_random_world(seed * 100 + i, &WorldConfig::default(), &labels()).unwrap();
                let line = Trajectory::new(vec![world.start, world.goal]);
                let xi_o = resample(&line, n).unwrap();
                let mut target = xi_o.clone();
                for (k, p) in target.waypoints.iter_mut().enumerate().skip(1).take(n - 2) {
                    p.y += 0.02 * (k as f64).sin();
                }
                let command = format!("stay much further away from the {}", world.objects[0].label);
                Case {
                    world,
                    xi_o,
                    target,
                    command,
                }
            })
            .collect()
    }

    fn inputs(cs: &[Case]) -> Vec<ModelInput<'_>> {
        cs.iter()
            .map(|c| ModelInput {
                world: &c.world,
                xi_o: &c.xi_o,
                command: &c.command,
            })
            .collect()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_width: 16,
            n_waypoints: 12,
            d_lang: 16,
            head_init: 0.3,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn embedding_contracts() {
        let cfg = small_cfg();
        let mut model = Transformer::<f32>::new(cfg.clone(), Some(table(16)), 1).unwrap();
        let cs = cases(cfg.n_waypoints, 1, 1);
        let inp = inputs(&cs)[0];
        let tokens = model.embed_geometry(inp, true).unwrap();
        assert_eq!(tokens.shape(), &[cfg.max_objects + cfg.n_waypoints, cfg.d_model]);

        let mut repeated = cs[0].xi_o.clone();
        repeated.waypoints[3] = repeated.waypoints[2];
        let inp2 = ModelInput {
            xi_o: &repeated,
            ..inp
        };
        let raw = model.embed_geometry(inp2, false).unwrap();
        let m = cfg.max_objects;
        assert_eq!(raw.row(m + 2), raw.row(m + 3));

        for name in ["geo.w", "geo.b"] {
            let id = model.params.id(name).unwrap();
            model.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let zero = model.embed_geometry(inp, false).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn masked_object_slots_do_not_influence_other_tokens() {
        let cfg = small_cfg();
        let model = Transformer::<f32>::new(cfg.clone(), Some(table(16)), 2).unwrap();
        let cs = cases(cfg.n_waypoints, 2, 2);
        let mut prep = model.prepare(&inputs(&cs)).unwrap();
        let m = cfg.max_objects;
        let masked: Vec<usize> = (0..prep.batch * m).filter(|&i| !prep.object_mask[i]).collect();
        assert!(!masked.is_empty());
        let run = |prep: &Prepared<f32>| {
            let mut g = Graph::new();
            let enc = model.encode(&mut g, prep, &Dropout::off()).unwrap();
            g.value(enc.var).clone()
        };
        let before = run(&prep);
        for &i in &masked {
            prep.objects.data_mut()[2 * i] = 0.77;
            prep.objects.data_mut()[2 * i + 1] = -3.0;
        }
        let after = run(&prep);
        let len = m + cfg.n_waypoints;
        for s in 0..prep.batch {
            for r in 0..len {
                if r < m && !prep.object_mask[s * m + r] {
                    continue;
                }
                assert_eq!(before.row(s * len + r), after.row(s * len + r), "sample {s} row {r}");
            }
        }
    }

    #[test]
    fn language_token_is_linear_and_isolated() {
        let cfg = small_cfg();
        let mut model = Transformer::<f32>::new(cfg.clone(), Some(table(16)), 3).unwrap();
        let cs = cases(cfg.n_waypoints, 1, 3);
        let memory_of = |model: &Transformer<f32>, command: &str| {
            let inp = ModelInput {
                command,
                ..inputs(&cs)[0]
            };
            let prep = model.prepare(&[inp]).unwrap();
            let mut g = Graph::new();
            let enc = model.encode(&mut g, &prep, &Dropout::off()).unwrap();
            let mem = model.build_memory(&mut g, &prep, enc).unwrap();
            assert_eq!(mem.len, 1 + cfg.max_objects + cfg.n_waypoints);
            g.value(mem.var).clone()
        };
        let a = memory_of(&model, &cs[0].command);
        let b = memory_of(&model, "go very much closer to the nothing");
        assert_ne!(a.row(0), b.row(0));
        for r in 1..a.rows() {
            assert_eq!(a.row(r), b.row(r));
        }
        // empty text and no matching label: zero z_in and zero similarity
        let id = model.params.id("lang.b").unwrap();
        model.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let z = memory_of(&model, "");
        assert!(z.row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decoder_is_causal() {
        let cfg = small_cfg();
        let n = cfg.n_waypoints;
        for seed in 0..10 {
            let model = Transformer::<f64>::new(cfg.clone(), Some(table(16)), seed).unwrap();
            let cs = cases(n, 2, seed + 10);
            let inp = inputs(&cs);
            let teacher: Vec<Trajectory> = cs.iter().map(|c| c.target.clone()).collect();
            let base = model.decode(&inp, DecodeMode::TeacherForced(&teacher)).unwrap();
            let t = 1 + (seed as usize % (n - 3));
            let mut perturbed = teacher.clone();
            perturbed[1].waypoints[t].x += 0.05;
            let out = model.decode(&inp, DecodeMode::TeacherForced(&perturbed)).unwrap();
            assert_eq!(base[0], out[0]);
            for k in 0..n {
                if k <= t || k == n - 1 {
                    assert_eq!(base[1].waypoints[k], out[1].waypoints[k], "seed {seed} t {t} k {k}");
                }
            }
            assert_ne!(base[1].waypoints[t + 1], out[1].waypoints[t + 1], "seed {seed}");
        }
    }

    #[test]
    fn teacher_forcing_on_own_output_reproduces_it_exactly() {
        for use_norm in [false, true] {
            let cfg = ModelConfig {
                use_norm,
                n_waypoints: 30,
                ..small_cfg()
            };
            let model = Transformer::<f32>::new(cfg.clone(), Some(table(16)), 5).unwrap();
            let cs = cases(cfg.n_waypoints, 5, 5);
            let inp = inputs(&cs);
            let ar = model.predict(&inp).unwrap();
            let tf = model.decode(&inp, DecodeMode::TeacherForced(&ar)).unwrap();
            assert_eq!(ar, tf);
            for (c, t) in cs.iter().zip(&ar) {
                assert_eq!(t.len(), cfg.n_waypoints);
                assert_eq!(t.first(), c.xi_o.first());
                assert_eq!(t.last(), c.xi_o.last());
            }
        }
    }

    #[test]
    fn full_size_batches_keep_bit_identity() {
        let cfg = ModelConfig::desk();
        let model = Transformer::<f32>::new(cfg.clone(), Some(table(cfg.d_lang)), 9).unwrap();
        let cs = cases(cfg.n_waypoints, 3, 9);
        let inp = inputs(&cs);
        let ar = model.predict(&inp).unwrap();
        let tf = model.decode(&inp, DecodeMode::TeacherForced(&ar)).unwrap();
        assert_eq!(ar, tf);
    }

    fn train_steps(cfg: ModelConfig, steps: usize) -> (f32, f32) {
        let model0 = Transformer::<f32>::new(cfg.clone(), Some(table(cfg.d_lang)), 4).unwrap();
        let mut model = model0.clone();
        let cs = cases(cfg.n_waypoints, 8, 4);
        let inp = inputs(&cs);
        let targets: Vec<&Trajectory> = cs.iter().map(|c| &c.target).collect();
        let mut opt = AdamW::new(0.0);
        let mut first = f32::NAN;
        let mut last = f32::NAN;
        for step in 0..steps {
            let mut g = Graph::new();
            let loss = model.loss(&mut g, &inp, &targets, Some(step as u64)).unwrap();
            last = g.value(loss).data()[0];
            if step == 0 {
                first = last;
            }
            let grads = g.backward(loss, &model.params).unwrap();
            opt.step(&mut model.params, &grads, 3e-3).unwrap();
        }
        (first, last)
    }

    #[test]
    fn trains_with_and_without_norm() {
        for use_norm in [false, true] {
            let cfg = ModelConfig {
                use_norm,
                dropout: 0.1,
                ..small_cfg()
            };
            let (first, last) = train_steps(cfg, 40);
            assert!(last < 0.5 * first, "use_norm {use_norm}: {first} -> {last}");
        }
    }

    #[test]
    fn fcn_contracts() {
        let cfg = small_cfg();
        let mut fcn = Fcn::<f32>::new(cfg.clone(), Some(table(16)), 1).unwrap();
        let cs = cases(cfg.n_waypoints, 3, 6);
        let out = fcn.predict(&inputs(&cs)).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|t| t.len() == cfg.n_waypoints));
        let last = fcn.num_layers() - 1;
        for name in [format!("fcn.{last}.w"), format!("fcn.{last}.b")] {
            let id = fcn.params.id(&name).unwrap();
            fcn.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let zero = fcn.predict(&inputs(&cs)).unwrap();
        assert!(zero.iter().flat_map(|t| &t.waypoints).all(|p| p.x == 0.0 && p.y == 0.0));
    }

    #[test]
    fn scratch_encoder_trains_end_to_end() {
        let cfg = ModelConfig {
            encoder: EncoderChoice::Scratch,
            ..ModelConfig::tiny()
        };
        let model = Transformer::<f64>::new(cfg.clone(), None, 1).unwrap();
        let cs = cases(cfg.n_waypoints, 2, 50);
        let inp = inputs(&cs);
        let targets: Vec<&Trajectory> = cs.iter().map(|c| &c.target).collect();
        let mut g = Graph::new();
        let loss = model.loss(&mut g, &inp, &targets, None).unwrap();
        let grads = g.backward(loss, &model.params).unwrap();
        let id = model.params.id(crate::model::SCRATCH_PARAM).unwrap();
        let touched = grads.get(id).data().iter().filter(|&&x| x != 0.0).count();
        assert!(touched > 0);
        assert!(touched <= 6 * cfg.d_lang * 2);
    }

    #[test]
    fn wrong_waypoint_count_is_a_shape_error() {
        let cfg = small_cfg();
        let model = Transformer::<f32>::new(cfg.clone(), Some(table(16)), 1).unwrap();
        let cs = cases(cfg.n_waypoints + 1, 1, 1);
        assert!(matches!(model.predict(&inputs(&cs)), Err(Error::Shape(_))));
    }
}
