use std::sync::Arc;

use super::config::ModelConfig;
use super::transformer::{check_same_layout, PREDICT_BATCH};
use super::{gaussian, init_rng, prepare, rows_to_trajectory, tensor_from, z_in_var, ModelInput, ModelText, Prepared};
use crate::autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::Trajectory;
use crate::language::TableEncoder;

/// Fully connected baseline regressing every waypoint at once from one
/// concatenated feature vector.
#[derive(Clone, Debug)]
pub struct Fcn<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    text: ModelText,
}

impl<T: Scalar> Fcn<T> {
    pub fn new(cfg: ModelConfig, table: Option<Arc<TableEncoder>>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let text = ModelText::new(&cfg, table)?;
        let mut rng = init_rng(seed ^ 0x6663_6e);
        let mut params = ParamStore::new();
        let mut widths = vec![Self::input_width(&cfg)];
        widths.extend(std::iter::repeat_n(cfg.fcn_width, cfg.fcn_layers));
        widths.push(2 * cfg.n_waypoints);
        for j in 0..widths.len() - 1 {
            let std = (2.0 / widths[j] as f64).sqrt();
            params.add(format!("fcn.{j}.w"), gaussian(widths[j], widths[j + 1], std, &mut rng));
            params.add(format!("fcn.{j}.b"), Tensor::zeros(&[1, widths[j + 1]]));
        }
        text.add_params(&cfg, &mut params, seed ^ 0x7363_7261_7463_68);
        Ok(Fcn { cfg, params, text })
    }

    pub fn from_params(cfg: ModelConfig, table: Option<Arc<TableEncoder>>, params: ParamStore<T>) -> Result<Self> {
        let fresh = Fcn::<T>::new(cfg.clone(), table, 0)?;
        check_same_layout(&fresh.params, &params)?;
        Ok(Fcn {
            cfg,
            params,
            text: fresh.text,
        })
    }

    pub fn table(&self) -> Option<&Arc<TableEncoder>> {
        self.text.table()
    }

    fn input_width(cfg: &ModelConfig) -> usize {
        2 * cfg.n_waypoints + 2 * cfg.max_objects + cfg.d_lang + cfg.max_objects
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn num_layers(&self) -> usize {
        self.cfg.fcn_layers + 1
    }

    fn forward(&self, g: &mut Graph<T>, prep: &Prepared<T>) -> Result<Var> {
        let (n, m, b) = (self.cfg.n_waypoints, self.cfg.max_objects, prep.batch);
        let traj = Tensor::new(vec![b, 2 * n], prep.waypoints.data().to_vec())?;
        let objs = Tensor::new(vec![b, 2 * m], prep.objects.data().to_vec())?;
        let sim: Vec<T> = (0..b).flat_map(|s| prep.lang_side.row(s)[..m].to_vec()).collect();
        let traj = g.leaf(traj);
        let objs = g.leaf(objs);
        let z = z_in_var(g, &self.params, prep)?;
        let sim = g.leaf(Tensor::matrix(b, m, sim));
        let mut h = g.concat_cols(&[traj, objs, z, sim])?;
        for j in 0..self.num_layers() {
            let w = g.param(&self.params, self.params.id(&format!("fcn.{j}.w")).expect("fcn weight"));
            let bias = g.param(&self.params, self.params.id(&format!("fcn.{j}.b")).expect("fcn bias"));
            h = g.linear(h, w, Some(bias))?;
            if j + 1 < self.num_layers() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Mean Huber loss over all waypoint coordinates.
    pub fn loss(&self, g: &mut Graph<T>, inputs: &[ModelInput<'_>], targets: &[&Trajectory]) -> Result<Var> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!("{} targets for {} inputs", targets.len(), inputs.len())));
        }
        let prep = prepare(&self.cfg, &self.text, &self.params, inputs)?;
        let out = self.forward(g, &prep)?;
        let want: Vec<f64> = targets
            .iter()
            .flat_map(|t| t.waypoints.iter().flat_map(|p| [p.x, p.y]))
            .collect();
        let want = g.leaf(tensor_from(inputs.len(), 2 * self.cfg.n_waypoints, want));
        g.huber(out, want, 1.0)
    }

    pub fn predict(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<Trajectory>> {
        let n = self.cfg.n_waypoints;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(PREDICT_BATCH) {
            let prep = prepare(&self.cfg, &self.text, &self.params, chunk)?;
            let mut g = Graph::new();
            let y = self.forward(&mut g, &prep)?;
            let rows = Tensor::new(vec![chunk.len() * n, 2], g.value(y).data().to_vec())?;
            out.extend((0..chunk.len()).map(|s| rows_to_trajectory(&rows, s, n)));
        }
        Ok(out)
    }
}
