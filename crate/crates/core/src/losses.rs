//! Training objectives: the multi-scale supervised flow loss and the
//! self-supervised Chamfer + smoothness + Laplacian objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{
    interpolate_idw_at, knn, NeighborIndex, PointCloud, SceneFlow, DEFAULT_K_LOSS,
    DEFAULT_K_UPSAMPLE,
};
use crate::network::{FlowPyramid, Pyramid};

/// Keeps the un-squared norm differentiable at a zero residual.
pub const NORM_SMOOTHING: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// One weight per flow level, finest first.
    pub alpha: Vec<f64>,
    /// Chamfer, smoothness, Laplacian.
    pub beta: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: vec![0.02, 0.04, 0.08, 0.16],
            beta: [1.0, 1.0, 0.3],
        }
    }
}

impl LossWeights {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.alpha.len() != levels {
            return Err(Error::Config(format!(
                "loss.alpha needs {levels} entries (one per level), got {}",
                self.alpha.len()
            )));
        }
        let all = self.alpha.iter().chain(&self.beta);
        if all.clone().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.alpha.iter().all(|&a| a == 0.0) {
            return Err(Error::Config(
                "at least one loss.alpha entry must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Neighbourhood size for smoothness and Laplacian terms, self excluded.
    pub k_loss: usize,
    /// Neighbours used to interpolate the second cloud's Laplacian.
    pub k_inter: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            k_loss: DEFAULT_K_LOSS,
            k_inter: DEFAULT_K_UPSAMPLE,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        self.weights.validate(levels)?;
        if self.k_loss == 0 || self.k_inter == 0 {
            return Err(Error::Config(
                "loss.k_loss and loss.k_inter must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Laplacian coordinates `delta(p_i)`, one row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianCoords {
    pub delta: Vec<[f64; 3]>,
}

impl LaplacianCoords {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.delta)
    }
}

fn rows_of(g: &Graph, v: Var) -> usize {
    g.with_value(v, Tensor::rows)
}

/// `sum_l alpha_l sum_p (sqrt(|pred - gt|^2 + e) - sqrt(e))`, which is zero
/// exactly when the prediction matches.
pub fn supervised_loss(g: &Graph, pred: &[Var], gt: &[SceneFlow], alpha: &[f64]) -> Result<Var> {
    if pred.len() != gt.len() || pred.len() != alpha.len() {
        return Err(Error::invalid(format!(
            "supervised loss: {} predicted levels, {} ground-truth levels, {} weights",
            pred.len(),
            gt.len(),
            alpha.len()
        )));
    }
    let mut total = g.leaf(Tensor::scalar(0.0));
    for ((&p, t), &a) in pred.iter().zip(gt).zip(alpha) {
        if rows_of(g, p) != t.len() {
            return Err(Error::invalid(format!(
                "supervised loss: {} predicted vectors vs {} ground truth",
                rows_of(g, p),
                t.len()
            )));
        }
        let r = g.sub(p, g.leaf(t.to_tensor()))?;
        let norms = g.sqrt(g.add_scalar(g.sum_last_axis(g.square(r)?)?, NORM_SMOOTHING)?)?;
        let norms = g.add_scalar(norms, -NORM_SMOOTHING.sqrt())?;
        total = g.add(total, g.scale(g.sum(norms)?, a)?)?;
    }
    Ok(total)
}

/// Symmetric sum of squared nearest-neighbour distances.
pub fn chamfer_loss(g: &Graph, pw: Var, q: Var) -> Result<Var> {
    if rows_of(g, pw) == 0 || rows_of(g, q) == 0 {
        return Err(Error::invalid("chamfer loss needs non-empty clouds"));
    }
    let (fwd, _) = g.min_last_axis(g.pairwise_sq_dist(pw, q)?)?;
    let (bwd, _) = g.min_last_axis(g.pairwise_sq_dist(q, pw)?)?;
    g.add(g.sum(fwd)?, g.sum(bwd)?)
}

/// `sum_i (1/|N_i|) sum_{j in N_i} |f_j - f_i|^2`.
pub fn smoothness_loss(g: &Graph, flow: Var, nbrs: &NeighborIndex) -> Result<Var> {
    if rows_of(g, flow) != nbrs.rows() {
        return Err(Error::invalid(format!(
            "smoothness loss: {} flow vectors but {} neighbourhoods",
            rows_of(g, flow),
            nbrs.rows()
        )));
    }
    let diff = g.sub(
        g.gather_rows(flow, nbrs.flat().to_vec())?,
        g.gather_rows(flow, nbrs.owners())?,
    )?;
    let sq = g.sum(g.square(diff)?)?;
    g.scale(sq, 1.0 / nbrs.k() as f64)
}

/// Neighbourhoods of a cloud in itself with the point excluded.
pub fn loss_neighbors(cloud: &PointCloud, k: usize) -> Result<NeighborIndex> {
    let k = (k + 1).min(cloud.len());
    if k < 2 {
        return Err(Error::TooFewPoints {
            what: "loss neighbourhood",
            required: 2,
            actual: cloud.len(),
        });
    }
    knn(cloud, cloud, k)?.without_self()
}

pub fn laplacian_coords(cloud: &PointCloud, nbrs: &NeighborIndex) -> Result<LaplacianCoords> {
    if cloud.len() != nbrs.rows() {
        return Err(Error::invalid(format!(
            "laplacian: {} points but {} neighbourhoods",
            cloud.len(),
            nbrs.rows()
        )));
    }
    let inv = 1.0 / nbrs.k() as f64;
    let delta = (0..cloud.len())
        .map(|i| {
            let c = cloud.point(i);
            let mut s = [0.0; 3];
            for &j in nbrs.row(i) {
                let p = cloud.point(j);
                for d in 0..3 {
                    s[d] += p[d] - c[d];
                }
            }
            s.map(|v| v * inv)
        })
        .collect();
    Ok(LaplacianCoords { delta })
}

/// Graph form of [`laplacian_coords`] for positions that carry gradients.
pub fn laplacian_coords_var(g: &Graph, positions: Var, nbrs: &NeighborIndex) -> Result<Var> {
    let n = rows_of(g, positions);
    if n != nbrs.rows() {
        return Err(Error::invalid(format!(
            "laplacian: {n} points but {} neighbourhoods",
            nbrs.rows()
        )));
    }
    let diff = g.sub(
        g.gather_rows(positions, nbrs.flat().to_vec())?,
        g.gather_rows(positions, nbrs.owners())?,
    )?;
    g.scale(
        g.scatter_add_rows(diff, nbrs.owners(), n)?,
        1.0 / nbrs.k() as f64,
    )
}

/// `sum_i |delta(p_w,i) - delta_Q(interpolated at p_w,i)|^2`.
pub fn laplacian_reg(
    g: &Graph,
    pw: Var,
    q: &PointCloud,
    k_loss: usize,
    k_inter: usize,
) -> Result<Var> {
    let pw_cloud = PointCloud::from_tensor(&g.value(pw))?;
    let dq = laplacian_coords(q, &loss_neighbors(q, k_loss)?)?;
    let target = interpolate_idw_at(g, q, g.leaf(dq.to_tensor()), pw, k_inter.min(q.len()))?;
    let dp = laplacian_coords_var(g, pw, &loss_neighbors(&pw_cloud, k_loss)?)?;
    g.sum(g.square(g.sub(dp, target)?)?)
}

/// Per-level components of the self-supervised objective, before weighting.
#[derive(Clone, Debug)]
pub struct SelfSupervisedTerms {
    pub chamfer: Vec<Var>,
    pub smoothness: Vec<Var>,
    pub laplacian: Vec<Var>,
}

pub fn self_supervised_terms(
    g: &Graph,
    p: &Pyramid,
    q: &Pyramid,
    flows: &FlowPyramid,
    cfg: &LossConfig,
) -> Result<SelfSupervisedTerms> {
    let levels = flows.levels.len();
    if p.levels.len() != levels || q.levels.len() != levels {
        return Err(Error::invalid(format!(
            "self-supervised loss: {levels} flow levels but pyramids of {} and {}",
            p.levels.len(),
            q.levels.len()
        )));
    }
    let mut terms = SelfSupervisedTerms {
        chamfer: vec![],
        smoothness: vec![],
        laplacian: vec![],
    };
    for l in 0..levels {
        let pl = &p.levels[l].positions;
        let ql = &q.levels[l].positions;
        let flow = flows.levels[l];
        let pw = g.add(g.leaf(pl.to_tensor()), flow)?;
        terms
            .chamfer
            .push(chamfer_loss(g, pw, g.leaf(ql.to_tensor()))?);
        terms
            .smoothness
            .push(smoothness_loss(g, flow, &loss_neighbors(pl, cfg.k_loss)?)?);
        terms
            .laplacian
            .push(laplacian_reg(g, pw, ql, cfg.k_loss, cfg.k_inter)?);
    }
    Ok(terms)
}

/// `sum_l alpha_l (b1 chamfer_l + b2 smooth_l + b3 laplacian_l)`.
pub fn self_supervised_loss(
    g: &Graph,
    p: &Pyramid,
    q: &Pyramid,
    flows: &FlowPyramid,
    cfg: &LossConfig,
) -> Result<Var> {
    let w = &cfg.weights;
    if w.alpha.len() != flows.levels.len() {
        return Err(Error::invalid(format!(
            "self-supervised loss: {} weights for {} levels",
            w.alpha.len(),
            flows.levels.len()
        )));
    }
    let terms = self_supervised_terms(g, p, q, flows, cfg)?;
    let mut total = g.leaf(Tensor::scalar(0.0));
    for l in 0..flows.levels.len() {
        let parts = [terms.chamfer[l], terms.smoothness[l], terms.laplacian[l]];
        for (t, b) in parts.into_iter().zip(w.beta) {
            total = g.add(total, g.scale(t, b * w.alpha[l])?)?;
        }
    }
    Ok(total)
}
