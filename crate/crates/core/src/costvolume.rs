//! Learnable point-cloud cost volume.
//!
//! For every point `p_c` of the first cloud:
//!
//! ```text
//! CV(p_c) = sum_{p_i in N_P(p_c)} W_P(p_i - p_c) * sum_{q_j in N_Q(p_i)} W_Q(q_j - p_i) * cost(p_i, q_j)
//! cost(p_i, q_j) = MLP(concat(f_i, g_j, q_j - p_i))
//! ```
//!
//! `W_P` and `W_Q` are MLPs of the direction vector whose outputs have the
//! cost width `D`; products are per channel. `N_P` is the k-NN of `p_c` in
//! the first cloud (including `p_c` itself), `N_Q` the k-NN of `p_i` in the
//! second cloud.
//!
//! The inner sum only depends on `p_i`, so it is evaluated once per point of
//! the first cloud (`n1 * k` cost-MLP rows) and then aggregated per center.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Ctx, MlpParams, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{knn, PointCloud};

#[derive(Clone, Debug, PartialEq)]
pub struct CostVolumeParams {
    /// `2C + 3` to `D`.
    pub cost_mlp: MlpParams,
    /// Direction to `D` weights over the first cloud's patch.
    pub wp_net: MlpParams,
    /// Direction to `D` weights over the second cloud's patch.
    pub wq_net: MlpParams,
    pub k: usize,
}

impl CostVolumeParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c: usize,
        d: usize,
        cost_hidden: &[usize],
        weight_hidden: &[usize],
        k: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let widths = |first: usize, hidden: &[usize]| {
            let mut w = vec![first];
            w.extend_from_slice(hidden);
            w.push(d);
            w
        };
        Self {
            cost_mlp: MlpParams::new(
                params,
                &format!("{name}.cost"),
                &widths(2 * c + 3, cost_hidden),
                slope,
                rng,
            ),
            wp_net: MlpParams::new(
                params,
                &format!("{name}.wp"),
                &widths(3, weight_hidden),
                slope,
                rng,
            ),
            wq_net: MlpParams::new(
                params,
                &format!("{name}.wq"),
                &widths(3, weight_hidden),
                slope,
                rng,
            ),
            k,
        }
    }

    pub fn feature_width(&self) -> usize {
        (self.cost_mlp.in_dim() - 3) / 2
    }

    pub fn dim(&self) -> usize {
        self.cost_mlp.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.cost_mlp.validate()?;
        self.wp_net.validate()?;
        self.wq_net.validate()?;
        let d = self.dim();
        if self.wp_net.out_dim() != d || self.wq_net.out_dim() != d {
            return Err(Error::invalid(
                "cost volume weight nets must output the cost width",
            ));
        }
        if self.wp_net.in_dim() != 3
            || self.wq_net.in_dim() != 3
            || !(self.cost_mlp.in_dim() - 3).is_multiple_of(2)
        {
            return Err(Error::invalid("cost volume input widths are inconsistent"));
        }
        Ok(())
    }
}

/// Graph-attached positions and features of one cloud.
#[derive(Clone, Copy, Debug)]
pub struct CloudVars {
    pub positions: Var,
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostVolumeStats {
    /// Number of `(p_i, q_j)` matching-cost terms aggregated into each output point.
    pub pair_terms_per_point: Vec<usize>,
    /// Rows evaluated by the matching-cost MLP.
    pub cost_evaluations: usize,
}

#[derive(Clone, Debug)]
pub struct CostVolume {
    /// `n1 x D`.
    pub values: Var,
    pub stats: CostVolumeStats,
}

/// `cost_mlp(concat(f_a, g_a, q_a - p_a))` row by row.
pub fn matching_cost(
    ctx: &Ctx,
    p_feats: Var,
    q_feats: Var,
    p_pos: Var,
    q_pos: Var,
    params: &CostVolumeParams,
) -> Result<Var> {
    let g = ctx.graph;
    let dir = g.sub(q_pos, p_pos)?;
    let x = g.concat(&[p_feats, q_feats, dir])?;
    params.cost_mlp.forward(ctx, x)
}

fn cloud_of(ctx: &Ctx, v: Var) -> Result<PointCloud> {
    PointCloud::from_tensor(&ctx.graph.value(v))
}

pub fn cost_volume(
    ctx: &Ctx,
    p: CloudVars,
    q: CloudVars,
    params: &CostVolumeParams,
) -> Result<CostVolume> {
    let g = ctx.graph;
    let p_cloud = cloud_of(ctx, p.positions)?;
    let q_cloud = cloud_of(ctx, q.positions)?;
    let (n1, n2) = (p_cloud.len(), q_cloud.len());
    let k = params.k;
    if k == 0 || k > n1.min(n2) {
        return Err(Error::invalid(format!(
            "cost_volume: k = {k} must be in 1..={} (n1 = {n1}, n2 = {n2})",
            n1.min(n2)
        )));
    }

    // Point-to-patch stage: each p_i against its k-NN in Q.
    let nq = knn(&p_cloud, &q_cloud, k)?;
    let owners: Rc<[usize]> = nq.owners().into();
    let q_idx: Rc<[usize]> = nq.flat().into();
    let p_rep = g.gather_rows(p.positions, owners.clone())?;
    let q_sel = g.gather_rows(q.positions, q_idx.clone())?;
    let f_rep = g.gather_rows(p.features, owners.clone())?;
    let g_sel = g.gather_rows(q.features, q_idx)?;
    let cost = matching_cost(ctx, f_rep, g_sel, p_rep, q_sel, params)?;
    let dir_q = g.sub(q_sel, p_rep)?;
    let wq = params.wq_net.forward(ctx, dir_q)?;
    let point_to_patch = g.scatter_add_rows(g.mul(wq, cost)?, owners, n1)?;

    // Patch-to-patch stage: aggregate over each center's k-NN in P.
    let np = knn(&p_cloud, &p_cloud, k)?;
    let centers: Rc<[usize]> = np.owners().into();
    let members: Rc<[usize]> = np.flat().into();
    let dir_p = g.sub(
        g.gather_rows(p.positions, members.clone())?,
        g.gather_rows(p.positions, centers.clone())?,
    )?;
    let wp = params.wp_net.forward(ctx, dir_p)?;
    let values = g.scatter_add_rows(
        g.mul(wp, g.gather_rows(point_to_patch, members)?)?,
        centers,
        n1,
    )?;

    let pair_terms_per_point = (0..n1)
        .map(|c| np.row(c).iter().map(|&i| nq.row(i).len()).sum())
        .collect();
    Ok(CostVolume {
        values,
        stats: CostVolumeStats {
            pair_terms_per_point,
            cost_evaluations: n1 * k,
        },
    })
}

/// Convenience wrapper taking plain tensors (positions `N x 3`, features `N x C`).
pub fn cost_volume_from_tensors(
    ctx: &Ctx,
    p_pos: &Tensor,
    p_feat: &Tensor,
    q_pos: &Tensor,
    q_feat: &Tensor,
    params: &CostVolumeParams,
) -> Result<CostVolume> {
    let g = ctx.graph;
    let p = CloudVars {
        positions: g.leaf(p_pos.clone()),
        features: g.leaf(p_feat.clone()),
    };
    let q = CloudVars {
        positions: g.leaf(q_pos.clone()),
        features: g.leaf(q_feat.clone()),
    };
    cost_volume(ctx, p, q, params)
}
