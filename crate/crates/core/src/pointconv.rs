//! Continuous convolution on point sets: an MLP of each neighbour's direction
//! vector produces per-neighbour weights which aggregate neighbour features
//! through an outer-product sum, followed by a linear projection.

use rand::Rng;

use crate::autodiff::{per_point_linear, Ctx, LinearLayer, MlpParams, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{sub3, NeighborIndex, PointCloud};

/// Positions plus graph-attached per-point features.
#[derive(Clone, Debug)]
pub struct FeatureCloud {
    pub positions: PointCloud,
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointConvParams {
    /// Direction (3) to `c_mid` weights.
    pub weight_net: MlpParams,
    /// `c_in * c_mid` to `c_out`.
    pub projection: LinearLayer,
    pub k: usize,
    pub slope: f64,
}

impl PointConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        weight_hidden: &[usize],
        c_mid: usize,
        k: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut widths = vec![3];
        widths.extend_from_slice(weight_hidden);
        widths.push(c_mid);
        let weight_net = MlpParams::new(params, &format!("{name}.weight_net"), &widths, slope, rng);
        let projection =
            LinearLayer::new(params, &format!("{name}.proj"), c_in * c_mid, c_out, rng);
        Self {
            weight_net,
            projection,
            k,
            slope,
        }
    }

    pub fn c_mid(&self) -> usize {
        self.weight_net.out_dim()
    }

    pub fn c_in(&self) -> usize {
        self.projection.in_dim / self.c_mid()
    }

    pub fn c_out(&self) -> usize {
        self.projection.out_dim
    }
}

/// Direction vectors `source[j] - center[c]` for every entry of `nbrs`.
pub fn direction_vectors(
    centers: &PointCloud,
    source: &PointCloud,
    nbrs: &NeighborIndex,
) -> Tensor {
    let k = nbrs.k();
    let mut dirs = Vec::with_capacity(nbrs.flat().len() * 3);
    for (e, &j) in nbrs.flat().iter().enumerate() {
        dirs.extend(sub3(source.point(j), centers.point(e / k)));
    }
    Tensor::matrix(nbrs.flat().len(), 3, dirs).expect("dims")
}

pub fn pointconv(
    ctx: &Ctx,
    centers: &PointCloud,
    source: &FeatureCloud,
    nbrs: &NeighborIndex,
    params: &PointConvParams,
) -> Result<FeatureCloud> {
    let g = ctx.graph;
    if nbrs.rows() != centers.len() {
        return Err(Error::invalid(format!(
            "pointconv: {} neighbour rows for {} centers",
            nbrs.rows(),
            centers.len()
        )));
    }
    let feat_rows = g.with_value(source.features, Tensor::rows);
    if feat_rows != source.positions.len() {
        return Err(Error::invalid(format!(
            "pointconv: {} feature rows for {} source points",
            feat_rows,
            source.positions.len()
        )));
    }
    if nbrs
        .max_index()
        .is_some_and(|m| m >= source.positions.len())
    {
        return Err(Error::invalid("pointconv: neighbour index out of range"));
    }
    let dirs = g.leaf(direction_vectors(centers, &source.positions, nbrs));
    let weights = params.weight_net.forward(ctx, dirs)?;
    let gathered = g.gather_rows(source.features, nbrs.flat().to_vec())?;
    let agg = g.neighbor_outer_sum(weights, gathered, nbrs.k())?;
    let features = per_point_linear(ctx, agg, &params.projection, params.slope)?;
    Ok(FeatureCloud {
        positions: centers.clone(),
        features,
    })
}
