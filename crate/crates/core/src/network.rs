//! Coarse-to-fine scene flow network.
//!
//! Level 0 is the input cloud; every further level keeps `ceil(n / 4)` points
//! chosen by furthest point sampling. Flow is predicted from the coarsest
//! level towards level 1 and finally interpolated onto level 0. At every
//! level below the coarsest the first cloud is warped by the upsampled
//! coarser flow before its cost volume is built, and the predictor outputs a
//! residual on top of that upsampled flow.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    per_point_linear, xavier_uniform, Ctx, Graph, LinearLayer, MlpParams, ParamSet, Tensor, Var,
    DEFAULT_LEAKY_SLOPE,
};
use crate::costvolume::{cost_volume, CloudVars, CostVolumeParams, CostVolumeStats};
use crate::error::{Error, Result};
use crate::geom::{
    furthest_point_sample, interpolate_idw, knn, PointCloud, SceneFlow, DEFAULT_K_COST,
    DEFAULT_K_UPSAMPLE,
};
use crate::pointconv::{pointconv, FeatureCloud, PointConvParams};

pub const DOWNSAMPLE_FACTOR: usize = 4;
/// Raw input features are the xyz coordinates.
pub const RAW_FEATURE_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Pyramid levels including the input level.
    pub levels: usize,
    /// Feature widths of levels `1..levels`.
    pub widths: Vec<usize>,
    /// Cost volume widths of levels `1..levels`.
    pub cost_dims: Vec<usize>,
    pub k_cost: usize,
    pub k_conv: usize,
    pub k_upsample: usize,
    /// Hidden widths of every direction-weight MLP.
    pub weight_hidden: Vec<usize>,
    /// Output width of PointConv weight nets.
    pub conv_mid: usize,
    pub predictor_convs: Vec<usize>,
    /// Width of the predictor's second-last layer (the predictor feature).
    pub predictor_hidden: usize,
    pub leaky_slope: f64,
    /// Concatenate upsampled coarser pyramid features into each level.
    pub upsampled_feature: bool,
    /// Feed the coarser predictor's second-last layer into each predictor.
    pub predictor_feature: bool,
    pub fps_start: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            widths: vec![32, 64, 128],
            cost_dims: vec![64, 64, 64],
            k_cost: DEFAULT_K_COST,
            k_conv: DEFAULT_K_COST,
            k_upsample: DEFAULT_K_UPSAMPLE,
            weight_hidden: vec![8],
            conv_mid: 8,
            predictor_convs: vec![64, 32],
            predictor_hidden: 32,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            upsampled_feature: true,
            predictor_feature: true,
            fps_start: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels < 2 {
            return bad(format!("network.levels must be >= 2, got {}", self.levels));
        }
        let n = self.levels - 1;
        if self.widths.len() != n || self.cost_dims.len() != n {
            return bad(format!(
                "network.widths and network.cost_dims need {n} entries (levels - 1)"
            ));
        }
        if self.k_cost == 0 || self.k_conv == 0 || self.k_upsample == 0 {
            return bad("network k values must be >= 1".into());
        }
        if self.predictor_convs.is_empty() {
            return bad("network.predictor_convs must not be empty".into());
        }
        let widths = self
            .widths
            .iter()
            .chain(&self.cost_dims)
            .chain(&self.weight_hidden)
            .chain(&self.predictor_convs)
            .chain([&self.conv_mid, &self.predictor_hidden]);
        if widths.into_iter().any(|&w| w == 0) {
            return bad("network widths must be >= 1".into());
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad("network.leaky_slope must be finite and >= 0".into());
        }
        Ok(())
    }

    /// Smallest input cloud for which every level is non-empty.
    pub fn min_points(&self) -> usize {
        DOWNSAMPLE_FACTOR.pow(self.levels as u32 - 1)
    }

    pub fn level_sizes(&self, n: usize) -> Vec<usize> {
        let mut sizes = vec![n];
        for _ in 1..self.levels {
            let prev = *sizes.last().unwrap();
            sizes.push(prev.div_ceil(DOWNSAMPLE_FACTOR));
        }
        sizes
    }

    /// Final feature width of pyramid level `l >= 1`.
    fn feature_width(&self, l: usize) -> usize {
        let w = self.widths[l - 1];
        if self.upsampled_feature && l + 1 < self.levels {
            2 * w
        } else {
            w
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct PyramidLevelParams {
    conv: PointConvParams,
    linear: LinearLayer,
    /// Maps the upsampled level `l + 1` feature to this level's width.
    merge: Option<LinearLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub convs: Vec<PointConvParams>,
    pub head: MlpParams,
    pub input_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct LevelParams {
    cost: CostVolumeParams,
    predictor: PredictorParams,
}

/// Network layout plus its learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamSet,
    pyramid: Vec<PyramidLevelParams>,
    levels: Vec<LevelParams>,
}

/// Per-level features of one cloud, finest first.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<FeatureCloud>,
    /// `sample_maps[l - 1]` indexes level `l` into level `l - 1`.
    pub sample_maps: Vec<Vec<usize>>,
}

impl Pyramid {
    pub fn positions(&self) -> Vec<PointCloud> {
        self.levels.iter().map(|l| l.positions.clone()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.positions.len()).collect()
    }
}

/// Flow of every pyramid level, finest (full input resolution) first.
#[derive(Clone, Debug)]
pub struct FlowPyramid {
    pub levels: Vec<Var>,
}

impl FlowPyramid {
    pub fn finest(&self) -> Var {
        self.levels[0]
    }

    pub fn values(&self, g: &Graph) -> Result<Vec<SceneFlow>> {
        self.levels
            .iter()
            .map(|&v| SceneFlow::from_tensor(&g.value(v)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub flows: FlowPyramid,
    pub p: Pyramid,
    pub q: Pyramid,
    /// Residual predicted at each level `1..L` (index `l - 1`).
    pub residuals: Vec<Var>,
    /// Upsampled coarser flow at each level `1..L-1` (index `l - 1`).
    pub upsampled: Vec<Option<Var>>,
    pub cost_stats: Vec<CostVolumeStats>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timings {
    pub feature_pyramid: Duration,
    pub cost_volume: Duration,
    pub upsample_warp: Duration,
    pub predictor: Duration,
}

impl Timings {
    pub fn rows(&self) -> [(&'static str, f64); 4] {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        [
            ("feature pyramid", ms(self.feature_pyramid)),
            ("cost volume", ms(self.cost_volume)),
            ("upsample + warp", ms(self.upsample_warp)),
            ("scene flow predictor", ms(self.predictor)),
        ]
    }
}

struct Timer<'a> {
    timings: Option<&'a mut Timings>,
}

impl Timer<'_> {
    fn time<T>(&mut self, which: fn(&mut Timings) -> &mut Duration, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        if let Some(t) = self.timings.as_deref_mut() {
            *which(t) += start.elapsed();
        }
        out
    }
}

impl Network {
    /// Fresh parameters: uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero
    /// biases, zero flow heads.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let slope = config.leaky_slope;
        let top = config.levels - 1;

        let mut pyramid = Vec::with_capacity(top);
        for l in 1..=top {
            // The bottom-up pass sees features before the top-down concatenation.
            let c_in = if l == 1 {
                RAW_FEATURE_DIM
            } else {
                config.widths[l - 2]
            };
            let w = config.widths[l - 1];
            let name = format!("pyramid.l{l}");
            let conv = PointConvParams::new(
                &mut params,
                &format!("{name}.conv"),
                c_in,
                w,
                &config.weight_hidden,
                config.conv_mid,
                config.k_conv,
                slope,
                &mut rng,
            );
            let linear = LinearLayer::new(&mut params, &format!("{name}.linear"), w, w, &mut rng);
            pyramid.push(PyramidLevelParams {
                conv,
                linear,
                merge: None,
            });
        }
        if config.upsampled_feature {
            for l in (1..top).rev() {
                let from = config.feature_width(l + 1);
                let w = config.widths[l - 1];
                pyramid[l - 1].merge = Some(LinearLayer::new(
                    &mut params,
                    &format!("pyramid.l{l}.merge"),
                    from,
                    w,
                    &mut rng,
                ));
            }
        }

        let mut levels = Vec::with_capacity(top);
        for l in 1..=top {
            let c = config.feature_width(l);
            let d = config.cost_dims[l - 1];
            let cost = CostVolumeParams::new(
                &mut params,
                &format!("cost.l{l}"),
                c,
                d,
                &[d],
                &config.weight_hidden,
                config.k_cost,
                slope,
                &mut rng,
            );
            let coarsest = l == top;
            let mut input_width = c + d;
            if !coarsest {
                input_width += 3;
                if config.predictor_feature {
                    input_width += config.predictor_hidden;
                }
            }
            let mut convs = Vec::new();
            let mut c_in = input_width;
            for (i, &w) in config.predictor_convs.iter().enumerate() {
                convs.push(PointConvParams::new(
                    &mut params,
                    &format!("predictor.l{l}.conv{i}"),
                    c_in,
                    w,
                    &config.weight_hidden,
                    config.conv_mid,
                    config.k_conv,
                    slope,
                    &mut rng,
                ));
                c_in = w;
            }
            let head = MlpParams::with_zero_output(
                &mut params,
                &format!("predictor.l{l}.head"),
                &[c_in, config.predictor_hidden, 3],
                slope,
                &mut rng,
            );
            levels.push(LevelParams {
                cost,
                predictor: PredictorParams {
                    convs,
                    head,
                    input_width,
                },
            });
        }

        Ok(Self {
            config,
            params,
            pyramid,
            levels,
        })
    }

    pub fn level_count(&self) -> usize {
        self.config.levels
    }

    pub fn predictor(&self, level: usize) -> &PredictorParams {
        &self.levels[level - 1].predictor
    }

    pub fn cost_params(&self, level: usize) -> &CostVolumeParams {
        &self.levels[level - 1].cost
    }

    /// Sets the final layer of the level's flow head to zero.
    pub fn zero_head(&mut self, level: usize) {
        let last = self.levels[level - 1]
            .predictor
            .head
            .layers
            .last()
            .unwrap()
            .clone();
        self.params.get_mut(last.weight).data_mut().fill(0.0);
        self.params.get_mut(last.bias).data_mut().fill(0.0);
    }

    /// Replaces every flow head's final layer with fresh uniform weights so
    /// the output depends on all parameters.
    pub fn randomize_heads(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for level in &self.levels {
            let last = level.predictor.head.layers.last().unwrap();
            let w = xavier_uniform(&mut rng, last.out_dim, last.in_dim);
            *self.params.get_mut(last.weight) = w;
        }
    }

    pub fn check_input(&self, cloud: &PointCloud, what: &'static str) -> Result<()> {
        let required = self.config.min_points();
        if cloud.len() < required {
            return Err(Error::TooFewPoints {
                what,
                required,
                actual: cloud.len(),
            });
        }
        Ok(())
    }

    pub fn build_pyramid(&self, ctx: &Ctx, cloud: &PointCloud) -> Result<Pyramid> {
        self.check_input(cloud, "pyramid input")?;
        let g = ctx.graph;
        let slope = self.config.leaky_slope;
        let mut levels = vec![FeatureCloud {
            positions: cloud.clone(),
            features: g.leaf(cloud.to_tensor()),
        }];
        let mut sample_maps = Vec::with_capacity(self.pyramid.len());
        for lp in &self.pyramid {
            let prev = levels.last().unwrap();
            let n_prev = prev.positions.len();
            let m = n_prev.div_ceil(DOWNSAMPLE_FACTOR);
            let idx = furthest_point_sample(&prev.positions, m, self.config.fps_start % n_prev)?;
            let centers = prev.positions.select(&idx);
            let nbrs = knn(&centers, &prev.positions, lp.conv.k.min(n_prev))?;
            let conv = pointconv(ctx, &centers, prev, &nbrs, &lp.conv)?;
            let features = per_point_linear(ctx, conv.features, &lp.linear, slope)?;
            levels.push(FeatureCloud {
                positions: centers,
                features,
            });
            sample_maps.push(idx);
        }
        // Top-down pass: concatenate each coarser level's upsampled feature.
        for l in (1..self.pyramid.len()).rev() {
            if let Some(merge) = &self.pyramid[l - 1].merge {
                let coarse = &levels[l + 1];
                let k = self.config.k_upsample.min(coarse.positions.len());
                let up = interpolate_idw(
                    g,
                    &coarse.positions,
                    coarse.features,
                    &levels[l].positions,
                    k,
                )?;
                let up = per_point_linear(ctx, up, merge, slope)?;
                levels[l].features = g.concat(&[levels[l].features, up])?;
            }
        }
        Ok(Pyramid {
            levels,
            sample_maps,
        })
    }

    /// One predictor: concatenated inputs, PointConv stack over the level's
    /// own neighbourhoods, MLP head. Returns the total flow (upsampled flow
    /// plus residual), the residual, and the second-last layer's activations.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_flow_level(
        &self,
        ctx: &Ctx,
        level: usize,
        positions: &PointCloud,
        p_feats: Var,
        cost: Var,
        up_flow: Option<Var>,
        up_pred_feat: Option<Var>,
    ) -> Result<(Var, Var, Var)> {
        let g = ctx.graph;
        let pred = &self.levels[level - 1].predictor;
        let mut inputs = vec![p_feats, cost];
        inputs.extend(up_flow);
        inputs.extend(up_pred_feat);
        let mut x = g.concat(&inputs)?;
        let width = g.with_value(x, Tensor::cols);
        if width != pred.input_width {
            return Err(Error::invalid(format!(
                "predictor at level {level} expects {} input channels, got {width}",
                pred.input_width
            )));
        }
        let n = positions.len();
        let nbrs = knn(positions, positions, self.config.k_conv.min(n))?;
        for conv in &pred.convs {
            let src = FeatureCloud {
                positions: positions.clone(),
                features: x,
            };
            x = pointconv(ctx, positions, &src, &nbrs, conv)?.features;
        }
        let (residual, hidden) = pred.head.forward_with_hidden(ctx, x)?;
        let flow = match up_flow {
            Some(up) => g.add(up, residual)?,
            None => residual,
        };
        Ok((flow, residual, hidden))
    }

    pub fn forward(&self, ctx: &Ctx, p: &PointCloud, q: &PointCloud) -> Result<ForwardOutput> {
        self.forward_timed(ctx, p, q, None)
    }

    pub fn forward_timed(
        &self,
        ctx: &Ctx,
        p: &PointCloud,
        q: &PointCloud,
        timings: Option<&mut Timings>,
    ) -> Result<ForwardOutput> {
        self.check_input(p, "first cloud")?;
        self.check_input(q, "second cloud")?;
        let g = ctx.graph;
        let mut timer = Timer { timings };
        let prev_scope = g.set_scope("feature pyramid");
        let (pp, qp) = timer.time(
            |t| &mut t.feature_pyramid,
            || -> Result<_> { Ok((self.build_pyramid(ctx, p)?, self.build_pyramid(ctx, q)?)) },
        )?;

        let top = self.config.levels - 1;
        let mut flows: Vec<Option<Var>> = vec![None; top + 1];
        let mut residuals = vec![None; top];
        let mut upsampled = vec![None; top];
        let mut cost_stats = vec![
            CostVolumeStats {
                pair_terms_per_point: vec![],
                cost_evaluations: 0
            };
            top
        ];
        let mut pred_feat: Option<Var> = None;

        for l in (1..=top).rev() {
            let p_level = &pp.levels[l];
            let q_level = &qp.levels[l];
            let p_pos = g.leaf(p_level.positions.to_tensor());

            g.set_scope("upsample + warp");
            let (up_flow, up_feat, warped) = timer.time(
                |t| &mut t.upsample_warp,
                || -> Result<_> {
                    if l == top {
                        return Ok((None, None, p_pos));
                    }
                    let coarse = &pp.levels[l + 1].positions;
                    let k = self.config.k_upsample.min(coarse.len());
                    let coarse_flow = flows[l + 1].expect("coarser flow");
                    let up = interpolate_idw(g, coarse, coarse_flow, &p_level.positions, k)?;
                    let feat = match (self.config.predictor_feature, pred_feat) {
                        (true, Some(h)) => {
                            Some(interpolate_idw(g, coarse, h, &p_level.positions, k)?)
                        }
                        _ => None,
                    };
                    let warped = crate::geom::warp(g, p_pos, up)?;
                    Ok((Some(up), feat, warped))
                },
            )?;

            g.set_scope("cost volume");
            let cv = timer.time(
                |t| &mut t.cost_volume,
                || {
                    let mut params = self.levels[l - 1].cost.clone();
                    params.k = params
                        .k
                        .min(p_level.positions.len())
                        .min(q_level.positions.len());
                    let pv = CloudVars {
                        positions: warped,
                        features: p_level.features,
                    };
                    let qv = CloudVars {
                        positions: g.leaf(q_level.positions.to_tensor()),
                        features: q_level.features,
                    };
                    cost_volume(ctx, pv, qv, &params)
                },
            )?;

            g.set_scope("scene flow predictor");
            let (flow, residual, hidden) = timer.time(
                |t| &mut t.predictor,
                || {
                    self.predict_flow_level(
                        ctx,
                        l,
                        &p_level.positions,
                        p_level.features,
                        cv.values,
                        up_flow,
                        up_feat,
                    )
                },
            )?;
            flows[l] = Some(flow);
            residuals[l - 1] = Some(residual);
            upsampled[l - 1] = up_flow;
            cost_stats[l - 1] = cv.stats;
            pred_feat = Some(hidden);
        }

        g.set_scope("upsample + warp");
        let full = timer.time(
            |t| &mut t.upsample_warp,
            || {
                let coarse = &pp.levels[1].positions;
                interpolate_idw(
                    g,
                    coarse,
                    flows[1].unwrap(),
                    p,
                    self.config.k_upsample.min(coarse.len()),
                )
            },
        )?;
        flows[0] = Some(full);
        g.set_scope(prev_scope);

        Ok(ForwardOutput {
            flows: FlowPyramid {
                levels: flows.into_iter().map(Option::unwrap).collect(),
            },
            p: pp,
            q: qp,
            residuals: residuals.into_iter().map(Option::unwrap).collect(),
            upsampled,
            cost_stats,
        })
    }

    /// Full-resolution flow for `p` without recording gradients for later use.
    pub fn infer(&self, p: &PointCloud, q: &PointCloud) -> Result<SceneFlow> {
        let g = Graph::new();
        let ctx = self.params.bind(&g);
        let out = self.forward(&ctx, p, q)?;
        SceneFlow::from_tensor(&g.value(out.flows.finest()))
    }

    /// Wall-clock time of each network component for one forward pass.
    pub fn component_timings(&self, p: &PointCloud, q: &PointCloud) -> Result<Timings> {
        let g = Graph::new();
        let ctx = self.params.bind(&g);
        let mut t = Timings::default();
        self.forward_timed(&ctx, p, q, Some(&mut t))?;
        Ok(t)
    }
}

/// Subsamples a full-resolution field down every pyramid level via the
/// sample maps, finest first.
pub fn subsample_levels(flow: &SceneFlow, pyramid: &Pyramid) -> Vec<SceneFlow> {
    let mut out = vec![flow.clone()];
    for map in &pyramid.sample_maps {
        let next = out.last().unwrap().select(map);
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests;
