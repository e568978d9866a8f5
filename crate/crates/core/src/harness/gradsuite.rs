//! Finite-difference checks of every differentiable component on small
//! seeded instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{mlp_forward, Ctx, Graph, MlpParams, ParamSet, Primitive, Tensor, Var};
use crate::costvolume::{cost_volume, CloudVars, CostVolumeParams};
use crate::error::Result;
use crate::geom::{interpolate_idw_at, knn, PointCloud, SceneFlow};
use crate::gradcheck::{check_gradients_on, FiniteDiff, GradCheckReport};
use crate::losses::{
    chamfer_loss, laplacian_reg, loss_neighbors, smoothness_loss, supervised_loss,
};
use crate::network::{Network, NetworkConfig};
use crate::pointconv::{pointconv, FeatureCloud, PointConvParams};

pub const COMPONENT_TOLERANCE: f64 = 1e-4;
pub const FORWARD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
    pub instances: u64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0)))
        .collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(rand_points(rng, n)).unwrap()
}

/// Parameter tensors with biases made non-zero so they are exercised.
fn param_inputs(ps: &ParamSet, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    ps.iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            if t.shape().len() == 1 {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
            t
        })
        .collect()
}

// A fixed random projection keeps the scalar root sensitive to every entry.
fn project(g: &Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    g.sum(g.mul(y, g.leaf(w))?)
}

struct Instance {
    inputs: Vec<Tensor>,
    #[allow(clippy::type_complexity)]
    f: Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>,
    /// Inputs to probe; `None` probes all.
    wrt: Option<Vec<usize>>,
    max_probes: Option<usize>,
}

fn mlp_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let mlp = MlpParams::new(&mut ps, "m", &[4, 6, 3], 0.1, &mut rng);
    let mut inputs = param_inputs(&ps, &mut rng);
    inputs.push(rand_tensor(&mut rng, 7, 4));
    let np = ps.len();
    Instance {
        inputs,
        f: Box::new(move |g, v| {
            let ctx = Ctx::from_vars(g, v[..np].to_vec());
            project(g, mlp_forward(&ctx, &mlp, v[np])?, seed)
        }),
        wrt: None,
        max_probes: None,
    }
}

fn idw_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse = cloud(&mut rng, 10);
    let inputs = vec![
        rand_tensor(&mut rng, 10, 3),
        Tensor::from_points(&rand_points(&mut rng, 16)),
    ];
    Instance {
        inputs,
        f: Box::new(move |g, v| project(g, interpolate_idw_at(g, &coarse, v[0], v[1], 3)?, seed)),
        wrt: None,
        max_probes: None,
    }
}

fn pointconv_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let conv = PointConvParams::new(&mut ps, "c", 3, 4, &[5], 3, 4, 0.1, &mut rng);
    let src = cloud(&mut rng, 16);
    let centers = src.select(&[0, 3, 7, 11, 14]);
    let nbrs = knn(&centers, &src, 4).unwrap();
    let mut inputs = param_inputs(&ps, &mut rng);
    inputs.push(rand_tensor(&mut rng, 16, 3));
    let np = ps.len();
    Instance {
        inputs,
        f: Box::new(move |g, v| {
            let ctx = Ctx::from_vars(g, v[..np].to_vec());
            let fc = FeatureCloud {
                positions: src.clone(),
                features: v[np],
            };
            project(
                g,
                pointconv(&ctx, &centers, &fc, &nbrs, &conv)?.features,
                seed,
            )
        }),
        wrt: None,
        max_probes: None,
    }
}

fn cost_volume_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let params = CostVolumeParams::new(&mut ps, "cv", 3, 4, &[4], &[4], 3, 0.1, &mut rng);
    let mut inputs = param_inputs(&ps, &mut rng);
    let np = ps.len();
    inputs.extend([
        Tensor::from_points(&rand_points(&mut rng, 10)),
        rand_tensor(&mut rng, 10, 3),
        Tensor::from_points(&rand_points(&mut rng, 12)),
        rand_tensor(&mut rng, 12, 3),
    ]);
    Instance {
        inputs,
        f: Box::new(move |g, v| {
            let ctx = Ctx::from_vars(g, v[..np].to_vec());
            let p = CloudVars {
                positions: v[np],
                features: v[np + 1],
            };
            let q = CloudVars {
                positions: v[np + 2],
                features: v[np + 3],
            };
            project(g, cost_volume(&ctx, p, q, &params)?.values, seed)
        }),
        wrt: None,
        max_probes: None,
    }
}

fn supervised_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = vec![
        SceneFlow::new(rand_points(&mut rng, 12)).unwrap(),
        SceneFlow::new(rand_points(&mut rng, 3)).unwrap(),
    ];
    let inputs = vec![
        Tensor::from_points(&rand_points(&mut rng, 12)),
        Tensor::from_points(&rand_points(&mut rng, 3)),
    ];
    Instance {
        inputs,
        f: Box::new(move |g, v| supervised_loss(g, v, &gt, &[0.5, 1.5])),
        wrt: None,
        max_probes: None,
    }
}

fn chamfer_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        Tensor::from_points(&rand_points(&mut rng, 9)),
        Tensor::from_points(&rand_points(&mut rng, 11)),
    ];
    Instance {
        inputs,
        f: Box::new(|g, v| chamfer_loss(g, v[0], v[1])),
        wrt: None,
        max_probes: None,
    }
}

fn smoothness_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cloud(&mut rng, 16);
    let nbrs = loss_neighbors(&c, 5).unwrap();
    Instance {
        inputs: vec![Tensor::from_points(&rand_points(&mut rng, 16))],
        f: Box::new(move |g, v| smoothness_loss(g, v[0], &nbrs)),
        wrt: None,
        max_probes: None,
    }
}

fn laplacian_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = cloud(&mut rng, 16);
    Instance {
        inputs: vec![Tensor::from_points(&rand_points(&mut rng, 14))],
        f: Box::new(move |g, v| laplacian_reg(g, v[0], &q, 4, 3)),
        wrt: None,
        max_probes: None,
    }
}

pub fn gradcheck_network_config() -> NetworkConfig {
    NetworkConfig {
        levels: 3,
        widths: vec![6, 8],
        cost_dims: vec![5, 6],
        k_cost: 4,
        k_conv: 4,
        weight_hidden: vec![4],
        conv_mid: 3,
        predictor_convs: vec![8],
        predictor_hidden: 5,
        ..NetworkConfig::default()
    }
}

fn forward_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(gradcheck_network_config(), seed).unwrap();
    net.randomize_heads(seed.wrapping_add(1));
    let p = cloud(&mut rng, 32);
    let t = [0; 3].map(|_| rng.gen_range(-0.05..0.05));
    let q = p.translated(t);
    let inputs: Vec<Tensor> = net.params.iter().map(|(_, t)| t.clone()).collect();
    let weights: Vec<usize> = net
        .params
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| n.ends_with(".weight"))
        .map(|(i, _)| i)
        .collect();
    let wrt = (0..6)
        .map(|_| weights[rng.gen_range(0..weights.len())])
        .collect();
    Instance {
        inputs,
        f: Box::new(move |g, v| {
            let ctx = Ctx::from_vars(g, v.to_vec());
            let out = net.forward(&ctx, &p, &q)?;
            g.sum(out.flows.finest())
        }),
        wrt: Some(wrt),
        max_probes: Some(3),
    }
}

type Builder = fn(u64) -> Instance;

pub const COMPONENTS: [(&str, f64); 9] = [
    ("mlp", COMPONENT_TOLERANCE),
    ("idw interpolation", COMPONENT_TOLERANCE),
    ("pointconv", COMPONENT_TOLERANCE),
    ("cost volume", COMPONENT_TOLERANCE),
    ("supervised loss", COMPONENT_TOLERANCE),
    ("chamfer loss", COMPONENT_TOLERANCE),
    ("smoothness loss", COMPONENT_TOLERANCE),
    ("laplacian regularizer", COMPONENT_TOLERANCE),
    ("full forward", FORWARD_TOLERANCE),
];

const BUILDERS: [Builder; 9] = [
    mlp_instance,
    idw_instance,
    pointconv_instance,
    cost_volume_instance,
    supervised_instance,
    chamfer_instance,
    smoothness_instance,
    laplacian_instance,
    forward_instance,
];

/// Runs every component over `instances` seeded instances derived from
/// `seed`. With `fault`, that primitive's adjoint is corrupted in the
/// analytic pass, which must make some component fail.
pub fn gradient_suite(
    seed: u64,
    instances: u64,
    fault: Option<Primitive>,
) -> Result<Vec<ComponentCheck>> {
    let mut out = Vec::new();
    for (c, ((name, tol), build)) in COMPONENTS.iter().zip(BUILDERS).enumerate() {
        let mut report = GradCheckReport::empty();
        for i in 0..instances {
            let inst_seed = seed.wrapping_mul(1000).wrapping_add(100 * c as u64 + i);
            let inst = build(inst_seed);
            let wrt = inst.wrt.unwrap_or_else(|| (0..inst.inputs.len()).collect());
            let opts = FiniteDiff {
                max_probes: inst.max_probes,
                seed: inst_seed,
                ..FiniteDiff::default()
            };
            let r = check_gradients_on(&inst.inputs, &wrt, &inst.f, &opts, fault)?;
            report.merge(&r);
        }
        out.push(ComponentCheck {
            component: name,
            max_rel_error: report.max_rel_error,
            tolerance: *tol,
            probes: report.probes,
            instances,
        });
    }
    Ok(out)
}
