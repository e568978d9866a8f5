//! Synthetic pairs, flow metrics, the optimiser and training loop, and the
//! ablation driver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::geom::{add3, sub3, PointCloud, SceneFlow};
use crate::losses::{self_supervised_loss, supervised_loss, LossConfig};
use crate::network::{subsample_levels, Network, NetworkConfig};

mod gradsuite;
pub use gradsuite::{
    gradcheck_network_config, gradient_suite, ComponentCheck, COMPONENTS, COMPONENT_TOLERANCE,
    FORWARD_TOLERANCE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    UniformBox,
    SphereShell,
    PlanarGrid,
    MultiObject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Motion {
    Translation {
        t: [f64; 3],
    },
    /// Rotation of `angle` radians about `axis`, then translation by `t`.
    Rigid {
        axis: [f64; 3],
        angle: f64,
        t: [f64; 3],
    },
    /// An independent random rigid motion per object.
    PerObjectRigid {
        max_angle: f64,
        max_translation: f64,
    },
    /// `p + amplitude * (sin(w y), sin(w z), sin(w x))`.
    SmoothDeformation {
        amplitude: f64,
        frequency: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_points: usize,
    pub shape: Shape,
    pub motion: Motion,
    pub noise_sigma: f64,
    /// Object count for `multi-object` clouds and `per-object-rigid` motion.
    pub objects: usize,
    /// Taken from the command line, never from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_points: 256,
            shape: Shape::UniformBox,
            motion: Motion::Rigid {
                axis: [0.0, 0.0, 1.0],
                angle: 0.1,
                t: [0.1, 0.05, 0.0],
            },
            noise_sigma: 0.0,
            objects: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, min_points: usize) -> Result<()> {
        if self.n_points < min_points {
            return Err(Error::Config(format!(
                "data.n_points must be >= {min_points} for the configured pyramid, got {}",
                self.n_points
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(
                "data.noise_sigma must be finite and >= 0".into(),
            ));
        }
        if self.objects == 0 {
            return Err(Error::Config("data.objects must be >= 1".into()));
        }
        let finite = match &self.motion {
            Motion::Translation { t } => t.iter().all(|v| v.is_finite()),
            Motion::Rigid { axis, angle, t } => {
                if axis.iter().all(|&v| v == 0.0) {
                    return Err(Error::Config("data.motion.axis must be non-zero".into()));
                }
                axis.iter().chain(t).chain([angle]).all(|v| v.is_finite())
            }
            Motion::PerObjectRigid {
                max_angle,
                max_translation,
            } => max_angle.is_finite() && max_translation.is_finite(),
            Motion::SmoothDeformation {
                amplitude,
                frequency,
            } => amplitude.is_finite() && frequency.is_finite(),
        };
        if !finite {
            return Err(Error::Config("data.motion values must be finite".into()));
        }
        Ok(())
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub p: PointCloud,
    pub q: PointCloud,
    pub gt: Option<SceneFlow>,
}

/// Rotation matrix about a (normalised) axis.
pub fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|v| v / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

pub fn apply(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    r.map(|row| row[0] * p[0] + row[1] * p[1] + row[2] * p[2])
}

fn sample_shape(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Vec<usize>) {
    let n = spec.n_points;
    let u = |rng: &mut ChaCha8Rng| rng.gen_range(-1.0..1.0);
    match spec.shape {
        Shape::UniformBox => (
            (0..n).map(|_| [u(rng), u(rng), u(rng)]).collect(),
            slab_labels(n, spec.objects),
        ),
        Shape::SphereShell => {
            let pts = (0..n)
                .map(|_| loop {
                    let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
                    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if r > 1e-9 {
                        break v.map(|c| c / r);
                    }
                })
                .collect();
            (pts, slab_labels(n, spec.objects))
        }
        Shape::PlanarGrid => {
            let side = (n as f64).sqrt().ceil() as usize;
            let step = 2.0 / side.max(2) as f64;
            let pts = (0..n)
                .map(|i| {
                    [
                        -1.0 + step * (i % side) as f64,
                        -1.0 + step * (i / side) as f64,
                        0.0,
                    ]
                })
                .collect();
            (pts, slab_labels(n, spec.objects))
        }
        Shape::MultiObject => {
            let k = spec.objects;
            let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            let pts = labels
                .iter()
                .map(|&o| {
                    let cx = if k == 1 {
                        0.0
                    } else {
                        -1.0 + 2.0 * o as f64 / (k - 1) as f64
                    };
                    [cx + 0.3 * u(rng), 0.3 * u(rng), 0.3 * u(rng)]
                })
                .collect();
            (pts, labels)
        }
    }
}

// Objects for shapes without natural parts: equal-count runs of indices.
fn slab_labels(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i * k / n).collect()
}

/// Deterministic `(P, Q, gt)` with `Q = P + gt` plus optional noise on `Q`.
pub fn synth_pair(spec: &SynthSpec) -> Result<Pair> {
    spec.validate(1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (pts, labels) = sample_shape(spec, &mut rng);
    let moved: Vec<[f64; 3]> = match &spec.motion {
        Motion::Translation { t } => pts.iter().map(|&p| add3(p, *t)).collect(),
        Motion::Rigid { axis, angle, t } => {
            let r = rotation(*axis, *angle);
            pts.iter().map(|&p| add3(apply(&r, p), *t)).collect()
        }
        Motion::PerObjectRigid {
            max_angle,
            max_translation,
        } => {
            let motions: Vec<_> = (0..spec.objects)
                .map(|_| {
                    let axis = [0; 3].map(|_| StandardNormal.sample(&mut rng));
                    let angle = rng.gen_range(-1.0..=1.0) * max_angle;
                    let t = [0; 3].map(|_| rng.gen_range(-1.0..=1.0) * max_translation);
                    (rotation(axis, angle), t)
                })
                .collect();
            pts.iter()
                .zip(&labels)
                .map(|(&p, &o)| add3(apply(&motions[o].0, p), motions[o].1))
                .collect()
        }
        Motion::SmoothDeformation {
            amplitude,
            frequency,
        } => pts
            .iter()
            .map(|&p| {
                let d = [
                    (frequency * p[1]).sin(),
                    (frequency * p[2]).sin(),
                    (frequency * p[0]).sin(),
                ];
                add3(p, d.map(|v| amplitude * v))
            })
            .collect(),
    };
    let gt: Vec<[f64; 3]> = moved.iter().zip(&pts).map(|(&m, &p)| sub3(m, p)).collect();
    let q = if spec.noise_sigma > 0.0 {
        let noise =
            Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        moved
            .iter()
            .map(|&m| add3(m, [0; 3].map(|_| noise.sample(&mut rng))))
            .collect()
    } else {
        moved
    };
    Ok(Pair {
        p: PointCloud::new(pts)?,
        q: PointCloud::new(q)?,
        gt: Some(SceneFlow::new(gt)?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlowMetrics {
    pub epe3d: f64,
    pub acc_strict: f64,
    pub acc_relaxed: f64,
    pub outlier: f64,
}

/// Relative error denominators use `|gt| + 1e-4`.
pub const RELATIVE_EPS: f64 = 1e-4;

pub fn evaluate(pred: &SceneFlow, gt: &SceneFlow) -> Result<FlowMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "evaluate: {} predicted vectors vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let (mut epe, mut strict, mut relaxed, mut outlier) = (0.0, 0.0, 0.0, 0.0);
    for (p, g) in pred.vectors().iter().zip(gt.vectors()) {
        let e = crate::geom::sq_dist(*p, *g).sqrt();
        let rel = e / (crate::geom::sq_dist(*g, [0.0; 3]).sqrt() + RELATIVE_EPS);
        epe += e;
        strict += f64::from(u8::from(e < 0.05 || rel < 0.05));
        relaxed += f64::from(u8::from(e < 0.1 || rel < 0.1));
        outlier += f64::from(u8::from(e > 0.3 || rel > 0.1));
    }
    Ok(FlowMetrics {
        epe3d: epe / n,
        acc_strict: strict / n,
        acc_relaxed: relaxed / n,
        outlier: outlier / n,
    })
}

pub fn mean_norm(flow: &SceneFlow) -> f64 {
    let s: f64 = flow
        .vectors()
        .iter()
        .map(|v| crate::geom::sq_dist(*v, [0.0; 3]).sqrt())
        .sum();
    s / flow.len() as f64
}

/// Adaptive-moment optimiser state, one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let w = params.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, &g) in grads[i].data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / b1t;
                let vhat = v[j] / b2t;
                w[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Supervised,
    SelfSupervised,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "self-supervised" => Ok(Self::SelfSupervised),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?} (expected supervised or self-supervised)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub loss: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 200,
            checkpoint_every: 50,
            loss: LossMode::SelfSupervised,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("train.lr must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Finest-level error before the update, when ground truth is known.
    pub epe3d: Option<f64>,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        match self.epe3d {
            Some(e) => format!("{},{},{}", self.step, self.loss, e),
            None => format!("{},{},", self.step, self.loss),
        }
    }
}

pub const LOG_HEADER: &str = "step,loss,epe3d";

/// Network plus optimiser state and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub network: Network,
    pub adam: Adam,
    pub step: u64,
    pub loss: LossConfig,
    pub mode: LossMode,
}

impl Trainer {
    pub fn new(network: Network, loss: LossConfig, mode: LossMode, lr: f64) -> Result<Self> {
        loss.validate(network.level_count())?;
        let adam = Adam::new(&network.params, lr);
        Ok(Self {
            network,
            adam,
            step: 0,
            loss,
            mode,
        })
    }

    /// Loss and its parameter gradients for one pair, without updating.
    pub fn loss_and_grads(&self, pair: &Pair) -> Result<(f64, Vec<Tensor>, Option<f64>)> {
        let g = Graph::new();
        let ctx = self.network.params.bind(&g);
        let out = self.network.forward(&ctx, &pair.p, &pair.q).map_err(|e| {
            match g.first_non_finite() {
                Some(_) => non_finite(&g),
                None => e,
            }
        })?;
        let prev = g.set_scope("loss");
        let loss = match self.mode {
            LossMode::Supervised => {
                let gt = pair
                    .gt
                    .as_ref()
                    .ok_or_else(|| Error::invalid("supervised training needs ground-truth flow"))?;
                let targets = subsample_levels(gt, &out.p);
                supervised_loss(&g, &out.flows.levels, &targets, &self.loss.weights.alpha)?
            }
            LossMode::SelfSupervised => {
                self_supervised_loss(&g, &out.p, &out.q, &out.flows, &self.loss)?
            }
        };
        g.set_scope(prev);
        let value = g.item(loss);
        let epe = match &pair.gt {
            Some(gt) => {
                Some(evaluate(&SceneFlow::from_tensor(&g.value(out.flows.finest()))?, gt)?.epe3d)
            }
            None => None,
        };
        if !value.is_finite() {
            return Err(non_finite(&g));
        }
        let grads = ctx.param_grads(&g.backward(loss)?);
        if grads.iter().any(|t| !t.all_finite()) {
            return Err(non_finite(&g));
        }
        Ok((value, grads, epe))
    }

    pub fn step(&mut self, pair: &Pair) -> Result<StepRecord> {
        let (loss, grads, epe3d) = self.loss_and_grads(pair)?;
        self.adam.step(&mut self.network.params, &grads);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            epe3d,
        })
    }

    /// Runs `steps` updates cycling through `pairs`; `on_step` sees every
    /// record after the update and may checkpoint.
    pub fn run(
        &mut self,
        pairs: &[Pair],
        steps: u64,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        if pairs.is_empty() {
            return Err(Error::invalid("training needs at least one pair"));
        }
        let mut log = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let pair = &pairs[(self.step % pairs.len() as u64) as usize];
            let rec = self.step(pair)?;
            on_step(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }
}

fn non_finite(g: &Graph) -> Error {
    match g.first_non_finite() {
        Some((scope, primitive)) => Error::NonFinite {
            component: scope.to_string(),
            primitive,
        },
        None => Error::NonFinite {
            component: "backward".into(),
            primitive: crate::autodiff::Primitive::Leaf,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub data: SynthSpec,
    pub lr: f64,
    pub steps: u64,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    /// Network initialisations averaged per configuration.
    pub repeats: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            data: SynthSpec::default(),
            lr: 1e-3,
            steps: 100,
            train_pairs: 4,
            eval_pairs: 2,
            repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub upsampled_feature: bool,
    pub predictor_feature: bool,
    pub epe3d: f64,
}

impl AblationRow {
    pub fn label(&self) -> &'static str {
        match (self.upsampled_feature, self.predictor_feature) {
            (false, false) => "neither",
            (true, false) => "upsampled feature",
            (true, true) => "upsampled + predictor feature",
            (false, true) => "predictor feature",
        }
    }
}

/// Pairs with seeds `seed, seed + 1, ...`.
pub fn synth_pairs(spec: &SynthSpec, seed: u64, count: usize) -> Result<Vec<Pair>> {
    (0..count as u64)
        .map(|i| {
            let s = SynthSpec {
                seed: seed.wrapping_add(i),
                ..spec.clone()
            };
            synth_pair(&s)
        })
        .collect()
}

/// Trains the three feature configurations with supervision on identical
/// data and reports held-out finest-level EPE3D for each.
pub fn ablate(cfg: &AblationConfig, seed: u64) -> Result<Vec<AblationRow>> {
    cfg.network.validate()?;
    cfg.data.validate(cfg.network.min_points())?;
    let train = synth_pairs(&cfg.data, seed, cfg.train_pairs.max(1))?;
    let held_out = synth_pairs(
        &cfg.data,
        seed.wrapping_add(1_000_000),
        cfg.eval_pairs.max(1),
    )?;
    let mut rows = Vec::new();
    for (up, pred) in [(false, false), (true, false), (true, true)] {
        let net_cfg = NetworkConfig {
            upsampled_feature: up,
            predictor_feature: pred,
            ..cfg.network.clone()
        };
        let repeats = cfg.repeats.max(1);
        let mut epe = 0.0;
        for r in 0..repeats {
            let net = Network::new(net_cfg.clone(), seed.wrapping_add(r))?;
            let mut trainer = Trainer::new(net, cfg.loss.clone(), LossMode::Supervised, cfg.lr)?;
            trainer.run(&train, cfg.steps, |_, _| Ok(()))?;
            for pair in &held_out {
                let flow = trainer.network.infer(&pair.p, &pair.q)?;
                epe += evaluate(&flow, pair.gt.as_ref().unwrap())?.epe3d;
            }
        }
        rows.push(AblationRow {
            upsampled_feature: up,
            predictor_feature: pred,
            epe3d: epe / (held_out.len() as u64 * repeats) as f64,
        });
    }
    Ok(rows)
}

/// Least-squares line through `(n1, milliseconds)` samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingFit {
    pub points: Vec<(usize, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(points: &[(usize, f64)]) -> ScalingFit {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    ScalingFit {
        points: points.to_vec(),
        slope,
        intercept: my - slope * mx,
        r2,
    }
}

/// Wall-clock of one cost-volume forward for each first-cloud size in
/// `sizes` (second cloud fixed at `n2` points, fixed `k`), best of `repeats`.
pub fn cost_volume_scaling(
    sizes: &[usize],
    n2: usize,
    k: usize,
    repeats: usize,
    seed: u64,
) -> Result<ScalingFit> {
    use crate::costvolume::{cost_volume_from_tensors, CostVolumeParams};
    if sizes.len() < 2 || repeats == 0 {
        return Err(Error::invalid(
            "scaling fit needs at least two sizes and one repeat",
        ));
    }
    let (c, d) = (16, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let cv = CostVolumeParams::new(&mut params, "cv", c, d, &[d], &[8], k, 0.1, &mut rng);
    let mut cloud = |n: usize, width: usize| {
        Tensor::matrix(
            n,
            width,
            (0..n * width).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .expect("shape")
    };
    let (q_pos, q_feat) = (cloud(n2, 3), cloud(n2, c));
    let mut points = Vec::with_capacity(sizes.len());
    for &n1 in sizes {
        let (p_pos, p_feat) = (cloud(n1, 3), cloud(n1, c));
        let mut best = f64::INFINITY;
        for _ in 0..repeats {
            let g = Graph::new();
            let ctx = params.bind(&g);
            let start = std::time::Instant::now();
            cost_volume_from_tensors(&ctx, &p_pos, &p_feat, &q_pos, &q_feat, &cv)?;
            best = best.min(start.elapsed().as_secs_f64() * 1e3);
        }
        points.push((n1, best));
    }
    Ok(linear_fit(&points))
}
