use rand::Rng;

use super::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Ctx<'g> {
        let vars = self.tensors.iter().map(|t| graph.leaf(t.clone())).collect();
        Ctx { graph, vars }
    }
}

/// A graph plus the leaves bound to a [`ParamSet`].
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    vars: Vec<Var>,
}

impl<'g> Ctx<'g> {
    /// Wraps leaves created elsewhere, in [`ParamSet`] order.
    pub fn from_vars(graph: &'g Graph, vars: Vec<Var>) -> Self {
        Self { graph, vars }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter, in [`ParamSet`] order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get(v)).collect()
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::matrix(fan_out, fan_in, data).expect("dims")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `out x in`.
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            xavier_uniform(rng, out_dim, in_dim),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeroed(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            Tensor::zeros(vec![out_dim, in_dim]),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    fn check_width(&self, ctx: &Ctx, x: Var) -> Result<()> {
        let shape = ctx.graph.shape(x);
        if shape.last().copied() != Some(self.in_dim) {
            return Err(Error::invalid(format!(
                "linear layer expects input width {}, got shape {:?}",
                self.in_dim, shape
            )));
        }
        Ok(())
    }

    /// `x * W^T + b`, no activation.
    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        self.check_width(ctx, x)?;
        let g = ctx.graph;
        let y = g.matmul_transposed(x, ctx.param(self.weight))?;
        g.add_bias(y, ctx.param(self.bias))
    }
}

/// Per-point (1x1 convolution style) linear map followed by the leaky rectifier.
pub fn per_point_linear(ctx: &Ctx, features: Var, layer: &LinearLayer, slope: f64) -> Result<Var> {
    let y = layer.forward(ctx, features)?;
    ctx.graph.leaky_relu(y, slope)
}

/// Multi-layer perceptron; every layer but the last is followed by a leaky rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<LinearLayer>,
    pub slope: f64,
}

impl MlpParams {
    /// `widths` lists input width followed by every layer's output width.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, slope }
    }

    /// Same as [`MlpParams::new`] but with the final layer's weights and bias at zero.
    pub fn with_zero_output(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let name = format!("{name}.{i}");
                if i == last {
                    LinearLayer::zeroed(params, &name, w[0], w[1])
                } else {
                    LinearLayer::new(params, &name, w[0], w[1], rng)
                }
            })
            .collect();
        Self { layers, slope }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::invalid(format!(
                    "MLP layer widths do not chain: {} -> {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        self.forward_with_hidden(ctx, x).map(|(y, _)| y)
    }

    /// Runs the MLP and also returns the input of the final layer (the last
    /// hidden activation, or `x` itself for a single-layer MLP).
    pub fn forward_with_hidden(&self, ctx: &Ctx, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            if i == last {
                let y = layer.forward(ctx, h)?;
                return Ok((y, h));
            }
            h = per_point_linear(ctx, h, layer, self.slope)?;
        }
        unreachable!("MLP has at least one layer")
    }
}

/// Applies an MLP to every row of `x`.
pub fn mlp_forward(ctx: &Ctx, params: &MlpParams, x: Var) -> Result<Var> {
    params.forward(ctx, x)
}
