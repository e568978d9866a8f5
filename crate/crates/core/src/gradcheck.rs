//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FiniteDiff {
    pub step: f64,
    /// Entries whose analytic and numeric magnitudes are both below this are
    /// compared absolutely.
    pub floor: f64,
    /// Upper bound on probed entries per input; `None` probes every entry.
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// (input index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.probes += other.probes;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }

    pub fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            probes: 0,
            worst: None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&g, &vars)?;
    let t = g.value(root);
    if !t.is_scalar() {
        return Err(Error::NonScalarRoot(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Compares `backward` against central differences of the scalar `f`
/// with respect to every tensor in `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: &FiniteDiff) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    check_gradients_on(
        inputs,
        &(0..inputs.len()).collect::<Vec<_>>(),
        f,
        opts,
        None,
    )
}

/// Like [`check_gradients`] but only probes `wrt` inputs and can inject an
/// adjoint fault into the analytic pass.
pub fn check_gradients_on<F>(
    inputs: &[Tensor],
    wrt: &[usize],
    f: F,
    opts: &FiniteDiff,
    fault: Option<crate::autodiff::Primitive>,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    if let Some(kind) = fault {
        g.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&g, &vars)?;
    let grads = g.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::empty();
    let mut probe_inputs = inputs.to_vec();
    for &which in wrt {
        let analytic = grads.get(vars[which]);
        let len = inputs[which].len();
        let elems: Vec<usize> = match opts.max_probes {
            Some(m) if m < len => {
                let mut v = sample(&mut rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for e in elems {
            let orig = inputs[which].data()[e];
            probe_inputs[which].data_mut()[e] = orig + opts.step;
            let plus = evaluate(&probe_inputs, &f)?;
            probe_inputs[which].data_mut()[e] = orig - opts.step;
            let minus = evaluate(&probe_inputs, &f)?;
            probe_inputs[which].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let mut err = relative_error(analytic.data()[e], numeric, opts.floor);
            if err.is_nan() {
                err = f64::INFINITY;
            }
            report.probes += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((which, e));
            }
        }
    }
    Ok(report)
}
