use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck::{check_gradients, FiniteDiff};

fn random(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap()
}

#[test]
fn add_is_componentwise() {
    let g = Graph::new();
    let a = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let b = g.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let y = g.add(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 6.0]);
}

#[test]
fn identity_matmul_returns_vector() {
    let g = Graph::new();
    let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let i = g.leaf(eye);
    let v = g.leaf(Tensor::new(vec![3], vec![0.5, -2.0, 7.0]).unwrap());
    let y = g.matmul(i, v).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -2.0, 7.0]);
    assert_eq!(g.shape(y), vec![3]);
}

#[test]
fn concat_shape_arithmetic() {
    let g = Graph::new();
    let a = g.leaf(Tensor::zeros(vec![2, 3]));
    let b = g.leaf(Tensor::zeros(vec![2, 5]));
    let y = g.concat(&[a, b]).unwrap();
    assert_eq!(g.shape(y), vec![2, 8]);
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let g = Graph::new();
    let a = g.leaf(Tensor::zeros(vec![2, 3]));
    let b = g.leaf(Tensor::zeros(vec![3, 2]));
    match g.add(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, Primitive::Add);
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let msg = g.matmul(a, a).unwrap_err().to_string();
    assert!(msg.contains("MatMul") && msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn sqrt_of_negative_is_error() {
    let g = Graph::new();
    let a = g.leaf(Tensor::new(vec![2], vec![4.0, -1.0]).unwrap());
    assert!(matches!(g.sqrt(a), Err(Error::NegativeSqrt(v)) if v == -1.0));
}

#[test]
fn sqrt_adjoint_at_zero_is_zero() {
    let g = Graph::new();
    let a = g.leaf(Tensor::new(vec![2], vec![0.0, 4.0]).unwrap());
    let y = g.sum(g.sqrt(a).unwrap()).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(a).data(), &[0.0, 0.25]);
}

#[test]
fn backward_of_sum_of_squares() {
    let g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.sum(g.mul(x, x).unwrap()).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn unreached_input_has_exact_zero_gradient() {
    let g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let c = g.leaf(Tensor::scalar(5.0));
    let root = g.scale(c, 2.0).unwrap();
    let grads = g.backward(root).unwrap();
    assert!(!grads.reached(x));
    assert_eq!(grads.get(x).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_root_is_error() {
    let g = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn foreign_var_is_rejected() {
    let g1 = Graph::new();
    let g2 = Graph::new();
    let a = g1.leaf(Tensor::scalar(1.0));
    let b = g2.leaf(Tensor::scalar(1.0));
    assert!(matches!(g2.add(a, b), Err(Error::ForeignVar)));
}

#[test]
fn min_ties_route_to_lowest_index() {
    let g = Graph::new();
    let x = g.leaf(Tensor::matrix(2, 3, vec![2.0, 1.0, 1.0, 0.0, 0.0, 3.0]).unwrap());
    let (m, arg) = g.min_last_axis(x).unwrap();
    assert_eq!(arg, vec![1, 0]);
    assert_eq!(g.value(m).data(), &[1.0, 0.0]);
    let grads = g.backward(g.sum(m).unwrap()).unwrap();
    assert_eq!(grads.get(x).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn linearity_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = random(&mut rng, vec![4, 3]);
    let (a, b) = (1.7, -0.4);
    let grad_of = |which: u8| {
        let g = Graph::new();
        let x = g.leaf(x0.clone());
        let f = g.sum(g.square(x).unwrap()).unwrap();
        let h = g.sum(g.leaky_relu(x, 0.1).unwrap()).unwrap();
        let root = match which {
            0 => f,
            1 => h,
            _ => {
                let af = g.scale(f, a).unwrap();
                let bh = g.scale(h, b).unwrap();
                g.add(af, bh).unwrap()
            }
        };
        g.backward(root).unwrap().get(x).into_data()
    };
    let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gf.len() {
        assert!((gc[i] - (a * gf[i] + b * gh[i])).abs() < 1e-12);
    }
}

#[test]
fn fault_injection_corrupts_adjoint() {
    let g = Graph::new();
    g.inject_fault(Primitive::Square);
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let y = g.sum(g.square(x).unwrap()).unwrap();
    assert_eq!(g.backward(y).unwrap().get(x).data(), &[3.0, 6.0]);
}

#[test]
fn non_finite_scope_is_reported() {
    let g = Graph::new();
    g.set_scope("first");
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 1e308]).unwrap());
    g.set_scope("blowup");
    let y = g.scale(x, 10.0).unwrap();
    g.set_scope("after");
    let _ = g.add_scalar(y, 1.0).unwrap();
    assert_eq!(g.first_non_finite(), Some(("blowup", Primitive::Scale)));
}

type Case = (
    &'static str,
    fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    fn(&Graph, &[Var]) -> crate::Result<Var>,
);

fn primitive_cases() -> Vec<Case> {
    vec![
        (
            "add",
            |r| vec![random(r, vec![3, 4]), random(r, vec![3, 4])],
            |g, v| {
                let y = g.add(v[0], v[1])?;
                g.sum(g.square(y)?)
            },
        ),
        (
            "sub",
            |r| vec![random(r, vec![3, 4]), random(r, vec![3, 4])],
            |g, v| {
                let y = g.sub(v[0], v[1])?;
                g.sum(g.square(y)?)
            },
        ),
        (
            "mul",
            |r| vec![random(r, vec![3, 4]), random(r, vec![3, 4])],
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                g.sum(g.square(y)?)
            },
        ),
        (
            "scale+add_scalar",
            |r| vec![random(r, vec![5])],
            |g, v| {
                let y = g.add_scalar(g.scale(v[0], -1.3)?, 0.7)?;
                g.sum(g.square(y)?)
            },
        ),
        (
            "add_bias",
            |r| vec![random(r, vec![3, 4]), random(r, vec![4])],
            |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                g.sum(g.square(y)?)
            },
        ),
        (
            "matmul",
            |r| vec![random(r, vec![3, 4]), random(r, vec![4, 2])],
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                g.sum(g.square(y)?)
            },
        ),
        (
            "matmul_transposed",
            |r| vec![random(r, vec![3, 4]), random(r, vec![5, 4])],
            |g, v| {
                let y = g.matmul_transposed(v[0], v[1])?;
                g.sum(g.square(y)?)
            },
        ),
        (
            "concat",
            |r| vec![random(r, vec![3, 2]), random(r, vec![3, 3])],
            |g, v| {
                let y = g.concat(&[v[0], v[1], v[0]])?;
                let w = g.leaf(Tensor::new(
                    vec![3, 7],
                    (0..21).map(|i| i as f64 * 0.1).collect(),
                )?);
                g.sum(g.mul(g.square(y)?, w)?)
            },
        ),
        (
            "leaky_relu",
            |r| vec![random(r, vec![4, 3])],
            |g, v| {
                let y = g.leaky_relu(v[0], 0.1)?;
                g.sum(g.square(g.add_scalar(y, 0.3)?)?)
            },
        ),
        (
            "mean",
            |r| vec![random(r, vec![4, 3])],
            |g, v| g.mean(g.square(v[0])?),
        ),
        (
            "sum_last_axis",
            |r| vec![random(r, vec![4, 3])],
            |g, v| {
                let y = g.sum_last_axis(v[0])?;
                g.sum(g.square(y)?)
            },
        ),
        (
            "sqrt",
            |r| vec![positive(r, vec![6])],
            |g, v| g.sum(g.sqrt(v[0])?),
        ),
        (
            "recip",
            |r| vec![positive(r, vec![6])],
            |g, v| g.sum(g.recip(v[0])?),
        ),
        (
            "mul_column",
            |r| vec![random(r, vec![4, 3]), random(r, vec![4, 1])],
            |g, v| {
                let y = g.mul_column(v[0], v[1])?;
                g.sum(g.square(y)?)
            },
        ),
        (
            "gather_rows",
            |r| vec![random(r, vec![4, 3])],
            |g, v| {
                let y = g.gather_rows(v[0], vec![3, 0, 0, 2])?;
                g.sum(g.square(g.add_scalar(y, 0.5)?)?)
            },
        ),
        (
            "scatter_add_rows",
            |r| vec![random(r, vec![5, 3])],
            |g, v| {
                let y = g.scatter_add_rows(v[0], vec![1, 1, 0, 2, 1], 4)?;
                g.sum(g.square(y)?)
            },
        ),
        (
            "min_last_axis",
            |r| vec![random(r, vec![4, 5])],
            |g, v| {
                let (m, _) = g.min_last_axis(v[0])?;
                g.sum(g.square(m)?)
            },
        ),
        (
            "pairwise_sq_dist",
            |r| vec![random(r, vec![4, 3]), random(r, vec![5, 3])],
            |g, v| {
                let d = g.pairwise_sq_dist(v[0], v[1])?;
                g.sum(g.sqrt(d)?)
            },
        ),
        (
            "neighbor_outer_sum",
            |r| vec![random(r, vec![6, 2]), random(r, vec![6, 3])],
            |g, v| {
                let y = g.neighbor_outer_sum(v[0], v[1], 3)?;
                g.sum(g.square(y)?)
            },
        ),
        (
            "reshape",
            |r| vec![random(r, vec![4, 3])],
            |g, v| {
                let y = g.reshape(v[0], vec![2, 6])?;
                let w = g.leaf(Tensor::new(
                    vec![2, 6],
                    (0..12).map(|i| i as f64).collect(),
                )?);
                g.sum(g.mul(g.square(y)?, w)?)
            },
        ),
    ]
}

#[test]
fn every_primitive_matches_finite_differences_over_20_seeds() {
    let opts = FiniteDiff::default();
    for (name, make, f) in primitive_cases() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = make(&mut rng);
            let report = check_gradients(&inputs, f, &opts).unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "{name} seed {seed}: rel err {} at {:?}",
                report.max_rel_error,
                report.worst
            );
        }
    }
}

#[test]
fn mlp_identity_layer() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mlp = MlpParams::new(&mut params, "m", &[3, 3], 0.1, &mut rng);
    *params.get_mut(mlp.layers[0].weight) =
        Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let g = Graph::new();
    let ctx = params.bind(&g);
    let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.25, -4.0]).unwrap();
    let y = mlp_forward(&ctx, &mlp, g.leaf(x.clone())).unwrap();
    assert_eq!(g.value(y), x);
}

#[test]
fn mlp_zero_weights_give_bias_rows() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mlp = MlpParams::new(&mut params, "m", &[3, 4, 2], 0.1, &mut rng);
    for layer in &mlp.layers {
        params.get_mut(layer.weight).data_mut().fill(0.0);
    }
    *params.get_mut(mlp.layers[1].bias) = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
    let g = Graph::new();
    let ctx = params.bind(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = mlp_forward(&ctx, &mlp, g.leaf(random(&mut rng, vec![5, 3]))).unwrap();
    for row in g.value(y).data().chunks(2) {
        assert_eq!(row, &[0.5, -1.5]);
    }
}

#[test]
fn mlp_width_mismatch_is_error() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mlp = MlpParams::new(&mut params, "m", &[3, 4], 0.1, &mut rng);
    let g = Graph::new();
    let ctx = params.bind(&g);
    assert!(mlp_forward(&ctx, &mlp, g.leaf(Tensor::zeros(vec![2, 5]))).is_err());
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mlp = MlpParams::new(&mut params, "m", &[3, 6, 2], 0.1, &mut rng);
        for id in params.ids().collect::<Vec<_>>() {
            let shape = params.get(id).shape().to_vec();
            *params.get_mut(id) = random(&mut rng, shape);
        }
        let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(random(&mut rng, vec![5, 3]));
        let report = check_gradients(
            &inputs,
            |g, v| {
                let ctx = Ctx::from_vars(g, v[..v.len() - 1].to_vec());
                let y = mlp_forward(&ctx, &mlp, v[v.len() - 1])?;
                g.sum(g.square(y)?)
            },
            &FiniteDiff::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn mlp_layers_chain() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut mlp = MlpParams::new(&mut params, "m", &[3, 4, 2], 0.1, &mut rng);
    assert!(mlp.validate().is_ok());
    mlp.layers[1].in_dim = 5;
    assert!(mlp.validate().is_err());
}
