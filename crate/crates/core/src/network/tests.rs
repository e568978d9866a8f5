use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_gradients_on, FiniteDiff};

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect(),
    )
    .unwrap()
}

fn small_config() -> NetworkConfig {
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

fn all_zero(g: &Graph, v: Var) -> bool {
    g.with_value(v, |t| t.data().iter().all(|&x| x == 0.0))
}

#[test]
fn default_level_sizes() {
    let cfg = NetworkConfig::default();
    assert_eq!(cfg.level_sizes(256), vec![256, 64, 16, 4]);
    assert_eq!(cfg.min_points(), 64);
    assert_eq!(cfg.level_sizes(65), vec![65, 17, 5, 2]);
}

#[test]
fn pyramid_shapes_and_shared_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Network::new(NetworkConfig::default(), 3).unwrap();
    let p = cloud(&mut rng, 256);
    let g = Graph::new();
    let ctx = net.params.bind(&g);
    let a = net.build_pyramid(&ctx, &p).unwrap();
    let b = net.build_pyramid(&ctx, &p).unwrap();
    assert_eq!(a.sizes(), vec![256, 64, 16, 4]);
    assert_eq!(a.levels[0].positions, p);
    for (x, y) in a.levels.iter().zip(&b.levels) {
        assert_eq!(g.value(x.features), g.value(y.features));
    }
    let widths: Vec<usize> = a
        .levels
        .iter()
        .map(|l| g.with_value(l.features, Tensor::cols))
        .collect();
    assert_eq!(widths, vec![3, 64, 128, 128]);
    for (l, map) in a.sample_maps.iter().enumerate() {
        for (j, &i) in map.iter().enumerate() {
            assert_eq!(
                a.levels[l + 1].positions.point(j),
                a.levels[l].positions.point(i)
            );
        }
    }
}

#[test]
fn too_few_points_names_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = Network::new(NetworkConfig::default(), 0).unwrap();
    let p = cloud(&mut rng, 63);
    let err = net.infer(&p, &p).unwrap_err();
    assert!(matches!(
        err,
        Error::TooFewPoints {
            required: 64,
            actual: 63,
            ..
        }
    ));
    assert!(err.to_string().contains("64"));
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = NetworkConfig::default();
    cfg.widths.pop();
    assert!(Network::new(cfg, 0).is_err());
    let cfg = NetworkConfig {
        levels: 1,
        ..NetworkConfig::default()
    };
    assert!(cfg.validate().is_err());
    let cfg = NetworkConfig {
        k_cost: 0,
        ..NetworkConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn config_rejects_unknown_keys() {
    let err = serde_json::from_str::<NetworkConfig>(r#"{"levels": 3, "widht": [1]}"#).unwrap_err();
    assert!(err.to_string().contains("widht"));
    let cfg: NetworkConfig = serde_json::from_str(r#"{"k_cost": 8}"#).unwrap();
    assert_eq!(cfg.k_cost, 8);
    assert_eq!(cfg.levels, 4);
}

#[test]
fn zero_heads_give_zero_flow_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Network::new(NetworkConfig::default(), 9).unwrap();
    let p = cloud(&mut rng, 256);
    let g = Graph::new();
    let ctx = net.params.bind(&g);
    let out = net.forward(&ctx, &p, &p).unwrap();
    let sizes: Vec<usize> = out
        .flows
        .levels
        .iter()
        .map(|&v| g.with_value(v, Tensor::rows))
        .collect();
    assert_eq!(sizes, out.p.sizes());
    for &f in &out.flows.levels {
        assert!(all_zero(&g, f));
    }
}

#[test]
fn predictor_feature_width_and_input_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = small_config();
    let net = Network::new(cfg.clone(), 1).unwrap();
    let p = cloud(&mut rng, 40);
    let g = Graph::new();
    let ctx = net.params.bind(&g);
    let pyr = net.build_pyramid(&ctx, &p).unwrap();
    let top = 2;
    let lvl = &pyr.levels[top];
    let n = lvl.positions.len();
    let cost = g.leaf(Tensor::zeros(vec![n, cfg.cost_dims[top - 1]]));
    let (flow, residual, hidden) = net
        .predict_flow_level(&ctx, top, &lvl.positions, lvl.features, cost, None, None)
        .unwrap();
    assert_eq!(g.shape(hidden), vec![n, cfg.predictor_hidden]);
    assert_eq!(g.shape(flow), vec![n, 3]);
    assert!(all_zero(&g, residual));
    let bad = g.leaf(Tensor::zeros(vec![n, 1]));
    let err = net.predict_flow_level(
        &ctx,
        top,
        &lvl.positions,
        lvl.features,
        cost,
        Some(bad),
        None,
    );
    assert!(err.is_err());
}

#[test]
fn ablation_toggles_change_layout() {
    let full = Network::new(small_config(), 0).unwrap();
    let bare = Network::new(
        NetworkConfig {
            upsampled_feature: false,
            predictor_feature: false,
            ..small_config()
        },
        0,
    )
    .unwrap();
    assert!(full.params.find("pyramid.l1.merge.weight").is_some());
    assert!(bare.params.find("pyramid.l1.merge.weight").is_none());
    assert!(bare.params.scalar_count() < full.params.scalar_count());
    assert_eq!(full.predictor(1).input_width, 12 + 5 + 3 + 5);
    assert_eq!(bare.predictor(1).input_width, 6 + 5 + 3);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = cloud(&mut rng, 40);
    let q = p.translated([0.05, 0.0, 0.0]);
    let mut bare = bare;
    bare.randomize_heads(2);
    let f = bare.infer(&p, &q).unwrap();
    assert_eq!(f.len(), 40);
}

#[test]
fn zero_head_at_level_keeps_upsampled_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = Network::new(small_config(), 4).unwrap();
    net.randomize_heads(11);
    net.zero_head(1);
    let p = cloud(&mut rng, 48);
    let q = cloud(&mut rng, 44);
    let g = Graph::new();
    let ctx = net.params.bind(&g);
    let out = net.forward(&ctx, &p, &q).unwrap();
    assert!(!all_zero(&g, out.flows.levels[2]));
    let up = out.upsampled[0].unwrap();
    assert_eq!(g.value(out.flows.levels[1]), g.value(up));

    // Independent IDW of the level-2 flow onto level-1 points.
    let coarse = &out.p.levels[2].positions;
    let fine = &out.p.levels[1].positions;
    let cf = SceneFlow::from_tensor(&g.value(out.flows.levels[2])).unwrap();
    let got = SceneFlow::from_tensor(&g.value(up)).unwrap();
    for (i, x) in fine.points().iter().enumerate() {
        let mut d: Vec<(f64, usize)> = coarse
            .points()
            .iter()
            .enumerate()
            .map(|(j, c)| (crate::geom::sq_dist(*x, *c), j))
            .collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        if d[0].0.sqrt() < 1e-10 {
            assert_eq!(got.vectors()[i], cf.vectors()[d[0].1]);
            continue;
        }
        let mut num = [0.0; 3];
        let mut den = 0.0;
        for &(d2, j) in d.iter().take(3) {
            let w = 1.0 / (d2.sqrt() + 1e-8);
            den += w;
            for c in 0..3 {
                num[c] += w * cf.vectors()[j][c];
            }
        }
        for c in 0..3 {
            assert!((num[c] / den - got.vectors()[i][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut net = Network::new(small_config(), 5).unwrap();
    net.randomize_heads(1);
    let p = cloud(&mut rng, 50);
    let q = cloud(&mut rng, 50);
    let run = || {
        let g = Graph::new();
        let ctx = net.params.bind(&g);
        let out = net.forward(&ctx, &p, &q).unwrap();
        out.flows
            .levels
            .iter()
            .map(|&v| g.value(v))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
    let again = Network::new(small_config(), 5).unwrap();
    assert_eq!(
        again.params,
        Network::new(small_config(), 5).unwrap().params
    );
}

#[test]
fn init_is_bounded_uniform_with_zero_biases() {
    let net = Network::new(small_config(), 12).unwrap();
    for (name, t) in net.params.iter() {
        if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else if name.contains(".head.1.") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else {
            let (out, inp) = (t.shape()[0], t.shape()[1]);
            let bound = (6.0 / (out + inp) as f64).sqrt();
            assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
        }
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut net = Network::new(small_config(), 21).unwrap();
    net.randomize_heads(3);
    let p = cloud(&mut rng, 32);
    let q = p.translated([0.03, -0.02, 0.01]);
    let inputs: Vec<Tensor> = net.params.iter().map(|(_, t)| t.clone()).collect();
    let weights: Vec<usize> = net
        .params
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| name.ends_with(".weight"))
        .map(|(i, _)| i)
        .collect();
    let wrt: Vec<usize> = (0..6)
        .map(|_| weights[rng.gen_range(0..weights.len())])
        .collect();
    let opts = FiniteDiff {
        max_probes: Some(3),
        seed: 4,
        ..FiniteDiff::default()
    };
    let report = check_gradients_on(
        &inputs,
        &wrt,
        |g, vars| {
            let ctx = Ctx::from_vars(g, vars.to_vec());
            let out = net.forward(&ctx, &p, &q)?;
            g.sum(out.flows.finest())
        },
        &opts,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn timings_cover_all_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let net = Network::new(small_config(), 0).unwrap();
    let p = cloud(&mut rng, 64);
    let t = net.component_timings(&p, &p).unwrap();
    let rows = t.rows();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|(_, ms)| *ms > 0.0));
}

#[test]
fn subsampled_ground_truth_follows_sample_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let net = Network::new(small_config(), 0).unwrap();
    let p = cloud(&mut rng, 30);
    let g = Graph::new();
    let ctx = net.params.bind(&g);
    let pyr = net.build_pyramid(&ctx, &p).unwrap();
    let gt = SceneFlow::new(p.points().to_vec()).unwrap();
    let levels = subsample_levels(&gt, &pyr);
    for (l, f) in levels.iter().enumerate() {
        assert_eq!(f.vectors(), pyr.levels[l].positions.points());
    }
}
