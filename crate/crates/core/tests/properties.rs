mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clusterformer::cluster;
use clusterformer::model::ModelConfig;
use clusterformer::ppm;
use clusterformer::{Graph, Tensor};

use common::*;

fn matrix_strategy(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
        prop::collection::vec(-20.0f64..20.0, r * c).prop_map(move |v| Tensor::new(&[r, c], v).unwrap())
    })
}

fn softmax(x: &Tensor<f64>, axis: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let s = g.softmax_axis(v, axis).unwrap();
    g.value(s).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_over_axis_sums_to_one(x in matrix_strategy(8, 8), axis in 0usize..2) {
        let s = softmax(&x, axis);
        let (r, c) = s.dims2();
        prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        if axis == 0 {
            for j in 0..c {
                let sum: f64 = (0..r).map(|i| s.at2(i, j)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        } else {
            for i in 0..r {
                prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_ignores_constant_shift(x in matrix_strategy(6, 6), shift in -50.0f64..50.0) {
        let shifted = Tensor::new(x.shape(), x.data().iter().map(|v| v + shift).collect()).unwrap();
        let a = softmax(&x, 0);
        let b = softmax(&shifted, 0);
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn e_step_columns_are_distributions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, 8, 32, 16);
        let mut g = Graph::new();
        let params = bind(&mut g, &case);
        let c = g.constant(case.init.clone());
        let p = g.constant(case.features.clone());
        let a = cluster::e_step(&mut g, c, p, &params).unwrap();
        let a = g.value(a);
        prop_assert_eq!(a.shape(), &[case.k(), case.hw()][..]);
        prop_assert!(column_sum_error(a) < 1e-12);
    }

    #[test]
    fn one_iteration_is_e_then_m_for_one_head(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut case = random_case(&mut rng, 6, 24, 8);
        case.opts.num_heads = 1;
        case.opts.head_dim = case.features.shape()[1];
        case.opts.m_step_residual = false;
        let (centers, _) = run_cluster(&case, &case.features, &case.init, 1);
        let mut g = Graph::new();
        let params = bind(&mut g, &case);
        let c = g.constant(case.init.clone());
        let p = g.constant(case.features.clone());
        let a = cluster::e_step(&mut g, c, p, &params).unwrap();
        let m = cluster::m_step(&mut g, a, p, &params).unwrap();
        prop_assert!(g.value(m).max_abs_diff(&centers) < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes_rows(x in matrix_strategy(6, 12)) {
        let (r, c) = x.dims2();
        prop_assume!(c >= 2);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let gamma = g.constant(Tensor::full(&[c], 1.0));
        let beta = g.constant(Tensor::zeros(&[c]));
        let y = g.layer_norm(v, gamma, beta, 1e-5).unwrap();
        let y = g.value(y);
        for i in 0..r {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let xr = x.row(i);
            let xm = xr.iter().sum::<f64>() / c as f64;
            let xv = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
            // variance is xv / (xv + eps)
            prop_assert!((var - xv / (xv + 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn pixmap_bytes_roundtrip(w in 1usize..12, h in 1usize..12, rgb in any::<bool>(), seed in any::<u64>()) {
        use rand::Rng;
        let c = if rgb { 3 } else { 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<u8> = (0..w * h * c).map(|_| rng.random()).collect();
        let bytes = ppm::encode(w, h, c, &pixels).unwrap();
        let img = ppm::decode(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!((img.width, img.height, img.channels), (w, h, c));
        prop_assert_eq!(ppm::to_bytes(&img.data), pixels);
    }

    #[test]
    fn config_text_roundtrip(iterations in 1usize..6, k in 1usize..20, heads in 1usize..4, seed in any::<u64>()) {
        let mut cfg = ModelConfig::tiny();
        cfg.iterations = iterations;
        cfg.stage_k = vec![k; cfg.num_stages()];
        cfg.num_heads = vec![heads, 2 * heads];
        cfg.stage_dims = vec![heads * cfg.head_dim, 2 * heads * cfg.head_dim];
        cfg.seed = seed;
        let back = ModelConfig::parse_over(ModelConfig::default(), &cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
