use clusterformer::data::{synthetic, SyntheticSpec};
use clusterformer::model::{init_params, param_count_for, Model, ModelConfig};
use clusterformer::train::{evaluate, metrics_csv, train, TrainOptions};
use clusterformer::Tensor;

/// Closed-form parameter count, written from the architecture description
/// rather than from the declaration code.
fn expected_params(c: &ModelConfig) -> usize {
    let r = c.ffn_ratio;
    let linear = |i: usize, o: usize| i * o + o;
    let norm = |d: usize| 2 * d;
    let ffn = |d: usize, h: usize| linear(d, h) + linear(h, d);
    let block = |d: usize| {
        norm(d) + 3 * linear(d, d) + ffn(d, r * d) + ffn(d, d) + norm(d) + ffn(d, r * d)
    };
    let d0 = c.stage_dims[0];
    let mut total = linear(c.patch_size * c.patch_size * c.in_channels, d0) + norm(d0);
    for s in 0..c.num_stages() {
        if s > 0 {
            total += linear(c.stage_dims[s - 1], c.stage_dims[s]);
        }
        total += c.stage_depths[s] * block(c.stage_dims[s]);
    }
    let dl = *c.stage_dims.last().unwrap();
    total + norm(dl) + linear(dl, c.num_classes)
}

#[test]
fn param_count_matches_closed_form() {
    let default = ModelConfig::default();
    assert_eq!(param_count_for(&default).unwrap(), expected_params(&default));
    assert_eq!(param_count_for(&default).unwrap(), 46_535_176);
    let tiny = ModelConfig::tiny();
    assert_eq!(param_count_for(&tiny).unwrap(), expected_params(&tiny));
    let mut other = tiny.clone();
    other.ffn_ratio = 2;
    other.in_channels = 3;
    other.num_classes = 7;
    other.stage_depths = vec![2, 3];
    assert_eq!(param_count_for(&other).unwrap(), expected_params(&other));
    // K, T and the head count shape computation only
    other.iterations = 5;
    other.stage_k = vec![9, 2];
    other.num_heads = vec![1, 2];
    other.head_dim = 16;
    assert_eq!(param_count_for(&other).unwrap(), expected_params(&other));
}

#[test]
fn init_statistics() {
    let model: Model<f64> = init_params(&ModelConfig::default(), 1).unwrap();
    let w = model.params.get("stages.2.blocks.0.ffn.fc1.weight").unwrap();
    let n = w.len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= 0.04));
    assert!(mean.abs() < 1e-4, "{mean}");
    // N(0, 0.02) truncated at ±2σ has std 0.02·0.8796
    assert!((std / (0.02 * 0.8796) - 1.0).abs() < 0.01, "{std}");
    for (name, t) in model.params.entries() {
        if name.ends_with(".bias") || name.ends_with(".beta") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with(".gamma") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        }
    }
}

#[test]
fn forward_composes_stages() {
    let cfg = ModelConfig::tiny();
    let model: Model<f64> = init_params(&cfg, 4).unwrap();
    let img = Tensor::full(&[32, 32, 1], 0.5);
    let (g, out) = model.forward(&img).unwrap();
    assert_eq!(g.value(out.logits).shape(), &[1, cfg.num_classes]);
    let grids: Vec<_> = out.stages.iter().map(|s| s.grid).collect();
    assert_eq!(grids, vec![(8, 8), (4, 4)]);
    for (s, st) in out.stages.iter().enumerate() {
        assert_eq!(g.value(st.state.centers).shape(), &[cfg.effective_k(s), cfg.stage_dims[s]]);
        assert_eq!(g.value(st.state.assignment).shape(), &[cfg.effective_k(s), grids[s].0 * grids[s].1]);
    }
    assert!(model.check_image(&Tensor::full(&[16, 16, 1], 0.5)).is_err());
}

fn small_run(threads: usize) -> String {
    let cfg = ModelConfig::tiny();
    let data = synthetic(&SyntheticSpec::new(6, 32, 1, 0.1), 11).unwrap();
    let opts = TrainOptions {
        epochs: 2,
        batch_size: 5,
        seed: 11,
        ..TrainOptions::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let model: Model<f32> = init_params(&cfg, 11).unwrap();
        let out = train(model, &data, None, &opts, |_| {}).unwrap();
        let weights: Vec<u32> = out.model.params.entries().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect();
        format!("{}{weights:?}", metrics_csv(&out.metrics))
    })
}

#[test]
fn training_is_identical_across_thread_counts() {
    let one = small_run(1);
    assert_eq!(one, small_run(3));
    assert_eq!(one, small_run(1));
}

#[test]
fn random_weights_score_at_chance() {
    let cfg = ModelConfig::tiny();
    let data = synthetic(&SyntheticSpec::new(100, 32, 1, 0.1), 21).unwrap();
    let images = data.images_as::<f32>();
    for seed in 0..3 {
        let model: Model<f32> = init_params(&cfg, seed).unwrap();
        let r = evaluate(&model, &images, &data.labels).unwrap();
        let p = 1.0 / 3.0;
        let sigma = (p * (1.0 - p) / data.len() as f64).sqrt();
        assert!((r.top1 - p).abs() <= 3.0 * sigma, "seed {seed}: top1 {}", r.top1);
    }
}
