//! Network-level invariants: shapes, fusion algebra, relation linearity,
//! decoder degeneracy, determinism, and an end-to-end gradient check.

use ndarray::{Array2, Array3, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::conv1x1_forward;
use super::*;

fn rand_input<F: NdFloat>(side: usize, rng: &mut ChaCha8Rng) -> Array3<F> {
    let mut t = Array3::from_shape_fn((IN_CHANNELS, side, side), |_| {
        F::from(rng.random_range(0.0..1.0f64)).unwrap()
    });
    // mask channel binary, like real inputs
    for y in 0..side {
        for x in 0..side {
            let v = if t[(3, y, x)] > F::from(0.6).unwrap() {
                F::one()
            } else {
                F::zero()
            };
            t[(3, y, x)] = v;
        }
    }
    t
}

fn query_like<F: NdFloat>(side: usize, rng: &mut ChaCha8Rng) -> Array3<F> {
    let mut t = rand_input::<F>(side, rng);
    for y in 0..side {
        for x in 0..side {
            t[(3, y, x)] = F::zero();
        }
    }
    t
}

fn small_cfg(side: usize) -> ModelConfig {
    ModelConfig::tiny().with_input_size(side)
}

#[test]
fn encode_shapes_follow_stage_arithmetic() {
    for (n_stages, deepest) in [(4usize, 14usize), (5, 7)] {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                input_size: 224,
                n_stages,
                base_channels: 2,
                channel_growth: 2,
                convs_per_stage: 1,
            },
            relation_channels: None,
            decoder_channels: None,
        };
        let params: ModelParams<f32> = init_params(&cfg, 1).unwrap();
        let r = cfg.resolve().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand_input::<f32>(224, &mut rng);
        let trace = net::encode(&params.encoder, &r, &input).unwrap();
        for (i, side) in r.stage_sides.iter().enumerate() {
            assert_eq!(
                trace.stage_output(i).dim(),
                (r.stage_channels[i], *side, *side)
            );
        }
        assert_eq!(trace.stage_output(n_stages - 1).dim().1, deepest);
    }
}

#[test]
fn zero_image_encodes_finite() {
    let cfg = small_cfg(32);
    let params: ModelParams<f32> = init_params(&cfg, 5).unwrap();
    let r = cfg.resolve().unwrap();
    let zero = Array3::zeros((IN_CHANNELS, 32, 32));
    let trace = net::encode(&params.encoder, &r, &zero).unwrap();
    for i in 0..r.n_stages {
        assert!(trace.stage_output(i).iter().all(|v| v.is_finite()));
    }
}

#[test]
fn fuse_identity_and_equal_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let map = Array3::<f32>::from_shape_fn((4, 6, 6), |_| rng.random_range(-1.0..1.0));
    let single = fuse_supports(&[vec![map.clone()]]).unwrap();
    assert_eq!(single[0], map, "K=1 must be the identity");

    for k in [2usize, 3, 5, 7] {
        let lists: Vec<Vec<Array3<f32>>> = (0..k).map(|_| vec![map.clone()]).collect();
        let fused = fuse_supports(&lists).unwrap();
        assert_eq!(fused[0], map, "mean of {k} equal maps must be exact");
    }
}

#[test]
fn fuse_is_permutation_invariant_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let maps: Vec<Array3<f32>> = (0..5)
        .map(|_| Array3::from_shape_fn((3, 5, 5), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let as_lists = |order: &[usize]| -> Vec<Vec<Array3<f32>>> {
        order.iter().map(|&i| vec![maps[i].clone()]).collect()
    };
    let base = fuse_supports(&as_lists(&[0, 1, 2, 3, 4])).unwrap();
    for order in [[4usize, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 4, 0, 3, 2]] {
        let permuted = fuse_supports(&as_lists(&order)).unwrap();
        assert_eq!(base[0], permuted[0]);
    }
    // the fused value is the arithmetic mean
    let expected = (&maps[0] + &maps[1] + &maps[2] + &maps[3] + &maps[4]) / 5.0;
    let max_diff = (&base[0] - &expected)
        .iter()
        .map(|v| v.abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff < 1e-6);
}

#[test]
fn fuse_rejects_mismatched_shapes() {
    let a = Array3::<f32>::zeros((2, 4, 4));
    let b = Array3::<f32>::zeros((2, 3, 4));
    assert!(matches!(
        fuse_supports(&[vec![a], vec![b]]),
        Err(ModelError::ShapeMismatch { .. })
    ));
}

#[test]
fn relation_concat_shapes_and_order_sensitivity() {
    let cfg = small_cfg(16);
    let params: ModelParams<f64> = init_params(&cfg, 9).unwrap();
    let r = cfg.resolve().unwrap();
    let c = r.deepest_channels();
    let side = r.deepest_side();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = Array3::<f64>::from_shape_fn((c, side, side), |_| rng.random_range(-1.0..1.0));
    let b = Array3::<f64>::from_shape_fn((c, side, side), |_| rng.random_range(-1.0..1.0));

    let ab = net::relate(&params.relation, &a, &b).unwrap();
    assert_eq!(ab.output().dim(), (r.relation_channels, side, side));
    let ba = net::relate(&params.relation, &b, &a).unwrap();
    assert_ne!(ab.output(), ba.output(), "concatenation is ordered");
}

#[test]
fn relation_first_layer_is_linear_in_query_when_support_is_zero() {
    // with a zero support map the first 1x1 layer output depends only on
    // the query channels' weights; verify against a direct matrix product
    let cfg = small_cfg(16);
    let params: ModelParams<f64> = init_params(&cfg, 11).unwrap();
    let r = cfg.resolve().unwrap();
    let c = r.deepest_channels();
    let side = r.deepest_side();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let zero = Array3::<f64>::zeros((c, side, side));
    let query = Array3::<f64>::from_shape_fn((c, side, side), |_| rng.random_range(-1.0..1.0));

    let trace = net::relate(&params.relation, &zero, &query).unwrap();

    // oracle: y[o, p] = relu(sum_c Wq[o, c] * q[c, p] + b[o]) where Wq is
    // the query half of the reduce weights
    let w = params
        .relation
        .get("reduce.weight")
        .unwrap()
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let b = params
        .relation
        .get("reduce.bias")
        .unwrap()
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let rc = r.relation_channels;
    let mut oracle = Array3::<f64>::zeros((rc, side, side));
    for o in 0..rc {
        for y in 0..side {
            for x in 0..side {
                let mut acc = b[o];
                for ci in 0..c {
                    acc += w[(o, c + ci)] * query[(ci, y, x)];
                }
                oracle[(o, y, x)] = acc.max(0.0);
            }
        }
    }

    // recompute the first layer alone through the public op
    let combined = ops::concat_channels(&[&zero, &query]);
    let first = conv1x1_forward(w, b, &combined, true);
    let max_diff = (&first.out - &oracle)
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff < 1e-12, "pointwise conv deviates: {max_diff}");
    assert!(trace.output().iter().all(|v| v.is_finite()));
}

fn forward_small<F: NdFloat>(
    cfg: &ModelConfig,
    seed: u64,
    k: usize,
) -> (ModelParams<F>, Vec<Array3<F>>, Array3<F>, ForwardTrace<F>) {
    let params: ModelParams<F> = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let side = cfg.encoder.input_size;
    let supports: Vec<Array3<F>> = (0..k).map(|_| rand_input(side, &mut rng)).collect();
    let query = query_like(side, &mut rng);
    let trace = forward(&params, cfg, &supports, &query).unwrap();
    (params, supports, query, trace)
}

#[test]
fn forward_output_is_input_sized_and_in_open_interval() {
    let cfg = small_cfg(32);
    let (_, _, _, trace) = forward_small::<f32>(&cfg, 21, 3);
    assert_eq!(trace.probs.dim(), (32, 32));
    assert!(trace
        .probs
        .iter()
        .all(|&p| p > 0.0 && p < 1.0 && p.is_finite()));
}

#[test]
fn forward_duplicate_support_collapses_exactly() {
    let cfg = small_cfg(32);
    let params: ModelParams<f32> = init_params(&cfg, 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let support = rand_input::<f32>(32, &mut rng);
    let query = query_like::<f32>(32, &mut rng);

    let one = forward(&params, &cfg, std::slice::from_ref(&support), &query).unwrap();
    for k in [2usize, 3, 5] {
        let many = vec![support.clone(); k];
        let dup = forward(&params, &cfg, &many, &query).unwrap();
        assert_eq!(one.probs, dup.probs, "K={k} duplicate collapse");
    }
}

#[test]
fn forward_support_permutation_is_bit_invariant() {
    let cfg = small_cfg(32);
    let (params, supports, query, base) = forward_small::<f32>(&cfg, 41, 4);
    let mut permuted = supports.clone();
    permuted.swap(0, 3);
    permuted.swap(1, 2);
    let swapped = forward(&params, &cfg, &permuted, &query).unwrap();
    assert_eq!(base.probs, swapped.probs);
}

#[test]
fn forward_depends_on_query() {
    let cfg = small_cfg(32);
    let params: ModelParams<f32> = init_params(&cfg, 51).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let supports = vec![rand_input::<f32>(32, &mut rng)];
    let q1 = query_like::<f32>(32, &mut rng);
    let q2 = query_like::<f32>(32, &mut rng);
    let p1 = forward(&params, &cfg, &supports, &q1).unwrap();
    let p2 = forward(&params, &cfg, &supports, &q2).unwrap();
    assert_ne!(p1.probs, p2.probs);
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_cfg(32);
    let (params, supports, query, a) = forward_small::<f32>(&cfg, 61, 2);
    let b = forward(&params, &cfg, &supports, &query).unwrap();
    assert_eq!(a.probs, b.probs);
}

#[test]
fn decoder_all_zero_weights_yield_uniform_sigmoid_of_bias() {
    let cfg = small_cfg(32);
    let mut params: ModelParams<f32> = init_params(&cfg, 71).unwrap();
    for set in [&mut params.encoder, &mut params.relation, &mut params.decoder] {
        for (_, tensor) in set.iter_mut() {
            tensor.fill(0.0);
        }
    }
    let bias = 0.37f32;
    params
        .decoder
        .get_mut("head.bias")
        .unwrap()
        .fill(bias);
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let supports = vec![rand_input::<f32>(32, &mut rng)];
    let query = query_like::<f32>(32, &mut rng);
    let trace = forward(&params, &cfg, &supports, &query).unwrap();
    let expected = 1.0 / (1.0 + (-bias).exp());
    assert!(trace
        .probs
        .iter()
        .all(|&p| (p - expected).abs() < 1e-6));
}

#[test]
fn multiway_argmax_and_background_rules() {
    // degenerate C=1: equals the thresholded forward output
    let cfg = small_cfg(32);
    let params: ModelParams<f32> = init_params(&cfg, 81).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(82);

    let side = 32;
    let image = Array3::<f32>::from_shape_fn((3, side, side), |_| rng.random_range(0.0..1.0));
    let mut mask = Array2::<u8>::zeros((side, side));
    mask[(4, 4)] = 1;
    mask[(5, 5)] = 1;
    let pair = crate::dataset::LoadedPair {
        image: image.clone(),
        mask,
        source_path: "mem://support".to_string(),
    };
    let query_img =
        Array3::<f32>::from_shape_fn((3, side, side), |_| rng.random_range(0.0..1.0));

    let single = multiway_segment(&params, &cfg, &[vec![&pair]], &query_img).unwrap();
    let pred = predict(&params, &cfg, &[&pair], &query_img).unwrap();
    let thresholded = crate::metrics::threshold_mask(&pred.probs, 0.5).unwrap();
    assert_eq!(single, thresholded);
}

#[test]
fn multiway_pixel_rules() {
    // direct rule checks on synthetic probability maps via the same logic
    let probs = [
        Array2::from_elem((2, 2), 0.9f32),
        Array2::from_elem((2, 2), 0.2f32),
    ];
    let label = pick_label(&probs, (0, 0));
    assert_eq!(label, 1, "0.9 beats 0.2 and clears 0.5");
    let probs = [
        Array2::from_elem((2, 2), 0.3f32),
        Array2::from_elem((2, 2), 0.4f32),
    ];
    assert_eq!(pick_label(&probs, (0, 0)), 0, "below threshold backgrounds");
    let probs = [
        Array2::from_elem((2, 2), 0.7f32),
        Array2::from_elem((2, 2), 0.7f32),
    ];
    assert_eq!(pick_label(&probs, (0, 0)), 1, "ties break to lowest index");
}

fn pick_label(probs: &[Array2<f32>], at: (usize, usize)) -> u8 {
    let mut best_class = 0u8;
    let mut best_prob = 0.5f32;
    for (idx, p) in probs.iter().enumerate() {
        let v = p[at];
        if v > best_prob && v >= 0.5 {
            best_prob = v;
            best_class = idx as u8 + 1;
        }
    }
    best_class
}

#[test]
fn analytic_gradients_match_central_differences() {
    // tiny config on 16x16 crops, f64 for a clean finite-difference oracle
    let cfg = small_cfg(16);
    let mut params: ModelParams<f64> = init_params(&cfg, 91).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    let supports: Vec<Array3<f64>> = (0..2).map(|_| rand_input(16, &mut rng)).collect();
    let query = query_like::<f64>(16, &mut rng);
    let truth = Array2::from_shape_fn((16, 16), |(y, x)| u8::from((x + y) % 3 == 0));

    let loss_of = |p: &ModelParams<f64>| -> f64 {
        let trace = forward(p, &cfg, &supports, &query).unwrap();
        crate::objectives::bce_loss(&trace.probs, &truth).unwrap()
    };

    let trace = forward(&params, &cfg, &supports, &query).unwrap();
    let n_pixels = (16 * 16) as f64;
    // d(BCE)/d(logit) = (y - t) / N
    let dlogits = Array2::from_shape_fn((16, 16), |(y, x)| {
        (trace.probs[(y, x)] - f64::from(truth[(y, x)])) / n_pixels
    });
    let grads = backward(&params, &trace, &dlogits).unwrap();

    // near-zero components sit below finite-difference resolution, so the
    // comparison denominator is floored at the RMS gradient scale
    let (sq_sum, count) = grads
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
        .fold((0.0f64, 0usize), |(s, c), g| (s + g * g, c + 1));
    let grad_rms = (sq_sum / count as f64).sqrt();

    let names: Vec<String> = params
        .named_tensors()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for name in names {
        let len = params
            .named_tensors()
            .iter()
            .find(|(n, _)| *n == name)
            .unwrap()
            .1
            .len();
        // probe a few coordinates per tensor
        for probe in 0..3.min(len) {
            let idx = if len <= 3 {
                probe
            } else {
                rng.random_range(0..len)
            };
            let h = 1e-5;
            let orig = get_flat(&params, &name, idx);
            set_flat(&mut params, &name, idx, orig + h);
            let p1 = loss_of(&params);
            set_flat(&mut params, &name, idx, orig - h);
            let m1 = loss_of(&params);
            set_flat(&mut params, &name, idx, orig + 2.0 * h);
            let p2 = loss_of(&params);
            set_flat(&mut params, &name, idx, orig - 2.0 * h);
            let m2 = loss_of(&params);
            set_flat(&mut params, &name, idx, orig);
            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let analytic = get_flat(&grads, &name, idx);
            let denom = fd.abs().max(analytic.abs()).max(grad_rms);
            let rel = (fd - analytic).abs() / denom;
            worst = worst.max(rel);
            assert!(
                rel < 1e-4,
                "{name}[{idx}]: analytic {analytic} vs fd {fd} (rel {rel})"
            );
            checked += 1;
        }
    }
    assert!(checked >= 30, "checked only {checked} coordinates");
    // keep a record of the observed precision in test output
    println!("gradient check: {checked} coordinates, worst relative error {worst:.3e}");
}

fn get_flat(params: &ModelParams<f64>, name: &str, idx: usize) -> f64 {
    let tensors = params.named_tensors();
    let (_, view) = tensors.iter().find(|(n, _)| n == name).unwrap();
    *view.iter().nth(idx).unwrap()
}

fn set_flat(params: &mut ModelParams<f64>, name: &str, idx: usize, value: f64) {
    let (prefix, rest) = name.split_once('.').unwrap();
    let set = match prefix {
        "encoder" => &mut params.encoder,
        "relation" => &mut params.relation,
        "decoder" => &mut params.decoder,
        _ => unreachable!(),
    };
    let tensor = set.get_mut(rest).unwrap();
    *tensor.iter_mut().nth(idx).unwrap() = value;
}
