//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measurements. Criterion 7 trains two desk-scale
//! models and is the long pole (~20 minutes on 2 CPU cores).

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use fewseg_core::dataset::{
    build_splits, build_synthetic_dataset, synthetic_registry_structure, validate_registry,
    RuleId, SplitSpec,
};
use fewseg_core::episodes::{EpisodeSpec, Sampler};
use fewseg_core::metrics::{iou, threshold_mask};
use fewseg_core::model::{
    backward, forward, init_params, predict, EncoderConfig, ModelConfig, ModelParams,
    IN_CHANNELS,
};
use fewseg_core::objectives::{bce_loss, mse_loss, LossKind};
use fewseg_core::train::{
    evaluate, evaluate_with, kshot_ablation, lr_schedule, resume, train, train_step, AdamState,
    Checkpoint, EvalSettings, TrainConfig, TrainOptions,
};
use fewseg_core::workflow::{
    auto_label, merge_support_set, mine_hard_cases, LabelResult, SupportSet,
};

/// The budgets are wall-clock; run criteria one at a time so they do not
/// contend for the two sandbox cores.
static SERIAL: std::sync::Mutex<()> = std::sync::Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL
        .lock()
        .unwrap_or_else(std::sync::PoisonError::into_inner)
}

fn pass(criterion: u32, name: &str, start: Instant, detail: &str) {
    println!(
        "ACCEPTANCE {criterion} {name}: PASS ({detail}; {:.1}s)",
        start.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 1. validator exactness

fn expect_rules(root: &Path, expected: &[RuleId], what: &str) {
    let report = validate_registry(root).expect("root readable");
    let got = report.error_rules();
    assert_eq!(
        got, expected,
        "{what}: expected rules {expected:?}, got {got:?}"
    );
}

#[test]
fn criterion_1_validator_exactness() {
    let _guard = serial();
    let start = Instant::now();
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    build_synthetic_dataset(12, 101, root).unwrap();

    expect_rules(root, &[], "conforming corpus");

    let class_of = |idx: usize| -> std::path::PathBuf {
        let mut dirs: Vec<_> = std::fs::read_dir(root)
            .unwrap()
            .filter_map(|e| {
                let p = e.unwrap().path();
                p.is_dir().then_some(p)
            })
            .collect();
        dirs.sort();
        dirs[idx].clone()
    };

    // aspect ratio 2.5 with both sides above the minimum: only that rule
    {
        let target = class_of(0).join("3.jpg");
        let orig = std::fs::read(&target).unwrap();
        image::RgbImage::from_pixel(600, 240, image::Rgb([10, 20, 30]))
            .save(&target)
            .unwrap();
        expect_rules(root, &[RuleId::AspectRatio], "aspect-ratio fixture");
        std::fs::write(&target, orig).unwrap();
    }

    // min side 200 at square aspect: only min-side
    {
        let target = class_of(1).join("4.jpg");
        let orig = std::fs::read(&target).unwrap();
        image::RgbImage::from_pixel(200, 200, image::Rgb([10, 20, 30]))
            .save(&target)
            .unwrap();
        expect_rules(root, &[RuleId::MinSide], "min-side fixture");
        std::fs::write(&target, orig).unwrap();
    }

    // a 9-image class
    {
        let img = class_of(2).join("10.jpg");
        let mask = class_of(2).join("10.png");
        let (img_orig, mask_orig) = (std::fs::read(&img).unwrap(), std::fs::read(&mask).unwrap());
        std::fs::remove_file(&img).unwrap();
        std::fs::remove_file(&mask).unwrap();
        expect_rules(root, &[RuleId::ClassCardinality], "9-image class fixture");
        std::fs::write(&img, img_orig).unwrap();
        std::fs::write(&mask, mask_orig).unwrap();
    }

    // a mask with a gray (non 0/255) region
    {
        let target = class_of(3).join("5.png");
        let orig = std::fs::read(&target).unwrap();
        let mut mask = image::GrayImage::from_pixel(224, 224, image::Luma([0]));
        for y in 0..80 {
            for x in 0..80 {
                mask.put_pixel(x, y, image::Luma([255]));
            }
            for x in 80..120 {
                mask.put_pixel(x, y, image::Luma([100]));
            }
        }
        mask.save(&target).unwrap();
        expect_rules(root, &[RuleId::MaskBinarity], "non-binary mask fixture");
        std::fs::write(&target, orig).unwrap();
    }

    // an instance mask with label 11
    {
        let target = class_of(4).join("1.inst.png");
        let orig = std::fs::read(&target).unwrap();
        let mut inst = image::GrayImage::from_pixel(224, 224, image::Luma([0]));
        inst.put_pixel(5, 5, image::Luma([11]));
        inst.save(&target).unwrap();
        expect_rules(root, &[RuleId::InstanceRange], "instance label 11 fixture");
        std::fs::write(&target, orig).unwrap();
    }

    // a cycle between two middle nodes that otherwise reach a top
    {
        let target = root.join("hierarchy.json");
        let orig = std::fs::read_to_string(&target).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&orig).unwrap();
        let map = doc.as_object_mut().unwrap();
        map.insert(
            "m-one".into(),
            serde_json::json!({"level": "middle", "parents": ["m-two", "bar"]}),
        );
        map.insert(
            "m-two".into(),
            serde_json::json!({"level": "middle", "parents": ["m-one", "bar"]}),
        );
        std::fs::write(&target, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
        expect_rules(root, &[RuleId::HierarchyCycle], "cyclic hierarchy fixture");
        std::fs::write(&target, orig).unwrap();
    }

    assert!(
        start.elapsed().as_secs() < 10,
        "validator suite too slow: {:?}",
        start.elapsed()
    );
    pass(1, "validator-exactness", start, "6 fixtures, exact rule ids");
}

// ---------------------------------------------------------------------------
// 2. split protocol

#[test]
fn criterion_2_split_protocol() {
    let _guard = serial();
    let start = Instant::now();
    let registry = synthetic_registry_structure(1000, 23);
    assert_eq!(registry.hierarchy.top_nodes().len(), 12);

    let mut first: Option<SplitSpec> = None;
    for _ in 0..3 {
        let spec = build_splits(&registry, 20, 20, 77).unwrap();
        assert_eq!(spec.train.len(), 520, "train classes");
        assert_eq!(spec.val.len(), 240, "val classes");
        assert_eq!(spec.test.len(), 240, "test classes");

        let pair_count = |names: &[String]| -> usize {
            names
                .iter()
                .map(|n| registry.class(n).unwrap().pairs.len())
                .sum()
        };
        assert_eq!(pair_count(&spec.train), 5200);
        assert_eq!(pair_count(&spec.val), 2400);
        assert_eq!(pair_count(&spec.test), 2400);

        match &first {
            None => first = Some(spec),
            Some(prev) => assert_eq!(prev, &spec, "rerun must be identical"),
        }
    }
    assert!(start.elapsed().as_secs() < 5, "split protocol too slow");
    pass(
        2,
        "split-protocol",
        start,
        "520/240/240 classes = 5200/2400/2400 pairs x3 reruns",
    );
}

// ---------------------------------------------------------------------------
// 3. metric oracle equivalence

#[test]
fn criterion_3_metric_oracles() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for case in 0..1000 {
        let a = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..2u8));
        let b = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..2u8));
        let pred = Array2::from_shape_fn((8, 8), |_| rng.random_range(1e-9..1.0 - 1e-9));

        // brute-force pixel loops
        let mut inter = 0u32;
        let mut union = 0u32;
        let mut bce = 0.0f64;
        let mut mse = 0.0f64;
        for y in 0..8 {
            for x in 0..8 {
                inter += u32::from(a[(y, x)] == 1 && b[(y, x)] == 1);
                union += u32::from(a[(y, x)] == 1 || b[(y, x)] == 1);
                let p: f64 = pred[(y, x)];
                let t = f64::from(a[(y, x)]);
                bce += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                mse += (p - t) * (p - t);
            }
        }
        let iou_expected = if union == 0 {
            1.0
        } else {
            f64::from(inter) / f64::from(union)
        };
        assert_eq!(iou(&a, &b).unwrap(), iou_expected, "case {case}");

        let bce_expected = bce / 64.0;
        let got = bce_loss(&pred, &a).unwrap();
        assert!(
            (got - bce_expected).abs() <= 1e-12 * bce_expected.abs().max(1.0),
            "bce case {case}: {got} vs {bce_expected}"
        );
        let mse_expected = mse / 64.0;
        let got = mse_loss(&pred, &a).unwrap();
        assert!(
            (got - mse_expected).abs() <= 1e-12 * mse_expected.abs().max(1.0),
            "mse case {case}: {got} vs {mse_expected}"
        );
    }
    assert!(start.elapsed().as_secs() < 5, "metric oracles too slow");
    pass(3, "metric-oracles", start, "1000 random 8x8 cases");
}

// ---------------------------------------------------------------------------
// 4. architecture invariants

fn random_support(side: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut t = Array3::from_shape_fn((IN_CHANNELS, side, side), |_| rng.random_range(0.0..1.0));
    for y in 0..side {
        for x in 0..side {
            t[(3, y, x)] = f32::from(u8::from(t[(3, y, x)] > 0.6));
        }
    }
    t
}

#[test]
fn criterion_4_architecture_invariants() {
    let _guard = serial();
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for draw in 0..100u64 {
        let params: ModelParams<f32> = init_params(&cfg, 1000 + draw).unwrap();
        let k = 2 + (draw % 4) as usize; // 2..=5 supports
        let supports: Vec<Array3<f32>> = (0..k).map(|_| random_support(224, &mut rng)).collect();
        let mut query = random_support(224, &mut rng);
        for y in 0..224 {
            for x in 0..224 {
                query[(3, y, x)] = 0.0;
            }
        }

        let base = forward(&params, &cfg, &supports, &query).unwrap();
        assert_eq!(base.probs.dim(), (224, 224), "draw {draw}: shape");
        assert!(
            base.probs.iter().all(|&p| p > 0.0 && p < 1.0),
            "draw {draw}: open interval"
        );

        // support permutation: bit-identical
        let mut permuted = supports.clone();
        permuted.reverse();
        let swapped = forward(&params, &cfg, &permuted, &query).unwrap();
        assert_eq!(base.probs, swapped.probs, "draw {draw}: permutation");

        // K duplicates of one support collapse to the single-support output
        let single = forward(
            &params,
            &cfg,
            std::slice::from_ref(&supports[0]),
            &query,
        )
        .unwrap();
        let duplicated = forward(&params, &cfg, &vec![supports[0].clone(); k], &query).unwrap();
        assert_eq!(
            single.probs, duplicated.probs,
            "draw {draw}: duplicate collapse"
        );
    }
    assert!(start.elapsed().as_secs() < 120, "invariants too slow");
    pass(
        4,
        "architecture-invariants",
        start,
        "100 draws: shape, range, permutation, duplicate collapse",
    );
}

// ---------------------------------------------------------------------------
// 5. gradient check

#[test]
fn criterion_5_gradient_check() {
    let _guard = serial();
    let start = Instant::now();
    let cfg = ModelConfig::tiny().with_input_size(16);
    let mut params: ModelParams<f64> = init_params(&cfg, 55).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let supports: Vec<Array3<f64>> = (0..2)
        .map(|_| {
            let mut t =
                Array3::from_shape_fn((IN_CHANNELS, 16, 16), |_| rng.random_range(0.0..1.0));
            for y in 0..16 {
                for x in 0..16 {
                    t[(3, y, x)] = f64::from(u8::from(t[(3, y, x)] > 0.6));
                }
            }
            t
        })
        .collect();
    let mut query = Array3::from_shape_fn((IN_CHANNELS, 16, 16), |_| rng.random_range(0.0..1.0));
    for y in 0..16 {
        for x in 0..16 {
            query[(3, y, x)] = 0.0;
        }
    }
    let truth = Array2::from_shape_fn((16, 16), |(y, x)| u8::from((3 * x + y) % 5 < 2));

    let trace = forward(&params, &cfg, &supports, &query).unwrap();
    let n_pixels = 256.0;
    let dlogits = Array2::from_shape_fn((16, 16), |(y, x)| {
        (trace.probs[(y, x)] - f64::from(truth[(y, x)])) / n_pixels
    });
    let grads = backward(&params, &trace, &dlogits).unwrap();

    // the comparison denominator is floored at the RMS gradient scale:
    // components down at 1e-10 sit below any attainable f64
    // finite-difference resolution, and a genuinely wrong backward pass
    // errs at the scale of the gradients themselves
    let (sq_sum, count) = grads
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
        .fold((0.0f64, 0usize), |(s, c), g| (s + g * g, c + 1));
    let grad_rms = (sq_sum / count as f64).sqrt();

    // collect (name, len) then probe 210 coordinates across all tensors
    let layout: Vec<(String, usize)> = params
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let total: usize = layout.iter().map(|(_, l)| l).sum();
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let h = 1e-5;
    while checked < 210 {
        let mut flat = rng.random_range(0..total);
        let (name, idx) = {
            let mut found = None;
            for (name, len) in &layout {
                if flat < *len {
                    found = Some((name.clone(), flat));
                    break;
                }
                flat -= len;
            }
            found.unwrap()
        };

        let read = |p: &ModelParams<f64>| -> f64 {
            let tensors = p.named_tensors();
            let (_, view) = tensors.iter().find(|(n, _)| *n == name).unwrap();
            *view.iter().nth(idx).unwrap()
        };
        let write = |p: &mut ModelParams<f64>, value: f64| {
            let (prefix, rest) = name.split_once('.').unwrap();
            let set = match prefix {
                "encoder" => &mut p.encoder,
                "relation" => &mut p.relation,
                _ => &mut p.decoder,
            };
            *set.get_mut(rest).unwrap().iter_mut().nth(idx).unwrap() = value;
        };

        let orig = read(&params);
        let loss_at = |p: &mut ModelParams<f64>, value: f64| -> f64 {
            write(p, value);
            bce_loss(&forward(p, &cfg, &supports, &query).unwrap().probs, &truth).unwrap()
        };
        // fourth-order central stencil keeps the oracle accurate even for
        // coordinates whose gradients are down at 1e-7
        let p1 = loss_at(&mut params, orig + h);
        let m1 = loss_at(&mut params, orig - h);
        let p2 = loss_at(&mut params, orig + 2.0 * h);
        let m2 = loss_at(&mut params, orig - 2.0 * h);
        write(&mut params, orig);

        let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        let analytic = read(&grads);
        let denom = fd.abs().max(analytic.abs()).max(grad_rms);
        let rel = (fd - analytic).abs() / denom;
        worst = worst.max(rel);
        assert!(
            rel < 1e-4,
            "{name}[{idx}]: analytic {analytic:.6e} vs fd {fd:.6e} (rel {rel:.3e})"
        );
        checked += 1;
    }
    assert!(start.elapsed().as_secs() < 300, "gradient check too slow");
    pass(
        5,
        "gradient-check",
        start,
        &format!("{checked} coordinates, worst rel err {worst:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 6. overfit smoke

#[test]
fn criterion_6_overfit_smoke() {
    let _guard = serial();
    let start = Instant::now();
    let dir = TempDir::new().unwrap();
    let registry = build_synthetic_dataset(2, 5, dir.path()).unwrap();
    let sampler = Sampler::new(
        &registry,
        &registry.class_names(),
        EpisodeSpec::new(1, 1, 0),
    )
    .unwrap();
    let episode = sampler.episode(0).unwrap();

    let cfg = ModelConfig::tiny();
    let mut params = init_params::<f32>(&cfg, 0).unwrap();
    let mut adam = AdamState::new(&params);
    let mut final_loss = f32::NAN;
    for _ in 0..500 {
        final_loss =
            train_step(&mut params, &mut adam, &cfg, &episode, LossKind::Bce, 1e-3).unwrap();
    }
    let supports: Vec<_> = episode.support.iter().map(|a| a.as_ref()).collect();
    let pred = predict(&params, &cfg, &supports, &episode.query[0].image).unwrap();
    let mask = threshold_mask(&pred.probs, 0.5).unwrap();
    let score = iou(&mask, &episode.query[0].mask).unwrap();

    assert!(
        final_loss < 0.05,
        "overfit loss {final_loss} did not reach 0.05 in 500 updates"
    );
    assert!(
        score >= 0.95,
        "overfit query IoU {score} did not reach 0.95 in 500 updates"
    );
    assert!(start.elapsed().as_secs() < 300, "overfit smoke too slow");
    pass(
        6,
        "overfit-smoke",
        start,
        &format!("loss {final_loss:.4} < 0.05, query IoU {score:.4} >= 0.95"),
    );
}

// ---------------------------------------------------------------------------
// 7. desk-scale generalization (the long pole)

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_size: 224,
            n_stages: 4,
            base_channels: 4,
            channel_growth: 2,
            convs_per_stage: 1,
        },
        relation_channels: None,
        decoder_channels: None,
    }
}

#[test]
fn criterion_7_desk_scale_generalization() {
    let _guard = serial();
    let start = Instant::now();
    let dir = TempDir::new().unwrap();
    let registry = build_synthetic_dataset(30, 11, dir.path()).unwrap();
    let names = registry.class_names();
    let split = SplitSpec {
        train: names[..25].to_vec(),
        val: vec![],
        test: names[25..].to_vec(),
        seed: 0,
    };

    let model_config = small_config();
    let train_config = TrainConfig {
        loss: LossKind::Bce,
        lr0: 1e-3,
        halve_every: 50_000,
        n_episodes: 5_000,
        k_shot: 5,
        n_query: 1,
        seed: 1,
        checkpoint_every: 0,
        eval_every: 0,
        eval_episodes_per_class: 2,
    };
    let eval_settings = EvalSettings {
        k_shot: 0, // set per k by the ablation harness
        episodes_per_class: 20,
        seed: 90,
        threshold: 0.5,
    };

    // one model per k in {1, 5}, same seed, each evaluated at its own k
    let reports = kshot_ablation(
        &registry,
        &split,
        &model_config,
        &train_config,
        &[1, 5],
        &eval_settings,
    )
    .unwrap();
    let iou_1shot = reports[0].report.macro_mean;
    let iou_5shot = reports[1].report.macro_mean;

    // trivial baselines over the same evaluation episodes (5-shot stream)
    let baseline_settings = EvalSettings {
        k_shot: 5,
        ..eval_settings
    };
    let (fg_report, _) = evaluate_with(
        |episode| {
            Ok(episode
                .query
                .iter()
                .map(|q| Array2::from_elem(q.mask.dim(), 0.99f32))
                .collect())
        },
        &registry,
        &split.test,
        &baseline_settings,
    )
    .unwrap();
    let (bg_report, _) = evaluate_with(
        |episode| {
            Ok(episode
                .query
                .iter()
                .map(|q| Array2::from_elem(q.mask.dim(), 0.01f32))
                .collect())
        },
        &registry,
        &split.test,
        &baseline_settings,
    )
    .unwrap();
    let baseline = fg_report.macro_mean.max(bg_report.macro_mean);

    println!(
        "held-out meanIoU: 5-shot {iou_5shot:.4}, 1-shot {iou_1shot:.4}; baselines all-fg {:.4} / all-bg {:.4}",
        fg_report.macro_mean, bg_report.macro_mean
    );
    assert!(
        iou_5shot >= baseline + 0.15,
        "5-shot {iou_5shot:.4} does not beat baseline {baseline:.4} by 0.15"
    );
    assert!(
        iou_5shot >= iou_1shot,
        "5-shot {iou_5shot:.4} below 1-shot {iou_1shot:.4}"
    );

    // informational: the iterative hard-case workflow on one held-out class
    iterative_workflow_report(&registry, &split, &model_config, &train_config);

    assert!(
        start.elapsed().as_secs() < 1800,
        "desk-scale run exceeded 30 minutes"
    );
    pass(
        7,
        "desk-scale-generalization",
        start,
        &format!(
            "5-shot {iou_5shot:.3} vs baseline {baseline:.3} (+{:.3}), 1-shot {iou_1shot:.3}",
            iou_5shot - baseline
        ),
    );
}

/// Informational check of the iterate-on-hard-cases loop: a briefly
/// trained model labels a held-out class with its v1 supports, the worst
/// cases get their ground-truth masks merged in, and the hard-case mean
/// IoU before/after is reported (not asserted).
fn iterative_workflow_report(
    registry: &fewseg_core::dataset::DatasetRegistry,
    split: &SplitSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) {
    let tc = TrainConfig {
        n_episodes: 600,
        k_shot: 2,
        ..*train_config
    };
    let result = train(
        registry,
        split,
        model_config,
        &tc,
        &TrainOptions::default(),
    )
    .unwrap();
    let params = &result.checkpoint.params;

    let novel = &split.test[0];
    let entry = registry.class(novel).unwrap();
    let pairs: Vec<_> = entry
        .pairs
        .iter()
        .map(|p| fewseg_core::dataset::load_pair(&p.image_path, &p.mask_path).unwrap())
        .collect();
    // v1 support: first 2 pairs; corpus: the remaining 8 images
    let v1 = SupportSet::initial(pairs[..2].to_vec()).unwrap();
    let corpus: Vec<std::path::PathBuf> =
        entry.pairs[2..].iter().map(|p| p.image_path.clone()).collect();
    let truths: Vec<Array2<u8>> = pairs[2..].iter().map(|p| p.mask.clone()).collect();

    let score = |results: &[LabelResult], on: &[usize]| -> f64 {
        on.iter()
            .map(|&i| iou(&results[i].mask, &truths[i]).unwrap())
            .sum::<f64>()
            / on.len() as f64
    };

    let v1_results = auto_label(params, model_config, &v1, &corpus, 0.5, 1).unwrap();
    let hard = mine_hard_cases(&v1_results, Some(&truths), 3).unwrap();
    let hard_idx: Vec<usize> = hard.iter().map(|c| c.index).collect();
    let v1_hard_mean = score(&v1_results, &hard_idx);

    // corrections: ground-truth masks of the mined hard cases
    let corrected: Vec<_> = hard_idx.iter().map(|&i| pairs[2 + i].clone()).collect();
    let v2 = merge_support_set(&v1, corrected).unwrap();
    let v2_results = auto_label(params, model_config, &v2, &corpus, 0.5, 1).unwrap();
    let v2_hard_mean = score(&v2_results, &hard_idx);

    println!(
        "INFO iterative workflow on {novel}: hard-case mean IoU v1 {v1_hard_mean:.4} -> v2 {v2_hard_mean:.4} ({})",
        if v2_hard_mean >= v1_hard_mean {
            "improved or equal"
        } else {
            "not improved (reported, not asserted)"
        }
    );
}

// ---------------------------------------------------------------------------
// 8. schedule and resumability

#[test]
fn criterion_8_schedule_and_resume() {
    let _guard = serial();
    let start = Instant::now();

    // closed-form schedule checks, no episodes run
    assert_eq!(lr_schedule(1e-3, 50_000, 0), 1e-3);
    assert_eq!(lr_schedule(1e-3, 50_000, 50_000), 5e-4);
    assert_eq!(lr_schedule(1e-3, 50_000, 125_000), 2.5e-4);

    let dir = TempDir::new().unwrap();
    let registry = build_synthetic_dataset(3, 88, &dir.path().join("data")).unwrap();
    let split = SplitSpec {
        train: registry.class_names(),
        val: vec![],
        test: vec![],
        seed: 0,
    };
    let cfg = ModelConfig::tiny();
    let tc = TrainConfig {
        n_episodes: 200,
        k_shot: 1,
        seed: 8,
        checkpoint_every: 100,
        ..TrainConfig::default()
    };
    let out = dir.path().join("run");
    let options = TrainOptions {
        out_dir: Some(out.clone()),
        log_every: 0,
    };
    let full = train(&registry, &split, &cfg, &tc, &options).unwrap();

    // resume from the mid-run checkpoint and compare the tail bit-for-bit
    let checkpoint = Checkpoint::load(&out.join("checkpoint-00000100.ckpt")).unwrap();
    assert_eq!(checkpoint.episode, 100);
    let rest = resume(checkpoint, &registry, &split, &TrainOptions::default()).unwrap();
    assert_eq!(rest.trace.len(), 100);
    for (row, orig) in rest.trace.iter().zip(full.trace[100..].iter()) {
        assert_eq!(row.episode, orig.episode);
        assert_eq!(
            row.loss.to_bits(),
            orig.loss.to_bits(),
            "episode {}",
            row.episode
        );
        assert_eq!(row.lr, orig.lr);
    }
    assert_eq!(rest.checkpoint.params, full.checkpoint.params);

    assert!(start.elapsed().as_secs() < 120, "schedule/resume too slow");
    pass(
        8,
        "schedule-and-resume",
        start,
        "closed-form lr; 200-episode window resumes bit-exactly",
    );
}

// ---------------------------------------------------------------------------
// 9. workflow determinism

#[test]
fn criterion_9_workflow_determinism() {
    let _guard = serial();
    let start = Instant::now();

    // mining order and merge versioning on constructed inputs
    let make_result = |index: usize, p: f32| -> LabelResult {
        let probs = Array2::from_elem((8, 8), p);
        LabelResult {
            index,
            image_path: format!("img{index}.png").into(),
            mask: probs.mapv(|v| u8::from(v >= 0.5)),
            probs,
        }
    };
    let preds = vec![
        make_result(0, 0.95),
        make_result(1, 0.55),
        make_result(2, 0.55),
        make_result(3, 0.75),
    ];
    let cases = mine_hard_cases(&preds, None, 3).unwrap();
    assert_eq!(
        cases.iter().map(|c| c.index).collect::<Vec<_>>(),
        vec![1, 2, 3],
        "ascending margin with index tie-break"
    );

    let dir = TempDir::new().unwrap();
    let registry = build_synthetic_dataset(2, 99, dir.path()).unwrap();
    let names = registry.class_names();
    let support_entry = registry.class(&names[0]).unwrap();
    let support_pairs: Vec<_> = support_entry.pairs[..3]
        .iter()
        .map(|p| fewseg_core::dataset::load_pair(&p.image_path, &p.mask_path).unwrap())
        .collect();
    let v1 = SupportSet::initial(support_pairs.clone()).unwrap();
    assert_eq!(v1.version, 1);
    let merged = merge_support_set(&v1, vec![support_pairs[0].clone()]).unwrap();
    assert_eq!(merged.version, 2);
    assert_eq!(merged.pairs.len(), 3, "duplicate path replaced in place");

    // a 20-image corpus labeled twice must be bit-identical
    let corpus: Vec<std::path::PathBuf> = registry
        .classes
        .values()
        .flat_map(|c| c.pairs.iter().map(|p| p.image_path.clone()))
        .collect();
    assert_eq!(corpus.len(), 20);
    let cfg = ModelConfig::tiny();
    let params = init_params::<f32>(&cfg, 7).unwrap();
    let a = auto_label(&params, &cfg, &v1, &corpus, 0.5, 2).unwrap();
    let b = auto_label(&params, &cfg, &v1, &corpus, 0.5, 2).unwrap();
    assert_eq!(a.len(), 20);
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.index, y.index);
        assert_eq!(x.mask, y.mask);
        let bits_equal = x
            .probs
            .iter()
            .zip(y.probs.iter())
            .all(|(p, q)| p.to_bits() == q.to_bits());
        assert!(bits_equal, "probability maps differ at index {}", x.index);
    }

    assert!(start.elapsed().as_secs() < 120, "workflow determinism too slow");
    pass(
        9,
        "workflow-determinism",
        start,
        "mining order, merge versioning, 20-image auto-label bit-identical x2",
    );
}

// ---------------------------------------------------------------------------

#[test]
fn evaluation_stub_bounds() {
    let _guard = serial();
    // quick cross-check that the evaluation harness itself is sound: the
    // perfect-oracle stub scores 1.0 and all-background scores 0.0
    let dir = TempDir::new().unwrap();
    let registry = build_synthetic_dataset(2, 3, dir.path()).unwrap();
    let classes = registry.class_names();
    let settings = EvalSettings {
        k_shot: 1,
        episodes_per_class: 2,
        seed: 1,
        threshold: 0.5,
    };
    let (perfect, _) = evaluate_with(
        |ep| {
            Ok(ep
                .query
                .iter()
                .map(|q| q.mask.mapv(|m| if m > 0 { 0.99f32 } else { 0.01 }))
                .collect())
        },
        &registry,
        &classes,
        &settings,
    )
    .unwrap();
    assert_eq!(perfect.macro_mean, 1.0);

    let params = init_params::<f32>(&ModelConfig::tiny(), 3).unwrap();
    let (report_a, _) = evaluate(&params, &ModelConfig::tiny(), &registry, &classes, &settings).unwrap();
    let (report_b, _) = evaluate(&params, &ModelConfig::tiny(), &registry, &classes, &settings).unwrap();
    assert_eq!(report_a.macro_mean, report_b.macro_mean);
}
