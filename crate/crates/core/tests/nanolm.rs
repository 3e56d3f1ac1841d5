use nep_core::event_model::{FOOTER, HEADER};
use nep_core::nanolm::{
    adapter_merge, batch_example_losses, batch_loss_and_grad, forward, grad_check, loss_and_grad,
    train, train_with_hook, AdapterSet, AttentionMaskMode, Example, GradMutation, ModelConfig,
    ModelParams, TrainConfig,
};
use nep_core::serializer::TrainingInstance;
use nep_core::NepError;

fn config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        max_tokens: 24,
        mlp_ratio: 4,
    }
}

fn instance(seed: u32) -> TrainingInstance {
    let ev = |k: u32| 15 + (k * 7 + seed) % 10;
    let mut ctx = vec![HEADER];
    for k in 0..4 {
        ctx.push(8 + (k + seed) % 7);
        ctx.push(ev(k));
    }
    ctx.push(FOOTER);
    TrainingInstance {
        patient_id: format!("p{seed}"),
        target_index: 4,
        context_tokens: ctx,
        response_tokens: vec![ev(4)],
    }
}

fn example() -> Example {
    // Two response tokens so several positions carry loss.
    let mut inst = instance(3);
    inst.response_tokens.push(10);
    nep_core::nanolm::nep_targets(&inst)
}

/// Non-zero adapter B so adapter gradients flow into every LoRA tensor.
fn active_adapters(cfg: &ModelConfig, rank: usize, seed: u64) -> AdapterSet<f64> {
    let mut ad = AdapterSet::<f64>::init(cfg, rank, seed);
    for l in &mut ad.layers {
        l.bq.iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = 0.05 * (((i * 13) % 11) as f64 - 5.0) / 5.0);
        l.bv.iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = 0.05 * (((i * 7) % 9) as f64 - 4.0) / 4.0);
    }
    ad
}

#[test]
fn grad_check_passes_in_double_precision() {
    let params = ModelParams::<f64>::init(config(25), 11).unwrap();
    for mode in [
        AttentionMaskMode::Causal,
        AttentionMaskMode::BidirectionalMlm,
    ] {
        let r = grad_check(&params, None, &example(), mode, 1e-3, 400, 5, None).unwrap();
        assert!(r.n_coords() >= 200);
        assert!(
            r.max_rel_error < 1e-4,
            "{mode:?}: {} {:?}",
            r.max_rel_error,
            r.per_group
        );
        for g in [
            "tok", "pos", "wq", "wk", "wv", "wo", "w1", "w2", "b1", "ln1_g", "lnf_b",
        ] {
            assert!(r.per_group.contains_key(g), "group {g} not sampled");
        }
    }
}

#[test]
fn grad_check_covers_adapters() {
    let cfg = config(25);
    let params = ModelParams::<f64>::init(cfg.clone(), 12).unwrap();
    let ad = active_adapters(&cfg, 4, 2);
    let r = grad_check(
        &params,
        Some(&ad),
        &example(),
        AttentionMaskMode::Causal,
        1e-3,
        400,
        6,
        None,
    )
    .unwrap();
    assert!(
        r.max_rel_error < 1e-4,
        "{} {:?}",
        r.max_rel_error,
        r.per_group
    );
    assert!(r.per_group.contains_key("lora_a") && r.per_group.contains_key("lora_b"));
}

#[test]
fn sign_flip_is_detected() {
    let params = ModelParams::<f64>::init(config(25), 11).unwrap();
    let m = GradMutation::SignFlip("wv".into());
    let r = grad_check(
        &params,
        None,
        &example(),
        AttentionMaskMode::Causal,
        1e-3,
        400,
        5,
        Some(&m),
    )
    .unwrap();
    assert!(r.max_rel_error > 1e-1, "{}", r.max_rel_error);
    assert!(r.per_group["wv"] > 1e-1);
    assert!(r.per_group["wq"] < 1e-4);
}

#[test]
fn unused_positions_have_exactly_zero_gradient() {
    let params = ModelParams::<f64>::init(config(25), 11).unwrap();
    let ex = example();
    let r = grad_check(
        &params,
        None,
        &ex,
        AttentionMaskMode::Causal,
        1e-3,
        400,
        5,
        None,
    )
    .unwrap();
    let d = params.config.d_model;
    let beyond: Vec<_> = r
        .coords
        .iter()
        .filter(|c| c.tensor == "pos" && c.index / d >= ex.ids.len())
        .collect();
    assert!(!beyond.is_empty());
    for c in beyond {
        assert_eq!((c.analytic, c.numeric), (0.0, 0.0));
    }
}

#[test]
fn packed_batch_equals_separate_examples() {
    let cfg = config(25);
    let params = ModelParams::<f64>::init(cfg.clone(), 12).unwrap();
    let ad = active_adapters(&cfg, 2, 4);
    let mut short = instance(5);
    short.context_tokens.drain(1..5);
    let examples: Vec<Example> = [instance(1), short, instance(2)]
        .iter()
        .map(nep_core::nanolm::nep_targets)
        .chain([example()])
        .collect();
    for mode in [
        AttentionMaskMode::Causal,
        AttentionMaskMode::BidirectionalMlm,
    ] {
        let (loss, grads) = batch_loss_and_grad(&params, Some(&ad), &examples, mode, true).unwrap();
        let mut sum = 0.0;
        let mut acc = None::<nep_core::nanolm::Gradients<f64>>;
        for ex in &examples {
            let (l, g) = loss_and_grad(&params, Some(&ad), ex, mode, true).unwrap();
            sum += l;
            match acc.as_mut() {
                Some(a) => a.add_assign(&g),
                None => acc = Some(g),
            }
        }
        assert!((loss - sum).abs() < 1e-12);
        let acc = acc.unwrap();
        let pairs = [
            (
                grads.weights.as_ref().unwrap().named(),
                acc.weights.as_ref().unwrap().named(),
            ),
            (
                grads.adapters.as_ref().unwrap().named(),
                acc.adapters.as_ref().unwrap().named(),
            ),
        ];
        for (packed, separate) in pairs {
            for ((name, _, _, a), (_, _, _, b)) in packed.iter().zip(&separate) {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert!((x - y).abs() < 1e-12, "{name}: {x} vs {y}");
                }
            }
        }
        let each = batch_example_losses(&params, Some(&ad), &examples, mode).unwrap();
        assert!((each.iter().sum::<f64>() - sum).abs() < 1e-12);
    }
}

fn quick(total_steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps,
        global_batch: 4,
        micro_batch: 2,
        peak_lr: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_single_instance() {
    let params = ModelParams::<f32>::init(config(25), 1).unwrap();
    let data = [instance(1)];
    let cfg = TrainConfig {
        global_batch: 1,
        micro_batch: 1,
        weight_decay: 0.0,
        ..quick(500)
    };
    let out = train(&data, params, &cfg, AttentionMaskMode::Causal).unwrap();
    let last = out.curve.last().unwrap().loss;
    assert!(last < 0.01, "final loss {last}");
    assert_eq!(out.curve.len(), 500);
}

#[test]
fn same_seed_same_curve() {
    let data: Vec<_> = (0..10).map(instance).collect();
    let run = || {
        let params = ModelParams::<f32>::init(config(25), 2).unwrap();
        train(&data, params, &quick(30), AttentionMaskMode::Causal).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.params.checksum(), b.params.checksum());
    let mlm = |seed| {
        let params = ModelParams::<f32>::init(config(25), 2).unwrap();
        let cfg = TrainConfig { seed, ..quick(20) };
        train(&data, params, &cfg, AttentionMaskMode::BidirectionalMlm)
            .unwrap()
            .curve
    };
    assert_eq!(mlm(4), mlm(4));
    assert_ne!(mlm(4), mlm(5));
}

#[test]
fn parallel_matches_sequential_bitwise() {
    let data: Vec<_> = (0..10).map(instance).collect();
    let run = |parallel| {
        let params = ModelParams::<f64>::init(config(25), 3).unwrap();
        let cfg = TrainConfig {
            parallel,
            ..quick(15)
        };
        train(&data, params, &cfg, AttentionMaskMode::Causal).unwrap()
    };
    let (s, p) = (run(false), run(true));
    assert_eq!(s.curve, p.curve);
    assert_eq!(s.params, p.params);
}

#[test]
fn adapter_training_freezes_base() {
    let data: Vec<_> = (0..10).map(instance).collect();
    let params = ModelParams::<f32>::init(config(25), 4).unwrap();
    let before = params.clone();
    let cfg = TrainConfig {
        adapter_rank: 4,
        ..quick(30)
    };
    let mut checked = 0;
    let out = train_with_hook(&data, params, &cfg, AttentionMaskMode::Causal, |_, p, a| {
        assert!(a.is_some());
        assert_eq!(p.weights, before.weights);
        checked += 1;
    })
    .unwrap();
    assert_eq!(checked, 30);
    assert_eq!(out.params, before);
    let ad = out.adapters.unwrap();
    assert!(ad.layers.iter().any(|l| l.bq.iter().any(|&x| x != 0.0)));
    assert!(out.curve.last().unwrap().loss < out.curve[0].loss);
}

#[test]
fn rank16_merge_matches_active_adapters_on_probes() {
    let cfg = ModelConfig {
        d_model: 32,
        ..config(25)
    };
    let params = ModelParams::<f64>::init(cfg.clone(), 5).unwrap();
    let ad = active_adapters(&cfg, 16, 8);
    let merged = adapter_merge(&params, &ad).unwrap();
    let mut worst = 0.0f64;
    for p in 0..100u32 {
        let len = 1 + (p as usize * 7) % 20;
        let ids: Vec<u32> = (0..len as u32).map(|i| (i * 31 + p * 17) % 25).collect();
        let a = forward(&params, Some(&ad), &ids, AttentionMaskMode::Causal).unwrap();
        let b = forward(&merged, None, &ids, AttentionMaskMode::Causal).unwrap();
        worst = (&a.logits - &b.logits)
            .iter()
            .fold(worst, |m, x| m.max(x.abs()));
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn zero_b_merge_is_exact() {
    let cfg = config(25);
    let params = ModelParams::<f32>::init(cfg.clone(), 5).unwrap();
    let ad = AdapterSet::<f32>::init(&cfg, 16, 1);
    let merged = adapter_merge(&params, &ad).unwrap();
    assert_eq!(merged.weights, params.weights);
    let rank0 = AdapterSet::<f32>::init(&cfg, 0, 1);
    assert_eq!(
        adapter_merge(&params, &rank0).unwrap().weights,
        params.weights
    );
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let data: Vec<_> = (0..10).map(instance).collect();
    let params = ModelParams::<f32>::init(config(25), 6).unwrap();
    let cfg = TrainConfig {
        peak_lr: 50.0,
        max_grad_norm: 0.0,
        ..quick(400)
    };
    match train(&data, params, &cfg, AttentionMaskMode::Causal) {
        Err(NepError::Divergence { step, .. }) => assert!(step < 400),
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|o| o.curve.last().copied())
        ),
    }
}

#[test]
fn rejects_bad_inputs() {
    let params = ModelParams::<f32>::init(config(25), 6).unwrap();
    assert!(matches!(
        train(&[], params.clone(), &quick(5), AttentionMaskMode::Causal),
        Err(NepError::Validation(_))
    ));
    let cfg = TrainConfig {
        warmup_fraction: 0.0,
        ..quick(5)
    };
    assert!(matches!(
        train(&[instance(0)], params, &cfg, AttentionMaskMode::Causal),
        Err(NepError::InvalidConfig(_))
    ));
}
