use std::collections::BTreeMap;

use tsdistill::model::{freeze_prototypes, ModelConfig, ModelParams};
use tsdistill::numeric::Tensor;
use tsdistill::synth::{generate_corpus, Corpus, SynthConfig};
use tsdistill::trainer::{
    batch_indices, build_param_groups, ema_update, pretrain, AdamW, Checkpoint, OptimConfig,
    ScheduleConfig, Schedules, StepRates, TrainConfig, Trainer,
};
use tsdistill::Error;

fn schedules(spe: usize, total: usize) -> Schedules {
    Schedules::new(ScheduleConfig::default(), spe, total).unwrap()
}

#[test]
fn schedule_endpoints_and_junction() {
    let s = schedules(100, 1000);
    assert_eq!(s.lr(0), 0.0);
    assert!((s.lr(70) - 1e-3).abs() < 1e-15);
    assert!((s.lr(1000) - 1e-7).abs() < 1e-15);
    assert!((s.lr(35) - 0.5e-3).abs() < 1e-15);
    assert!((s.weight_decay(0) - 0.04).abs() < 1e-15);
    assert!((s.weight_decay(1000) - 0.4).abs() < 1e-15);
    assert!((s.ema_momentum(0) - 0.992).abs() < 1e-15);
    assert!((s.ema_momentum(1000) - 1.0).abs() < 1e-15);
    assert!((s.teacher_temp(0) - 0.04).abs() < 1e-15);
    assert!((s.teacher_temp(125) - 0.055).abs() < 1e-12);
    assert!((s.teacher_temp(250) - 0.07).abs() < 1e-15);
    assert!((s.teacher_temp(900) - 0.07).abs() < 1e-15);

    // Continuity where warmup meets the cosine: approach from a fractional warmup length.
    let s = schedules(7, 100);
    let warm = s.warmup_steps();
    let left = 1e-3 * (warm - 1e-9) / warm;
    assert!((left - 1e-3).abs() < 1e-9);
    let mut last = 0.0;
    for step in 0..=100 {
        let m = s.ema_momentum(step);
        assert!(m >= last);
        last = m;
    }
}

#[test]
fn prototype_freeze_covers_the_first_fraction_of_an_epoch() {
    // 0.07 epochs at 100 steps per epoch is 7 steps, independent of run length.
    let s = schedules(100, 1000);
    let frozen: Vec<usize> = (0..1000).filter(|&t| s.prototypes_frozen(t)).collect();
    assert_eq!(frozen, (0..7).collect::<Vec<_>>());
    assert_eq!(s.prototype_lr(6), 0.0);
    assert_eq!(s.prototype_lr(7), s.lr(7));
    assert_eq!(Schedules::steps_per_epoch(2000, 16), 125);
    assert_eq!(Schedules::steps_per_epoch(2001, 16), 126);
}

#[test]
fn layer_decay_groups() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(
        &ModelConfig {
            n_prototypes: 16,
            head_hidden: 16,
            ..cfg.clone()
        },
        0,
    )
    .unwrap();
    let g = build_param_groups(&params, 6, &OptimConfig::default()).unwrap();
    assert!((g["encoder.layers.5.attn.q.weight"].lr_scale - 0.9).abs() < 1e-12);
    assert!((g["encoder.layers.0.mlp.fc1.weight"].lr_scale - 0.531441).abs() < 1e-12);
    assert!((g["tokenizer.conv_a.weight"].lr_scale - 0.9f64.powi(7) * 0.2).abs() < 1e-12);
    assert!((g["tokenizer.conv_a.weight"].lr_scale - 0.0956594).abs() < 1e-6);
    assert_eq!(g["dino_head.mlp.0.weight"].lr_scale, 1.0);
    assert!(g["dino_head.proto.v"].prototype && g["ibot_head.proto.g"].prototype);
    assert!(!g["dino_head.mlp.0.weight"].prototype);
    for (name, grp) in &g {
        let off = name.ends_with(".bias") || name.contains("norm") || name.ends_with("proto.g");
        assert_eq!(grp.weight_decay, !off, "{name}");
    }

    let mut bad = BTreeMap::new();
    bad.insert("mystery.weight".to_string(), Tensor::zeros(vec![1]));
    let err = build_param_groups(&ModelParams::from_map(bad), 6, &OptimConfig::default());
    assert!(matches!(err, Err(Error::Config(_))));
}

fn scalar_tree(v: f32) -> ModelParams {
    let mut m = BTreeMap::new();
    m.insert(
        "encoder.layers.0.attn.q.bias".to_string(),
        Tensor::new(vec![1], vec![v]).unwrap(),
    );
    m.insert(
        "encoder.layers.0.attn.q.weight".to_string(),
        Tensor::new(vec![1], vec![v]).unwrap(),
    );
    ModelParams::from_map(m)
}

fn grads(values: &[(&str, f32)]) -> BTreeMap<String, Tensor> {
    values
        .iter()
        .map(|(n, v)| (n.to_string(), Tensor::new(vec![1], vec![*v]).unwrap()))
        .collect()
}

#[test]
fn adamw_single_step_and_clipping() {
    let cfg = OptimConfig {
        layer_decay: 1.0,
        ..OptimConfig::default()
    };
    let mut p = scalar_tree(1.0);
    let mut opt = AdamW::new(cfg.clone(), &p, 1).unwrap();
    let g = grads(&[
        ("encoder.layers.0.attn.q.bias", 1.0),
        ("encoder.layers.0.attn.q.weight", 1.0),
    ]);
    let rates = StepRates {
        lr: 0.1,
        prototype_lr: 0.1,
        weight_decay: 0.0,
    };
    let st = opt.step(&mut p, &g, rates).unwrap();
    assert!(st.applied && st.clip_scale == 1.0);
    let expect = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
    assert!(
        (f64::from(p.get("encoder.layers.0.attn.q.bias").unwrap().data()[0]) - expect).abs() < 1e-7
    );

    // Global norm 6 is scaled by one half.
    let mut p = scalar_tree(1.0);
    let mut opt = AdamW::new(cfg.clone(), &p, 1).unwrap();
    let g = grads(&[
        ("encoder.layers.0.attn.q.bias", 6.0f32 / 2f32.sqrt()),
        ("encoder.layers.0.attn.q.weight", 6.0f32 / 2f32.sqrt()),
    ]);
    let st = opt.step(&mut p, &g, rates).unwrap();
    assert!((st.grad_norm - 6.0).abs() < 1e-5);
    assert!((st.clip_scale - 0.5).abs() < 1e-6);
    let m = opt.m["encoder.layers.0.attn.q.bias"].data()[0];
    assert!((f64::from(m) - 0.1 * 0.5 * 6.0 / 2f64.sqrt()).abs() < 1e-6);
}

#[test]
fn adamw_weight_decay_flags_and_nonfinite_skip() {
    let cfg = OptimConfig {
        layer_decay: 1.0,
        ..OptimConfig::default()
    };
    let mut p = scalar_tree(2.0);
    let mut opt = AdamW::new(cfg, &p, 1).unwrap();
    let zero = grads(&[
        ("encoder.layers.0.attn.q.bias", 0.0),
        ("encoder.layers.0.attn.q.weight", 0.0),
    ]);
    opt.step(
        &mut p,
        &zero,
        StepRates {
            lr: 0.1,
            prototype_lr: 0.1,
            weight_decay: 0.5,
        },
    )
    .unwrap();
    assert_eq!(
        p.get("encoder.layers.0.attn.q.bias").unwrap().data()[0],
        2.0
    );
    assert!((p.get("encoder.layers.0.attn.q.weight").unwrap().data()[0] - 2.0 * 0.95).abs() < 1e-6);

    let before = p.clone();
    let nan = grads(&[
        ("encoder.layers.0.attn.q.bias", f32::NAN),
        ("encoder.layers.0.attn.q.weight", 1.0),
    ]);
    let st = opt
        .step(
            &mut p,
            &nan,
            StepRates {
                lr: 0.1,
                prototype_lr: 0.1,
                weight_decay: 0.5,
            },
        )
        .unwrap();
    assert!(!st.applied);
    assert_eq!(p, before);
    assert_eq!(opt.t, 1);
}

#[test]
fn frozen_prototypes_do_not_move() {
    let cfg = ModelConfig::tiny();
    let mut p = ModelParams::init(&cfg, 1).unwrap();
    let mut opt = AdamW::new(OptimConfig::default(), &p, cfg.n_layers).unwrap();
    let ones: BTreeMap<String, Tensor> = p
        .iter()
        .map(|(n, t)| (n.clone(), Tensor::full(t.shape().to_vec(), 0.01)))
        .collect();
    let before = p.clone();
    opt.step(
        &mut p,
        &ones,
        StepRates {
            lr: 1e-3,
            prototype_lr: 0.0,
            weight_decay: 0.04,
        },
    )
    .unwrap();
    for name in [
        "dino_head.proto.v",
        "dino_head.proto.g",
        "ibot_head.proto.v",
    ] {
        assert_eq!(p.get(name).unwrap(), before.get(name).unwrap());
    }
    assert_ne!(
        p.get("dino_head.mlp.0.weight").unwrap(),
        before.get("dino_head.mlp.0.weight").unwrap()
    );
    let again = p.clone();
    opt.step(
        &mut p,
        &ones,
        StepRates {
            lr: 1e-3,
            prototype_lr: 1e-3,
            weight_decay: 0.04,
        },
    )
    .unwrap();
    assert_ne!(
        p.get("dino_head.proto.v").unwrap(),
        again.get("dino_head.proto.v").unwrap()
    );

    let mut g = ones.clone();
    freeze_prototypes(&mut g, true);
    assert!(g["ibot_head.proto.g"].data().iter().all(|&v| v == 0.0));
    assert!(g["ibot_head.mlp.0.bias"].data().iter().all(|&v| v == 0.01));
}

#[test]
fn ema_examples() {
    let mut t = scalar_tree(0.0);
    let s = scalar_tree(1.0);
    ema_update(&mut t, &s, 1.0).unwrap();
    assert_eq!(t, scalar_tree(0.0));
    ema_update(&mut t, &s, 0.992).unwrap();
    assert!((t.get("encoder.layers.0.attn.q.bias").unwrap().data()[0] - 0.008).abs() < 1e-7);
    ema_update(&mut t, &s, 0.0).unwrap();
    assert_eq!(t, s);
    let other = ModelParams::init(&ModelConfig::tiny(), 0).unwrap();
    assert!(matches!(
        ema_update(&mut t, &other, 0.5),
        Err(Error::Internal(_))
    ));
}

#[test]
fn batches_cover_each_epoch() {
    let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(3, s, 16, 4)).collect();
    seen.sort();
    assert_eq!(seen, (0..16).collect::<Vec<_>>());
    assert_eq!(batch_indices(3, 5, 16, 4), batch_indices(3, 5, 16, 4));
}

fn small_run(steps: usize) -> (TrainConfig, Corpus) {
    let corpus = generate_corpus(5, 24, 512, &SynthConfig::default()).unwrap();
    let cfg = TrainConfig {
        seed: 9,
        batch_size: 4,
        total_steps: steps,
        checkpoint_every: 1,
        model: ModelConfig::tiny(),
        ..TrainConfig::default()
    };
    (cfg, corpus)
}

#[test]
fn resume_is_bit_exact_and_teacher_tracks_student() {
    let (cfg, corpus) = small_run(2);
    let dir = tempfile::tempdir().unwrap();
    let full = pretrain(cfg.clone(), &corpus, Some(dir.path()), None).unwrap();
    assert_eq!(full.metrics.len(), 2);

    let mid = Checkpoint::load(&dir.path().join("checkpoint-0000001.utck")).unwrap();
    assert_eq!(mid.meta.step, 1);
    let resumed = pretrain(cfg.clone(), &corpus, None, Some(mid)).unwrap();
    assert_eq!(resumed.checkpoint, full.checkpoint);
    assert_eq!(resumed.metrics[0], full.metrics[1]);

    let init = ModelParams::init(&cfg.model, cfg.seed).unwrap();
    assert_ne!(full.checkpoint.teacher, init);
    assert_ne!(full.checkpoint.teacher, full.checkpoint.student);

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,lr,wd,ema_m,tau_t,dino,ibot,koleo,total,target_entropy"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (cfg, corpus) = small_run(1);
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(cfg, &corpus, Some(dir.path()), None).unwrap();
    let a = dir.path().join("final.utck");
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let b = dir.path().join("again.utck");
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let mut bytes = std::fs::read(&a).unwrap();
    bytes[0] = b'X';
    std::fs::write(&b, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&b), Err(Error::Format { .. })));
}

#[test]
fn resume_rejects_a_different_config() {
    let (cfg, corpus) = small_run(1);
    let out = pretrain(cfg.clone(), &corpus, None, None).unwrap();
    let other = TrainConfig {
        total_steps: 3,
        ..cfg
    };
    assert!(matches!(
        Trainer::resume(other, &corpus, out.checkpoint),
        Err(Error::Config(_))
    ));
}

#[test]
fn optimizer_never_touches_the_teacher() {
    let (cfg, corpus) = small_run(3);
    let mut tr = Trainer::new(cfg, &corpus).unwrap();
    let student_before = tr.student().clone();
    // The warmup starts from a zero learning rate, so step 0 changes nothing.
    assert_eq!(tr.step().unwrap().row.lr, 0.0);
    assert_eq!(tr.student(), &student_before);
    let teacher_before = tr.teacher().clone();
    let rec = tr.step().unwrap();
    assert!(rec.applied);
    assert_ne!(tr.student(), &student_before);
    // The teacher moved only by the EMA of the updated student.
    let mut expect = teacher_before.clone();
    ema_update(&mut expect, tr.student(), rec.row.ema_m).unwrap();
    assert_eq!(tr.teacher(), &expect);
}
