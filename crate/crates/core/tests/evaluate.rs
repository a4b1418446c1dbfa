use std::path::PathBuf;

use proptest::prelude::*;
use tsdistill::evaluate::*;
use tsdistill::model::{ModelConfig, ModelParams};
use tsdistill::rng::{self, stream};
use tsdistill::{Error, Tensor};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

// ---- .ts parsing ----

#[test]
fn univariate_fixture_parses() {
    let s = parse_ts_file(&fixture("ts/Toy_TRAIN.ts")).unwrap();
    assert_eq!(s.problem_name, "Toy");
    assert_eq!(s.n_channels, 1);
    assert_eq!(s.class_labels, ["a", "b"]);
    assert_eq!(s.len(), 2);
    assert_eq!(s.samples[0].label, "a");
    assert_eq!(s.samples[1].label, "b");
    assert_eq!(s.samples[1].channels[0], vec![3.0, 2.5, 2.0, 1.5, 1.0, 0.5]);
    assert_eq!(s.label_indices(), vec![0, 1]);

    let ds = LabeledDataset::load_dir(&fixture("ts"), "Toy").unwrap();
    assert_eq!(ds.test.len(), 2);
}

#[test]
fn multivariate_fixture_parses() {
    let s = parse_ts_file(&fixture("ts/ThreeChannel_TRAIN.ts")).unwrap();
    assert_eq!(s.n_channels, 3);
    assert_eq!(s.len(), 3);
    assert_eq!(s.class_labels, ["up", "down", "flat"]);
    assert_eq!(s.samples[0].channels[1], vec![10.0, 20.0, 30.0, 40.0]);
    assert_eq!(s.label_indices(), vec![0, 1, 2]);
}

#[test]
fn fixtures_round_trip() {
    for f in [
        "ts/Toy_TRAIN.ts",
        "ts/Toy_TEST.ts",
        "ts/ThreeChannel_TRAIN.ts",
    ] {
        let a = parse_ts_file(&fixture(f)).unwrap();
        let b = parse_ts(&serialize_ts(&a), "round-trip").unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn malformed_fixtures_report_line_numbers() {
    for (f, line, needle) in [
        ("ts/malformed_directive.ts", 3, "unknown directive"),
        ("ts/malformed_ragged.ts", 6, "ragged"),
        ("ts/malformed_label.ts", 7, "unknown class label"),
        ("ts/malformed_missing.ts", 5, "missing value"),
    ] {
        match parse_ts_file(&fixture(f)) {
            Err(Error::Parse { line: l, msg, .. }) => {
                assert_eq!(l, line, "{f}: {msg}");
                assert!(msg.contains(needle), "{f}: {msg}");
            }
            other => panic!("{f}: expected a parse error, got {other:?}"),
        }
    }
}

#[test]
fn header_problems_are_parse_errors() {
    let cases = [
        ("@problemName X\n@univariate true\n@data\n1:a\n", 3),
        ("@problemName X\n@classLabel true a\n@data\n1:a\n", 3),
        ("@problemName X\n@univariate maybe\n", 2),
        ("@problemName X\n@univariate true\n@classLabel true a\n", 3),
        ("1,2,3:a\n", 1),
        (
            "@problemName X\n@dimensions 2\n@classLabel true a\n@data\n1,2:a\n",
            5,
        ),
        (
            "@problemName X\n@univariate true\n@classLabel true a\n@data\n1,x:a\n",
            5,
        ),
    ];
    for (text, line) in cases {
        match parse_ts(text, "inline") {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

fn arb_split() -> impl Strategy<Value = TsSplit> {
    (1usize..4, 1usize..6, 1usize..3).prop_flat_map(|(channels, n, n_labels)| {
        let labels: Vec<String> = (0..n_labels + 1).map(|i| format!("c{i}")).collect();
        let sample = (
            prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 3), channels),
            0..labels.len(),
        );
        (
            Just(channels),
            Just(labels),
            prop::collection::vec(sample, n),
        )
            .prop_map(|(channels, labels, raw)| TsSplit {
                problem_name: "Prop".into(),
                n_channels: channels,
                samples: raw
                    .into_iter()
                    .map(|(ch, l)| TsSample {
                        channels: ch,
                        label: labels[l].clone(),
                    })
                    .collect(),
                class_labels: labels,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn serialize_then_parse_is_identity(split in arb_split()) {
        let back = parse_ts(&serialize_ts(&split), "prop").unwrap();
        prop_assert_eq!(back, split);
    }
}

// ---- embedding ----

fn tiny() -> (ModelConfig, ModelParams) {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 3).unwrap();
    (cfg, params)
}

fn noisy_split(n: usize, channels: usize, len: usize, seed: u64) -> TsSplit {
    let mut r = stream(seed, "test-split", 0);
    TsSplit {
        problem_name: "Noise".into(),
        n_channels: channels,
        class_labels: vec!["a".into(), "b".into()],
        samples: (0..n)
            .map(|i| TsSample {
                channels: (0..channels)
                    .map(|_| (0..len).map(|_| rng::normal(&mut r) as f32).collect())
                    .collect(),
                label: ["a", "b"][i % 2].into(),
            })
            .collect(),
    }
}

#[test]
fn embedding_width_and_determinism() {
    let (cfg, params) = tiny();
    let mut split = noisy_split(3, 1, 100, 1);
    split.samples.push(split.samples[0].clone());
    let f = embed(&params, &cfg, &split).unwrap();
    assert_eq!(f.shape(), &[4, cfg.d_model]);
    assert_eq!(f.row(0), f.row(3));
    assert_ne!(f.row(0), f.row(1));

    let mut reversed = split.clone();
    reversed.samples.reverse();
    let g = embed(&params, &cfg, &reversed).unwrap();
    for i in 0..4 {
        assert_eq!(f.row(i), g.row(3 - i));
    }

    let empty = TsSplit {
        samples: vec![],
        ..split
    };
    assert!(matches!(embed(&params, &cfg, &empty), Err(Error::Input(_))));
}

#[test]
fn embedding_is_channel_equivariant() {
    let (cfg, params) = tiny();
    let d = cfg.d_model;
    let split = noisy_split(2, 3, 64, 2);
    let f = embed(&params, &cfg, &split).unwrap();
    assert_eq!(f.shape(), &[2, 3 * d]);
    let perm = [2, 0, 1];
    let mut permuted = split.clone();
    for s in &mut permuted.samples {
        s.channels = perm.iter().map(|&c| s.channels[c].clone()).collect();
    }
    let g = embed(&params, &cfg, &permuted).unwrap();
    for i in 0..2 {
        for (k, &c) in perm.iter().enumerate() {
            assert_eq!(&g.row(i)[k * d..(k + 1) * d], &f.row(i)[c * d..(c + 1) * d]);
        }
    }
}

// ---- linear probe ----

fn blobs(n: usize, dim: usize, sep: f64, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = stream(seed, "blobs", 0);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Tensor::from_fn([n, dim], |i| {
        let c = labels[i / dim] as f64 * 2.0 - 1.0;
        (c * sep + rng::normal(&mut r)) as f32
    });
    (x, labels)
}

#[test]
fn probe_separates_blobs_and_loss_falls() {
    let (tx, ty) = blobs(200, 16, 1.5, 1);
    let (vx, vy) = blobs(200, 16, 1.5, 2);
    let r = linear_probe(&tx, &ty, &vx, &vy, 2, &ProbeConfig::default(), 0).unwrap();
    assert!(r.accuracy >= 0.99, "{}", r.accuracy);
    assert_eq!(r.train_loss.len(), 100);
    for w in r.train_loss[..5].windows(2) {
        assert!(w[1] < w[0], "{:?}", &r.train_loss[..5]);
    }
}

#[test]
fn probe_on_shuffled_labels_is_near_chance() {
    // Averaged over draws: a single 200-sample test split fluctuates by about ±0.035.
    let cfg = ProbeConfig {
        selection: EpochSelection::Last,
        ..ProbeConfig::default()
    };
    let accs: Vec<f64> = (0..5u64)
        .map(|seed| {
            let (tx, _) = blobs(200, 16, 1.5, 3 + 10 * seed);
            let (vx, _) = blobs(200, 16, 1.5, 4 + 10 * seed);
            let mut r = stream(5 + seed, "shuffle", 0);
            let mut shuffle = |n: usize| {
                let mut y: Vec<usize> = (0..n).map(|i| i % 2).collect();
                rng::shuffle(&mut r, &mut y);
                y
            };
            let (ty, vy) = (shuffle(200), shuffle(200));
            linear_probe(&tx, &ty, &vx, &vy, 2, &cfg, seed)
                .unwrap()
                .accuracy
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "{accs:?}");
}

#[test]
fn probe_on_constant_features_predicts_the_majority() {
    let x = Tensor::full([30, 4], 0.7);
    let y: Vec<usize> = (0..30).map(|i| usize::from(i % 3 == 0)).collect();
    let tx = Tensor::full([12, 4], 0.7);
    let ty: Vec<usize> = (0..12).map(|i| usize::from(i % 3 == 0)).collect();
    let cfg = ProbeConfig {
        selection: EpochSelection::Last,
        ..ProbeConfig::default()
    };
    let r = linear_probe(&x, &y, &tx, &ty, 2, &cfg, 1).unwrap();
    assert!((r.accuracy - 8.0 / 12.0).abs() < 1e-12);
}

#[test]
fn probe_rejects_single_class_training_data() {
    let x = Tensor::zeros([4, 2]);
    let err = linear_probe(
        &x,
        &[1, 1, 1, 1],
        &x,
        &[0, 1, 0, 1],
        2,
        &ProbeConfig::default(),
        0,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
}

#[test]
fn probe_validation_mode_and_feature_tables() {
    let train = FeatureTable::read_csv(&fixture("features/separable_TRAIN.csv")).unwrap();
    let test = FeatureTable::read_csv(&fixture("features/separable_TEST.csv")).unwrap();
    assert_eq!(train.features.shape(), &[40, 8]);
    for sel in [
        EpochSelection::BestTest,
        EpochSelection::Validation,
        EpochSelection::Last,
    ] {
        let cfg = ProbeConfig {
            selection: sel,
            ..ProbeConfig::default()
        };
        let r = probe_tables(&train, &test, &cfg, 0).unwrap();
        assert!(r.accuracy >= 0.99, "{sel:?}: {}", r.accuracy);
        assert_eq!(r.val_accuracy.is_empty(), sel != EpochSelection::Validation);
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    train.write_csv(&p).unwrap();
    assert_eq!(FeatureTable::read_csv(&p).unwrap(), train);
}

#[test]
fn stratified_split_holds_out_each_class() {
    let labels: Vec<usize> = (0..50).map(|i| i % 5 / 2).collect();
    let (train, val) = stratified_split(&labels, 0.2, &mut stream(0, "s", 0));
    assert_eq!(train.len() + val.len(), 50);
    for c in 0..3 {
        let n = labels.iter().filter(|&&y| y == c).count();
        let v = val.iter().filter(|&&i| labels[i] == c).count();
        assert_eq!(v, (n as f64 * 0.2).round() as usize);
    }
    // A singleton class forces the random fallback; both sides stay non-empty.
    let (train, val) = stratified_split(&[0, 0, 0, 0, 1], 0.2, &mut stream(0, "s", 1));
    assert_eq!((train.len(), val.len()), (4, 1));
}

// ---- fine-tuning ----

#[test]
fn lr_ties_go_to_the_smallest_rate() {
    let trial = |lr: f64, v: f64| LrTrial {
        lr,
        val_accuracy: v,
        val_curve: vec![v],
        test_curve: vec![v],
    };
    let trials = [trial(1e-3, 0.8), trial(1e-4, 0.8), trial(2e-4, 0.8)];
    assert_eq!(select_lr(&trials), 1);
    let trials = [trial(1e-4, 0.7), trial(2e-4, 0.9), trial(1e-3, 0.9)];
    assert_eq!(select_lr(&trials), 1);
}

#[test]
fn finetune_is_deterministic_and_not_worse_than_probing() {
    let (cfg, params) = tiny();
    let task = FrequencyTaskConfig {
        length: 128,
        n_train: 20,
        n_test: 20,
        cycles_a: (2.0, 3.0),
        cycles_b: (12.0, 14.0),
        ..Default::default()
    };
    let data = frequency_task(&task, 4).unwrap();
    let ft = FinetuneConfig {
        epochs: 8,
        ..FinetuneConfig::default()
    };
    let a = finetune(&params, &cfg, &data, &ft, 0).unwrap();
    let b = finetune(&params, &cfg, &data, &ft, 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trials.len(), 3);
    assert!(ft.lr_grid.contains(&a.selected_lr));

    let probe = {
        let tr = embed(&params, &cfg, &data.train).unwrap();
        let te = embed(&params, &cfg, &data.test).unwrap();
        let cfg = ProbeConfig {
            epochs: 8,
            ..ProbeConfig::default()
        };
        linear_probe(
            &tr,
            &data.train.label_indices(),
            &te,
            &data.test.label_indices(),
            2,
            &cfg,
            0,
        )
        .unwrap()
    };
    assert!(
        a.accuracy >= probe.accuracy - 0.05,
        "finetune {} probe {}",
        a.accuracy,
        probe.accuracy
    );

    let mut single = data.clone();
    for s in &mut single.train.samples {
        s.label = "a".into();
    }
    assert!(matches!(
        finetune(&params, &cfg, &single, &ft, 0),
        Err(Error::Protocol(_))
    ));
}

// ---- aggregation ----

fn row(ds: &str, seed: u64, m: &str, acc: f64) -> EvalRow {
    EvalRow {
        dataset: ds.into(),
        seed,
        method: m.into(),
        regime: "probe".into(),
        accuracy: acc,
    }
}

fn method<'a>(r: &'a RegimeReport, m: &str) -> &'a MethodSummary {
    r.methods.iter().find(|s| s.method == m).unwrap()
}

#[test]
fn ranks_and_wins() {
    let rep = aggregate(&[row("d", 0, "x", 0.9), row("d", 0, "y", 0.8)]).unwrap();
    let r = &rep.regimes[0];
    assert_eq!((method(r, "x").average_rank, method(r, "x").wins), (1.0, 1));
    assert_eq!((method(r, "y").average_rank, method(r, "y").wins), (2.0, 0));

    let rep = aggregate(&[row("d", 0, "x", 0.8), row("d", 0, "y", 0.8)]).unwrap();
    let r = &rep.regimes[0];
    assert_eq!((method(r, "x").average_rank, method(r, "x").wins), (1.5, 1));
    assert_eq!((method(r, "y").average_rank, method(r, "y").wins), (1.5, 1));
    assert_eq!(
        average_ranks(&[0.5, 0.9, 0.5, 0.1]),
        vec![2.5, 1.0, 2.5, 4.0]
    );
}

#[test]
fn three_dataset_table_matches_hand_computation() {
    // d1: a .9, b .8, c .7 -> 1 2 3
    // d2: a .6, b .6, c .9 -> 2.5 2.5 1
    // d3: a .5, b .7, c .7 -> 3 1.5 1.5
    let mut rows = Vec::new();
    for (ds, accs) in [
        ("d1", [0.9, 0.8, 0.7]),
        ("d2", [0.6, 0.6, 0.9]),
        ("d3", [0.5, 0.7, 0.7]),
    ] {
        for (m, a) in ["a", "b", "c"].iter().zip(accs) {
            rows.push(row(ds, 0, m, a));
        }
    }
    let rep = aggregate(&rows).unwrap();
    let r = &rep.regimes[0];
    let expect = [
        ("a", 6.5 / 3.0, 1, 2.0 / 3.0),
        ("b", 2.0, 1, 0.7),
        ("c", 5.5 / 3.0, 2, 2.3 / 3.0),
    ];
    for (m, rank, wins, acc) in expect {
        let s = method(r, m);
        assert!((s.average_rank - rank).abs() < 1e-12, "{m}");
        assert_eq!(s.wins, wins, "{m}");
        assert!((s.average_accuracy - acc).abs() < 1e-12, "{m}");
    }
    let plot = rep.plot_data();
    assert_eq!(plot[0].x, ["a", "b", "c"]);
    assert_eq!(plot[0].wins, [1, 1, 2]);
}

#[test]
fn std_uses_the_seed_set_and_missing_cells_fail() {
    let rows = [
        row("d", 0, "x", 0.5),
        row("d", 1, "x", 0.7),
        row("d", 2, "x", 0.9),
    ];
    let rep = aggregate(&rows).unwrap();
    let cell = &rep.regimes[0].cells[0];
    assert!((cell.mean - 0.7).abs() < 1e-12);
    assert!((cell.std - (0.08f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(rep.regimes[0].seeds, vec![0, 1, 2]);

    let missing_seed = [
        row("d", 0, "x", 0.5),
        row("d", 1, "x", 0.7),
        row("d", 0, "y", 0.9),
    ];
    assert!(matches!(aggregate(&missing_seed), Err(Error::Input(_))));
    let missing_dataset = [
        row("d", 0, "x", 0.5),
        row("e", 0, "x", 0.7),
        row("d", 0, "y", 0.9),
    ];
    assert!(matches!(aggregate(&missing_dataset), Err(Error::Input(_))));
    assert!(aggregate(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn aggregation_ignores_row_order(
        accs in prop::collection::vec(prop::sample::select(vec![0.5, 0.6, 0.7, 0.8]), 12),
        seed in any::<u64>(),
    ) {
        let mut rows = Vec::new();
        let mut k = 0;
        for ds in ["d1", "d2", "d3", "d4"] {
            for m in ["a", "b", "c"] {
                rows.push(row(ds, 0, m, accs[k]));
                k += 1;
            }
        }
        let base = aggregate(&rows).unwrap();
        let mut shuffled = rows.clone();
        rng::shuffle(&mut stream(seed, "rows", 0), &mut shuffled);
        prop_assert_eq!(aggregate(&shuffled).unwrap(), base);
    }
}
