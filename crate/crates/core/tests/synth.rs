use std::time::Instant;

use tsdistill::rng;
use tsdistill::synth::{
    generate_corpus, sample_gp, unit_grid, Activation, DagSpec, KernelSpec, MeanSpec, SynthConfig,
};

fn lag_autocorr(x: &[f64], lag: usize) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    let cov: f64 = x.windows(lag + 1).map(|w| (w[0] - m) * (w[lag] - m)).sum();
    cov / var
}

/// Independent recursive evaluation: a node's value is computed from its
/// parents' values by recursion, with no topological ordering involved.
fn recursive_value(dag: &DagSpec, roots: &[(usize, Vec<f64>)], v: usize, t: usize) -> f64 {
    if let Some((_, s)) = roots.iter().find(|(r, _)| *r == v) {
        return s[t];
    }
    let node = &dag.nodes[v];
    let pre: f64 = node
        .parents
        .iter()
        .map(|&(u, w)| w * recursive_value(dag, roots, u, t))
        .sum::<f64>()
        + node.bias;
    match node.activation {
        Activation::Identity => pre,
        Activation::Tanh => pre.tanh(),
        Activation::Sin => pre.sin(),
        Activation::Softplus => (1.0 + pre.exp()).ln(),
        Activation::Silu => pre / (1.0 + (-pre).exp()),
    }
}

#[test]
fn edge_weights_are_standard_normal() {
    let cfg = SynthConfig::default();
    let mut rng = rng::stream(0, "clt", 0);
    let mut weights = Vec::new();
    for _ in 0..1000 {
        let dag = DagSpec::sample(&mut rng, 12, &cfg);
        weights.extend(dag.nodes.iter().flat_map(|n| n.parents.iter().map(|p| p.1)));
    }
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean} over {n} weights");
}

#[test]
fn white_noise_gp_is_uncorrelated() {
    let cfg = SynthConfig::default();
    let kernel = KernelSpec::WhiteNoise { variance: 1.0 };
    let t = 256;
    let mut rng = rng::stream(1, "wn", 0);
    let bound = 4.0 / (t as f64).sqrt();
    let mut mean_r = 0.0;
    for _ in 0..100 {
        let x = sample_gp(&mut rng, &kernel, &MeanSpec::zero(), t, &cfg).unwrap();
        let r = lag_autocorr(&x, 1);
        assert!(r.abs() < bound, "lag-1 r = {r}");
        mean_r += r / 100.0;
    }
    assert!(mean_r.abs() < bound / 10.0 + 0.01);
}

#[test]
fn long_lengthscale_rbf_is_smooth() {
    let cfg = SynthConfig::default();
    let kernel = KernelSpec::Rbf {
        variance: 1.0,
        lengthscale: 0.5,
    };
    let mut rng = rng::stream(2, "rbf", 0);
    for _ in 0..100 {
        let x = sample_gp(&mut rng, &kernel, &MeanSpec::zero(), 128, &cfg).unwrap();
        assert!(lag_autocorr(&x, 1) > 0.9);
    }
}

#[test]
fn zero_variance_gp_returns_the_mean() {
    let cfg = SynthConfig::default();
    let kernel = KernelSpec::Rbf {
        variance: 0.0,
        lengthscale: 0.1,
    };
    let mean = MeanSpec {
        poly: vec![0.0, 1.0],
        trend: None,
    };
    let x = sample_gp(&mut rng::stream(0, "zero", 0), &kernel, &mean, 64, &cfg).unwrap();
    assert_eq!(x, unit_grid(64));
}

#[test]
fn propagate_matches_recursive_oracle() {
    let cfg = SynthConfig::default();
    for seed in 0..50 {
        let mut rng = rng::stream(seed, "five", 0);
        let dag = DagSpec::sample_with_nodes(&mut rng, 5, &cfg);
        let roots = dag.roots();
        let samples: Vec<Vec<f64>> = roots
            .iter()
            .map(|_| (0..16).map(|_| rng::normal(&mut rng)).collect())
            .collect();
        let all = dag.propagate(&samples).unwrap();
        let keyed: Vec<(usize, Vec<f64>)> = roots.into_iter().zip(samples).collect();
        for v in 0..5 {
            for t in 0..16 {
                let want = recursive_value(&dag, &keyed, v, t);
                assert!(
                    (all[v][t] - want).abs() <= 1e-12 * want.abs().max(1.0),
                    "node {v} t {t}"
                );
            }
        }
        // pure: same inputs, same outputs
        let again = dag
            .propagate(&keyed.iter().map(|k| k.1.clone()).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(all, again);
    }
}

#[test]
fn corpus_is_deterministic_and_standardized() {
    let cfg = SynthConfig::default();
    let single = generate_corpus(9, 1, 512, &cfg).unwrap();
    assert_eq!((single.n_samples(), single.length()), (1, 512));
    assert!(single.data().iter().all(|v| v.is_finite()));

    let started = Instant::now();
    let a = generate_corpus(42, 1000, 512, &cfg).unwrap();
    eprintln!("1000 x 512 corpus in {:.1?}", started.elapsed());
    let b = generate_corpus(42, 1000, 512, &cfg).unwrap();
    assert_eq!(a, b);
    for i in 0..a.n_samples() {
        let s = a.series(i);
        let n = s.len() as f64;
        let m = s.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let sd = (s.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-5, "sample {i} mean {m}");
        assert!((sd - 1.0).abs() < 1e-4, "sample {i} std {sd}");
        assert!(s.iter().all(|v| v.abs() <= 50.0));
    }
    let c = generate_corpus(43, 1000, 512, &cfg).unwrap();
    assert_ne!(a, c);
}
