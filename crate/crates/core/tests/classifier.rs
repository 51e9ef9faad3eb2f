mod common;

use common::*;
use jdbm::classifier::{
    evaluate_error, extract_feature_set, extract_features, generative_error, mlp_forward, mlp_loss_grad,
    train_classifier, ClassifierConfig, FeatureExample, MlpParams,
};
use jdbm::meanfield::{mf_infer, MfConfig};
use jdbm::{ClampSpec, LabelClamp, ModelSpec};
use ndarray::Array1;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Forward pass with explicit loops; returns the class distribution.
fn forward_ref(m: &MlpParams, v: &[f64], phi: &[f64]) -> Vec<f64> {
    let (d, n1, n2, k) = m.dims();
    let h1: Vec<f64> = (0..n1)
        .map(|j| sig(m.b1[j] + (0..d).map(|i| v[i] * m.a[[i, j]]).sum::<f64>() + (0..n2).map(|l| phi[l] * m.b[[l, j]]).sum::<f64>()))
        .collect();
    let h2: Vec<f64> = (0..n2).map(|l| sig(m.b2[l] + (0..n1).map(|j| h1[j] * m.c[[j, l]]).sum::<f64>())).collect();
    let a: Vec<f64> = (0..k).map(|c| (0..n2).map(|l| h2[l] * m.d_out[[l, c]]).sum()).collect();
    let mx = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = a.iter().map(|x| (x - mx).exp()).sum();
    a.iter().map(|x| (x - mx).exp() / z).collect()
}

fn random_features(seed: u64, n: usize, d: usize, n2: usize, k: usize) -> Vec<FeatureExample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| FeatureExample {
            v: random_bits(&mut r, d),
            phi: Array1::from_shape_fn(n2, |_| r.random::<f64>()),
            y: i % k,
        })
        .collect()
}

#[test]
fn forward_matches_loop_reference() {
    let mut r = rng(40);
    let spec = ModelSpec::new(6, 4, 3, 3).unwrap();
    let mlp = MlpParams::from_dbm(&random_model(&mut r, spec, 1.0, 1.0)).unwrap();
    for ex in random_features(41, 10, 6, 3, 3) {
        let got = mlp_forward(&mlp, ex.v.view(), ex.phi.view()).unwrap();
        let want = forward_ref(&mlp, ex.v.as_slice().unwrap(), ex.phi.as_slice().unwrap());
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = rng(42);
    let (d, n1, n2, k) = (5, 4, 3, 3);
    let spec = ModelSpec::new(d, n1, n2, k).unwrap();
    let mut mlp = MlpParams::from_dbm(&random_model(&mut r, spec, 0.8, 0.5)).unwrap();
    mlp.c.mapv_inplace(|x| x + r.random_range(-0.3..0.3));
    let batch = random_features(43, 8, d, n2, k);
    let (loss, g) = mlp_loss_grad(&mlp, &batch).unwrap();
    let ce: f64 = batch
        .iter()
        .map(|ex| -forward_ref(&mlp, ex.v.as_slice().unwrap(), ex.phi.as_slice().unwrap())[ex.y].ln())
        .sum::<f64>()
        / batch.len() as f64;
    assert!((loss - ce).abs() < 1e-12);
    let fd = fd_gradient(&mlp.to_flat(), 1e-5, |x| {
        mlp_loss_grad(&MlpParams::from_flat(d, n1, n2, k, x).unwrap(), &batch).unwrap().0
    });
    let err = max_rel_err(&g.to_flat(), &fd, 1e-4);
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn initial_mlp_is_one_more_sweep_without_label_bias() {
    let mut r = rng(44);
    for _ in 0..10 {
        let spec = random_spec(&mut r, 6, &[2, 4]);
        let p = random_model(&mut r, spec, 1.0, 1.0);
        let v = random_bits(&mut r, spec.n_visible);
        let mf = MfConfig { max_sweeps: 200, tol: 1e-12 };
        let phi = extract_features(&p, v.view(), mf).unwrap();

        let mut clamp = ClampSpec::observed(spec, v.view(), None);
        clamp.y = LabelClamp::Zero;
        let state = mf_infer(&p, &clamp, 200, 1e-12).unwrap().state;
        assert_eq!(state.h2, phi);
        assert!(state.y.iter().all(|&x| x == 0.0));

        // One more h1 then h2 update, label still zero, then the label
        // softmax without its bias.
        let (d, n1, n2, k) = (spec.n_visible, spec.n_hidden1, spec.n_hidden2, spec.n_classes);
        let h1: Vec<f64> = (0..n1)
            .map(|j| sig(p.b_h1[j] + (0..d).map(|i| v[i] * p.w1[[i, j]]).sum::<f64>() + (0..n2).map(|l| p.w2[[j, l]] * phi[l]).sum::<f64>()))
            .collect();
        let h2: Vec<f64> = (0..n2).map(|l| sig(p.b_h2[l] + (0..n1).map(|j| h1[j] * p.w2[[j, l]]).sum::<f64>())).collect();
        let a: Vec<f64> = (0..k).map(|c| (0..n2).map(|l| h2[l] * p.w3[[l, c]]).sum()).collect();
        let z: f64 = a.iter().map(|x| x.exp()).sum();

        let mlp = MlpParams::from_dbm(&p).unwrap();
        let out = mlp_forward(&mlp, v.view(), phi.view()).unwrap();
        for c in 0..k {
            assert!((out[c] - a[c].exp() / z).abs() < 1e-12);
        }
    }
}

#[test]
fn features_ignore_the_label_bias() {
    let mut r = rng(45);
    let spec = ModelSpec::new(6, 5, 4, 3).unwrap();
    let p = random_model(&mut r, spec, 1.0, 1.0);
    let mut q = p.clone();
    q.b_y.mapv_inplace(|x| x + 7.0 * r.random::<f64>() - 3.0);
    for _ in 0..5 {
        let v = random_bits(&mut r, 6);
        let mf = MfConfig::default();
        assert_eq!(extract_features(&p, v.view(), mf).unwrap(), extract_features(&q, v.view(), mf).unwrap());
    }
}

#[test]
fn separable_toy_is_fit_exactly_and_weights_untie() {
    let spec = ModelSpec::new(6, 4, 3, 2).unwrap();
    let mut r = rng(46);
    let p = random_model(&mut r, spec, 0.1, 0.1);
    let data: Vec<_> = (0..60)
        .map(|i| {
            let mut v = random_bits(&mut r, 6);
            v[0] = (i % 2) as f64;
            (v, Some(i % 2))
        })
        .collect();
    let features = extract_feature_set(&p, &data, MfConfig::default()).unwrap();
    let mlp = MlpParams::from_dbm(&p).unwrap();
    let cfg = ClassifierConfig { epochs: 30, batch_size: 30, seed: 3, ..ClassifierConfig::default() };
    let mut steps = 0;
    let (trained, curve) = train_classifier(mlp.clone(), &features, &cfg, |_, _| {
        steps += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(curve.len(), 30);
    assert_eq!(steps, 60);
    assert_eq!(evaluate_error(&trained, &features).unwrap(), 0.0);
    assert_eq!(*curve.last().unwrap(), 0.0);
    assert_ne!(trained.c.t(), trained.b);
    assert!(generative_error(&p, &data, MfConfig::default()).unwrap() <= 1.0);
}

#[test]
fn flat_round_trip_and_shape_errors() {
    let mlp = MlpParams::from_dbm(&random_model(&mut rng(47), ModelSpec::new(3, 2, 2, 2).unwrap(), 1.0, 1.0)).unwrap();
    let (d, n1, n2, k) = mlp.dims();
    assert_eq!(MlpParams::from_flat(d, n1, n2, k, &mlp.to_flat()).unwrap(), mlp);
    assert!(MlpParams::from_flat(d, n1, n2, k, &mlp.to_flat()[1..]).is_err());
    let v = Array1::zeros(4);
    assert!(mlp_forward(&mlp, v.view(), Array1::zeros(2).view()).is_err());
}

use rand::Rng;
