use gdr::autodiff::Graph;
use gdr::network::BoundModel;
use gdr::trainer::{
    finite_difference_error, image_loss, init_ensemble, loss_and_weight_gradients, train_from, GradLossKind, Phase,
    DEFAULT_TAU,
};
use gdr::{data_io, train_ensemble, Ensemble, Error, MlpModel, TrainConfig};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use std::f64::consts::PI;

/// Two-class linear model whose true-class input gradient at the origin
/// points along `d` (label 0).
fn pointing(d: &[f64]) -> MlpModel {
    let w = Array2::from_shape_fn((d.len(), 2), |(i, c)| if c == 0 { d[i] } else { -d[i] });
    MlpModel::new(vec![d.len(), 2], vec![w], vec![Array1::zeros(2)]).unwrap()
}

fn grad_value(e: &Ensemble, kind: GradLossKind) -> f64 {
    let x = Array2::zeros((1, e.input_dim()));
    loss_and_weight_gradients(e, x.view(), &[0], kind, 1.0, DEFAULT_TAU, false).unwrap().0.grad.unwrap()
}

fn toy(k: usize, n: usize, seed: u64) -> Ensemble {
    Ensemble::from_models((0..k).map(|i| MlpModel::init(&[n, 6, 3], seed + i as u64).unwrap()).collect()).unwrap()
}

fn toy_batch(n: usize) -> (Array2<f64>, Vec<usize>) {
    let x = Array2::from_shape_fn((3, n), |(i, j)| ((i * n + j) as f64 * 0.37).sin() * 0.5 + 0.5);
    (x, vec![0, 2, 1])
}

#[test]
fn penalty_weight_gradients_match_finite_differences() {
    let (x, y) = toy_batch(8);
    for (kind, k) in [
        (GradLossKind::CosineMaxPairwise, 3),
        (GradLossKind::AngleSum, 3),
        (GradLossKind::QuadTriangleArea, 4),
        (GradLossKind::None, 3),
    ] {
        let e = toy(k, 8, 11);
        let err = finite_difference_error(&e, x.view(), &y, kind, 0.5, DEFAULT_TAU, 1e-4).unwrap();
        assert!(err < 1e-3, "{kind}: relative error {err:.2e}");
        // The penalty alone, so the image loss cannot mask it.
        let err = finite_difference_error(&e, x.view(), &y, kind, 1e3, DEFAULT_TAU, 1e-4).unwrap();
        assert!(err < 1e-3, "{kind} (penalty dominated): relative error {err:.2e}");
    }
}

#[test]
fn copies_are_the_worst_case() {
    let m = MlpModel::init(&[8, 6, 3], 2).unwrap();
    let (x, y) = toy_batch(8);
    let value = |e: &Ensemble, kind| {
        loss_and_weight_gradients(e, x.view(), &y, kind, 1.0, DEFAULT_TAU, false).unwrap().0.grad.unwrap()
    };
    let three = Ensemble::copies(&m, 3).unwrap();
    assert!((value(&three, GradLossKind::CosineMaxPairwise) - 1.0).abs() < 1e-12);
    // Copies sit at the clamp edge of arccos, so the angles are tiny, not 0.
    let ang = value(&three, GradLossKind::AngleSum);
    assert!(ang <= 0.0 && ang > -2e-3, "{ang}");
    let quad = value(&Ensemble::copies(&m, 4).unwrap(), GradLossKind::QuadTriangleArea);
    assert!(quad <= 0.0 && quad > -1e-5, "{quad}");
    // Any other ensemble does at least as well.
    let other = toy(3, 8, 40);
    assert!(value(&other, GradLossKind::CosineMaxPairwise) <= 1.0);
    assert!(value(&other, GradLossKind::AngleSum) <= ang);
}

#[test]
fn orthogonal_and_planar_layouts() {
    let e = |n: usize, k: usize| (0..k).map(move |i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<_>>());
    let two = Ensemble::from_models(e(4, 2).map(|d| pointing(&d)).collect()).unwrap();
    assert!(grad_value(&two, GradLossKind::CosineMaxPairwise).abs() < 1e-12);

    let four = Ensemble::from_models(e(4, 4).map(|d| pointing(&d)).collect()).unwrap();
    let quad = grad_value(&four, GradLossKind::QuadTriangleArea);
    assert!((quad + 2.0 * PI).abs() < 1e-9, "{quad}");

    let planar = Ensemble::from_models(
        (0..3)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / 3.0;
                pointing(&[a.cos(), a.sin(), 0.0])
            })
            .collect(),
    )
    .unwrap();
    let ang = grad_value(&planar, GradLossKind::AngleSum);
    assert!((ang + 2.0 * PI).abs() < 1e-9, "{ang}");
}

#[test]
fn image_loss_is_the_member_mean() {
    let x = Array2::from_shape_fn((4, 5), |(i, j)| (i + j) as f64 / 10.0);
    let y = [0, 9, 3, 3];
    let eval = |e: &Ensemble| {
        let mut g = Graph::new();
        let members: Vec<BoundModel> = e.models().iter().map(|m| m.bind(&mut g).unwrap()).collect();
        let xv = g.constant(x.clone()).unwrap();
        let l = image_loss(&mut g, &members, xv, &y).unwrap();
        g.scalar_value(l)
    };
    let uniform = Ensemble::copies(&MlpModel::zeros(&[5, 4, 10]).unwrap(), 3).unwrap();
    assert!((eval(&uniform) - 10f64.ln()).abs() < 1e-14);

    let e = Ensemble::from_models((0..3).map(|i| MlpModel::init(&[5, 4, 10], i).unwrap()).collect()).unwrap();
    let mean = (0..3).map(|i| eval(&e.member(i))).sum::<f64>() / 3.0;
    assert!((eval(&e) - mean).abs() < 1e-12);

    // Sharpening a correct model drives the loss toward 0.
    let sharp = |s: f64| {
        let w = Array2::zeros((5, 10));
        let mut b = Array1::zeros(10);
        b[3] = s;
        Ensemble::singleton(MlpModel::new(vec![5, 10], vec![w], vec![b]).unwrap())
    };
    let x3 = Array2::zeros((1, 5));
    let ce = |s: f64| loss_and_weight_gradients(&sharp(s), x3.view(), &[3], GradLossKind::None, 0.0, 1.0, false).unwrap().0.image;
    assert!(ce(5.0) > ce(20.0) && ce(40.0) < 1e-15);
}

#[test]
fn joint_loss_adds_the_weighted_penalty() {
    let e = toy(3, 8, 5);
    let (x, y) = toy_batch(8);
    let v = |kind, beta| loss_and_weight_gradients(&e, x.view(), &y, kind, beta, DEFAULT_TAU, false).unwrap().0;
    let plain = v(GradLossKind::None, 0.5);
    assert_eq!(plain.total, plain.image);
    assert_eq!(v(GradLossKind::CosineMaxPairwise, 0.0), plain);
    let joint = v(GradLossKind::CosineMaxPairwise, 0.5);
    assert_eq!(joint.image, plain.image);
    assert!((joint.total - (joint.image + 0.5 * joint.grad.unwrap())).abs() < 1e-12);
}

fn small_data() -> gdr::Dataset {
    data_io::synthetic_blobs(12, 3, 40, 0.4, 8).unwrap()
}

fn small_config(phases: Vec<Phase>) -> TrainConfig {
    let mut c = TrainConfig::baseline(1).with_hidden(vec![8]).with_seed(21);
    c.phases = phases;
    c.batch_size = 16;
    c.learning_rate = 0.1;
    c.log_probe = 32;
    c
}

#[test]
fn zero_beta_training_is_bit_identical_to_plain_training() {
    let data = small_data();
    let plain = small_config(vec![Phase::new(2, GradLossKind::None)]);
    let mut zero = small_config(vec![Phase::new(2, GradLossKind::AngleSum)]);
    zero.beta = 0.0;
    assert!(zero.is_baseline());
    let (a, _) = train_ensemble(&plain, &data).unwrap();
    let (b, _) = train_ensemble(&zero, &data).unwrap();
    assert_eq!(a.models(), b.models());
}

#[test]
fn training_is_deterministic_and_logs_every_epoch() {
    let data = small_data();
    let c = small_config(vec![Phase::new(2, GradLossKind::CosineMaxPairwise), Phase::new(1, GradLossKind::AngleSum)]);
    let mut seen = Vec::new();
    let init = init_ensemble(&c, data.n(), data.classes()).unwrap();
    let (a, log) = train_from(&c, &data, init, |r, _| {
        seen.push(r.epoch);
        Ok(())
    })
    .unwrap();
    let (b, _) = train_ensemble(&c, &data).unwrap();
    assert_eq!(a.models(), b.models());
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(log.epochs.len(), c.epochs_total());
    let kinds: Vec<GradLossKind> = log.epochs.iter().map(|r| r.kind).collect();
    assert_eq!(kinds, [GradLossKind::CosineMaxPairwise, GradLossKind::CosineMaxPairwise, GradLossKind::AngleSum]);
    for r in &log.epochs {
        for v in [r.image_loss, r.grad_loss, r.total_loss, r.consensus_accuracy, r.sampled_gdr] {
            assert!(v.is_finite());
        }
    }
    let mut csv = Vec::new();
    log.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("epoch,"));

    let other = train_ensemble(&c.clone().with_seed(22), &data).unwrap().0;
    assert_ne!(other.models(), a.models());
}

#[test]
fn divergence_returns_the_last_good_ensemble() {
    let data = small_data();
    let c = small_config(vec![Phase::new(3, GradLossKind::None)]);
    // Output weights near f64::MAX overflow the logits on the first batch.
    let init = init_ensemble(&c, data.n(), data.classes()).unwrap();
    let huge = Ensemble::from_models(
        init.models()
            .iter()
            .map(|m| {
                let mut w = m.weights().to_vec();
                w[1].fill(1e308);
                MlpModel::new(m.dims().to_vec(), w, m.biases().to_vec()).unwrap()
            })
            .collect(),
    )
    .unwrap();
    match train_from(&c, &data, huge.clone(), |_, _| Ok(())) {
        Err(Error::Diverged { epoch, batch, last_good }) => {
            assert_eq!((epoch, batch), (1, 0));
            assert_eq!(last_good.models(), huge.models());
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
    assert!(train_from(&c, &data, init, |_, _| Ok(())).is_ok());
}

#[test]
fn invalid_configs_are_rejected() {
    let data = small_data();
    let mut bad = vec![];
    let mut c = small_config(vec![Phase::new(1, GradLossKind::QuadTriangleArea)]);
    bad.push(c.clone());
    c.members = 4;
    assert!(c.validate().is_ok());
    let mut c = TrainConfig::desk();
    c.beta = -1.0;
    bad.push(c);
    let mut c = TrainConfig::desk();
    c.learning_rate = 0.0;
    bad.push(c);
    let mut c = TrainConfig::desk();
    c.phases.clear();
    bad.push(c);
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        assert!(train_ensemble(&c, &data).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradient_losses_stay_in_range(seed in any::<u64>()) {
        let (x, y) = toy_batch(6);
        let v = |e: &Ensemble, kind| loss_and_weight_gradients(e, x.view(), &y, kind, 1.0, DEFAULT_TAU, false).unwrap().0.grad.unwrap();
        let three = toy(3, 6, seed);
        let cos = v(&three, GradLossKind::CosineMaxPairwise);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&cos));
        let ang = v(&three, GradLossKind::AngleSum);
        prop_assert!((-2.0 * PI - 1e-9..=0.0).contains(&ang));
        let quad = v(&toy(4, 6, seed), GradLossKind::QuadTriangleArea);
        prop_assert!((-4.0 * PI - 1e-9..=0.0).contains(&quad));
    }
}
