use gdr::network::{write_manifest, ManifestMember};
use gdr::{Ensemble, Error, MlpModel};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(rng: &mut ChaCha8Rng) -> MlpModel {
    let depth = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(2..8)];
    for _ in 0..depth {
        dims.push(rng.random_range(2..7));
    }
    let seed = rng.random();
    let m = MlpModel::init(&dims, seed).unwrap();
    // Nonzero biases so every term of the forward pass is exercised.
    let biases: Vec<Array1<f64>> = m
        .biases()
        .iter()
        .map(|b| b.mapv(|_| rng.random_range(-0.5..0.5)))
        .collect();
    MlpModel::new(dims, m.weights().to_vec(), biases).unwrap()
}

fn fd_gradient(m: &MlpModel, x: &[f64], y: usize) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let at = |d: f64| {
                let mut v = x.to_vec();
                v[i] += d;
                m.confidences(&v).unwrap()[y]
            };
            let c = |s: f64| (at(s) - at(-s)) / (2.0 * s);
            (4.0 * c(h / 2.0) - c(h)) / 3.0
        })
        .collect()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
    let n: f64 = b.iter().map(|q| q * q).sum();
    d.sqrt() / n.sqrt().max(1e-8)
}

#[test]
fn input_gradients_match_finite_differences_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for t in 0..50 {
        let m = random_model(&mut rng);
        let x: Vec<f64> = (0..m.input_dim()).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = rng.random_range(0..m.classes());
        let err = rel_l2(&m.input_gradient(&x, y).unwrap(), &fd_gradient(&m, &x, y));
        assert!(err < 1e-6, "triple {t}: dims {:?}, error {err:.2e}", m.dims());
    }
}

#[test]
fn single_layer_softmax_gradient_matches_finite_differences() {
    let w = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.7).cos());
    let b = Array1::from(vec![0.1, -0.2, 0.05]);
    let m = MlpModel::new(vec![4, 3], vec![w], vec![b]).unwrap();
    let x = [0.2, 0.9, 0.4, 0.6];
    for y in 0..3 {
        let err = rel_l2(&m.input_gradient(&x, y).unwrap(), &fd_gradient(&m, &x, y));
        assert!(err < 1e-6, "class {y}: {err:.2e}");
    }
}

#[test]
fn batch_and_single_paths_agree() {
    let m = MlpModel::init(&[6, 5, 4], 3).unwrap();
    let x = Array2::from_shape_fn((3, 6), |(i, j)| ((i + j) as f64 * 0.3).sin().abs());
    let labels = [0, 3, 2];
    let batch = m.input_gradients(x.view(), &labels).unwrap();
    let preds = m.predict_batch(x.view()).unwrap();
    for r in 0..3 {
        let row: Vec<f64> = x.row(r).to_vec();
        assert_eq!(batch.row(r).to_vec(), m.input_gradient(&row, labels[r]).unwrap());
        assert_eq!(preds[r], m.predict_class(&row).unwrap());
    }
}

#[test]
fn ensemble_directories_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let e = Ensemble::from_models((0..3).map(|i| MlpModel::init(&[5, 4, 3], i).unwrap()).collect()).unwrap();
    e.save_dir(&dir.path().join("a")).unwrap();
    let back = Ensemble::load(&dir.path().join("a")).unwrap();
    assert_eq!(back.models(), e.models());
    assert_eq!(back.names(), e.names());

    // Saving twice gives byte-identical files.
    e.save_dir(&dir.path().join("b")).unwrap();
    for f in ["m0.gden", "m1.gden", "m2.gden", "manifest.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn manifests_can_mix_members_from_other_directories() {
    let dir = tempfile::tempdir().unwrap();
    let a = Ensemble::from_models((0..3).map(|i| MlpModel::init(&[5, 4, 3], i).unwrap()).collect()).unwrap();
    let b = Ensemble::from_models((0..3).map(|i| MlpModel::init(&[5, 4, 3], 10 + i).unwrap()).collect()).unwrap();
    a.save_dir(&dir.path().join("a")).unwrap();
    b.save_dir(&dir.path().join("b")).unwrap();
    let mixed = dir.path().join("mixed");
    std::fs::create_dir(&mixed).unwrap();
    let members = vec![
        ManifestMember { name: "a0".into(), file: "../a/m0.gden".into() },
        ManifestMember { name: "a1".into(), file: "../a/m1.gden".into() },
        ManifestMember { name: "b2".into(), file: "../b/m2.gden".into() },
    ];
    write_manifest(&mixed, &members).unwrap();
    let e = Ensemble::load(&mixed).unwrap();
    assert_eq!(e.models()[0], a.models()[0]);
    assert_eq!(e.models()[1], a.models()[1]);
    assert_eq!(e.models()[2], b.models()[2]);
    assert_eq!(e.names(), &["a0".to_string(), "a1".to_string(), "b2".to_string()]);
}

#[test]
fn missing_and_mismatched_members_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Ensemble::load(&dir.path().join("nope")), Err(Error::File { .. })));
    MlpModel::init(&[5, 3], 1).unwrap().save(&dir.path().join("x.gden")).unwrap();
    MlpModel::init(&[4, 3], 1).unwrap().save(&dir.path().join("y.gden")).unwrap();
    let members = vec![
        ManifestMember { name: "x".into(), file: "x.gden".into() },
        ManifestMember { name: "y".into(), file: "y.gden".into() },
    ];
    write_manifest(dir.path(), &members).unwrap();
    assert!(Ensemble::load(dir.path()).is_err());
}

#[test]
fn truncated_files_never_yield_a_model() {
    let m = MlpModel::init(&[7, 5, 3], 2).unwrap();
    let bytes = m.to_bytes();
    for cut in 0..bytes.len() {
        assert!(MlpModel::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn confidences_are_a_distribution_matching_prediction(seed in any::<u64>(), xs in prop::collection::vec(0.0f64..1.0, 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.5..1.5));
        let w1 = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.5..1.5));
        let m = MlpModel::new(vec![6, 5, 4], vec![w0, w1], vec![Array1::zeros(5), Array1::zeros(4)]).unwrap();
        let p = m.confidences(&xs).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
        let best = p.iter().enumerate().fold(0, |b, (i, v)| if *v > p[b] { i } else { b });
        prop_assert_eq!(m.predict_class(&xs).unwrap(), best);
    }

    #[test]
    fn final_bias_shift_leaves_confidences_unchanged(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let m = MlpModel::init(&[5, 4, 3], seed).unwrap();
        let mut biases = m.biases().to_vec();
        let last = biases.len() - 1;
        biases[last] = biases[last].mapv(|b| b + shift);
        let shifted = MlpModel::new(m.dims().to_vec(), m.weights().to_vec(), biases).unwrap();
        let x = [0.1, 0.5, 0.9, 0.3, 0.7];
        for (a, b) in m.confidences(&x).unwrap().iter().zip(shifted.confidences(&x).unwrap()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn serialization_is_bit_exact(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_model(&mut rng);
        let back = MlpModel::from_bytes(&m.to_bytes()).unwrap();
        for (a, b) in m.weights().iter().zip(back.weights()) {
            prop_assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        for (a, b) in m.biases().iter().zip(back.biases()) {
            prop_assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        prop_assert_eq!(back.dims(), m.dims());
    }
}
