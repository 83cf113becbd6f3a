use gdr::attacks::{
    self, adversaries_to_bytes, attack_batch, ensemble_loss, loss_gradient, run_attack, AdversarySidecar, AttackConfig,
    AttackKind, EnsembleObjective,
};
use gdr::data_io;
use gdr::{train_ensemble, Dataset, Ensemble, MlpModel, TrainConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [AttackKind; 3] = [AttackKind::Fgsm, AttackKind::PgdLinf, AttackKind::Mi];

fn trained() -> (Ensemble, Dataset) {
    let data = data_io::synthetic_blobs(20, 4, 60, 0.4, 3).unwrap();
    let (train, test) = data.split_at(160).unwrap();
    let mut cfg = TrainConfig::baseline(8).with_hidden(vec![16]).with_seed(12);
    cfg.learning_rate = 0.1;
    let (e, _) = train_ensemble(&cfg, &train).unwrap();
    (e, test)
}

fn cross_entropy(m: &MlpModel, x: &[f64], y: usize) -> f64 {
    -m.confidences(x).unwrap()[y].ln()
}

fn assert_constraints(x: &[f64], r: &attacks::AttackResult, eps: f64) {
    let norm = x.iter().zip(&r.adversary).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(norm <= eps + 1e-12, "norm {norm} > {eps}");
    assert_eq!(norm, r.perturbation_norm);
    assert!(r.adversary.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn ensemble_loss_reduces_to_member_cross_entropy() {
    let m = MlpModel::init(&[6, 5, 4], 9).unwrap();
    let x = [0.1, 0.4, 0.2, 0.9, 0.5, 0.3];
    let single = ensemble_loss(&Ensemble::singleton(m.clone()), &x, 2).unwrap();
    assert!((single - cross_entropy(&m, &x, 2)).abs() < 1e-12);
    let dup = ensemble_loss(&Ensemble::copies(&m, 3).unwrap(), &x, 2).unwrap();
    assert!((dup - single).abs() < 1e-12);
    let other = MlpModel::init(&[6, 5, 4], 10).unwrap();
    let pair = ensemble_loss(&Ensemble::from_models(vec![m.clone(), other.clone()]).unwrap(), &x, 1).unwrap();
    let mean = 0.5 * (cross_entropy(&m, &x, 1) + cross_entropy(&other, &x, 1));
    assert!((pair - mean).abs() < 1e-12);
    let uniform = Ensemble::copies(&MlpModel::zeros(&[6, 3, 10]).unwrap(), 3).unwrap();
    assert!((ensemble_loss(&uniform, &x, 4).unwrap() - 10f64.ln()).abs() < 1e-14);
}

#[test]
fn objective_gradients_match_finite_differences() {
    let e = Ensemble::from_models((0..3).map(|i| MlpModel::init(&[5, 4, 3], 20 + i).unwrap()).collect()).unwrap();
    let x = Array2::from_shape_fn((2, 5), |(i, j)| 0.2 + 0.1 * (i + j) as f64);
    let labels = [0, 2];
    for objective in [EnsembleObjective::MeanLoss, EnsembleObjective::AveragedConfidence, EnsembleObjective::AveragedLogits] {
        let g = loss_gradient(&e, x.view(), &labels, objective).unwrap();
        // The attack only uses the sign, but check the full gradient of the
        // batch-mean loss.
        let value = |x: &Array2<f64>| -> f64 {
            (0..2)
                .map(|r| {
                    let row: Vec<f64> = x.row(r).to_vec();
                    let probs: Vec<Vec<f64>> = e.models().iter().map(|m| m.confidences(&row).unwrap()).collect();
                    let y = labels[r];
                    match objective {
                        EnsembleObjective::MeanLoss => probs.iter().map(|p| -p[y].ln()).sum::<f64>() / 3.0,
                        EnsembleObjective::AveragedConfidence => -(probs.iter().map(|p| p[y]).sum::<f64>() / 3.0).ln(),
                        EnsembleObjective::AveragedLogits => {
                            let z: Vec<Vec<f64>> = e.models().iter().map(|m| {
                                m.logits_batch(x.slice(ndarray::s![r..r + 1, ..])).unwrap().row(0).to_vec()
                            }).collect();
                            let avg: Vec<f64> = (0..3).map(|c| z.iter().map(|zz| zz[c]).sum::<f64>() / 3.0).collect();
                            let lse = avg.iter().map(|v| v.exp()).sum::<f64>().ln();
                            lse - avg[y]
                        }
                    }
                })
                .sum::<f64>()
                / 2.0
        };
        for r in 0..2 {
            for c in 0..5 {
                let h = 1e-6;
                let (mut p, mut m) = (x.clone(), x.clone());
                p[(r, c)] += h;
                m[(r, c)] -= h;
                let fd = (value(&p) - value(&m)) / (2.0 * h);
                assert!((fd - g[(r, c)]).abs() < 1e-7 * fd.abs().max(1.0), "{objective:?} ({r},{c}): {fd} vs {}", g[(r, c)]);
            }
        }
    }
}

#[test]
fn every_adversary_respects_the_box_and_pixel_range() {
    let (e, test) = trained();
    let x = test.features();
    let labels = test.labels();
    for kind in KINDS {
        for eps in [0.01, 0.1, 0.3, 1.0] {
            let c = AttackConfig::for_kind(kind, eps).with_seed(2);
            for (i, r) in attack_batch(&e, x.view(), &labels, &c).unwrap().iter().enumerate() {
                assert_constraints(x.row(i).as_slice().unwrap(), r, eps);
                assert_eq!(r.original_label, labels[i]);
                assert_eq!(r.per_model_prediction.len(), e.len());
            }
        }
    }
    let mut c = AttackConfig::pgd(0.1);
    c.step_size = 0.01;
    c.random_start = true;
    for r in attack_batch(&e, x.view(), &labels, &c.with_seed(5)).unwrap() {
        assert!(r.perturbation_norm <= 0.1 + 1e-12);
    }
}

#[test]
fn fgsm_with_zero_budget_changes_nothing() {
    let (e, test) = trained();
    let x = test.features();
    let before = e.predict_batch(x.view()).unwrap();
    for (i, r) in attack_batch(&e, x.view(), &test.labels(), &AttackConfig::fgsm(0.0)).unwrap().iter().enumerate() {
        assert_eq!(r.adversary, x.row(i).to_vec());
        let preds: Vec<usize> = before.iter().map(|m| m[i]).collect();
        assert_eq!(r.per_model_prediction, preds);
    }
}

#[test]
fn small_fgsm_steps_raise_the_ensemble_loss() {
    let (e, test) = trained();
    let c = AttackConfig::fgsm(0.01).with_objective(EnsembleObjective::MeanLoss);
    let mut up = 0;
    for ex in test.examples() {
        let r = run_attack(&e, &ex.pixels, ex.label, &c).unwrap();
        if ensemble_loss(&e, &r.adversary, ex.label).unwrap() >= ensemble_loss(&e, &ex.pixels, ex.label).unwrap() {
            up += 1;
        }
    }
    assert!(up as f64 >= 0.95 * test.len() as f64, "{up} of {}", test.len());
}

#[test]
fn pgd_reaches_at_least_the_fgsm_loss() {
    let (e, test) = trained();
    let eps = 0.1;
    let f = AttackConfig::fgsm(eps).with_objective(EnsembleObjective::MeanLoss);
    let p = AttackConfig::pgd(eps).with_objective(EnsembleObjective::MeanLoss).with_stop_on_success(false);
    let mut ok = 0;
    for ex in test.examples() {
        let lf = ensemble_loss(&e, &run_attack(&e, &ex.pixels, ex.label, &f).unwrap().adversary, ex.label).unwrap();
        let lp = ensemble_loss(&e, &run_attack(&e, &ex.pixels, ex.label, &p).unwrap().adversary, ex.label).unwrap();
        if lp >= lf {
            ok += 1;
        }
    }
    assert!(ok as f64 >= 0.9 * test.len() as f64, "{ok} of {}", test.len());
}

#[test]
fn one_full_step_collapses_pgd_and_mi_to_fgsm() {
    let (e, test) = trained();
    // Inputs away from the pixel bounds so clipping never binds.
    let x = test.features().mapv(|v| 0.3 + 0.4 * v);
    let labels = test.labels();
    let eps = 0.05;
    let fgsm = attack_batch(&e, x.view(), &labels, &AttackConfig::fgsm(eps)).unwrap();
    let mut pgd = AttackConfig::pgd(eps);
    pgd.steps = 1;
    pgd.step_size = eps;
    let mut mi = AttackConfig::mi(eps);
    mi.steps = 1;
    mi.step_size = eps;
    mi.momentum_decay = 0.0;
    for c in [pgd, mi] {
        // Stopping early would freeze rows already fooled at the start.
        let c = c.with_stop_on_success(false);
        assert_eq!(attack_batch(&e, x.view(), &labels, &c).unwrap(), fgsm, "{:?}", c.kind);
    }
}

#[test]
fn zero_gradients_leave_inputs_in_place() {
    let e = Ensemble::copies(&MlpModel::zeros(&[4, 3, 3]).unwrap(), 2).unwrap();
    let x = [0.2, 0.4, 0.6, 0.8];
    for kind in KINDS {
        let r = run_attack(&e, &x, 1, &AttackConfig::for_kind(kind, 0.2)).unwrap();
        assert_eq!(r.adversary, x.to_vec());
    }
}

#[test]
fn single_and_batch_paths_agree_and_sidecar_matches() {
    let (e, test) = trained();
    let sub = test.select(&[0, 1, 2, 3, 4]);
    let x = sub.features();
    let c = AttackConfig::mi(0.2).with_seed(4);
    let batch = attack_batch(&e, x.view(), &sub.labels(), &c).unwrap();
    for (ex, r) in sub.examples().iter().zip(&batch) {
        assert_eq!(&run_attack(&e, &ex.pixels, ex.label, &c).unwrap(), r);
    }
    let bytes = adversaries_to_bytes(&batch);
    assert_eq!(bytes.len(), 8 * 5 * 20);
    assert_eq!(f64::from_le_bytes(bytes[8..16].try_into().unwrap()), batch[0].adversary[1]);
    let side = AdversarySidecar::new(&c, &batch);
    assert_eq!((side.rows, side.dim), (5, 20));
    let json = serde_json::to_value(&side).unwrap();
    for key in ["config", "per_model_prediction", "perturbation_norm", "schema_version"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attacks_are_deterministic_and_constrained(seed in any::<u64>(), eps in 0.0f64..0.5, k in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Ensemble::from_models((0..3).map(|i| MlpModel::init(&[6, 5, 3], seed ^ i).unwrap()).collect()).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut c = AttackConfig::for_kind(KINDS[k], eps).with_seed(seed);
        c.random_start = k == 1;
        let a = run_attack(&e, &x, 1, &c).unwrap();
        let b = run_attack(&e, &x, 1, &c).unwrap();
        prop_assert!(a.adversary.iter().zip(&b.adversary).all(|(p, q)| p.to_bits() == q.to_bits()));
        let norm = x.iter().zip(&a.adversary).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(norm <= eps + 1e-12);
        prop_assert!(a.adversary.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
