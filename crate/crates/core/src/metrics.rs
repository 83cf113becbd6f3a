//! Adversarial success, collaboration rating, consensus accuracy and the
//! small statistics used to summarize sweeps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, AttackConfig, AttackResult};
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::network::Ensemble;

pub const EVAL_REPORT_SCHEMA: u32 = 1;

/// Indices of the examples every member classifies correctly.
pub fn correct_indices(data: &Dataset, ensemble: &Ensemble) -> Result<Vec<usize>> {
    let x = data.features();
    let preds = ensemble.predict_batch(x.view())?;
    Ok((0..data.len())
        .filter(|&i| preds.iter().all(|p| p[i] == data.examples()[i].label))
        .collect())
}

/// The test set `T`: examples classified correctly by every member.
pub fn filter_correct(data: &Dataset, ensemble: &Ensemble) -> Result<Dataset> {
    if data.is_empty() {
        return Err(Error::Empty("test set is empty".into()));
    }
    let keep = correct_indices(data, ensemble)?;
    if keep.is_empty() {
        return Err(Error::Empty(
            "no example is classified correctly by every member; use a larger test set".into(),
        ));
    }
    Ok(data.select(&keep))
}

/// Fraction of adversaries that drive every member to the same wrong class.
pub fn consensus_success(results: &[AttackResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("no attack results".into()));
    }
    let hits = results
        .iter()
        .filter(|r| {
            let first = r.per_model_prediction[0];
            first != r.original_label && r.per_model_prediction.iter().all(|&p| p == first)
        })
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Diagnostic only: every member wrong, not necessarily on the same class.
pub fn all_fooled_any_class(results: &[AttackResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("no attack results".into()));
    }
    let hits = results
        .iter()
        .filter(|r| r.per_model_prediction.iter().all(|&p| p != r.original_label))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Per member, the fraction of the given adversaries it misclassifies.
pub fn member_fooled_rates(results: &[AttackResult], members: usize) -> Vec<f64> {
    (0..members)
        .map(|m| {
            let fooled = results
                .iter()
                .filter(|r| r.per_model_prediction[m] != r.original_label)
                .count();
            fooled as f64 / results.len().max(1) as f64
        })
        .collect()
}

pub fn run_on(ensemble: &Ensemble, t: &Dataset, attack: &AttackConfig) -> Result<Vec<AttackResult>> {
    if t.is_empty() {
        return Err(Error::Empty("|T| = 0".into()));
    }
    let x = t.features();
    attack_batch(ensemble, x.view(), &t.labels(), attack)
}

/// `A(E)` over `T` (which should come from [`filter_correct`]).
pub fn adversarial_success(ensemble: &Ensemble, t: &Dataset, attack: &AttackConfig) -> Result<f64> {
    consensus_success(&run_on(ensemble, t, attack)?)
}

/// `A(f)` for each member, attacking the member alone with the same config.
pub fn per_model_success(ensemble: &Ensemble, t: &Dataset, attack: &AttackConfig) -> Result<Vec<f64>> {
    (0..ensemble.len())
        .map(|i| adversarial_success(&ensemble.member(i), t, attack))
        .collect()
}

/// `A(E) / prod_f A(f)`.
pub fn collaboration_rating_from(ensemble_success: f64, per_model: &[f64], names: &[String]) -> Result<f64> {
    if let Some(i) = per_model.iter().position(|&a| a == 0.0) {
        return Err(Error::UndefinedCr {
            member: i,
            name: names.get(i).cloned().unwrap_or_else(|| format!("m{i}")),
        });
    }
    Ok(ensemble_success / per_model.iter().product::<f64>())
}

pub fn collaboration_rating(ensemble: &Ensemble, t: &Dataset, attack: &AttackConfig) -> Result<f64> {
    let a = adversarial_success(ensemble, t, attack)?;
    let per = per_model_success(ensemble, t, attack)?;
    collaboration_rating_from(a, &per, ensemble.names())
}

/// Fraction of examples every member classifies correctly.
pub fn consensus_accuracy(ensemble: &Ensemble, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("consensus accuracy of an empty set".into()));
    }
    Ok(correct_indices(data, ensemble)?.len() as f64 / data.len() as f64)
}

/// Least-squares fit of `y = a e^{b x}` on `ln y`. Returns `(a, b)`.
pub fn fit_exponential(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("exponential fit needs >= 2 points".into()));
    }
    if let Some(&(_, y)) = points.iter().find(|p| !(p.1 > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "exponential fit needs positive y, got {y}"
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("exponential fit needs distinct x".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1.ln() - my)).sum();
    let b = sxy / sxx;
    Ok(((my - b * mx).exp(), b))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation, ties given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(
            "rank correlation needs two equally long series of >= 2 values".into(),
        ));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidArgument("constant series has no rank correlation".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Counts over `bins` equal-width bins spanning `[lo, hi]`; values outside
/// are clamped into the end bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; bins.max(1)];
    let width = (hi - lo) / counts.len() as f64;
    for &v in values {
        let b = ((v - lo) / width).floor();
        let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(counts.len() - 1) };
        counts[b] += 1;
    }
    counts
}

/// Fraction of values strictly below `threshold`.
pub fn mass_below(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v < threshold).count() as f64 / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub ensemble_gdr: f64,
    /// `A(f)` with each member attacked alone.
    pub per_model_success: BTreeMap<String, f64>,
    pub ensemble_success: f64,
    /// `None` when some `A(f)` is zero.
    pub collaboration_rating: Option<f64>,
    pub collaboration_rating_note: Option<String>,
    pub consensus_accuracy: f64,
    pub attack_config: AttackConfig,
    /// `|T|`.
    pub filtered_count: usize,
    /// Diagnostic, not part of `A(E)`: all members wrong on any classes.
    pub all_fooled_any_class: f64,
    /// Diagnostic: each member's error rate on the ensemble's adversaries.
    pub member_fooled_by_ensemble_adversary: BTreeMap<String, f64>,
}

/// Attack `ensemble` on its correctly classified subset of `test` and collect
/// every metric for one attack config.
pub fn evaluate(ensemble: &Ensemble, test: &Dataset, attack: &AttackConfig, gdr: f64) -> Result<EvalReport> {
    let consensus_accuracy = consensus_accuracy(ensemble, test)?;
    let t = filter_correct(test, ensemble)?;
    let results = run_on(ensemble, &t, attack)?;
    let ensemble_success = consensus_success(&results)?;
    let per = per_model_success(ensemble, &t, attack)?;
    let (collaboration_rating, note) =
        match collaboration_rating_from(ensemble_success, &per, ensemble.names()) {
            Ok(cr) => (Some(cr), None),
            Err(e) => (None, Some(e.to_string())),
        };
    let names = ensemble.names();
    let fooled = member_fooled_rates(&results, ensemble.len());
    Ok(EvalReport {
        schema_version: EVAL_REPORT_SCHEMA,
        ensemble_gdr: gdr,
        per_model_success: names.iter().cloned().zip(per).collect(),
        ensemble_success,
        collaboration_rating,
        collaboration_rating_note: note,
        consensus_accuracy,
        attack_config: *attack,
        filtered_count: t.len(),
        all_fooled_any_class: all_fooled_any_class(&results)?,
        member_fooled_by_ensemble_adversary: names.iter().cloned().zip(fooled).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(preds: Vec<usize>, label: usize) -> AttackResult {
        AttackResult {
            adversary: vec![],
            perturbation_norm: 0.0,
            per_model_prediction: preds,
            original_label: label,
        }
    }

    #[test]
    fn same_wrong_class_is_required() {
        let r = vec![
            res(vec![1, 1, 1], 0),
            res(vec![1, 2, 3], 0),
            res(vec![0, 0, 0], 0),
            res(vec![2, 2, 0], 0),
        ];
        assert_eq!(consensus_success(&r).unwrap(), 0.25);
        assert_eq!(all_fooled_any_class(&r).unwrap(), 0.5);
        assert_eq!(member_fooled_rates(&r, 3), vec![0.75, 0.75, 0.5]);
    }

    #[test]
    fn collaboration_rating_arithmetic() {
        let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let cr = collaboration_rating_from(0.5, &[0.5; 3], &names).unwrap();
        assert!((cr - 4.0).abs() < 1e-12);
        let cr = collaboration_rating_from(0.02, &[0.3, 0.25, 0.28], &names).unwrap();
        assert!((cr - 0.02 / 0.021).abs() < 1e-12);
        assert!((cr - 0.952).abs() < 1e-3);
        assert_eq!(collaboration_rating_from(0.0, &[0.4, 0.1, 0.2], &names).unwrap(), 0.0);
        match collaboration_rating_from(0.0, &[0.4, 0.0, 0.2], &names) {
            Err(Error::UndefinedCr { member, name }) => assert_eq!((member, name.as_str()), (1, "b")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exponential_fit() {
        let pts: Vec<(f64, f64)> = (0..6)
            .map(|i| {
                let x = i as f64 * 0.05;
                (x, 0.5 * (2.0 * x).exp())
            })
            .collect();
        let (a, b) = fit_exponential(&pts).unwrap();
        assert!((a - 0.5).abs() < 1e-9 && (b - 2.0).abs() < 1e-9);
        let (a, b) = fit_exponential(&[(0.1, 0.2), (0.3, 0.9)]).unwrap();
        assert!((a * (b * 0.1).exp() - 0.2).abs() < 1e-12);
        assert!((a * (b * 0.3).exp() - 0.9).abs() < 1e-12);
        assert!(fit_exponential(&[(0.1, 0.2), (0.3, 0.0)]).is_err());
        assert!(fit_exponential(&[(0.1, 0.2)]).is_err());
    }

    #[test]
    fn rank_correlation() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn histogram_bins() {
        let h = histogram(&[0.0, 0.01, 0.2, 0.5, 0.7], 5, 0.0, 0.5);
        assert_eq!(h, vec![2, 0, 1, 0, 2]);
        assert_eq!(mass_below(&[0.01, 0.04, 0.06, 0.2], 0.05), 0.5);
    }
}
