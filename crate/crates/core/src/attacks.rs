//! White-box L-infinity attacks (FGSM, projected gradient descent, momentum
//! iterative) against a single model or an ensemble.
//!
//! An ensemble is attacked through one scalar objective against the true
//! label (by default the cross-entropy of the members' averaged confidences),
//! so every attack here is untargeted. Iterative attacks may stop early on an
//! example once all members agree on a wrong class; whether a result counts
//! as a success is decided by [`crate::metrics`].

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{one_hot, Graph, Var};
use crate::error::{Error, Result};
use crate::network::{BoundModel, Ensemble};

const BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    PgdLinf,
    Mi,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::PgdLinf => "pgd_linf",
            AttackKind::Mi => "mi",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd_linf" | "pgd" => Ok(AttackKind::PgdLinf),
            "mi" => Ok(AttackKind::Mi),
            other => Err(Error::InvalidArgument(format!("unknown attack kind {other:?}"))),
        }
    }
}

/// What an ensemble attack ascends.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleObjective {
    /// Mean over members of each member's cross-entropy.
    MeanLoss,
    /// Cross-entropy of the members' averaged confidences, `-ln mean_i p_i^y`,
    /// which only grows when every member loses confidence in `y`.
    #[default]
    AveragedConfidence,
    /// Cross-entropy of the members' averaged logits: the ensemble attacked
    /// as one model.
    AveragedLogits,
}

impl EnsembleObjective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::MeanLoss => "mean_loss",
            Self::AveragedConfidence => "averaged_confidence",
            Self::AveragedLogits => "averaged_logits",
        }
    }
}

impl std::str::FromStr for EnsembleObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_loss" => Ok(Self::MeanLoss),
            "averaged_confidence" => Ok(Self::AveragedConfidence),
            "averaged_logits" => Ok(Self::AveragedLogits),
            other => Err(Error::InvalidArgument(format!("unknown attack objective {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-infinity budget.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub momentum_decay: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    /// Uniform start inside the epsilon box (PGD only).
    pub random_start: bool,
    #[serde(default)]
    pub objective: EnsembleObjective,
    /// Iterative attacks freeze an example at the first iterate where every
    /// member predicts the same wrong class.
    #[serde(default = "yes")]
    pub stop_on_success: bool,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            momentum_decay: 0.0,
            clip_min: 0.0,
            clip_max: 1.0,
            random_start: false,
            objective: EnsembleObjective::default(),
            stop_on_success: true,
            seed: 0,
        }
    }

    /// 40 steps of `epsilon / 10`, no random start.
    pub fn pgd(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::PgdLinf,
            steps: 40,
            step_size: epsilon / 10.0,
            ..Self::fgsm(epsilon)
        }
    }

    /// 10 steps of `epsilon / 10` with momentum decay 1.
    pub fn mi(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Mi,
            steps: 10,
            step_size: epsilon / 10.0,
            momentum_decay: 1.0,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn for_kind(kind: AttackKind, epsilon: f64) -> Self {
        match kind {
            AttackKind::Fgsm => Self::fgsm(epsilon),
            AttackKind::PgdLinf => Self::pgd(epsilon),
            AttackKind::Mi => Self::mi(epsilon),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_objective(mut self, objective: EnsembleObjective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_stop_on_success(mut self, stop: bool) -> Self {
        self.stop_on_success = stop;
        self
    }

    /// Checks the invariants and returns the config actually run
    /// (FGSM is always a single step of size epsilon).
    pub fn validated(&self) -> Result<Self> {
        let mut c = *self;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(c.epsilon >= 0.0) || !c.epsilon.is_finite() {
            return bad(format!("epsilon must be >= 0, got {}", c.epsilon));
        }
        if !(c.clip_min < c.clip_max) {
            return bad(format!("clip range [{}, {}] is empty", c.clip_min, c.clip_max));
        }
        if c.kind == AttackKind::Fgsm {
            c.steps = 1;
            c.step_size = c.epsilon;
            return Ok(c);
        }
        if c.steps == 0 {
            return bad("iterative attacks need steps >= 1".into());
        }
        if !(c.step_size >= 0.0) || c.step_size > c.epsilon * (1.0 + 1e-12) {
            return bad(format!(
                "step size {} must lie in [0, epsilon = {}]",
                c.step_size, c.epsilon
            ));
        }
        if !(c.momentum_decay >= 0.0) {
            return bad(format!("momentum decay must be >= 0, got {}", c.momentum_decay));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub adversary: Vec<f64>,
    /// `||adversary - x||_inf`.
    pub perturbation_norm: f64,
    pub per_model_prediction: Vec<usize>,
    pub original_label: usize,
}

/// Mean over members of the cross-entropy, recorded on `g`.
pub fn ensemble_loss_var(g: &mut Graph, members: &[BoundModel], x: Var, labels: &[usize]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for m in members {
        let z = m.logits(g, x)?;
        let ce = g.softmax_cross_entropy(z, labels)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.ok_or_else(|| Error::Empty("ensemble has no members".into()))?;
    g.scale(total, 1.0 / members.len() as f64)
}

/// `-mean_rows ln(mean_i p_i^y)`, with the member average taken in log space.
pub fn averaged_confidence_loss_var(g: &mut Graph, members: &[BoundModel], x: Var, labels: &[usize]) -> Result<Var> {
    if members.is_empty() {
        return Err(Error::Empty("ensemble has no members".into()));
    }
    let mut logp = Vec::with_capacity(members.len());
    for m in members {
        let z = m.logits(g, x)?;
        let ls = g.log_softmax_rows(z)?;
        let (rows, cols) = g.shape(ls);
        let mask = g.constant(one_hot(labels, rows, cols)?)?;
        let picked = g.mul(ls, mask)?;
        logp.push(g.sum_rows(picked)?);
    }
    // Shift by the row max (a constant) before exponentiating.
    let mut top = g.value(logp[0]).clone();
    for &l in &logp[1..] {
        top.zip_mut_with(g.value(l), |t, &v| *t = t.max(v));
    }
    let top = g.constant(top)?;
    let mut acc: Option<Var> = None;
    for l in logp {
        let d = g.sub(l, top)?;
        let e = g.exp(d)?;
        acc = Some(match acc {
            Some(a) => g.add(a, e)?,
            None => e,
        });
    }
    let mean = g.scale(acc.expect("non-empty"), 1.0 / members.len() as f64)?;
    let ln = g.ln(mean)?;
    let lmean = g.add(ln, top)?;
    let avg = g.mean(lmean)?;
    g.neg(avg)
}

/// Cross-entropy of the mean of the members' logits.
pub fn averaged_logits_loss_var(g: &mut Graph, members: &[BoundModel], x: Var, labels: &[usize]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for m in members {
        let z = m.logits(g, x)?;
        acc = Some(match acc {
            Some(a) => g.add(a, z)?,
            None => z,
        });
    }
    let acc = acc.ok_or_else(|| Error::Empty("ensemble has no members".into()))?;
    let mean = g.scale(acc, 1.0 / members.len() as f64)?;
    g.softmax_cross_entropy(mean, labels)
}

/// The attack objective selected by `objective`, recorded on `g`.
pub fn objective_var(g: &mut Graph, members: &[BoundModel], x: Var, labels: &[usize], objective: EnsembleObjective) -> Result<Var> {
    match objective {
        EnsembleObjective::MeanLoss => ensemble_loss_var(g, members, x, labels),
        EnsembleObjective::AveragedConfidence => averaged_confidence_loss_var(g, members, x, labels),
        EnsembleObjective::AveragedLogits => averaged_logits_loss_var(g, members, x, labels),
    }
}

pub fn ensemble_loss(target: &Ensemble, x: &[f64], y: usize) -> Result<f64> {
    let view = row_view(x)?;
    let mut g = Graph::new();
    let members = bind_all(target, &mut g)?;
    let xv = g.leaf(view.to_owned())?;
    let l = ensemble_loss_var(&mut g, &members, xv, &[y])?;
    Ok(g.scalar_value(l))
}

fn bind_all(target: &Ensemble, g: &mut Graph) -> Result<Vec<BoundModel>> {
    target.models().iter().map(|m| m.bind(g)).collect()
}

fn row_view(x: &[f64]) -> Result<ArrayView2<'_, f64>> {
    ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// `d loss / d x` for each row; rows are independent examples.
pub fn loss_gradient(target: &Ensemble, x: ArrayView2<f64>, labels: &[usize], objective: EnsembleObjective) -> Result<Array2<f64>> {
    if x.ncols() != target.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: target.input_dim(),
            got: x.ncols(),
        });
    }
    let mut g = Graph::new();
    let members = bind_all(target, &mut g)?;
    let xv = g.leaf(x.to_owned())?;
    let l = objective_var(&mut g, &members, xv, labels, objective)?;
    let d = g.gradient(l, &[xv], false)?;
    Ok(g.value(d[0]).clone())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamp into the epsilon box around `x0`, then into the pixel range.
fn project(adv: &mut Array2<f64>, x0: &ArrayView2<f64>, c: &AttackConfig) {
    Zip::from(adv).and(x0).for_each(|a, &o| {
        *a = a.clamp(o - c.epsilon, o + c.epsilon).clamp(c.clip_min, c.clip_max);
    });
}

fn run_batch(target: &Ensemble, x0: ArrayView2<f64>, labels: &[usize], c: &AttackConfig, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    match c.kind {
        AttackKind::Fgsm => {
            let grad = loss_gradient(target, x0, labels, c.objective)?;
            let mut adv = x0.to_owned();
            Zip::from(&mut adv).and(&grad).for_each(|a, &d| {
                *a = (*a + c.epsilon * sign(d)).clamp(c.clip_min, c.clip_max);
            });
            Ok(adv)
        }
        AttackKind::PgdLinf => {
            let mut adv = x0.to_owned();
            if c.random_start {
                adv.mapv_inplace(|v| v + rng.random_range(-1.0..=1.0) * c.epsilon);
                project(&mut adv, &x0, c);
            }
            iterate(target, x0, labels, c, adv, |_, grad| grad.mapv(sign))
        }
        AttackKind::Mi => {
            let mut momentum = Array2::<f64>::zeros(x0.raw_dim());
            iterate(target, x0, labels, c, x0.to_owned(), |_, grad| {
                for (mut m, d) in momentum.rows_mut().into_iter().zip(grad.rows()) {
                    let l1: f64 = d.iter().map(|v| v.abs()).sum();
                    m.mapv_inplace(|v| v * c.momentum_decay);
                    if l1 > 0.0 {
                        m.zip_mut_with(&d, |mv, &dv| *mv += dv / l1);
                    }
                }
                momentum.mapv(sign)
            })
        }
    }
}

/// Rows where every member predicts the same class other than the label.
fn consensus_fooled(target: &Ensemble, x: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<bool>> {
    let preds = target.predict_batch(x)?;
    Ok((0..x.nrows())
        .map(|r| {
            let first = preds[0][r];
            first != labels[r] && preds.iter().all(|p| p[r] == first)
        })
        .collect())
}

/// Shared loop of the iterative attacks: `direction` maps the loss gradient
/// at the current iterate to a step direction.
fn iterate<F>(target: &Ensemble, x0: ArrayView2<f64>, labels: &[usize], c: &AttackConfig, mut adv: Array2<f64>, mut direction: F) -> Result<Array2<f64>>
where
    F: FnMut(usize, &Array2<f64>) -> Array2<f64>,
{
    let mut frozen = if c.stop_on_success {
        consensus_fooled(target, adv.view(), labels)?
    } else {
        vec![false; adv.nrows()]
    };
    for step in 0..c.steps {
        if frozen.iter().all(|&f| f) {
            break;
        }
        let grad = loss_gradient(target, adv.view(), labels, c.objective)?;
        let dir = direction(step, &grad);
        let mut next = adv.clone();
        Zip::from(&mut next).and(&dir).for_each(|a, &d| *a += c.step_size * d);
        project(&mut next, &x0, c);
        for (r, &f) in frozen.iter().enumerate() {
            if !f {
                adv.row_mut(r).assign(&next.row(r));
            }
        }
        if c.stop_on_success {
            let fooled = consensus_fooled(target, adv.view(), labels)?;
            for (f, now) in frozen.iter_mut().zip(fooled) {
                *f |= now;
            }
        }
    }
    Ok(adv)
}

/// Attack every row of `x`.
pub fn attack_batch(target: &Ensemble, x: ArrayView2<f64>, labels: &[usize], config: &AttackConfig) -> Result<Vec<AttackResult>> {
    let c = config.validated()?;
    if x.ncols() != target.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: target.input_dim(),
            got: x.ncols(),
        });
    }
    if labels.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut out = Vec::with_capacity(x.nrows());
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + BATCH).min(x.nrows());
        let x0 = x.slice(ndarray::s![start..end, ..]);
        let y = &labels[start..end];
        let adv = run_batch(target, x0, y, &c, &mut rng)?;
        let preds = target.predict_batch(adv.view())?;
        for r in 0..adv.nrows() {
            let perturbation_norm = adv
                .row(r)
                .iter()
                .zip(x0.row(r))
                .fold(0.0f64, |m, (a, o)| m.max((a - o).abs()));
            out.push(AttackResult {
                adversary: adv.row(r).to_vec(),
                perturbation_norm,
                per_model_prediction: preds.iter().map(|p| p[r]).collect(),
                original_label: y[r],
            });
        }
        start = end;
    }
    Ok(out)
}

pub fn run_attack(target: &Ensemble, x: &[f64], y: usize, config: &AttackConfig) -> Result<AttackResult> {
    let view = row_view(x)?;
    Ok(attack_batch(target, view, &[y], config)?.remove(0))
}

/// `clip(x + epsilon * sign(grad loss))`; `config.kind` is ignored.
pub fn fgsm(target: &Ensemble, x: &[f64], y: usize, config: &AttackConfig) -> Result<AttackResult> {
    let c = AttackConfig {
        kind: AttackKind::Fgsm,
        ..*config
    };
    run_attack(target, x, y, &c)
}

pub fn pgd_linf(target: &Ensemble, x: &[f64], y: usize, config: &AttackConfig) -> Result<AttackResult> {
    let c = AttackConfig {
        kind: AttackKind::PgdLinf,
        ..*config
    };
    run_attack(target, x, y, &c)
}

pub fn mi(target: &Ensemble, x: &[f64], y: usize, config: &AttackConfig) -> Result<AttackResult> {
    let c = AttackConfig {
        kind: AttackKind::Mi,
        ..*config
    };
    run_attack(target, x, y, &c)
}

/// Adversaries as a flat little-endian `f64` array, row after row.
pub fn adversaries_to_bytes(results: &[AttackResult]) -> Vec<u8> {
    results
        .iter()
        .flat_map(|r| r.adversary.iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdversarySidecar {
    pub schema_version: u32,
    pub config: AttackConfig,
    pub rows: usize,
    pub dim: usize,
    pub per_model_prediction: Vec<Vec<usize>>,
    pub original_label: Vec<usize>,
    pub perturbation_norm: Vec<f64>,
}

impl AdversarySidecar {
    pub fn new(config: &AttackConfig, results: &[AttackResult]) -> Self {
        AdversarySidecar {
            schema_version: 1,
            config: *config,
            rows: results.len(),
            dim: results.first().map_or(0, |r| r.adversary.len()),
            per_model_prediction: results.iter().map(|r| r.per_model_prediction.clone()).collect(),
            original_label: results.iter().map(|r| r.original_label).collect(),
            perturbation_norm: results.iter().map(|r| r.perturbation_norm).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::MlpModel;

    #[test]
    fn uniform_models_have_log_c_loss() {
        let e = Ensemble::copies(&MlpModel::zeros(&[4, 3, 10]).unwrap(), 2).unwrap();
        let l = ensemble_loss(&e, &[0.2; 4], 7).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::fgsm(-0.1).validated().is_err());
        let mut c = AttackConfig::pgd(0.1);
        c.step_size = 0.2;
        assert!(c.validated().is_err());
        c.step_size = 0.01;
        c.steps = 0;
        assert!(c.validated().is_err());
        let mut f = AttackConfig::fgsm(0.3);
        f.steps = 9;
        f.step_size = 0.01;
        let v = f.validated().unwrap();
        assert_eq!((v.steps, v.step_size), (1, 0.3));
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = MlpModel::init(&[5, 4, 3], 3).unwrap();
        let e = Ensemble::singleton(m);
        let x = [0.1, 0.5, 0.9, 0.0, 1.0];
        for c in [AttackConfig::fgsm(0.0), AttackConfig::pgd(0.0), AttackConfig::mi(0.0)] {
            let r = run_attack(&e, &x, 1, &c).unwrap();
            assert_eq!(r.adversary, x.to_vec());
            assert_eq!(r.perturbation_norm, 0.0);
        }
    }
}
