//! Joint ensemble training: averaged cross-entropy plus a weighted penalty on
//! the alignment of the members' input gradients, trained with plain SGD.
//!
//! The penalties are recorded on the autodiff graph from differentiable input
//! gradients, so their weight gradients come out of one more backward pass.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::ensemble_loss_var;
use crate::autodiff::{Graph, Tensor, Var};
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{self, GdrOptions, RatingPolicy, ZERO_NORM};
use crate::metrics::consensus_accuracy;
use crate::network::{BoundModel, Ensemble, MlpModel, DEFAULT_HIDDEN};

pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_BATCH_SIZE: usize = 64;
/// Temperature of the smooth max over pairwise cosines.
pub const DEFAULT_TAU: f64 = 50.0;
pub const DEFAULT_LOG_PROBE: usize = 256;
pub const TRAIN_LOG_SCHEMA: u32 = 1;
/// Gram determinants below this make a triangle term degenerate.
const GRAM_FLOOR: f64 = 1e-12;
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradLossKind {
    #[default]
    None,
    CosineMaxPairwise,
    AngleSum,
    QuadTriangleArea,
}

impl GradLossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::CosineMaxPairwise => "cosine_max_pairwise",
            Self::AngleSum => "angle_sum",
            Self::QuadTriangleArea => "quad_triangle_area",
        }
    }

    /// Checks the member count the penalty is defined for.
    pub fn check_members(&self, k: usize) -> Result<()> {
        let ok = match self {
            Self::None => k >= 1,
            Self::CosineMaxPairwise => k >= 2,
            Self::AngleSum => k == 3,
            Self::QuadTriangleArea => k == 4,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "gradient loss {} is not defined for {k} members",
                self.as_str()
            )))
        }
    }
}

impl fmt::Display for GradLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "cosine_max_pairwise" | "cosine" => Ok(Self::CosineMaxPairwise),
            "angle_sum" => Ok(Self::AngleSum),
            "quad_triangle_area" | "quad" => Ok(Self::QuadTriangleArea),
            other => Err(Error::InvalidArgument(format!("unknown gradient loss {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: usize,
    pub kind: GradLossKind,
    /// Overrides [`TrainConfig::beta`] for this phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl Phase {
    pub fn new(epochs: usize, kind: GradLossKind) -> Self {
        Phase { epochs, kind, beta: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub phases: Vec<Phase>,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Drives member initialization and batch shuffling.
    pub seed: u64,
    pub tau: f64,
    /// Training examples used for the per-epoch accuracy and GDR columns;
    /// 0 disables both.
    pub log_probe: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    fn with_phases(phases: Vec<Phase>) -> Self {
        TrainConfig {
            members: 3,
            hidden: DEFAULT_HIDDEN.to_vec(),
            beta: DEFAULT_BETA,
            phases,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            tau: DEFAULT_TAU,
            log_probe: DEFAULT_LOG_PROBE,
        }
    }

    /// Three epochs of cosine penalty, then three of angle sum.
    pub fn desk() -> Self {
        Self::two_phase(3)
    }

    /// Fifteen plus fifteen epochs.
    pub fn paper() -> Self {
        Self::two_phase(15)
    }

    pub fn two_phase(epochs_each: usize) -> Self {
        Self::with_phases(vec![
            Phase::new(epochs_each, GradLossKind::CosineMaxPairwise),
            Phase::new(epochs_each, GradLossKind::AngleSum),
        ])
    }

    /// Plain ensemble training with no gradient penalty.
    pub fn baseline(epochs: usize) -> Self {
        Self::with_phases(vec![Phase::new(epochs, GradLossKind::None)])
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn epochs_total(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    pub fn phase_beta(&self, phase: &Phase) -> f64 {
        phase.beta.unwrap_or(self.beta)
    }

    /// True when no phase builds a gradient-loss graph.
    pub fn is_baseline(&self) -> bool {
        self.phases
            .iter()
            .all(|p| p.kind == GradLossKind::None || self.phase_beta(p) == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.members == 0 {
            return bad("train.members must be positive".into());
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("train.beta must be a finite value >= 0, got {}", self.beta));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("train.tau must be > 0, got {}", self.tau));
        }
        if self.hidden.contains(&0) {
            return bad("train.hidden widths must be positive".into());
        }
        if self.epochs_total() == 0 {
            return bad("train.phases must contain at least one epoch".into());
        }
        for p in &self.phases {
            if let Some(b) = p.beta {
                if !(b.is_finite() && b >= 0.0) {
                    return bad(format!("phase beta must be a finite value >= 0, got {b}"));
                }
            }
            p.kind
                .check_members(self.members)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Mean over members and rows of the cross-entropy.
pub fn image_loss(g: &mut Graph, members: &[BoundModel], x: Var, labels: &[usize]) -> Result<Var> {
    ensemble_loss_var(g, members, x, labels)
}

/// Differentiable true-class input gradients, one `rows x n` node per member.
pub fn member_input_gradients(g: &mut Graph, members: &[BoundModel], x: Var, labels: &[usize]) -> Result<Vec<Var>> {
    members
        .iter()
        .map(|m| m.input_gradients(g, x, labels, true))
        .collect()
}

/// Row-wise cosines for every pair `i < j`, in lexicographic pair order.
/// Rows whose gradient vanishes get cosine 0 against everything.
fn pairwise_cosines(g: &mut Graph, grads: &[Var]) -> Result<Vec<((usize, usize), Var)>> {
    let mut norms = Vec::with_capacity(grads.len());
    for (i, &gi) in grads.iter().enumerate() {
        let sq = g.row_dot(gi, gi)?;
        // Zero rows get `sqrt(0 + 1)`: finite derivative, cosine 0.
        let pad: Tensor = g.value(sq).mapv(|s| if s.sqrt() < ZERO_NORM { 1.0 } else { 0.0 });
        let zeros = pad.iter().filter(|&&p| p > 0.0).count();
        if zeros > 0 {
            log::warn!("member {i} has a zero input gradient on {zeros} example(s); its cosines count as 0");
        }
        let pad = g.constant(pad)?;
        let padded = g.add(sq, pad)?;
        norms.push(g.sqrt(padded)?);
    }
    let mut out = Vec::new();
    for i in 0..grads.len() {
        for j in i + 1..grads.len() {
            let d = g.row_dot(grads[i], grads[j])?;
            let nn = g.mul(norms[i], norms[j])?;
            out.push(((i, j), g.div(d, nn)?));
        }
    }
    Ok(out)
}

fn require_members(grads: &[Var], kind: GradLossKind) -> Result<()> {
    kind.check_members(grads.len())
}

/// Batch mean of a smooth maximum over the pairwise cosines. The smooth max
/// is a log-mean-exp at temperature `tau`, so identical cosines give exactly
/// that cosine.
pub fn grad_loss_cosine(g: &mut Graph, grads: &[Var], tau: f64) -> Result<Var> {
    require_members(grads, GradLossKind::CosineMaxPairwise)?;
    let cos = pairwise_cosines(g, grads)?;
    let pairs = cos.len() as f64;
    let mut acc: Option<Var> = None;
    for (_, c) in cos {
        // exp(tau (c - 1)) <= 1 keeps the sum in range.
        let t = g.scale(c, tau)?;
        let t = g.shift(t, -tau)?;
        let e = g.exp(t)?;
        acc = Some(match acc {
            Some(a) => g.add(a, e)?,
            None => e,
        });
    }
    let acc = acc.expect("at least one pair");
    let mean = g.scale(acc, 1.0 / pairs)?;
    let lme = g.ln(mean)?;
    let lme = g.scale(lme, 1.0 / tau)?;
    let smax = g.shift(lme, 1.0)?;
    g.mean(smax)
}

/// Batch mean of minus the sum of pairwise angles (three members).
pub fn grad_loss_angle_sum(g: &mut Graph, grads: &[Var]) -> Result<Var> {
    require_members(grads, GradLossKind::AngleSum)?;
    let cos = pairwise_cosines(g, grads)?;
    let mut acc: Option<Var> = None;
    for (_, c) in cos {
        let a = g.safe_acos(c)?;
        acc = Some(match acc {
            Some(s) => g.add(s, a)?,
            None => a,
        });
    }
    let total = g.mean(acc.expect("three pairs"))?;
    g.neg(total)
}

/// Batch mean of minus the summed areas of the four spherical triangles
/// spanned by the members' gradient directions (four members). The sum
/// reaches `4 pi` when the directions surround the origin; copies give 0.
pub fn grad_loss_quad(g: &mut Graph, grads: &[Var]) -> Result<Var> {
    require_members(grads, GradLossKind::QuadTriangleArea)?;
    let cos = pairwise_cosines(g, grads)?;
    let pair = |i: usize, j: usize| {
        cos.iter()
            .find(|((a, b), _)| (*a, *b) == (i.min(j), i.max(j)))
            .map(|(_, c)| *c)
            .expect("pair present")
    };
    let mut acc: Option<Var> = None;
    for t in [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]] {
        let (ab, bc, ca) = (pair(t[0], t[1]), pair(t[1], t[2]), pair(t[0], t[2]));
        // Gram determinant 1 - ab^2 - bc^2 - ca^2 + 2 ab bc ca.
        let mut sq = g.mul(ab, ab)?;
        for c in [bc, ca] {
            let s = g.mul(c, c)?;
            sq = g.add(sq, s)?;
        }
        let triple = g.mul(ab, bc)?;
        let triple = g.mul(triple, ca)?;
        let triple = g.scale(triple, 2.0)?;
        let gram = g.sub(triple, sq)?;
        let gram = g.shift(gram, 1.0)?;
        let degenerate = g.value(gram).iter().filter(|&&v| v < GRAM_FLOOR).count();
        if degenerate > 0 {
            log::warn!("members {t:?} have coplanar gradients on {degenerate} example(s); triangle area floored");
        }
        let gram = g.clamp(gram, GRAM_FLOOR, 1.0)?;
        let volume = g.sqrt(gram)?;
        let denom = g.add(ab, bc)?;
        let denom = g.add(denom, ca)?;
        let denom = g.shift(denom, 1.0)?;
        let half = g.atan2(volume, denom)?;
        let area = g.scale(half, 2.0)?;
        acc = Some(match acc {
            Some(s) => g.add(s, area)?,
            None => area,
        });
    }
    let total = g.mean(acc.expect("four triangles"))?;
    g.neg(total)
}

pub fn grad_loss(g: &mut Graph, kind: GradLossKind, grads: &[Var], tau: f64) -> Result<Option<Var>> {
    Ok(match kind {
        GradLossKind::None => None,
        GradLossKind::CosineMaxPairwise => Some(grad_loss_cosine(g, grads, tau)?),
        GradLossKind::AngleSum => Some(grad_loss_angle_sum(g, grads)?),
        GradLossKind::QuadTriangleArea => Some(grad_loss_quad(g, grads)?),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub image: Var,
    /// Absent when the penalty is off, in which case `total == image`.
    pub grad: Option<Var>,
}

/// `image + beta * gradient loss`. With `beta == 0` or no penalty the
/// gradient-loss graph is never built.
pub fn joint_loss(
    g: &mut Graph,
    members: &[BoundModel],
    x: Var,
    labels: &[usize],
    kind: GradLossKind,
    beta: f64,
    tau: f64,
) -> Result<JointLoss> {
    let image = image_loss(g, members, x, labels)?;
    if kind == GradLossKind::None || beta == 0.0 {
        return Ok(JointLoss { total: image, image, grad: None });
    }
    kind.check_members(members.len())?;
    let grads = member_input_gradients(g, members, x, labels)?;
    let gl = grad_loss(g, kind, &grads, tau)?.expect("penalty requested");
    let weighted = g.scale(gl, beta)?;
    let total = g.add(image, weighted)?;
    Ok(JointLoss { total, image, grad: Some(gl) })
}

/// Loss values for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub image: f64,
    pub grad: Option<f64>,
}

/// Per member, the loss gradient for each weight matrix then bias row, in
/// layer order.
pub type WeightGradients = Vec<Vec<Array2<f64>>>;

/// Evaluates the joint loss on a batch and, when asked, its weight gradients.
pub fn loss_and_weight_gradients(
    ensemble: &Ensemble,
    x: ArrayView2<f64>,
    labels: &[usize],
    kind: GradLossKind,
    beta: f64,
    tau: f64,
    with_gradients: bool,
) -> Result<(LossValues, Option<WeightGradients>)> {
    if x.nrows() == 0 {
        return Err(Error::Empty("empty batch".into()));
    }
    if x.ncols() != ensemble.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: ensemble.input_dim(),
            got: x.ncols(),
        });
    }
    let mut g = Graph::new();
    let members: Vec<BoundModel> = ensemble
        .models()
        .iter()
        .map(|m| m.bind(&mut g))
        .collect::<Result<_>>()?;
    let xv = if kind == GradLossKind::None || beta == 0.0 {
        g.constant(x.to_owned())?
    } else {
        g.leaf(x.to_owned())?
    };
    let loss = joint_loss(&mut g, &members, xv, labels, kind, beta, tau)?;
    let values = LossValues {
        total: g.scalar_value(loss.total),
        image: g.scalar_value(loss.image),
        grad: loss.grad.map(|v| g.scalar_value(v)),
    };
    if !with_gradients {
        return Ok((values, None));
    }
    let params: Vec<Var> = members.iter().flat_map(|m| m.params()).collect();
    let d = g.gradient(loss.total, &params, false)?;
    let mut out = Vec::with_capacity(members.len());
    let mut it = d.into_iter();
    for m in &members {
        out.push(
            (0..m.params().len())
                .map(|_| g.value(it.next().expect("one gradient per parameter")).clone())
                .collect(),
        );
    }
    Ok((values, Some(out)))
}

/// Relative L2 error between the analytic weight gradients of the joint loss
/// and central finite differences with step `h` over every weight and bias.
pub fn finite_difference_error(
    ensemble: &Ensemble,
    x: ArrayView2<f64>,
    labels: &[usize],
    kind: GradLossKind,
    beta: f64,
    tau: f64,
    h: f64,
) -> Result<f64> {
    let (_, analytic) = loss_and_weight_gradients(ensemble, x, labels, kind, beta, tau, true)?;
    let analytic = analytic.expect("requested");
    let eval = |e: &Ensemble| -> Result<f64> {
        Ok(loss_and_weight_gradients(e, x, labels, kind, beta, tau, false)?.0.total)
    };
    let mut work = ensemble.clone();
    let (mut diff, mut norm) = (0.0, 0.0);
    for (mi, member_grads) in analytic.iter().enumerate() {
        for (pi, grad) in member_grads.iter().enumerate() {
            let (l, is_bias) = (pi / 2, pi % 2 == 1);
            for (idx, &a) in grad.indexed_iter() {
                let nudge = |e: &mut Ensemble, d: f64| {
                    let (w, b) = e.models_mut()[mi].params_mut();
                    if is_bias {
                        b[l][idx.1] += d;
                    } else {
                        w[l][idx] += d;
                    }
                };
                nudge(&mut work, h);
                let up = eval(&work)?;
                nudge(&mut work, -2.0 * h);
                let down = eval(&work)?;
                nudge(&mut work, h);
                let fd = (up - down) / (2.0 * h);
                diff += (a - fd).powi(2);
                norm += fd * fd;
            }
        }
    }
    Ok(diff.sqrt() / norm.sqrt().max(f64::MIN_POSITIVE))
}

fn sgd_step(ensemble: &mut Ensemble, grads: &WeightGradients, lr: f64) {
    for (model, mg) in ensemble.models_mut().iter_mut().zip(grads) {
        let (weights, biases) = model.params_mut();
        for (l, (w, b)) in weights.iter_mut().zip(biases.iter_mut()).enumerate() {
            w.scaled_add(-lr, &mg[2 * l]);
            b.scaled_add(-lr, &mg[2 * l + 1].index_axis(Axis(0), 0));
        }
    }
}

/// Initialization seed for member `i`.
pub fn member_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1))
}

pub fn init_ensemble(config: &TrainConfig, input_dim: usize, classes: usize) -> Result<Ensemble> {
    let mut dims = vec![input_dim];
    dims.extend(&config.hidden);
    dims.push(classes);
    let models = (0..config.members)
        .map(|i| MlpModel::init(&dims, member_seed(config.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::from_models(models)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub phase: usize,
    pub kind: GradLossKind,
    pub beta: f64,
    pub image_loss: f64,
    /// 0 when the phase has no penalty.
    pub grad_loss: f64,
    pub total_loss: f64,
    /// On the logging probe; NaN-free, 0 when the probe is disabled.
    pub consensus_accuracy: f64,
    pub sampled_gdr: f64,
    pub schema_version: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

pub fn train_ensemble(config: &TrainConfig, data: &Dataset) -> Result<(Ensemble, TrainLog)> {
    let init = init_ensemble(config, data.n(), data.classes())?;
    train_from(config, data, init, |_, _| Ok(()))
}

/// Trains `ensemble` in place from its current weights. `on_epoch` runs after
/// every epoch, e.g. to write checkpoints.
pub fn train_from<F>(config: &TrainConfig, data: &Dataset, mut ensemble: Ensemble, mut on_epoch: F) -> Result<(Ensemble, TrainLog)>
where
    F: FnMut(&EpochRecord, &Ensemble) -> Result<()>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if ensemble.len() != config.members {
        return Err(Error::InvalidArgument(format!(
            "config has {} members, ensemble has {}",
            config.members,
            ensemble.len()
        )));
    }
    if ensemble.input_dim() != data.n() {
        return Err(Error::DimensionMismatch {
            expected: ensemble.input_dim(),
            got: data.n(),
        });
    }
    let probe = (config.log_probe > 0)
        .then(|| data.select(&(0..config.log_probe.min(data.len())).collect::<Vec<_>>()));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut last_good = ensemble.clone();
    let mut epoch = 0;
    for (pi, phase) in config.phases.iter().enumerate() {
        let beta = config.phase_beta(phase);
        for _ in 0..phase.epochs {
            epoch += 1;
            order.shuffle(&mut rng);
            let (mut img, mut grad, mut tot, mut batches) = (0.0, 0.0, 0.0, 0usize);
            for (bi, idx) in order.chunks(config.batch_size).enumerate() {
                let x = data.batch_features(idx);
                let y = data.batch_labels(idx);
                let step = loss_and_weight_gradients(&ensemble, x.view(), &y, phase.kind, beta, config.tau, true)
                    .and_then(|(v, grads)| {
                        let grads = grads.expect("requested");
                        let finite = v.total.is_finite()
                            && grads.iter().flatten().all(|t| t.iter().all(|x| x.is_finite()));
                        if finite {
                            Ok((v, grads))
                        } else {
                            Err(Error::NonFinite { op: "training step" })
                        }
                    });
                let (v, grads) = match step {
                    Ok(s) => s,
                    Err(Error::NonFinite { .. }) => {
                        return Err(Error::Diverged {
                            epoch,
                            batch: bi,
                            last_good: Box::new(last_good),
                        })
                    }
                    Err(e) => return Err(e),
                };
                sgd_step(&mut ensemble, &grads, config.learning_rate);
                img += v.image;
                grad += v.grad.unwrap_or(0.0);
                tot += v.total;
                batches += 1;
            }
            let n = batches as f64;
            let (acc, sgdr) = match &probe {
                Some(p) => (
                    consensus_accuracy(&ensemble, p)?,
                    geometry::gdr(
                        &ensemble,
                        p,
                        &GdrOptions {
                            policy: RatingPolicy::default(),
                            seed: config.seed,
                            correct_only: false,
                        },
                    )?
                    .gdr,
                ),
                None => (0.0, 0.0),
            };
            let record = EpochRecord {
                epoch,
                phase: pi,
                kind: phase.kind,
                beta,
                image_loss: img / n,
                grad_loss: grad / n,
                total_loss: tot / n,
                consensus_accuracy: acc,
                sampled_gdr: sgdr,
                schema_version: TRAIN_LOG_SCHEMA,
            };
            log::info!(
                "epoch {epoch} ({}): image {:.4} grad {:.4} acc {:.3} gdr {:.4}",
                phase.kind,
                record.image_loss,
                record.grad_loss,
                acc,
                sgdr
            );
            on_epoch(&record, &ensemble)?;
            log.epochs.push(record);
            last_good = ensemble.clone();
        }
    }
    Ok((ensemble, log))
}
