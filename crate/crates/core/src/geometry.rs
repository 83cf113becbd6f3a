//! The rating `R(E, x)`: the fraction of unit directions that project
//! negatively onto every member's true-class input gradient, and its test-set
//! average, the gradient diversity rating (GDR).
//!
//! Closed forms exist for one, two and three members (dependent triples
//! included). Larger sets, and sets holding a zero gradient, go through a
//! Monte Carlo estimate of the Heaviside integral over the sphere.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::network::Ensemble;

/// Gradients with an L2 norm below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;
/// Gram determinant (of unit vectors) below which a triple counts as
/// linearly dependent.
pub const DEPENDENCE_TOL: f64 = 1e-10;
/// Per-example sample count used when averaging over a test set.
pub const DEFAULT_GDR_SAMPLES: usize = 20_000;
/// Sample count used when Monte Carlo serves as an oracle.
pub const ORACLE_SAMPLES: usize = 1_000_000;
pub const RATINGS_CSV_SCHEMA: u32 = 1;

const CHUNK: usize = 4096;

/// The input gradients `{grad f_i(x)}` of every ensemble member at one input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    grads: Vec<Vec<f64>>,
    n: usize,
    zero: Vec<bool>,
}

impl GradientSet {
    pub fn new(grads: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = grads.first() else {
            return Err(Error::Empty("a gradient set needs at least one member".into()));
        };
        let n = first.len();
        if n == 0 {
            return Err(Error::InvalidArgument("gradients must be non-empty".into()));
        }
        for g in &grads {
            if g.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "gradient set" });
            }
        }
        let zero = grads.iter().map(|g| norm(g) < ZERO_NORM).collect();
        Ok(GradientSet { grads, n, zero })
    }

    pub fn from_rows(rows: ArrayView2<f64>) -> Result<Self> {
        Self::new(rows.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    pub fn k(&self) -> usize {
        self.grads.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn grads(&self) -> &[Vec<f64>] {
        &self.grads
    }

    pub fn is_zero(&self, i: usize) -> bool {
        self.zero[i]
    }

    pub fn zero_count(&self) -> usize {
        self.zero.iter().filter(|&&z| z).count()
    }

    /// A copy with `g` appended as the last member.
    pub fn with_member(&self, g: Vec<f64>) -> Result<Self> {
        let mut grads = self.grads.clone();
        grads.push(g);
        Self::new(grads)
    }

    fn units(&self) -> Result<Vec<Vec<f64>>> {
        self.grads
            .iter()
            .enumerate()
            .map(|(i, g)| {
                if self.zero[i] {
                    Err(Error::ZeroGradient(i))
                } else {
                    Ok(unit(g))
                }
            })
            .collect()
    }

    /// True when the three unit gradients span less than three dimensions.
    pub fn is_dependent_triple(&self) -> bool {
        match self.units() {
            Ok(u) if u.len() == 3 => gram_det3(&u[0], &u[1], &u[2]) < DEPENDENCE_TOL,
            _ => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingMethod {
    Single,
    Pair,
    Triple,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingEstimate {
    pub value: f64,
    /// Zero for closed forms.
    pub std_error: f64,
    /// Zero for closed forms.
    pub sample_count: usize,
    pub method: RatingMethod,
    /// Members whose gradient was numerically zero.
    pub zero_members: usize,
}

impl RatingEstimate {
    fn exact(value: f64, method: RatingMethod) -> Self {
        RatingEstimate {
            value: value.clamp(0.0, 0.5),
            std_error: 0.0,
            sample_count: 0,
            method,
            zero_members: 0,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    a.iter().map(|v| v / n).collect()
}

/// Angle between two unit vectors as `2 atan2(|u - v|, |u + v|)`, which
/// unlike `acos` keeps full precision near 0 and pi.
pub fn angle(u: &[f64], v: &[f64]) -> f64 {
    let (mut d, mut s) = (0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        d += (a - b) * (a - b);
        s += (a + b) * (a + b);
    }
    2.0 * d.sqrt().atan2(s.sqrt())
}

fn gram_det3(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let (ab, bc, ca) = (dot(a, b), dot(b, c), dot(c, a));
    let (aa, bb, cc) = (dot(a, a), dot(b, b), dot(c, c));
    aa * (bb * cc - bc * bc) - ab * (ab * cc - bc * ca) + ca * (ab * bc - bb * ca)
}

fn expect_k(g: &GradientSet, k: usize) -> Result<()> {
    if g.k() != k {
        return Err(Error::InvalidArgument(format!(
            "expected {k} gradients, got {}",
            g.k()
        )));
    }
    Ok(())
}

/// One member: exactly half of all directions lower its confidence.
pub fn r_single(g: &GradientSet) -> Result<RatingEstimate> {
    expect_k(g, 1)?;
    g.units()?;
    Ok(RatingEstimate::exact(0.5, RatingMethod::Single))
}

/// Two members: `(pi - angle) / 2 pi` between the unit gradients.
pub fn r_pair(g: &GradientSet) -> Result<RatingEstimate> {
    expect_k(g, 2)?;
    let u = g.units()?;
    let theta = angle(&u[0], &u[1]);
    Ok(RatingEstimate::exact((PI - theta) / (2.0 * PI), RatingMethod::Pair))
}

/// Spherical excess of the cone `{v : v . u_i < 0 for all i}` cut from the
/// 2-sphere of the triple's span: `max(0, 2 pi - sum of pairwise angles)`.
pub fn cone_excess(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    (2.0 * PI - angle(a, b) - angle(b, c) - angle(c, a)).max(0.0)
}

/// Three members: cone excess over the full sphere area `4 pi`.
///
/// Also exact for dependent triples: coplanar unit vectors within a half
/// plane of spread `s` have pairwise angles summing to `2 s`, giving the
/// planar answer `(pi - s) / 2 pi`; otherwise the sum is `2 pi` and the cone
/// is empty.
pub fn r_triple(g: &GradientSet) -> Result<RatingEstimate> {
    expect_k(g, 3)?;
    let u = g.units()?;
    let excess = cone_excess(&u[0], &u[1], &u[2]);
    Ok(RatingEstimate::exact(excess / (4.0 * PI), RatingMethod::Triple))
}

const TRIPLES_OF_FOUR: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];

/// Sum over the four 3-subsets of [`cone_excess`], each term in `[0, 2 pi]`,
/// so the total lies in `[0, 8 pi]`. Four identical gradients reach `8 pi`.
pub fn quad_triangle_area_sum(g: &GradientSet) -> Result<f64> {
    expect_k(g, 4)?;
    let u = g.units()?;
    Ok(TRIPLES_OF_FOUR
        .iter()
        .map(|t| cone_excess(&u[t[0]], &u[t[1]], &u[t[2]]).min(2.0 * PI))
        .sum())
}

/// Area of the spherical triangle whose vertices are the unit vectors
/// `a, b, c`, from `tan(E / 2) = sqrt(G) / (1 + a.b + b.c + c.a)` with `G`
/// the Gram determinant.
pub fn vertex_triangle_area(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let volume = gram_det3(a, b, c).max(0.0).sqrt();
    2.0 * volume.atan2(1.0 + dot(a, b) + dot(b, c) + dot(c, a))
}

/// Sum over the four 3-subsets of [`vertex_triangle_area`]. The faces of a
/// tetrahedron whose hull contains the origin tile the sphere, so the sum
/// reaches `4 pi` exactly when no direction is negative on all four members;
/// identical gradients give 0.
pub fn quad_vertex_triangle_area_sum(g: &GradientSet) -> Result<f64> {
    expect_k(g, 4)?;
    let u = g.units()?;
    Ok(TRIPLES_OF_FOUR
        .iter()
        .map(|t| vertex_triangle_area(&u[t[0]], &u[t[1]], &u[t[2]]))
        .sum())
}

/// Streams uniform directions on `S^{n-1}` by normalizing standard normals.
pub struct UnitSphereSampler {
    rng: ChaCha8Rng,
    n: usize,
}

impl UnitSphereSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        UnitSphereSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
        }
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n);
        loop {
            for v in out.iter_mut() {
                *v = StandardNormal.sample(&mut self.rng);
            }
            let len = norm(out);
            if len > 0.0 {
                out.iter_mut().for_each(|v| *v /= len);
                return;
            }
        }
    }
}

/// `count x n` matrix of uniform unit vectors.
pub fn sample_unit_sphere(n: usize, count: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 || count == 0 {
        return Err(Error::InvalidArgument(format!(
            "sphere sampling needs n >= 1 and count >= 1 (n={n}, count={count})"
        )));
    }
    let mut out = Array2::zeros((count, n));
    let mut sampler = UnitSphereSampler::new(n, seed);
    for mut row in out.rows_mut() {
        sampler.fill(row.as_slice_mut().expect("standard layout"));
    }
    Ok(out)
}

fn mc_estimate(hits: usize, samples: usize, zero_members: usize) -> RatingEstimate {
    let p = hits as f64 / samples as f64;
    RatingEstimate {
        value: p,
        std_error: (p * (1.0 - p) / samples as f64).sqrt(),
        sample_count: samples,
        method: RatingMethod::MonteCarlo,
        zero_members,
    }
}

/// Coordinates of each unit gradient in an orthonormal basis of their span,
/// built by Gram-Schmidt in member order. Member `i` has exact zeros in every
/// basis direction introduced after it, and zero members are all zeros.
fn span_coordinates(g: &GradientSet) -> (usize, Vec<Vec<f64>>) {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut dims_at = Vec::with_capacity(g.k());
    let mut units = Vec::with_capacity(g.k());
    for (i, grad) in g.grads().iter().enumerate() {
        if g.is_zero(i) {
            units.push(None);
            dims_at.push(basis.len());
            continue;
        }
        let u = unit(grad);
        let mut r = u.clone();
        for _ in 0..2 {
            for q in &basis {
                let p = dot(q, &r);
                r.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
            }
        }
        let len = norm(&r);
        if len > 1e-9 {
            basis.push(r.into_iter().map(|v| v / len).collect());
        }
        dims_at.push(basis.len());
        units.push(Some(u));
    }
    let rank = basis.len();
    let coords = units
        .iter()
        .zip(&dims_at)
        .map(|(u, &d)| {
            let mut c = vec![0.0; rank];
            if let Some(u) = u {
                for (j, q) in basis.iter().enumerate().take(d) {
                    c[j] = dot(q, u);
                }
            }
            c
        })
        .collect();
    (rank, coords)
}

/// Monte Carlo estimate of the rating.
///
/// Only the component of a direction inside the gradients' span decides the
/// sign pattern, and a uniform direction's span component has the law of a
/// standard normal in span coordinates, so sampling happens in the span
/// (dimension at most `k`). Basis direction `d` draws from its own seeded
/// stream, which makes hit sets nested when a member is appended.
pub fn r_monte_carlo(g: &GradientSet, samples: usize, seed: u64) -> Result<RatingEstimate> {
    if samples == 0 {
        return Err(Error::InvalidArgument("Monte Carlo needs samples > 0".into()));
    }
    let zero_members = g.zero_count();
    let (rank, coords) = span_coordinates(g);
    if rank == 0 {
        return Ok(mc_estimate(0, samples, zero_members));
    }
    let mut streams: Vec<ChaCha8Rng> = (0..rank)
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64);
            rng
        })
        .collect();
    let mut z = vec![vec![0.0f64; CHUNK]; rank];
    let mut hits = 0usize;
    let mut done = 0usize;
    while done < samples {
        let m = CHUNK.min(samples - done);
        for (d, rng) in streams.iter_mut().enumerate() {
            for v in &mut z[d][..m] {
                *v = StandardNormal.sample(rng);
            }
        }
        for j in 0..m {
            let inside = coords.iter().all(|c| {
                let mut s = 0.0;
                for (d, cd) in c.iter().enumerate() {
                    s += z[d][j] * cd;
                }
                s < 0.0
            });
            hits += inside as usize;
        }
        done += m;
    }
    Ok(mc_estimate(hits, samples, zero_members))
}

/// Monte Carlo estimate drawing full `n`-dimensional directions from
/// [`UnitSphereSampler`]. Much slower than [`r_monte_carlo`] for large `n`;
/// for a fixed seed the same directions are tested against every member.
pub fn r_monte_carlo_ambient(g: &GradientSet, samples: usize, seed: u64) -> Result<RatingEstimate> {
    if samples == 0 {
        return Err(Error::InvalidArgument("Monte Carlo needs samples > 0".into()));
    }
    let mut sampler = UnitSphereSampler::new(g.n(), seed);
    let mut v = vec![0.0; g.n()];
    let mut hits = 0usize;
    for _ in 0..samples {
        sampler.fill(&mut v);
        hits += g.grads().iter().all(|grad| dot(&v, grad) < 0.0) as usize;
    }
    Ok(mc_estimate(hits, samples, g.zero_count()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RatingPolicy {
    /// Closed forms for up to three members, Monte Carlo otherwise.
    ExactIfAvailable { fallback_samples: usize },
    MonteCarlo { samples: usize },
}

impl Default for RatingPolicy {
    fn default() -> Self {
        RatingPolicy::ExactIfAvailable {
            fallback_samples: DEFAULT_GDR_SAMPLES,
        }
    }
}

pub fn rating(g: &GradientSet, policy: RatingPolicy, seed: u64) -> Result<RatingEstimate> {
    match policy {
        RatingPolicy::MonteCarlo { samples } => r_monte_carlo(g, samples, seed),
        RatingPolicy::ExactIfAvailable { fallback_samples } => {
            if g.zero_count() > 0 {
                return r_monte_carlo(g, fallback_samples, seed);
            }
            match g.k() {
                1 => r_single(g),
                2 => r_pair(g),
                3 => r_triple(g),
                _ => r_monte_carlo(g, fallback_samples, seed),
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdrOptions {
    pub policy: RatingPolicy,
    pub seed: u64,
    /// Restrict the average to inputs every member classifies correctly.
    pub correct_only: bool,
}

impl Default for GdrOptions {
    fn default() -> Self {
        GdrOptions {
            policy: RatingPolicy::default(),
            seed: 0,
            correct_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRating {
    pub example_index: usize,
    #[serde(flatten)]
    pub estimate: RatingEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdrReport {
    pub gdr: f64,
    pub ratings: Vec<ExampleRating>,
    pub zero_gradient_examples: usize,
}

impl GdrReport {
    pub fn values(&self) -> Vec<f64> {
        self.ratings.iter().map(|r| r.estimate.value).collect()
    }
}

/// Gradient sets of every example, in dataset order.
pub fn gradient_sets(ensemble: &Ensemble, data: &Dataset) -> Result<Vec<GradientSet>> {
    if data.n() != ensemble.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: ensemble.input_dim(),
            got: data.n(),
        });
    }
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let x = data.batch_features(chunk);
        let y = data.batch_labels(chunk);
        let per_model = ensemble.input_gradients(x.view(), &y)?;
        for r in 0..chunk.len() {
            let grads = per_model.iter().map(|g| g.row(r).to_vec()).collect();
            out.push(GradientSet::new(grads)?);
        }
    }
    Ok(out)
}

/// Average rating over `data`. Example `i` seeds its Monte Carlo stream with
/// `seed ^ i`, so results do not depend on evaluation order.
pub fn gdr(ensemble: &Ensemble, data: &Dataset, options: &GdrOptions) -> Result<GdrReport> {
    if data.is_empty() {
        return Err(Error::Empty("GDR needs a non-empty test set".into()));
    }
    let keep: Vec<usize> = if options.correct_only {
        let x = data.features();
        let preds = ensemble.predict_batch(x.view())?;
        (0..data.len())
            .filter(|&i| preds.iter().all(|p| p[i] == data.examples()[i].label))
            .collect()
    } else {
        (0..data.len()).collect()
    };
    if keep.is_empty() {
        return Err(Error::Empty(
            "no test input is classified correctly by every member".into(),
        ));
    }
    let subset = data.select(&keep);
    let sets = gradient_sets(ensemble, &subset)?;
    let mut ratings = Vec::with_capacity(sets.len());
    let mut zero_examples = 0;
    for (set, &i) in sets.iter().zip(&keep) {
        let estimate = rating(set, options.policy, options.seed ^ i as u64)?;
        if estimate.zero_members > 0 {
            zero_examples += 1;
        }
        ratings.push(ExampleRating {
            example_index: i,
            estimate,
        });
    }
    if zero_examples > 0 {
        log::warn!("{zero_examples} examples had at least one zero input gradient");
    }
    let gdr = ratings.iter().map(|r| r.estimate.value).sum::<f64>() / ratings.len() as f64;
    Ok(GdrReport {
        gdr,
        ratings,
        zero_gradient_examples: zero_examples,
    })
}

/// Per-example ratings as CSV:
/// `example_index,rating,std_error,sample_count,schema_version`.
pub fn write_ratings_csv<W: Write>(out: W, ratings: &[ExampleRating]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["example_index", "rating", "std_error", "sample_count", "schema_version"])?;
    for r in ratings {
        w.write_record([
            r.example_index.to_string(),
            r.estimate.value.to_string(),
            r.estimate.std_error.to_string(),
            r.estimate.sample_count.to_string(),
            RATINGS_CSV_SCHEMA.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
