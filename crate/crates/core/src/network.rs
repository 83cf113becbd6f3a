//! Feedforward tanh classifiers and ensembles of them.
//!
//! A model maps `x in R^n` to softmax class confidences `f^c(x)`; its input
//! gradient is always taken of the *true* class confidence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{one_hot, Graph, Var};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"GDEN";
pub const MODEL_FORMAT_VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "GDEN-ENSEMBLE";

/// Hidden widths used by the experiment presets.
pub const DEFAULT_HIDDEN: [usize; 2] = [256, 128];

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    /// `dims[l] x dims[l + 1]`, applied as `x W + b`.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// A model's parameters recorded as leaves on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MlpModel {
    pub fn new(dims: Vec<usize>, weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "layer dims must hold at least two positive entries, got {dims:?}"
            )));
        }
        let layers = dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "{layers} layers need {layers} weight matrices and bias vectors"
            )));
        }
        for l in 0..layers {
            if weights[l].dim() != (dims[l], dims[l + 1]) || biases[l].len() != dims[l + 1] {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} parameters do not match dims {dims:?}"
                )));
            }
        }
        let finite = weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite { op: "model parameters" });
        }
        Ok(MlpModel {
            dims,
            weights,
            biases,
        })
    }

    /// Uniform `+-sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                rng.random_range(-limit..limit)
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Self::new(dims.to_vec(), weights, biases)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let weights = dims
            .windows(2)
            .map(|p| Array2::zeros((p[0], p[1])))
            .collect();
        let biases = dims.windows(2).map(|p| Array1::zeros(p[1])).collect();
        Self::new(dims.to_vec(), weights, biases)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [Array2<f64>], &mut [Array1<f64>]) {
        (&mut self.weights, &mut self.biases)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn logits_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&x)?;
        let last = self.weights.len() - 1;
        let mut h = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if l < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "forward" });
        }
        Ok(h)
    }

    /// Row-wise softmax confidences for a batch.
    pub fn confidences_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let z = self.logits_batch(x)?;
        Ok(softmax_rows(&z))
    }

    pub fn confidences(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.confidences_batch(view)?.row(0).to_vec())
    }

    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let p = self.confidences_batch(x)?;
        Ok(p.rows().into_iter().map(|r| argmax(r.iter().copied())).collect())
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(self.confidences(x)?.into_iter()))
    }

    /// `d f^y / d x` for every row of `x`, one row per example.
    pub fn input_gradients(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
        self.check_batch(&x)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let xv = g.leaf(x.to_owned())?;
        let grad = bound.input_gradients(&mut g, xv, labels, false)?;
        Ok(g.value(grad).clone())
    }

    pub fn input_gradient(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.input_gradients(view, &[y])?.row(0).to_vec())
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundModel> {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            weights.push(g.leaf(w.clone())?);
            biases.push(g.leaf(b.clone().insert_axis(Axis(0)))?);
        }
        Ok(BoundModel { weights, biases })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.parameter_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MODEL_MAGIC {
            return Err(Error::VersionMismatch(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(MODEL_MAGIC),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::VersionMismatch(format!(
                "model format version {version}, this build reads {MODEL_FORMAT_VERSION}"
            )));
        }
        let layers = r.u32()? as usize;
        if layers == 0 || layers > 1024 {
            return Err(Error::Malformed(format!("implausible layer count {layers}")));
        }
        let dims = (0..=layers)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (rows, cols) = (dims[l], dims[l + 1]);
            let w = r.f64s(rows * cols)?;
            weights.push(Array2::from_shape_vec((rows, cols), w).expect("sized"));
            biases.push(Array1::from(r.f64s(cols)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after model payload",
                bytes.len() - r.pos
            )));
        }
        Self::new(dims, weights, biases).map_err(|e| Error::Malformed(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl BoundModel {
    pub fn params(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }

    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let last = self.weights.len() - 1;
        let mut h = x;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = g.matmul(h, *w)?;
            h = g.add(z, *b)?;
            if l < last {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    pub fn confidences(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = self.logits(g, x)?;
        g.softmax_rows(z)
    }

    /// Sum over rows of the true-class confidence `f^{y_r}(x_r)`.
    pub fn true_class_confidence(&self, g: &mut Graph, x: Var, labels: &[usize]) -> Result<Var> {
        let p = self.confidences(g, x)?;
        let (rows, cols) = g.shape(p);
        let mask = g.constant(one_hot(labels, rows, cols)?)?;
        let picked = g.mul(p, mask)?;
        g.sum(picked)
    }

    /// Per-row input gradients of the true-class confidence. Rows of `x` are
    /// independent, so differentiating the row sum yields each row's gradient.
    pub fn input_gradients(
        &self,
        g: &mut Graph,
        x: Var,
        labels: &[usize],
        differentiable: bool,
    ) -> Result<Var> {
        let f = self.true_class_confidence(g, x, labels)?;
        Ok(g.gradient(f, &[x], differentiable)?[0])
    }
}

pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| v - m);
        let lse = row.mapv(f64::exp).sum().ln();
        row.mapv_inplace(|v| (v - lse).exp());
    }
    out
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Malformed(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(|| {
            Error::Malformed("parameter count overflows".into())
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::file(&tmp, e))?;
        f.sync_all().map_err(|e| Error::file(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    models: Vec<MlpModel>,
    names: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u16,
    pub members: Vec<ManifestMember>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMember {
    pub name: String,
    /// Path of the model file, relative to the manifest's directory.
    pub file: String,
}

impl Ensemble {
    pub fn new(models: Vec<MlpModel>, names: Vec<String>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Empty("an ensemble needs at least one model".into()));
        }
        if names.len() != models.len() {
            return Err(Error::InvalidArgument(format!(
                "{} names for {} models",
                names.len(),
                models.len()
            )));
        }
        let (n, c) = (models[0].input_dim(), models[0].classes());
        for m in &models[1..] {
            if m.input_dim() != n || m.classes() != c {
                return Err(Error::InvalidArgument(format!(
                    "member shape {}->{} differs from {n}->{c}",
                    m.input_dim(),
                    m.classes()
                )));
            }
        }
        Ok(Ensemble { models, names })
    }

    /// Members named `m0`, `m1`, ...
    pub fn from_models(models: Vec<MlpModel>) -> Result<Self> {
        let names = (0..models.len()).map(|i| format!("m{i}")).collect();
        Self::new(models, names)
    }

    pub fn singleton(model: MlpModel) -> Self {
        Ensemble {
            models: vec![model],
            names: vec!["m0".into()],
        }
    }

    /// `k` copies of one model.
    pub fn copies(model: &MlpModel, k: usize) -> Result<Self> {
        Self::from_models(vec![model.clone(); k])
    }

    /// Build an ensemble from members of other ensembles, given as
    /// `(source, member index)` pairs.
    pub fn recombine(parts: &[(&Ensemble, usize)]) -> Result<Self> {
        let mut models = Vec::new();
        let mut names = Vec::new();
        for (src, idx) in parts {
            let m = src.models.get(*idx).ok_or_else(|| {
                Error::InvalidArgument(format!("member {idx} out of range"))
            })?;
            models.push(m.clone());
            names.push(src.names[*idx].clone());
        }
        dedup_names(&mut names);
        Self::new(models, names)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[MlpModel] {
        &self.models
    }

    pub(crate) fn models_mut(&mut self) -> &mut [MlpModel] {
        &mut self.models
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn input_dim(&self) -> usize {
        self.models[0].input_dim()
    }

    pub fn classes(&self) -> usize {
        self.models[0].classes()
    }

    pub fn member(&self, i: usize) -> Ensemble {
        Ensemble {
            models: vec![self.models[i].clone()],
            names: vec![self.names[i].clone()],
        }
    }

    /// Per-member predictions, `members x rows`.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<Vec<usize>>> {
        self.models.iter().map(|m| m.predict_batch(x)).collect()
    }

    /// Per-member input gradients of the true-class confidence.
    pub fn input_gradients(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<Array2<f64>>> {
        self.models
            .iter()
            .map(|m| m.input_gradients(x, labels))
            .collect()
    }

    /// Write each member as `<name>.gden` plus a manifest into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let mut members = Vec::new();
        for (m, name) in self.models.iter().zip(&self.names) {
            let file = format!("{name}.gden");
            m.save(&dir.join(&file))?;
            members.push(ManifestMember {
                name: name.clone(),
                file,
            });
        }
        write_manifest(dir, &members)
    }

    /// Load from a directory holding `manifest.json`, or from a manifest path.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::file(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
            return Err(Error::VersionMismatch(format!(
                "manifest {} v{}",
                manifest.format, manifest.version
            )));
        }
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut models = Vec::new();
        let mut names = Vec::new();
        for member in &manifest.members {
            models.push(MlpModel::load(&base.join(&member.file))?);
            names.push(member.name.clone());
        }
        Self::new(models, names)
    }
}

/// Write a manifest whose members may live anywhere relative to `dir`, e.g.
/// `../ens-0/m1.gden`, for ensembles recombined from separate runs.
pub fn write_manifest(dir: &Path, members: &[ManifestMember]) -> Result<()> {
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        members: members.to_vec(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

fn dedup_names(names: &mut [String]) {
    for i in 1..names.len() {
        if names[..i].contains(&names[i]) {
            let base = names[i].clone();
            let mut k = 1;
            while names.contains(&format!("{base}_{k}")) {
                k += 1;
            }
            names[i] = format!("{base}_{k}");
        }
    }
}
