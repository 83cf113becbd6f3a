//! Config-driven experiments behind the `gdr` binary: train a set of
//! ensembles, rate them, attack them, and a fast self-check.
//!
//! Every output embeds the SHA-256 of the resolved config and the three
//! seeds (data, init, attack) that drive all randomness.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{attack_batch, AttackConfig, AttackKind, EnsembleObjective};
use crate::data_io::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::geometry::{self, GdrOptions, GradientSet, RatingEstimate, RatingPolicy, DEFAULT_GDR_SAMPLES};
use crate::metrics::{self, EvalReport};
use crate::network::{write_atomic, write_manifest, Ensemble, ManifestMember, MlpModel, MANIFEST_FILE};
use crate::trainer::{self, GradLossKind, Phase, TrainConfig, TrainLog};

pub const REPORT_SCHEMA: u32 = 1;
pub const SWEEP_CSV_SCHEMA: u32 = 1;
const HISTOGRAM_BINS: usize = 25;
const HISTOGRAM_MAX: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    /// A directory holding the four standard IDX files.
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub classes: usize,
    pub spread: f64,
    pub contrast: f64,
    pub background: usize,
    pub sibling_flip: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 784,
            classes: 10,
            spread: 0.5,
            contrast: 1.0,
            background: 0,
            sibling_flip: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    pub stratified: bool,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DataSource::Synthetic,
            dir: None,
            train_size: 4000,
            test_size: 1000,
            stratified: true,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    /// Ensembles trained with the gradient penalty schedule.
    pub grad_trained: usize,
    /// Ensembles trained without it.
    pub baselines: usize,
    /// Also write manifests mixing members of grad-trained and baseline runs.
    pub recombine: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: 3,
            hidden: vec![128, 64],
            grad_trained: 3,
            baselines: 2,
            recombine: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// 3 epochs cosine + 3 epochs angle sum.
    Desk,
    /// 15 + 15.
    Paper,
    /// `train.phases` as given.
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub schedule: Schedule,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub phases: Vec<Phase>,
    /// Defaults to the schedule's total epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_epochs: Option<usize>,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub log_probe: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            schedule: Schedule::Desk,
            phases: Vec::new(),
            baseline_epochs: None,
            beta: 0.75,
            learning_rate: 0.015,
            batch_size: trainer::DEFAULT_BATCH_SIZE,
            tau: trainer::DEFAULT_TAU,
            log_probe: trainer::DEFAULT_LOG_PROBE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Exact,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdrSection {
    pub policy: PolicyName,
    /// Monte Carlo samples (also the fallback for sets without a closed form).
    pub samples: usize,
    /// Leading test examples rated.
    pub examples: usize,
    pub correct_only: bool,
}

impl Default for GdrSection {
    fn default() -> Self {
        GdrSection {
            policy: PolicyName::Exact,
            samples: DEFAULT_GDR_SAMPLES,
            examples: 1000,
            correct_only: false,
        }
    }
}

impl GdrSection {
    pub fn policy(&self) -> RatingPolicy {
        match self.policy {
            PolicyName::Exact => RatingPolicy::ExactIfAvailable {
                fallback_samples: self.samples,
            },
            PolicyName::MonteCarlo => RatingPolicy::MonteCarlo {
                samples: self.samples,
            },
        }
    }
}

/// One attack kind swept over several budgets. Unset fields take the kind's
/// defaults from [`AttackConfig::for_kind`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSweep {
    pub kind: AttackKind,
    pub epsilons: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// As a fraction of epsilon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_start: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<EnsembleObjective>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_on_success: Option<bool>,
}

impl AttackSweep {
    pub fn new(kind: AttackKind, epsilons: &[f64]) -> Self {
        AttackSweep {
            kind,
            epsilons: epsilons.to_vec(),
            steps: None,
            step_fraction: None,
            momentum_decay: None,
            random_start: None,
            objective: None,
            stop_on_success: None,
        }
    }

    pub fn config(&self, epsilon: f64, seed: u64) -> AttackConfig {
        let mut c = AttackConfig::for_kind(self.kind, epsilon).with_seed(seed);
        if let Some(s) = self.steps {
            c.steps = s;
        }
        if let Some(f) = self.step_fraction {
            c.step_size = f * epsilon;
        }
        if let Some(m) = self.momentum_decay {
            c.momentum_decay = m;
        }
        if let Some(r) = self.random_start {
            c.random_start = r;
        }
        if let Some(o) = self.objective {
            c.objective = o;
        }
        if let Some(s) = self.stop_on_success {
            c.stop_on_success = s;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Leading test examples attacked (before filtering to those every
    /// member classifies correctly).
    pub examples: usize,
    pub sweeps: Vec<AttackSweep>,
}

impl Default for AttackSection {
    fn default() -> Self {
        let eps = [0.1, 0.2, 0.3];
        AttackSection {
            examples: 500,
            sweeps: vec![
                AttackSweep::new(AttackKind::Fgsm, &eps),
                AttackSweep::new(AttackKind::PgdLinf, &eps),
                AttackSweep::new(AttackKind::Mi, &eps),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub attack: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/desk"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub ensemble: EnsembleConfig,
    pub train: TrainSection,
    pub gdr: GdrSection,
    pub attack: AttackSection,
    pub seeds: Seeds,
    pub output: OutputConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    PaperMnist,
    PaperFashion,
    Desk,
}

impl Preset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::PaperMnist => "paper-mnist",
            Preset::PaperFashion => "paper-fashion",
            Preset::Desk => "desk",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-mnist" => Ok(Preset::PaperMnist),
            "paper-fashion" => Ok(Preset::PaperFashion),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl ExperimentConfig {
    /// Synthetic data at desk scale with the tuned training settings.
    pub fn desk() -> Self {
        Self::default()
    }

    /// 4,000 MNIST training images, 1,000 test images, five ensembles of
    /// three under the desk schedule.
    pub fn paper_mnist() -> Self {
        let mut c = Self::default();
        c.dataset.source = DataSource::Idx;
        c.dataset.dir = Some(PathBuf::from("data/mnist"));
        c.ensemble.hidden = crate::network::DEFAULT_HIDDEN.to_vec();
        c.train.beta = trainer::DEFAULT_BETA;
        c.train.learning_rate = trainer::DEFAULT_LEARNING_RATE;
        c.output.dir = PathBuf::from("runs/paper-mnist");
        c
    }

    /// As [`Self::paper_mnist`] on FashionMNIST with the smaller budgets.
    pub fn paper_fashion() -> Self {
        let mut c = Self::paper_mnist();
        c.dataset.dir = Some(PathBuf::from("data/fashion-mnist"));
        for s in &mut c.attack.sweeps {
            s.epsilons = vec![0.03, 0.06, 0.09];
        }
        c.output.dir = PathBuf::from("runs/paper-fashion");
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::PaperMnist => Self::paper_mnist(),
            Preset::PaperFashion => Self::paper_fashion(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Parse TOML on top of `base`: keys present in `text` replace the base
    /// values, unknown keys are rejected.
    pub fn from_toml_over(base: &ExperimentConfig, text: &str) -> Result<Self> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_over(&Self::default(), text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `output.dir`.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn grad_train_config(&self, index: usize) -> TrainConfig {
        let phases = match self.train.schedule {
            Schedule::Desk => TrainConfig::desk().phases,
            Schedule::Paper => TrainConfig::paper().phases,
            Schedule::Custom => self.train.phases.clone(),
        };
        self.train_config(phases, index)
    }

    pub fn baseline_train_config(&self, index: usize) -> TrainConfig {
        let epochs = self
            .train
            .baseline_epochs
            .unwrap_or_else(|| self.grad_train_config(0).epochs_total());
        self.train_config(vec![Phase::new(epochs, GradLossKind::None)], 1000 + index)
    }

    fn train_config(&self, phases: Vec<Phase>, index: usize) -> TrainConfig {
        TrainConfig {
            members: self.ensemble.members,
            hidden: self.ensemble.hidden.clone(),
            beta: self.train.beta,
            phases,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            seed: trainer::member_seed(self.seeds.init, index),
            tau: self.train.tau,
            log_probe: self.train.log_probe,
        }
    }

    /// Full validation; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.dataset;
        if d.train_size == 0 {
            return bad("dataset.train_size must be positive".into());
        }
        if d.test_size == 0 {
            return bad("dataset.test_size must be positive".into());
        }
        match d.source {
            DataSource::Idx if d.dir.is_none() => {
                return bad("dataset.dir is required when dataset.source = \"idx\"".into())
            }
            DataSource::Synthetic => {
                let s = &d.synthetic;
                if s.n < 2 || s.classes < 2 {
                    return bad("dataset.synthetic.n and dataset.synthetic.classes must be >= 2".into());
                }
                if !(s.spread >= 0.0) {
                    return bad(format!("dataset.synthetic.spread must be >= 0, got {}", s.spread));
                }
                if !(0.0..=1.0).contains(&s.contrast) {
                    return bad(format!("dataset.synthetic.contrast must lie in [0, 1], got {}", s.contrast));
                }
                if !(0.0..=1.0).contains(&s.sibling_flip) {
                    return bad(format!(
                        "dataset.synthetic.sibling_flip must lie in [0, 1], got {}",
                        s.sibling_flip
                    ));
                }
                if s.background >= s.n {
                    return bad("dataset.synthetic.background must be smaller than dataset.synthetic.n".into());
                }
            }
            DataSource::Idx => {}
        }
        let e = &self.ensemble;
        if e.members == 0 {
            return bad("ensemble.members must be positive".into());
        }
        if e.grad_trained + e.baselines == 0 {
            return bad("ensemble.grad_trained + ensemble.baselines must be positive".into());
        }
        if self.train.schedule == Schedule::Custom && self.train.phases.is_empty() {
            return bad("train.phases must be set when train.schedule = \"custom\"".into());
        }
        if self.train.schedule != Schedule::Custom && !self.train.phases.is_empty() {
            return bad("train.phases is only read when train.schedule = \"custom\"".into());
        }
        if self.train.baseline_epochs == Some(0) {
            return bad("train.baseline_epochs must be positive".into());
        }
        if e.grad_trained > 0 {
            self.grad_train_config(0).validate()?;
        }
        self.baseline_train_config(0).validate()?;
        if self.gdr.examples == 0 || self.gdr.samples == 0 {
            return bad("gdr.examples and gdr.samples must be positive".into());
        }
        if self.attack.examples == 0 {
            return bad("attack.examples must be positive".into());
        }
        for (i, s) in self.attack.sweeps.iter().enumerate() {
            if s.epsilons.is_empty() {
                return bad(format!("attack.sweeps[{i}].epsilons is empty"));
            }
            for &eps in &s.epsilons {
                s.config(eps, 0)
                    .validated()
                    .map_err(|err| Error::Config(format!("attack.sweeps[{i}]: {err}")))?;
            }
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Command-line values that replace config values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed_data: Option<u64>,
    pub seed_init: Option<u64>,
    pub seed_attack: Option<u64>,
}

/// Preset (default desk), then the config file, then flags; validated.
pub fn resolve_config(preset: Option<Preset>, path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::preset(preset.unwrap_or(Preset::Desk));
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
            ExperimentConfig::from_toml_over(&base, &text)?
        }
        None => base,
    };
    if let Some(o) = &overrides.out {
        cfg.output.dir = o.clone();
    }
    if let Some(s) = overrides.seed_data {
        cfg.seeds.data = s;
    }
    if let Some(s) = overrides.seed_init {
        cfg.seeds.init = s;
    }
    if let Some(s) = overrides.seed_attack {
        cfg.seeds.attack = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Training and test sets described by the config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    match d.source {
        DataSource::Synthetic => {
            let s = &d.synthetic;
            let total = d.train_size + d.test_size;
            let per_class = total.div_ceil(s.classes);
            let all = data_io::synthetic(&SyntheticSpec {
                n: s.n,
                classes: s.classes,
                per_class,
                spread: s.spread,
                contrast: s.contrast,
                background: s.background,
                sibling_flip: s.sibling_flip,
                seed: cfg.seeds.data,
            })?;
            let (train, rest) = all.split_at(d.train_size)?;
            let (test, _) = rest.split_at(d.test_size.min(rest.len()))?;
            Ok((train, test))
        }
        DataSource::Idx => {
            let dir = d.dir.as_deref().expect("validated");
            let train = data_io::load_idx(&dir.join(IDX_FILES[0]), &dir.join(IDX_FILES[1]))?;
            let test = data_io::load_idx(&dir.join(IDX_FILES[2]), &dir.join(IDX_FILES[3]))?;
            let classes = train.classes().max(test.classes());
            let (train, test) = (train.with_classes(classes)?, test.with_classes(classes)?);
            let train = data_io::subset(&train, d.train_size.min(train.len()), cfg.seeds.data, d.stratified)?;
            let test = data_io::subset(&test, d.test_size.min(test.len()), cfg.seeds.data ^ 1, d.stratified)?;
            Ok((train, test))
        }
    }
}

fn leading(data: &Dataset, count: usize) -> Dataset {
    data.select(&(0..count.min(data.len())).collect::<Vec<_>>())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::file(path, e))
}

pub fn ensembles_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.dir.join("ensembles")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedEnsemble {
    pub name: String,
    /// `grad`, `baseline` or `mixed`.
    pub kind: String,
    pub dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_epoch: Option<trainer::EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seeds: Seeds,
    pub data_source: String,
    pub ensembles: Vec<TrainedEnsemble>,
    pub seconds: f64,
}

fn train_one(tc: &TrainConfig, train: &Dataset, dir: &Path) -> Result<TrainLog> {
    let checkpoints = dir.join("checkpoints");
    let init = trainer::init_ensemble(tc, train.n(), train.classes())?;
    let (ens, log) = trainer::train_from(tc, train, init, |rec, e| {
        e.save_dir(&checkpoints.join(format!("epoch-{:03}", rec.epoch)))
    })
    .map_err(|e| match e {
        Error::Diverged { epoch, batch, last_good } => {
            // Keep the last good weights on disk before giving up.
            let _ = last_good.save_dir(&dir.join("last-good"));
            Error::Diverged { epoch, batch, last_good }
        }
        other => other,
    })?;
    ens.save_dir(dir)?;
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    write_atomic(&dir.join("train_log.csv"), &csv)?;
    Ok(log)
}

/// Train `grad_trained` regularized and `baselines` plain ensembles, save
/// them with per-epoch checkpoints and logs, and write recombined manifests.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let start = Instant::now();
    let (train, _) = load_data(cfg)?;
    let root = ensembles_dir(cfg);
    create_dir(&root)?;
    let mut out = Vec::new();
    let plans = (0..cfg.ensemble.grad_trained)
        .map(|i| (format!("grad-{i}"), "grad", cfg.grad_train_config(i)))
        .chain((0..cfg.ensemble.baselines).map(|i| (format!("base-{i}"), "baseline", cfg.baseline_train_config(i))));
    for (name, kind, tc) in plans {
        log::info!("training {name}");
        let dir = root.join(&name);
        let log = train_one(&tc, &train, &dir)?;
        out.push(TrainedEnsemble {
            name,
            kind: kind.into(),
            dir,
            final_epoch: log.last().cloned(),
        });
    }
    if cfg.ensemble.recombine {
        out.extend(write_mixtures(cfg, &root)?);
    }
    let report = TrainReport {
        schema_version: REPORT_SCHEMA,
        config_hash: cfg.hash()?,
        seeds: cfg.seeds,
        data_source: train.source().to_string(),
        ensembles: out,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&cfg.output.dir.join("train_report.json"), &report)?;
    Ok(report)
}

/// `mix-g{i}-b{j}-k{k}`: the first `k` members of `grad-i`, the rest from
/// `base-j`, as manifests pointing into the original directories.
fn write_mixtures(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<TrainedEnsemble>> {
    let (g, b, k) = (cfg.ensemble.grad_trained, cfg.ensemble.baselines, cfg.ensemble.members);
    let mut out = Vec::new();
    if g == 0 || b == 0 || k < 2 {
        return Ok(out);
    }
    for i in 0..g {
        let j = i % b;
        for from_grad in 1..k {
            let name = format!("mix-g{i}-b{j}-k{from_grad}");
            let dir = root.join(&name);
            create_dir(&dir)?;
            let members: Vec<ManifestMember> = (0..k)
                .map(|m| {
                    let src = if m < from_grad { format!("grad-{i}") } else { format!("base-{j}") };
                    ManifestMember {
                        name: format!("{src}.m{m}"),
                        file: format!("../{src}/m{m}.gden"),
                    }
                })
                .collect();
            write_manifest(&dir, &members)?;
            out.push(TrainedEnsemble {
                name,
                kind: "mixed".into(),
                dir,
                final_epoch: None,
            });
        }
    }
    Ok(out)
}

/// Ensemble directories under the output directory, sorted by name.
pub fn discover_ensembles(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let root = ensembles_dir(cfg);
    let entries = fs::read_dir(&root).map_err(|e| Error::file(&root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Empty(format!("no ensembles under {}", root.display())));
    }
    Ok(dirs)
}

fn ensemble_name(dir: &Path) -> String {
    let d = if dir.is_file() { dir.parent().unwrap_or(dir) } else { dir };
    d.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| d.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleGdr {
    pub name: String,
    pub gdr: f64,
    pub examples: usize,
    pub zero_gradient_examples: usize,
    pub mass_below_0_05: f64,
    /// Counts over equal bins spanning `[0, 0.5]`.
    pub histogram: Vec<usize>,
    pub ratings_csv: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdrSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub seeds: Seeds,
    pub policy: RatingPolicy,
    pub ensembles: Vec<EnsembleGdr>,
}

fn gdr_options(cfg: &ExperimentConfig) -> GdrOptions {
    GdrOptions {
        policy: cfg.gdr.policy(),
        seed: cfg.seeds.attack,
        correct_only: cfg.gdr.correct_only,
    }
}

/// Rate each ensemble (all discovered ones when `dirs` is empty) on the
/// leading `gdr.examples` test inputs.
pub fn cmd_gdr(cfg: &ExperimentConfig, dirs: &[PathBuf]) -> Result<GdrSummary> {
    let dirs = if dirs.is_empty() { discover_ensembles(cfg)? } else { dirs.to_vec() };
    let (_, test) = load_data(cfg)?;
    let probe = leading(&test, cfg.gdr.examples);
    let out_dir = cfg.output.dir.join("gdr");
    create_dir(&out_dir)?;
    let mut ensembles = Vec::new();
    for dir in &dirs {
        let name = ensemble_name(dir);
        let e = Ensemble::load(dir)?;
        let report = geometry::gdr(&e, &probe, &gdr_options(cfg))?;
        let values = report.values();
        let csv_path = out_dir.join(format!("{name}.csv"));
        let mut csv = Vec::new();
        geometry::write_ratings_csv(&mut csv, &report.ratings)?;
        write_atomic(&csv_path, &csv)?;
        log::info!("{name}: GDR {:.4}", report.gdr);
        ensembles.push(EnsembleGdr {
            name,
            gdr: report.gdr,
            examples: values.len(),
            zero_gradient_examples: report.zero_gradient_examples,
            mass_below_0_05: metrics::mass_below(&values, 0.05),
            histogram: metrics::histogram(&values, HISTOGRAM_BINS, 0.0, HISTOGRAM_MAX),
            ratings_csv: csv_path,
        });
    }
    let summary = GdrSummary {
        schema_version: REPORT_SCHEMA,
        config_hash: cfg.hash()?,
        seeds: cfg.seeds,
        policy: cfg.gdr.policy(),
        ensembles,
    };
    write_json(&cfg.output.dir.join("gdr_report.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub ensemble: String,
    pub report: EvalReport,
}

/// Exponential trend of success against GDR for one (attack, epsilon) series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesFit {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub points: usize,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub seeds: Seeds,
    pub reports: Vec<NamedReport>,
    pub fits: Vec<SeriesFit>,
}

fn series_fit(attack: AttackKind, epsilon: f64, pts: &[(f64, f64)]) -> SeriesFit {
    let positive: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.1 > 0.0).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
    let spearman = metrics::spearman(&xs, &ys).ok();
    let (a, b, note) = match metrics::fit_exponential(&positive) {
        Ok((a, b)) => (
            Some(a),
            Some(b),
            (positive.len() < pts.len()).then(|| format!("{} zero-success points excluded", pts.len() - positive.len())),
        ),
        Err(e) => (None, None, Some(e.to_string())),
    };
    SeriesFit {
        attack,
        epsilon,
        points: pts.len(),
        a,
        b,
        spearman,
        note,
    }
}

/// Run every sweep against every ensemble; one CSV row per
/// (ensemble, attack, epsilon) plus a JSON report with per-series fits.
pub fn cmd_attack(cfg: &ExperimentConfig, dirs: &[PathBuf]) -> Result<AttackSummary> {
    let dirs = if dirs.is_empty() { discover_ensembles(cfg)? } else { dirs.to_vec() };
    let (_, test) = load_data(cfg)?;
    let gdr_probe = leading(&test, cfg.gdr.examples);
    let attack_set = leading(&test, cfg.attack.examples);
    let mut loaded = Vec::new();
    for dir in &dirs {
        loaded.push((ensemble_name(dir), Ensemble::load(dir)?));
    }
    let max_members = loaded.iter().map(|(_, e)| e.len()).max().unwrap_or(0);
    let mut header: Vec<String> = [
        "schema_version",
        "ensemble",
        "gdr",
        "attack",
        "epsilon",
        "ensemble_success",
        "cr",
        "cr_note",
        "consensus_accuracy",
        "filtered_count",
        "all_fooled_any_class",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..max_members).map(|m| format!("model_{m}_success")));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    let mut reports = Vec::new();
    let mut series: BTreeMap<(usize, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for (name, e) in &loaded {
        let g = geometry::gdr(e, &gdr_probe, &gdr_options(cfg))?.gdr;
        for (si, sweep) in cfg.attack.sweeps.iter().enumerate() {
            for &eps in &sweep.epsilons {
                let ac = sweep.config(eps, cfg.seeds.attack);
                let r = metrics::evaluate(e, &attack_set, &ac, g)?;
                log::info!("{name} {} eps {eps}: success {:.3}", sweep.kind.as_str(), r.ensemble_success);
                let mut row = vec![
                    SWEEP_CSV_SCHEMA.to_string(),
                    name.clone(),
                    g.to_string(),
                    sweep.kind.as_str().to_string(),
                    eps.to_string(),
                    r.ensemble_success.to_string(),
                    r.collaboration_rating.map(|v| v.to_string()).unwrap_or_default(),
                    r.collaboration_rating_note.clone().unwrap_or_default(),
                    r.consensus_accuracy.to_string(),
                    r.filtered_count.to_string(),
                    r.all_fooled_any_class.to_string(),
                ];
                let per: Vec<f64> = e.names().iter().map(|n| r.per_model_success[n]).collect();
                row.extend((0..max_members).map(|m| per.get(m).map(|v| v.to_string()).unwrap_or_default()));
                w.write_record(&row)?;
                series.entry((si, eps.to_bits())).or_default().push((g, r.ensemble_success));
                reports.push(NamedReport {
                    ensemble: name.clone(),
                    report: r,
                });
            }
        }
    }
    let csv = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    create_dir(&cfg.output.dir)?;
    write_atomic(&cfg.output.dir.join("attack_sweep.csv"), &csv)?;
    let fits = series
        .iter()
        .map(|((si, bits), pts)| series_fit(cfg.attack.sweeps[*si].kind, f64::from_bits(*bits), pts))
        .collect();
    let summary = AttackSummary {
        schema_version: REPORT_SCHEMA,
        config_hash: cfg.hash()?,
        seeds: cfg.seeds,
        reports,
        fits,
    };
    write_json(&cfg.output.dir.join("attack_report.json"), &summary)?;
    Ok(summary)
}

type RatingFn = fn(&GradientSet) -> Result<RatingEstimate>;

/// The closed forms used by [`cmd_verify`], replaceable to check that the
/// suite catches a broken implementation.
#[derive(Clone, Copy)]
pub struct VerifyHooks {
    pub r_single: RatingFn,
    pub r_pair: RatingFn,
    pub r_triple: RatingFn,
}

impl Default for VerifyHooks {
    fn default() -> Self {
        VerifyHooks {
            r_single: geometry::r_single,
            r_pair: geometry::r_pair,
            r_triple: geometry::r_triple,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{:<width$}  {}  {:>6.2}s  {}\n",
                    c.name,
                    if c.passed { "PASS" } else { "FAIL" },
                    c.seconds,
                    c.detail
                )
            })
            .collect()
    }
}

fn random_set(rng: &mut ChaCha8Rng, k: usize, n: usize) -> GradientSet {
    let grads = (0..k)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    GradientSet::new(grads).expect("nonzero random set")
}

fn check_closed_form(hook: RatingFn, k: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = 100_000;
    let mut worst: f64 = 0.0;
    let mut misses = 0;
    let cases = 30;
    for c in 0..cases {
        let n = [3, 10][c % 2];
        let g = random_set(&mut rng, k, n);
        let exact = hook(&g)?.value;
        let mc = geometry::r_monte_carlo(&g, samples, seed ^ c as u64)?.value;
        let se = (exact.clamp(0.0, 1.0) * (1.0 - exact.clamp(0.0, 1.0)) / samples as f64).sqrt();
        let z = (exact - mc).abs() / se.max(1e-9);
        worst = worst.max(z);
        if z > 4.0 {
            misses += 1;
        }
    }
    Ok((misses == 0, format!("{cases} sets, worst |exact - MC| = {worst:.2} std errors")))
}

fn check_fd(kind: GradLossKind, members: usize) -> Result<(bool, String)> {
    let models = (0..members)
        .map(|i| MlpModel::init(&[8, 6, 4], 40 + i as u64))
        .collect::<Result<Vec<_>>>()?;
    let e = Ensemble::from_models(models)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Array2::from_shape_fn((5, 8), |_| rng.random_range(0.0..1.0));
    let labels = [0, 1, 2, 3, 1];
    let err = trainer::finite_difference_error(&e, x.view(), &labels, kind, 1.0, trainer::DEFAULT_TAU, 1e-4)?;
    Ok((err < 1e-3, format!("relative L2 error {err:.2e} (limit 1e-3)")))
}

fn check_attacks() -> Result<(bool, String)> {
    let data = data_io::synthetic_blobs(16, 4, 10, 0.2, 5)?;
    let models = (0..3)
        .map(|i| MlpModel::init(&[16, 8, 4], 70 + i))
        .collect::<Result<Vec<_>>>()?;
    let e = Ensemble::from_models(models)?;
    let x = data.features();
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    for kind in [AttackKind::Fgsm, AttackKind::PgdLinf, AttackKind::Mi] {
        for eps in [0.05, 0.3] {
            let c = AttackConfig::for_kind(kind, eps).with_seed(1);
            for r in attack_batch(&e, x.view(), &data.labels(), &c)? {
                worst = worst.max(r.perturbation_norm - eps);
                if r.perturbation_norm > eps + 1e-12 || r.adversary.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    bad += 1;
                }
            }
        }
    }
    Ok((bad == 0, format!("{bad} violations; max excess over epsilon {worst:.1e}")))
}

fn check_metric_identities() -> Result<(bool, String)> {
    let data = data_io::synthetic_blobs(16, 3, 40, 0.3, 2)?;
    let mut tc = TrainConfig::baseline(4).with_hidden(vec![12]).with_seed(3);
    tc.members = 1;
    tc.learning_rate = 0.1;
    let (e, _) = trainer::train_ensemble(&tc, &data)?;
    let m = e.models()[0].clone();
    let t = metrics::filter_correct(&data, &e)?;
    let c = AttackConfig::fgsm(0.3);
    let single = metrics::adversarial_success(&e, &t, &c)?;
    let copies = metrics::adversarial_success(&Ensemble::copies(&m, 3)?, &t, &c)?;
    let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
    let cr = metrics::collaboration_rating_from(0.02, &[0.3, 0.25, 0.28], &names)?;
    let ok = single == copies && (cr - 0.02 / 0.021).abs() < 1e-12;
    Ok((
        ok,
        format!("{} correct; A(copies) = {copies:.3}, A(f) = {single:.3}, CR fixture {cr:.4}", t.len()),
    ))
}

fn check_idx() -> Result<(bool, String)> {
    let data = data_io::synthetic_blobs(16, 3, 5, 0.3, 4)?;
    let (im, lb) = data_io::encode_idx(&data)?;
    let back = data_io::parse_idx(&im, &lb)?;
    let worst = data
        .examples()
        .iter()
        .zip(back.examples())
        .flat_map(|(a, b)| a.pixels.iter().zip(&b.pixels).map(|(p, q)| (p - q).abs()))
        .fold(0.0f64, f64::max);
    let ok = back.labels() == data.labels() && worst <= 1.0 / 510.0 + 1e-15;
    Ok((ok, format!("max pixel error {worst:.2e} (bound {:.2e})", 1.0 / 510.0)))
}

/// Fast oracle suite: closed forms against Monte Carlo, double-backprop
/// gradients against finite differences, attack constraints, metric
/// identities and the IDX round trip. Needs no data files or network.
pub fn cmd_verify(hooks: &VerifyHooks) -> VerifyReport {
    type Check<'a> = (&'static str, Box<dyn Fn() -> Result<(bool, String)> + 'a>);
    let checks: Vec<Check> = vec![
        ("closed_form_single", Box::new(|| check_closed_form(hooks.r_single, 1, 11))),
        ("closed_form_pair", Box::new(|| check_closed_form(hooks.r_pair, 2, 12))),
        ("closed_form_triple", Box::new(|| check_closed_form(hooks.r_triple, 3, 13))),
        ("fd_grad_loss_cosine", Box::new(|| check_fd(GradLossKind::CosineMaxPairwise, 3))),
        ("fd_grad_loss_angle_sum", Box::new(|| check_fd(GradLossKind::AngleSum, 3))),
        ("fd_grad_loss_quad", Box::new(|| check_fd(GradLossKind::QuadTriangleArea, 4))),
        ("attack_constraints", Box::new(check_attacks)),
        ("metric_identities", Box::new(check_metric_identities)),
        ("idx_round_trip", Box::new(check_idx)),
    ];
    let results = checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name: name.into(),
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    VerifyReport { checks: results }
}
