//! Gradient diversity rating for neural network ensembles.
//!
//! For an input `x`, the rating `R(E, x)` is the fraction of perturbation
//! directions that lower the true-class confidence of every member at once:
//! the solid angle of the cone `{v : v . grad f_i(x) < 0 for all i}` over the
//! full sphere. Its test-set mean is the ensemble's GDR. Independent members
//! sit near `1 / 2^k`; copies of one model sit at `1 / 2`.
//!
//! The crate covers the whole loop: a small reverse-mode autodiff engine with
//! double backprop ([`autodiff`]), tanh MLPs and ensembles ([`network`]),
//! closed-form and Monte Carlo ratings ([`geometry`]), training with gradient
//! diversity penalties ([`trainer`]), L-infinity attacks ([`attacks`]),
//! robustness metrics ([`metrics`]), IDX and synthetic data ([`data_io`]), and
//! config-driven experiments ([`experiment`]).

pub mod attacks;
pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod metrics;
pub mod network;
pub mod trainer;

pub use attacks::{AttackConfig, AttackKind, AttackResult};
pub use data_io::{Dataset, LabeledExample, SyntheticSpec};
pub use error::{Error, Result};
pub use geometry::{gdr, rating, GdrOptions, GdrReport, GradientSet, RatingEstimate, RatingPolicy};
pub use metrics::EvalReport;
pub use network::{Ensemble, MlpModel};
pub use trainer::{train_ensemble, GradLossKind, Phase, TrainConfig, TrainLog};
