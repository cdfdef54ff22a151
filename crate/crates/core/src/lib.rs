//! Compressed local training for distributed convex optimization.
//!
//! The crate implements LoCoDL, which combines probabilistic local training
//! with unbiased compression of the uplink messages, next to the GD, DIANA
//! and Scaffnew baselines. Around the algorithms sit the objectives
//! (regularized logistic regression, quadratics), the compressors, LibSVM and
//! synthetic data, and an experiment harness that records metric traces.
//!
//! ```
//! use locodl::prelude::*;
//!
//! let spec = ProblemSpec {
//!     source: ProblemSource::Quadratic { dim: 4 },
//!     clients: 3,
//!     kappa: 10.0,
//!     data_seed: 0,
//!     shared: SharedMode::Ridge,
//! };
//! let mut config = ExperimentConfig::new(spec, Algorithm::Locodl, CompressorKind::RandK { k: 2 }, vec![0]);
//! config.stop = Some(StopRule::SqdistRatio(1e-8));
//! config.max_iterations = 100_000;
//! let traces = run_experiment(&config).unwrap();
//! assert!(traces[0].meta.reached_target);
//! ```

pub mod algorithms;
pub mod compressors;
pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod objectives;
pub mod rng;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::algorithms::{
        default_params, lyapunov, rand_k_params, rate_bound, AlgoParams, Locodl, LocodlState, ReferenceSolution,
    };
    pub use crate::compressors::{certify, CompressorKind, CompressorSpec};
    pub use crate::data::{parse_libsvm, partition, Dataset};
    pub use crate::error::{Error, Result};
    pub use crate::harness::{
        run_experiment, solve_reference, Algorithm, ExperimentConfig, ExperimentTrace, ProblemSource, ProblemSpec,
        SharedMode, StopRule,
    };
    pub use crate::objectives::{LocalFunction, Problem, Shard};
    pub use crate::rng::SeedTree;
}
