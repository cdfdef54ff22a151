//! Experiment files: a `[problem]` table, a `[run]` table and one
//! `[[algorithm]]` block per algorithm/compressor combination.

use std::path::{Path, PathBuf};

use locodl::compressors::CompressorKind;
use locodl::harness::{Algorithm, ExperimentConfig, ParamOverrides, ProblemSource, ProblemSpec, StopRule};
use locodl::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub stop: Option<StopRule>,
    pub max_iterations: u64,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    #[serde(default = "default_true")]
    pub record_rounds: bool,
    #[serde(default = "default_reference_tol")]
    pub reference_tol: f64,
    pub participation: Option<f64>,
}

fn default_record_every() -> u64 {
    100
}

fn default_true() -> bool {
    true
}

fn default_reference_tol() -> f64 {
    locodl::harness::DEFAULT_REFERENCE_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmBlock {
    pub name: Algorithm,
    #[serde(default = "identity")]
    pub compressor: CompressorKind,
    #[serde(default, skip_serializing_if = "is_default")]
    pub params: ParamOverrides,
}

fn identity() -> CompressorKind {
    CompressorKind::Identity
}

fn is_default(p: &ParamOverrides) -> bool {
    *p == ParamOverrides::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub problem: ProblemSpec,
    pub run: RunSection,
    pub algorithm: Vec<AlgorithmBlock>,
}

impl ExperimentFile {
    /// Reads and validates a file. Relative dataset paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), Error> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Input(format!("{} is not UTF-8", path.display())))?;
        let mut file = Self::parse(text)?;
        if let ProblemSource::Libsvm { path: data, .. } = &mut file.problem.source {
            if data.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                *data = base.join(&*data);
            }
        }
        Ok((file, bytes))
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let file: Self = toml::from_str(text).map_err(|e| Error::Input(format!("invalid experiment file: {e}")))?;
        if file.algorithm.is_empty() {
            return Err(Error::Input("an experiment needs at least one [[algorithm]] block".into()));
        }
        let mut seen = Vec::new();
        for block in &file.algorithm {
            let key = (block.name, block.compressor);
            if seen.contains(&key) {
                return Err(Error::Input(format!(
                    "duplicate block for {} with {}: output files would collide",
                    block.name.name(),
                    block.compressor.name()
                )));
            }
            seen.push(key);
        }
        Ok(file)
    }

    pub fn dataset_path(&self) -> Option<&PathBuf> {
        match &self.problem.source {
            ProblemSource::Libsvm { path, .. } => Some(path),
            _ => None,
        }
    }

    /// One harness config per block.
    pub fn experiments(&self) -> Vec<ExperimentConfig> {
        self.algorithm
            .iter()
            .map(|block| ExperimentConfig {
                problem: self.problem.clone(),
                algorithm: block.name,
                compressor: block.compressor,
                params: block.params,
                seeds: self.run.seeds.clone(),
                stop: self.run.stop,
                max_iterations: self.run.max_iterations,
                record_every: self.run.record_every,
                record_rounds: self.run.record_rounds,
                reference_tol: self.run.reference_tol,
                participation: self.run.participation,
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment files serialize")
    }
}
