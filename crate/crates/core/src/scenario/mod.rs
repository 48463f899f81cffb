//! Scenario files: a TOML description of the network, the channels and the
//! experiments to run over a list of seeds.

mod locate;
mod run;
mod validate;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiments::{
    ChannelPlan, ChurnParams, ConvergenceParams, ExperimentKind, JoinMode, RecoveryParams, Setup, StartupParams, TreeParams,
};
use crate::geometry::PlaneConfig;
use crate::protocol::ProtocolConfig;
use crate::sim::SimConfig;
use crate::substrate::SubstrateConfig;

pub use run::{run_scenario, OutputFile, RunOutput};
pub use validate::validate_text;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(Report),
    #[error("scenario {scenario:?}: experiment {experiment} seed {seed} hit the event cap")]
    EventCap { scenario: String, experiment: String, seed: u64 },
    #[error("scenario {scenario:?}: experiment {experiment} seed {seed} failed: {message}")]
    Experiment { scenario: String, experiment: String, seed: u64, message: String },
}

/// One problem in a scenario file, anchored to the line that caused it when
/// the key is present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub line: Option<usize>,
    /// Dotted key path, e.g. `substrate.clique_max` or `channels[1].source`.
    pub key: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Report {
    pub file: String,
    pub diagnostics: Vec<Diagnostic>,
}

impl Report {
    pub fn is_clean(&self) -> bool {
        self.diagnostics.is_empty()
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.key.is_empty()) {
            (Some(l), false) => write!(f, "line {l}: {}: {}", self.key, self.message),
            (Some(l), true) => write!(f, "line {l}: {}", self.message),
            (None, false) => write!(f, "{}: {}", self.key, self.message),
            (None, true) => f.write_str(&self.message),
        }
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}:", self.file)?;
            match d.line {
                Some(l) => write!(f, "{l}: ")?,
                None => f.write_str(" ")?,
            }
            if d.key.is_empty() {
                write!(f, "{}", d.message)?;
            } else {
                write!(f, "{}: {}", d.key, d.message)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub name: String,
    /// `random` or `node:<id>`.
    pub source: String,
    /// `random:<count>` or `nodes:<id>,<id>,...`.
    pub members: String,
    #[serde(default)]
    pub join: JoinMode,
}

fn default_horizon() -> f64 {
    7200.0
}

/// A parsed scenario. Only [`validate_text`] guarantees it is usable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seeds: Vec<u64>,
    pub experiments: Vec<ExperimentKind>,
    /// Length of the churn run, in seconds of virtual time.
    #[serde(default = "default_horizon")]
    pub horizon_s: f64,
    #[serde(default)]
    pub plane: PlaneConfig,
    #[serde(default)]
    pub substrate: SubstrateConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub sim: SimConfig,
    /// Channels for the recovery and churn runs. Empty means random ones
    /// sized by those experiments' own settings.
    #[serde(default)]
    pub channels: Vec<ChannelEntry>,
    #[serde(default)]
    pub churn: ChurnParams,
    #[serde(default)]
    pub fig2: ConvergenceParams,
    #[serde(default)]
    pub trees: TreeParams,
    #[serde(default)]
    pub startup: StartupParams,
    #[serde(default)]
    pub recovery: RecoveryParams,
}

impl Scenario {
    pub fn setup(&self) -> Setup {
        Setup { plane: self.plane.clone(), substrate: self.substrate.clone(), protocol: self.protocol.clone(), sim: self.sim.clone() }
    }

    /// Channel plans; selectors that do not parse are reported by validation.
    pub fn plans(&self) -> Result<Vec<ChannelPlan>, String> {
        self.channels
            .iter()
            .map(|c| Ok(ChannelPlan { name: c.name.clone(), source: c.source.parse()?, members: c.members.parse()?, join: c.join }))
            .collect()
    }

    pub fn churn_params(&self) -> ChurnParams {
        ChurnParams { duration_s: self.horizon_s, ..self.churn.clone() }
    }

    /// Replaces the seed list, e.g. from the command line.
    pub fn override_seeds(&mut self, seeds: Vec<u64>) {
        self.seeds = seeds;
    }
}

/// Reads, parses and validates a scenario file.
pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    let (sc, report) = validate_text(&text, &path.display().to_string());
    match sc {
        Some(sc) if report.is_clean() => Ok(sc),
        _ => Err(ScenarioError::Invalid(report)),
    }
}

/// The checked-in reference scenario.
pub const REFERENCE: &str = include_str!("../../../../configs/reference.toml");
