//! Versioned JSON experiment configuration.

use std::path::{Path, PathBuf};

use layerdyn::data::MixtureSpec;
use layerdyn::init::{InitScheme, InitSpec};
use layerdyn::lnn::FlowConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    LnnTrain,
    ReluTrain,
    BoundSweep,
    ModeCompare,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::LnnTrain => "lnn_train",
            Kind::ReluTrain => "relu_train",
            Kind::BoundSweep => "bound_sweep",
            Kind::ModeCompare => "mode_compare",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian-mixture inputs with a random linear teacher.
    Mixture {
        components: usize,
        samples_per_component: usize,
        dim: usize,
        outputs: usize,
        #[serde(default = "yes")]
        whiten: bool,
    },
    /// IDX image/label pair; `subset` keeps the first samples only.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subset: Option<usize>,
    },
}

fn yes() -> bool {
    true
}

impl DatasetSpec {
    pub fn mixture(&self) -> Option<(MixtureSpec, usize, bool)> {
        match *self {
            DatasetSpec::Mixture {
                components,
                samples_per_component,
                dim,
                outputs,
                whiten,
            } => Some((
                MixtureSpec {
                    components,
                    samples_per_component,
                    dim,
                },
                outputs,
                whiten,
            )),
            DatasetSpec::Idx { .. } => None,
        }
    }
}

/// Depth sweep of the combined-strength bound at equality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    pub depths: Vec<usize>,
    pub kappa1: f64,
    pub kappa2: f64,
    /// `M = (2κ₁ + 1)|Σ_yx|_F`; derived from the dataset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    /// Initial combined strength; derived from the initialised net when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u0: Option<f64>,
    #[serde(default = "default_bound_dt")]
    pub dt: f64,
    #[serde(default = "default_bound_steps")]
    pub steps: usize,
    #[serde(default = "default_bound_stride")]
    pub record_every: usize,
}

fn default_bound_dt() -> f64 {
    1e-4
}

fn default_bound_steps() -> usize {
    20_000
}

fn default_bound_stride() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: Kind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundSpec>,
    /// Per-layer initial strengths for `mode_compare`, overriding `init.sigma0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Plot time on a log10 axis.
    #[serde(default)]
    pub log_time: bool,
}

fn missing(key: &str, kind: Kind) -> HarnessError {
    HarnessError::Config(format!(
        "missing required key `{key}` for kind {}",
        kind.name()
    ))
}

fn field(key: &str, reason: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("`{key}`: {reason}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dims(&self) -> Result<&[usize]> {
        self.dims
            .as_deref()
            .ok_or_else(|| missing("dims", self.kind))
    }

    pub fn dataset(&self) -> Result<&DatasetSpec> {
        self.dataset
            .as_ref()
            .ok_or_else(|| missing("dataset", self.kind))
    }

    pub fn init(&self) -> Result<&InitSpec> {
        self.init.as_ref().ok_or_else(|| missing("init", self.kind))
    }

    pub fn flow(&self) -> Result<FlowConfig> {
        let flow = self.flow.ok_or_else(|| missing("flow", self.kind))?;
        flow.validated().map_err(|e| field("flow", e))
    }

    pub fn bound(&self) -> Result<&BoundSpec> {
        self.bound
            .as_ref()
            .ok_or_else(|| missing("bound", self.kind))
    }

    /// Checks version, per-kind required keys and cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(field(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        match self.kind {
            Kind::LnnTrain | Kind::ModeCompare => {
                let dims = self.check_dims()?;
                let (spec, outputs, _) = self.dataset()?.mixture().ok_or_else(|| {
                    field(
                        "dataset",
                        format!("kind {} needs a mixture dataset", self.kind.name()),
                    )
                })?;
                spec.validate().map_err(|e| field("dataset", e))?;
                if dims[0] != spec.dim || dims[dims.len() - 1] != outputs {
                    return Err(field(
                        "dims",
                        format!(
                            "endpoints ({}, {}) must match dataset dim {} and outputs {}",
                            dims[0],
                            dims[dims.len() - 1],
                            spec.dim,
                            outputs
                        ),
                    ));
                }
                let init = self.init()?;
                init.validate().map_err(|e| field("init", e))?;
                self.flow()?;
                if self.kind == Kind::ModeCompare {
                    if init.scheme != InitScheme::SaxeAligned {
                        return Err(field("init.scheme", "mode_compare requires saxe_aligned"));
                    }
                    if let Some(ls) = &self.layer_sigma {
                        if ls.len() != dims.len() - 1 {
                            return Err(field(
                                "layer_sigma",
                                format!("needs {} entries, got {}", dims.len() - 1, ls.len()),
                            ));
                        }
                    }
                }
            }
            Kind::ReluTrain => {
                self.check_dims()?;
                if !matches!(self.dataset()?, DatasetSpec::Idx { .. }) {
                    return Err(field("dataset", "relu_train needs an idx dataset"));
                }
                let init = self.init()?;
                init.validate().map_err(|e| field("init", e))?;
                if init.scheme == InitScheme::SaxeAligned {
                    return Err(field(
                        "init.scheme",
                        "saxe_aligned is defined for linear nets only",
                    ));
                }
                self.flow()?;
            }
            Kind::BoundSweep => {
                let b = self.bound()?;
                if b.depths.is_empty() || b.depths.contains(&0) {
                    return Err(field("bound.depths", "need at least one positive depth"));
                }
                if !(b.dt > 0.0 && b.steps > 0 && b.record_every > 0) {
                    return Err(field(
                        "bound",
                        "dt, steps and record_every must be positive",
                    ));
                }
                if b.m.is_none() || b.u0.is_none() {
                    // M and u0 are derived from a dataset and an initialised net.
                    let dims = self.check_dims().map_err(|_| {
                        field(
                            "bound",
                            "without both `m` and `u0`, `dims`, `dataset` and `init` are required",
                        )
                    })?;
                    let (_, outputs, _) = self.dataset()?.mixture().ok_or_else(|| {
                        field("dataset", "bound derivation needs a mixture dataset")
                    })?;
                    if dims[dims.len() - 1] != outputs {
                        return Err(field("dims", "last width must match dataset outputs"));
                    }
                    self.init()?.validate().map_err(|e| field("init", e))?;
                }
            }
        }
        Ok(())
    }

    fn check_dims(&self) -> Result<&[usize]> {
        let dims = self.dims()?;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(field("dims", "need at least two positive widths"));
        }
        Ok(dims)
    }
}
