//! Run configuration: one JSON document, with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::CovarianceSpec;
use crate::denoiser::{Architecture, TrainHyper};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::objective::ObjectiveConfig;
use crate::optimizer::SolverConfig;
use crate::pipeline::{divisor_levels, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub covariance: CovarianceSpec,
    pub l: usize,
    pub n: usize,
    /// Cube height; the width is `n / rows`.
    pub rows: usize,
    /// Input cube; defaults to `cube.hscube` in the output directory.
    pub cube: Option<PathBuf>,
    /// Ground-truth covariance CSV; defaults to `sigma_true.csv` in the output directory.
    pub truth: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { covariance: CovarianceSpec::Toeplitz { rho: 0.9 }, l: 32, n: 4096, rows: 64, cube: None, truth: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensingSection {
    pub m: usize,
    pub p: usize,
    /// `None` uses `0.01 · sqrt(trace(Σ)/l)`.
    pub sigma_n: Option<f64>,
    /// Projection container to use instead of drawing fresh projections.
    pub projections: Option<PathBuf>,
}

impl Default for SensingSection {
    fn default() -> Self {
        Self { m: 9, p: 256, sigma_n: None, projections: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSourceKind {
    /// Re-partition the configured cube against its ground truth.
    #[default]
    Observed,
    /// Fresh Toeplitz covariances with `rho` drawn from `[rho_min, rho_max]`.
    ToeplitzFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub enabled: bool,
    /// Partition count of each step; empty uses the powers of two up to `p_max` dividing `n`.
    pub levels: Vec<usize>,
    pub p_max: usize,
    pub pool_source: PoolSourceKind,
    pub rho_min: f64,
    pub rho_max: f64,
    /// Problem instances drawn for calibration and for training.
    pub calibration_instances: usize,
    pub training_instances: usize,
    pub iterates_per_instance: usize,
    pub perturb: f64,
    /// Schedule JSON; defaults to `schedule.json` in the output directory.
    pub schedule: Option<PathBuf>,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            enabled: true,
            levels: Vec::new(),
            p_max: 1024,
            pool_source: PoolSourceKind::Observed,
            rho_min: 0.8,
            rho_max: 0.95,
            calibration_instances: 200,
            training_instances: 1500,
            iterates_per_instance: 8,
            perturb: 0.05,
            schedule: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub arch: Architecture,
    pub train: TrainHyper,
    /// Weights file; defaults to `weights.cgdm` in the output directory.
    pub weights: Option<PathBuf>,
    /// Continue from `checkpoint.cgdm` in the output directory if it exists.
    pub resume: bool,
    /// Stop after this many optimizer steps instead of `train.steps`; resume later to finish.
    pub stop_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub sensing: SensingSection,
    pub objective: ObjectiveConfig,
    pub diffusion: DiffusionSection,
    pub denoiser: DenoiserSection,
    pub solver: SolverConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataSection::default(),
            sensing: SensingSection::default(),
            objective: ObjectiveConfig::default(),
            diffusion: DiffusionSection::default(),
            denoiser: DenoiserSection::default(),
            solver: SolverConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses a `--set` value: JSON if it parses as JSON, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `doc[a][b]...` for the dotted `key`, creating objects along the way.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parse_value(raw));
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key part")
}

impl RunConfig {
    /// Default config, overlaid with the JSON file (if any), then with `KEY=VALUE` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
            let file: Value = serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut doc, file);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
            apply_override(&mut doc, k.trim(), v.trim())?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let (l, n, p, m) = (self.data.l, self.data.n, self.sensing.p, self.sensing.m);
        if l == 0 || n == 0 {
            return Err(Error::invalid("l and n must be positive"));
        }
        if m == 0 || m >= l {
            return Err(Error::invalid(format!("need 1 <= m < l, got m={m}, l={l}")));
        }
        if p == 0 || n % p != 0 {
            return Err(Error::invalid(format!("p = {p} must divide n = {n}")));
        }
        if self.data.rows == 0 || n % self.data.rows != 0 {
            return Err(Error::invalid(format!("cube rows {} must divide n = {n}", self.data.rows)));
        }
        if self.diffusion.enabled && l % 4 != 0 {
            return Err(Error::invalid(format!("the denoiser needs l divisible by 4, got {l}")));
        }
        if let Some(s) = self.sensing.sigma_n {
            if !(s >= 0.0) {
                return Err(Error::invalid(format!("sigma_n must be >= 0, got {s}")));
            }
        }
        let levels = self.levels();
        if levels.is_empty() {
            return Err(Error::invalid(format!("no diffusion levels divide n = {n}")));
        }
        if let Some(q) = levels.iter().find(|&&q| q == 0 || n % q != 0) {
            return Err(Error::invalid(format!("diffusion level {q} does not divide n = {n}")));
        }
        self.data.covariance.validate(l)?;
        self.objective.validate()?;
        self.solver.validate()?;
        self.denoiser.arch.validate()?;
        self.denoiser.train.validate()?;
        self.eval.validate()?;
        self.scenario().validate()
    }

    pub fn levels(&self) -> Vec<usize> {
        if self.diffusion.levels.is_empty() {
            divisor_levels(self.data.n, self.diffusion.p_max)
        } else {
            self.diffusion.levels.clone()
        }
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            covariance: self.data.covariance.clone(),
            l: self.data.l,
            m: self.sensing.m,
            p: self.sensing.p,
            n: self.data.n,
            sigma_n: self.sensing.sigma_n,
        }
    }

    fn artifact(&self, configured: &Option<PathBuf>, name: &str) -> PathBuf {
        configured.clone().unwrap_or_else(|| self.output_dir.join(name))
    }

    pub fn cube_path(&self) -> PathBuf {
        self.artifact(&self.data.cube, "cube.hscube")
    }

    pub fn truth_path(&self) -> PathBuf {
        self.artifact(&self.data.truth, "sigma_true.csv")
    }

    pub fn schedule_path(&self) -> PathBuf {
        self.artifact(&self.diffusion.schedule, "schedule.json")
    }

    pub fn weights_path(&self) -> PathBuf {
        self.artifact(&self.denoiser.weights, "weights.cgdm")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
