//! Declarative experiments: spec validation, parallel execution and artifacts.
//!
//! A run fans the work units `(depth, trial)` out over a rayon pool and
//! gathers rows in unit order, so output is independent of the thread count.

mod output;
mod predict;
mod scans;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::sub_seed;
use crate::verify;

pub use output::{
    csv_string, emit_csv, emit_json, format_value, parse_csv, parse_csv_str, sidecar_path, summarize_rows, write_sidecar,
    ObservableSummary, Row, Sidecar, CI_METHOD, CSV_HEADER,
};
pub use predict::predict;
pub use scans::{ChainScanParams, ChainTrainParams, ConvScanParams, MlpHessianParams, MlpScanParams, VerifyParams};

/// Environment variable read for the worker count.
pub const THREADS_ENV: &str = "VANISHLAB_THREADS";

/// Default master seed.
pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Predict,
    ChainScan,
    ChainTrain,
    MlpScan,
    MlpHessian,
    ConvScan,
    Verify,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Predict => "predict",
            Kind::ChainScan => "chain_scan",
            Kind::ChainTrain => "chain_train",
            Kind::MlpScan => "mlp_scan",
            Kind::MlpHessian => "mlp_hessian",
            Kind::ConvScan => "conv_scan",
            Kind::Verify => "verify",
        }
    }
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_trials() -> usize {
    1
}

/// One experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: Kind,
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

type KeyCheck = fn(&Value) -> bool;

fn is<T: DeserializeOwned>(v: &Value) -> bool {
    serde_json::from_value::<T>(v.clone()).is_ok()
}

/// `(key, required, type check)` for the params of `kind`.
fn key_table(kind: Kind) -> Vec<(&'static str, bool, KeyCheck)> {
    use crate::chain::OptimizerSpec;
    use crate::conv::{Padding, Spatial};
    use crate::init::{ActivationKind, InitScheme};
    use crate::mlp::{DataModel, WidthRule};
    let depths: KeyCheck = is::<Vec<usize>>;
    let data: KeyCheck = is::<Vec<(f64, f64)>>;
    let f: KeyCheck = is::<f64>;
    let u: KeyCheck = is::<usize>;
    let b: KeyCheck = is::<bool>;
    let init: KeyCheck = is::<InitScheme>;
    let act: KeyCheck = is::<ActivationKind>;
    let wr: KeyCheck = is::<WidthRule>;
    let dm: KeyCheck = is::<DataModel>;
    match kind {
        Kind::Predict => vec![
            ("depth", true, u),
            ("tau", false, f),
            ("d", false, u),
            ("init", false, init),
            ("activation", false, act),
            ("alpha", false, f),
            ("w0", false, f),
            ("y", false, f),
            ("t", false, f),
            ("prefactor", false, f),
        ],
        Kind::ChainScan => vec![("depths", true, depths), ("tau", true, f), ("data", false, data)],
        Kind::ChainTrain => vec![
            ("depths", true, depths),
            ("optimizers", true, is::<Vec<OptimizerSpec>>),
            ("init_range", false, f),
            ("w0", false, f),
            ("data", false, data),
            ("max_steps", false, u),
            ("threshold", false, f),
        ],
        Kind::MlpScan => vec![
            ("depths", true, depths),
            ("width_rule", true, wr),
            ("init", true, init),
            ("activation", true, act),
            ("data", false, dm),
            ("hessian", false, b),
            ("hessian_samples", false, u),
            ("fd_step", false, f),
        ],
        Kind::MlpHessian => vec![
            ("depths", true, depths),
            ("width_rule", true, wr),
            ("init", true, init),
            ("activation", true, act),
            ("data", false, dm),
        ],
        Kind::ConvScan => vec![
            ("depths", true, depths),
            ("spatial", true, is::<Spatial>),
            ("padding", true, is::<Padding>),
            ("channels", false, wr),
            ("in_channels", false, u),
            ("kernel", false, u),
            ("activation", false, act),
            ("init", false, init),
            ("images", false, u),
            ("hessian_samples", false, u),
            ("fd_step", false, f),
            ("input", false, is::<PathBuf>),
        ],
        Kind::Verify => vec![("checks", false, is::<Vec<String>>)],
    }
}

fn typed<T: DeserializeOwned>(params: &Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(params.clone())).map_err(|e| Error::Config(e.to_string()))
}

impl ExperimentSpec {
    pub fn new(kind: Kind, params: Value) -> Result<Self> {
        let params = match params {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            _ => return Err(Error::Config("params must be a JSON object".into())),
        };
        Ok(ExperimentSpec { kind, params, master_seed: DEFAULT_SEED, trials: 1, output: None })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("spec serialises")
    }

    /// SHA-256 of the canonical JSON form (keys sorted).
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.to_json()).expect("spec serialises");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Check every key before any work; all problems are reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.trials < 1 {
            problems.push("trials: must be at least 1".to_string());
        }
        let table = key_table(self.kind);
        for (key, required, check) in &table {
            match self.params.get(*key) {
                None if *required => problems.push(format!("{key}: missing")),
                Some(v) if !check(v) => problems.push(format!("{key}: invalid value {v}")),
                _ => {}
            }
        }
        for key in self.params.keys() {
            if !table.iter().any(|(k, _, _)| k == key) {
                problems.push(format!("{key}: unknown key for kind {}", self.kind.name()));
            }
        }
        if problems.is_empty() {
            if let Err(e) = self.check_values() {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn check_values(&self) -> Result<()> {
        match self.kind {
            Kind::Predict => Ok(()),
            Kind::ChainScan => typed::<ChainScanParams>(&self.params)?.check(),
            Kind::ChainTrain => typed::<ChainTrainParams>(&self.params)?.check(),
            Kind::MlpScan => typed::<MlpScanParams>(&self.params)?.check(),
            Kind::MlpHessian => typed::<MlpHessianParams>(&self.params)?.check(),
            Kind::ConvScan => typed::<ConvScanParams>(&self.params)?.check(),
            Kind::Verify => typed::<VerifyParams>(&self.params)?.check(),
        }
    }
}

/// Worker count: explicit value, else the environment variable, else all cores.
pub fn resolve_threads(explicit: Option<usize>) -> Result<usize> {
    if let Some(n) = explicit {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(s) => s.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got {s:?}"))),
        Err(_) => Ok(0),
    }
}

/// Run `f` inside a pool of `threads` workers (0 = one per logical core).
pub fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Identity columns shared by the rows of one work unit.
#[derive(Debug, Clone)]
pub(crate) struct Unit {
    pub kind: Kind,
    pub depth: usize,
    pub width: usize,
    pub init: String,
    pub activation: String,
    pub trial: usize,
    pub sub_seed: u64,
}

impl Unit {
    pub fn row(&self, observable: impl Into<String>, value: f64) -> Row {
        Row {
            kind: self.kind.name().to_string(),
            observable: observable.into(),
            depth: self.depth,
            width: self.width,
            init: self.init.clone(),
            activation: self.activation.clone(),
            trial: self.trial,
            sub_seed: self.sub_seed,
            value,
        }
    }
}

/// Evaluate `work` for every `(depth, trial)` pair in parallel and collect the
/// rows in unit order. Unit `i * trials + t` draws from sub-seed
/// `hash(master_seed, i * trials + t)`. A failing unit yields one error row.
pub(crate) fn fan_out<F>(spec: &ExperimentSpec, depths: &[usize], label: impl Fn(usize) -> Result<(usize, String, String)> + Sync, work: F) -> Vec<Row>
where
    F: Fn(&Unit) -> Result<Vec<Row>> + Sync,
{
    let trials = spec.trials;
    let units: Vec<(usize, usize)> = (0..depths.len()).flat_map(|i| (0..trials).map(move |t| (i, t))).collect();
    let chunks: Vec<Vec<Row>> = units
        .par_iter()
        .map(|&(i, t)| {
            let index = (i * trials + t) as u64;
            let depth = depths[i];
            let mut unit = Unit { kind: spec.kind, depth, width: 0, init: String::new(), activation: String::new(), trial: t, sub_seed: sub_seed(spec.master_seed, index) };
            let result = label(depth).and_then(|(w, init, act)| {
                unit.width = w;
                unit.init = init;
                unit.activation = act;
                work(&unit)
            });
            match result {
                Ok(rows) => rows,
                Err(e) => vec![unit.row(format!("error:{}", e.code()), f64::NAN)],
            }
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

/// Result of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<Row>,
    /// Verify outcomes, for the `verify` kind only.
    pub checks: Vec<verify::CheckResult>,
    /// JSON document, for the `predict` kind only.
    pub prediction: Option<Value>,
}

impl RunOutput {
    /// True unless a verify check failed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Validate and execute a spec without writing anything.
pub fn run(spec: &ExperimentSpec, threads: Option<usize>) -> Result<RunOutput> {
    spec.validate()?;
    let threads = resolve_threads(threads)?;
    with_pool(threads, || run_in_pool(spec))?
}

fn run_in_pool(spec: &ExperimentSpec) -> Result<RunOutput> {
    let mut out = RunOutput { rows: Vec::new(), checks: Vec::new(), prediction: None };
    match spec.kind {
        Kind::Predict => out.prediction = Some(predict(&spec.params)?),
        Kind::ChainScan => out.rows = scans::chain_scan(spec, &typed(&spec.params)?),
        Kind::ChainTrain => out.rows = scans::chain_train(spec, &typed(&spec.params)?),
        Kind::MlpScan => out.rows = scans::mlp_scan(spec, &typed(&spec.params)?),
        Kind::MlpHessian => out.rows = scans::mlp_hessian(spec, &typed(&spec.params)?),
        Kind::ConvScan => out.rows = scans::conv_scan(spec, &typed(&spec.params)?),
        Kind::Verify => {
            let p: VerifyParams = typed(&spec.params)?;
            out.checks = verify::run_checks(spec.master_seed, p.checks.as_deref())?;
            out.rows = verify::check_rows(&out.checks, spec.master_seed);
        }
    }
    Ok(out)
}

/// Run a spec and write its artifacts to `spec.output` if set: the CSV plus
/// the sidecar for row-producing kinds, the JSON document for `predict`.
pub fn execute(spec: &ExperimentSpec, threads: Option<usize>) -> Result<RunOutput> {
    let out = run(spec, threads)?;
    if let Some(path) = &spec.output {
        if let Some(p) = &out.prediction {
            let text = serde_json::to_string_pretty(p).map_err(|e| Error::Io(e.to_string()))?;
            std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        } else {
            emit_csv(&out.rows, path)?;
            write_sidecar(path, spec.to_json(), spec.hash(), &out.rows)?;
        }
    }
    Ok(out)
}
