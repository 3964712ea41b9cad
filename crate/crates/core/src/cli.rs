//! Config-driven experiment runner behind the `zpg` binary.
//!
//! All rates are in units of `gamma_ref` and all times in units of
//! `1/gamma_ref`; the simulation runs directly on those numbers.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::decomposition::{
    auto_photon_number_distribution, g2, hom_report, mean_photon_number, parity, photon_number_distribution,
    threshold_statistics, tvd, PhotonNumberDistribution,
};
use crate::dynamics::{square_pulse, PropagationSettings};
use crate::error::ZpgError;
use crate::liouville::{CMatrix, Coefficient, C64};
use crate::oracle::{haar_unitary, ideal_interference_distribution, recursive_pn, QuadratureSettings};
use crate::zpg::{EmitterNetwork, SourceSpec};

/// Failure of a run, with the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} failed: {source}")]
    Numerical { stage: String, source: ZpgError },
    #[error("{stage} refused: {source}")]
    Guard { stage: String, source: ZpgError },
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical { .. } => 3,
            CliError::Guard { .. } => 4,
            CliError::Io(_) => 1,
        }
    }

    fn stage(stage: &str) -> impl FnOnce(ZpgError) -> CliError + '_ {
        move |e| match e {
            ZpgError::GuardRefused { .. } => CliError::Guard { stage: stage.to_string(), source: e },
            _ => CliError::Numerical { stage: stage.to_string(), source: e },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PnDist,
    Threshold,
    Fom,
    Hom,
    TvdBenchmark,
    BenchScaling,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::PnDist => "pn_dist",
            Task::Threshold => "threshold",
            Task::Fom => "fom",
            Task::Hom => "hom",
            Task::TvdBenchmark => "tvd_benchmark",
            Task::BenchScaling => "bench_scaling",
        }
    }
}

/// A matrix entry: a real number or `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Entry {
    Real(f64),
    Complex([f64; 2]),
}

impl Entry {
    fn value(self) -> C64 {
        match self {
            Entry::Real(x) => C64::new(x, 0.0),
            Entry::Complex([re, im]) => C64::new(re, im),
        }
    }
}

/// Row-major matrix.
pub type MatrixConfig = Vec<Vec<Entry>>;

fn to_matrix(rows: &MatrixConfig, field: &str) -> CliResult<CMatrix> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(CliError::Config(format!("{field}: matrix rows must be non-empty and equal length")));
    }
    let m = rows[0].len();
    Ok(CMatrix::from_fn(n, m, |r, c| rows[r][c].value()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialLevel {
    #[default]
    Ground,
    Excited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseConfig {
    /// Pulse area in units of π.
    pub theta_over_pi: f64,
    pub tau: f64,
    #[serde(default)]
    pub t_start: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub op: MatrixConfig,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    TwoLevel {
        gamma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pulse: Option<PulseConfig>,
        #[serde(default)]
        detuning: f64,
        #[serde(default)]
        dephasing: f64,
        #[serde(default)]
        initial: InitialLevel,
    },
    Custom {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hamiltonian: Option<MatrixConfig>,
        collection: MatrixConfig,
        rate: f64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        dissipation: Vec<ChannelConfig>,
        initial_state: MatrixConfig,
    },
}

impl SourceConfig {
    pub fn build(&self, field: &str) -> CliResult<SourceSpec> {
        let invalid = |e: ZpgError| CliError::Config(format!("{field}: {e}"));
        match self {
            SourceConfig::TwoLevel { gamma, pulse, detuning, dephasing, initial } => {
                let mut b = SourceSpec::two_level(*gamma).with_detuning(*detuning).with_dephasing(*dephasing);
                if let Some(p) = pulse {
                    let shape = square_pulse(p.theta_over_pi * PI, p.tau, p.t_start)
                        .map_err(|e| CliError::Config(format!("{field}.pulse: {e}")))?;
                    b = b.with_pulse(&shape);
                }
                if *initial == InitialLevel::Excited {
                    b = b.with_initial_state(crate::liouville::two_level::excited());
                }
                b.build().map_err(invalid)
            }
            SourceConfig::Custom { hamiltonian, collection, rate, dissipation, initial_state } => {
                let terms = match hamiltonian {
                    Some(h) => vec![(to_matrix(h, &format!("{field}.hamiltonian"))?, Coefficient::constant(1.0))],
                    None => Vec::new(),
                };
                let channels = dissipation
                    .iter()
                    .enumerate()
                    .map(|(k, c)| Ok((to_matrix(&c.op, &format!("{field}.dissipation[{k}].op"))?, c.rate)))
                    .collect::<CliResult<Vec<_>>>()?;
                SourceSpec::new(
                    terms,
                    channels,
                    to_matrix(collection, &format!("{field}.collection"))?,
                    *rate,
                    to_matrix(initial_state, &format!("{field}.initial_state"))?,
                )
                .map_err(invalid)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CircuitConfig {
    #[default]
    Identity,
    Haar {
        seed: u64,
    },
    Explicit {
        matrix: MatrixConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Fourier grid size per detector; defaults to 8.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncations: Option<Vec<usize>>,
    /// Use click detectors (threshold corners) instead of number resolution.
    #[serde(default)]
    pub threshold: bool,
    /// Double truncations until the tail mass drops below this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub t0: f64,
    /// Defaults to the end of the last pulse plus 15 lifetimes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1: Option<f64>,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "yes")]
    pub conjugate_shortcut: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { t0: 0.0, t1: None, rtol: default_rtol(), atol: default_atol(), workers: None, conjugate_shortcut: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FomConfig {
    /// Real detector efficiency at which μ is reported.
    #[serde(default = "one")]
    pub eta: f64,
    #[serde(default = "default_mu_step")]
    pub mu_step: f64,
    #[serde(default = "default_g2_step")]
    pub g2_step: f64,
    /// Also report moments of the inverted distribution at this truncation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution_truncation: Option<usize>,
}

impl Default for FomConfig {
    fn default() -> Self {
        Self { eta: 1.0, mu_step: default_mu_step(), g2_step: default_g2_step(), distribution_truncation: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomConfig {
    /// Detuning of the distinguishable reference twin.
    #[serde(default = "default_reference_detuning")]
    pub reference_detuning: f64,
}

impl Default for HomConfig {
    fn default() -> Self {
        Self { reference_detuning: default_reference_detuning() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvdConfig {
    #[serde(default = "default_tvd_modes")]
    pub modes: usize,
    #[serde(default = "default_tvd_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_tvd_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "one")]
    pub theta_over_pi: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    /// Fourier grid size per detector; defaults to `modes + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<usize>,
}

impl Default for TvdConfig {
    fn default() -> Self {
        Self {
            modes: default_tvd_modes(),
            seeds: default_tvd_seeds(),
            taus: default_tvd_taus(),
            theta_over_pi: 1.0,
            gamma: 1.0,
            truncation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_bench_order")]
    pub n_max: usize,
    /// Significant digits required on the top-order probabilities.
    #[serde(default = "default_bench_digits")]
    pub digits: u32,
    /// Oracle mesh densities tried in order until the accuracy is met.
    #[serde(default = "default_points_ladder")]
    pub points_ladder: Vec<usize>,
    /// Fourier grid size of the reference solve.
    #[serde(default = "default_reference_truncation")]
    pub reference_truncation: usize,
    /// Timing repetitions; the fastest is kept.
    #[serde(default = "default_bench_repeats")]
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_max: default_bench_order(),
            digits: default_bench_digits(),
            points_ladder: default_points_ladder(),
            reference_truncation: default_reference_truncation(),
            repeats: default_bench_repeats(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: None, formats: default_formats() }
    }
}

/// One experiment, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Reference rate; every rate below is a multiple of it.
    #[serde(default = "one")]
    pub gamma_ref: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceConfig>,
    #[serde(default)]
    pub circuit: CircuitConfig,
    #[serde(default)]
    pub detectors: DetectorConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub fom: FomConfig,
    #[serde(default)]
    pub hom: HomConfig,
    #[serde(default)]
    pub tvd: TvdConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_rtol() -> f64 {
    1e-10
}
fn default_atol() -> f64 {
    1e-12
}
fn default_mu_step() -> f64 {
    1e-3
}
fn default_g2_step() -> f64 {
    1e-2
}
fn default_reference_detuning() -> f64 {
    50.0
}
fn default_tvd_modes() -> usize {
    3
}
fn default_tvd_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_tvd_taus() -> Vec<f64> {
    vec![0.5, 0.1, 0.02]
}
fn default_bench_order() -> usize {
    3
}
fn default_bench_digits() -> u32 {
    2
}
fn default_points_ladder() -> Vec<usize> {
    vec![2, 4, 6, 8, 12, 16, 24, 32, 48, 64]
}
fn default_reference_truncation() -> usize {
    24
}
fn default_bench_repeats() -> usize {
    3
}
fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl ExperimentConfig {
    /// Parses TOML; errors carry the line, column and offending key.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Replaces every seed with `seed`, `seed + 1`, ...
    pub fn apply_seed(&mut self, seed: u64) {
        if let CircuitConfig::Haar { seed: s } = &mut self.circuit {
            *s = seed;
        }
        let n = self.tvd.seeds.len() as u64;
        self.tvd.seeds = (seed..seed + n).collect();
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.gamma_ref > 0.0 && self.gamma_ref.is_finite()) {
            return Err(CliError::Config(format!("gamma_ref: must be positive, got {}", self.gamma_ref)));
        }
        let r = &self.run;
        if !(r.rtol > 0.0) || !(r.atol > 0.0) {
            return Err(CliError::Config("run.rtol, run.atol: must be positive".into()));
        }
        if let Some(t1) = r.t1 {
            if !(t1 > r.t0) {
                return Err(CliError::Config(format!("run.t1: must exceed run.t0 = {}", r.t0)));
            }
        }
        if r.workers == Some(0) {
            return Err(CliError::Config("run.workers: must be at least 1".into()));
        }
        if let Some(t) = &self.detectors.truncations {
            if t.is_empty() || t.contains(&0) {
                return Err(CliError::Config("detectors.truncations: entries must be at least 1".into()));
            }
        }
        if !(self.fom.mu_step > 0.0) || !(self.fom.g2_step > 0.0) {
            return Err(CliError::Config("fom.mu_step, fom.g2_step: must be positive".into()));
        }
        if self.tvd.modes == 0 || self.tvd.modes > 6 {
            return Err(CliError::Config(format!("tvd.modes: must be in 1..=6, got {}", self.tvd.modes)));
        }
        if self.bench.points_ladder.is_empty() || self.bench.points_ladder.contains(&0) {
            return Err(CliError::Config("bench.points_ladder: needs positive entries".into()));
        }
        Ok(())
    }

    pub fn build_network(&self) -> CliResult<EmitterNetwork> {
        if self.sources.is_empty() {
            return Err(CliError::Config("sources: at least one source is required".into()));
        }
        let sources = self
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| s.build(&format!("sources[{i}]")))
            .collect::<CliResult<Vec<_>>>()?;
        let m = sources.len();
        let unitary = match &self.circuit {
            CircuitConfig::Identity => CMatrix::identity(m, m),
            CircuitConfig::Haar { seed } => haar_unitary(m, *seed),
            CircuitConfig::Explicit { matrix } => to_matrix(matrix, "circuit.matrix")?,
        };
        EmitterNetwork::new(sources, unitary).map_err(|e| CliError::Config(format!("circuit: {e}")))
    }

    /// Settings for `network`, with the horizon default filled in.
    pub fn settings(&self, network: &EmitterNetwork) -> PropagationSettings {
        let mut s = PropagationSettings::for_network(network).with_tolerances(self.run.rtol, self.run.atol);
        let span = s.t1 - s.t0;
        s.t0 = self.run.t0;
        s.t1 = self.run.t1.unwrap_or(self.run.t0 + span);
        s.conjugate_shortcut = self.run.conjugate_shortcut;
        s.workers = self.run.workers;
        s
    }
}

/// A plot-ready or results table written as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn to_csv(&self) -> CliResult<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| CliError::Io(e.to_string());
        w.write_record(&self.header).map_err(io)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|x| x.to_string())).map_err(io)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?)
            .map_err(|e| CliError::Io(e.to_string()))
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub task: Task,
    /// Results; identical across reruns of the same config.
    pub summary: Value,
    pub tables: Vec<Table>,
    /// Resolved config, versions, seeds, timings and diagnostics.
    pub manifest: Value,
}

impl ReportBundle {
    /// Writes `results.csv` (and other tables), `summary.json` and `manifest.json`.
    pub fn write(&self, dir: &Path, formats: &[Format]) -> CliResult<Vec<PathBuf>> {
        let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        let mut written = Vec::new();
        if formats.contains(&Format::Csv) {
            for t in &self.tables {
                let path = dir.join(format!("{}.csv", t.name));
                fs::write(&path, t.to_csv()?).map_err(io)?;
                written.push(path);
            }
        }
        if formats.contains(&Format::Json) {
            let path = dir.join("summary.json");
            fs::write(&path, pretty(&self.summary)?).map_err(io)?;
            written.push(path);
        }
        let path = dir.join("manifest.json");
        fs::write(&path, pretty(&self.manifest)?).map_err(io)?;
        written.push(path);
        Ok(written)
    }
}

fn pretty(v: &Value) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Io(e.to_string()))
}

struct Timings(Vec<(String, f64)>);

impl Timings {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push((stage.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    fn to_json(&self) -> Value {
        Value::Object(self.0.iter().map(|(k, v)| (k.clone(), json!(v))).collect())
    }
}

/// Runs `config` (with `task` overriding `config.task`) and collects the reports.
pub fn run_experiment(config: &ExperimentConfig, task: Option<Task>) -> CliResult<ReportBundle> {
    config.validate()?;
    let task = task.or(config.task).ok_or_else(|| CliError::Config("task: no task given".into()))?;
    let mut resolved = config.clone();
    resolved.task = Some(task);
    let mut timings = Timings(Vec::new());
    let mut diagnostics = json!({});
    let (summary, tables) = match task {
        Task::TvdBenchmark => run_tvd(&mut resolved, &mut timings)?,
        _ => {
            let network = resolved.build_network()?;
            let settings = resolved.settings(&network);
            resolved.run.t1 = Some(settings.t1);
            match task {
                Task::PnDist if resolved.detectors.threshold => run_threshold(&network, &settings, &mut timings)?,
                Task::PnDist => run_pn(&resolved, &network, &settings, &mut timings, &mut diagnostics)?,
                Task::Threshold => run_threshold(&network, &settings, &mut timings)?,
                Task::Fom => run_fom(&resolved, &network, &settings, &mut timings)?,
                Task::Hom => run_hom(&resolved, &settings, &mut timings)?,
                Task::BenchScaling => run_bench(&resolved, &network, &settings, &mut timings)?,
                Task::TvdBenchmark => unreachable!(),
            }
        }
    };
    let seeds: Vec<u64> = match (&resolved.circuit, task) {
        (_, Task::TvdBenchmark) => resolved.tvd.seeds.clone(),
        (CircuitConfig::Haar { seed }, _) => vec![*seed],
        _ => Vec::new(),
    };
    let manifest = json!({
        "tool": "zpg",
        "version": env!("CARGO_PKG_VERSION"),
        "task": task.name(),
        "config": resolved,
        "seeds": seeds,
        "workers": resolved.run.workers.unwrap_or_else(rayon::current_num_threads),
        "timings_seconds": timings.to_json(),
        "diagnostics": diagnostics,
        "units": { "rate": "gamma_ref", "time": "1/gamma_ref", "gamma_ref": resolved.gamma_ref },
    });
    Ok(ReportBundle { task, summary, tables, manifest })
}

fn distribution_table(name: &str, dist: &PhotonNumberDistribution) -> Table {
    let m = dist.num_modes();
    let mut header: Vec<String> = (1..=m).map(|j| format!("n{j}")).collect();
    header.push("probability".into());
    header.push("residue".into());
    let rows = dist
        .iter()
        .map(|(n, p)| {
            let mut row: Vec<f64> = n.iter().map(|&k| k as f64).collect();
            row.push(p);
            row.push(dist.residue());
            row
        })
        .collect();
    Table { name: name.into(), header, rows }
}

fn distribution_json(dist: &PhotonNumberDistribution) -> Value {
    json!({
        "truncations": dist.truncations(),
        "outcomes": dist.iter().map(|(n, p)| json!({ "n": n, "p": p })).collect::<Vec<_>>(),
        "residue": dist.residue(),
        "tail_mass": dist.tail_mass(),
        "total": dist.total(),
        "mean": dist.mean(),
        "g2": dist.g2(),
        "parity": dist.parity(),
    })
}

type TaskOutput = (Value, Vec<Table>);

fn run_pn(
    config: &ExperimentConfig,
    network: &EmitterNetwork,
    settings: &PropagationSettings,
    timings: &mut Timings,
    diagnostics: &mut Value,
) -> CliResult<TaskOutput> {
    let m = network.num_modes();
    let truncations = config.detectors.truncations.clone().unwrap_or_else(|| vec![8; m]);
    if truncations.len() != m {
        return Err(CliError::Config(format!(
            "detectors.truncations: {} entries for {m} detectors",
            truncations.len()
        )));
    }
    let dist = timings
        .time("pn_distribution", || match config.detectors.auto_tolerance {
            Some(tol) => auto_photon_number_distribution(network, &truncations, settings, tol, 4),
            None => photon_number_distribution(network, &truncations, settings),
        })
        .map_err(CliError::stage("pn_distribution"))?;
    *diagnostics = json!({ "residue": dist.residue(), "tail_mass": dist.tail_mass(), "configs": dist.probs().len() });
    Ok((
        json!({ "task": "pn_dist", "distribution": distribution_json(&dist) }),
        vec![distribution_table("results", &dist)],
    ))
}

fn run_threshold(
    network: &EmitterNetwork,
    settings: &PropagationSettings,
    timings: &mut Timings,
) -> CliResult<TaskOutput> {
    let th =
        timings.time("threshold", || threshold_statistics(network, settings)).map_err(CliError::stage("threshold"))?;
    let m = th.num_detectors();
    let mut header: Vec<String> = (1..=m).map(|j| format!("m{j}")).collect();
    header.push("probability".into());
    header.push("residue".into());
    let deficit = (th.total() - 1.0).abs();
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for (bits, p) in crate::decomposition::OutcomeDistribution::outcomes(&th) {
        outcomes.push(json!({ "m": bits, "p": p }));
        let mut row: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
        row.push(p);
        row.push(deficit);
        rows.push(row);
    }
    let summary = json!({ "task": "threshold", "beta": outcomes, "total": th.total() });
    Ok((summary, vec![Table { name: "results".into(), header, rows }]))
}

fn run_fom(
    config: &ExperimentConfig,
    network: &EmitterNetwork,
    settings: &PropagationSettings,
    timings: &mut Timings,
) -> CliResult<TaskOutput> {
    let f = &config.fom;
    let mu = timings
        .time("mean_photon_number", || mean_photon_number(network, f.eta, f.mu_step, settings))
        .map_err(CliError::stage("mean_photon_number"))?;
    let g = timings.time("g2", || g2(network, f.g2_step, settings)).map_err(CliError::stage("g2"))?;
    let par = timings.time("parity", || parity(network, settings)).map_err(CliError::stage("parity"))?;
    let mut summary = json!({
        "task": "fom",
        "mu": mu.value, "mu_raw": mu.raw, "mu_error_gauge": mu.error_gauge,
        "g2": g.value, "g2_raw": g.raw, "g2_error_gauge": g.error_gauge,
        "parity": par,
    });
    let mut tables = vec![Table {
        name: "results".into(),
        header: vec!["mu".into(), "mu_error_gauge".into(), "g2".into(), "g2_error_gauge".into(), "parity".into()],
        rows: vec![vec![mu.value, mu.error_gauge, g.value, g.error_gauge, par]],
    }];
    if let Some(n) = f.distribution_truncation {
        let dist = timings
            .time("pn_distribution", || photon_number_distribution(network, &[n], settings))
            .map_err(CliError::stage("pn_distribution"))?;
        summary["distribution"] = distribution_json(&dist);
        tables.push(distribution_table("distribution", &dist));
    }
    Ok((summary, tables))
}

fn run_hom(config: &ExperimentConfig, settings: &PropagationSettings, timings: &mut Timings) -> CliResult<TaskOutput> {
    let source = config.sources.first().ok_or_else(|| CliError::Config("sources: hom needs one source".into()))?;
    let spec = source.build("sources[0]")?;
    let twin = match source {
        SourceConfig::TwoLevel { gamma, pulse, detuning, dephasing, initial } => SourceConfig::TwoLevel {
            gamma: *gamma,
            pulse: pulse.clone(),
            detuning: detuning + config.hom.reference_detuning,
            dephasing: *dephasing,
            initial: *initial,
        },
        SourceConfig::Custom { .. } => {
            return Err(CliError::Config("sources[0]: hom reference needs a two_level source".into()));
        }
    }
    .build("sources[0]")?;
    let report = timings.time("hom", || hom_report(&spec, &twin, Some(settings))).map_err(CliError::stage("hom"))?;
    let summary = json!({
        "task": "hom",
        "coincidence": report.coincidence,
        "reference_coincidence": report.reference_coincidence,
        "ratio": report.ratio,
        "reference_detuning": config.hom.reference_detuning,
    });
    let table = Table {
        name: "results".into(),
        header: vec!["coincidence".into(), "reference_coincidence".into(), "ratio".into()],
        rows: vec![vec![report.coincidence, report.reference_coincidence, report.ratio]],
    };
    Ok((summary, vec![table]))
}

/// Network of `modes` identical pulsed emitters behind a Haar circuit.
pub fn tvd_network(cfg: &TvdConfig, tau: f64, seed: u64) -> CliResult<EmitterNetwork> {
    let pulse =
        square_pulse(cfg.theta_over_pi * PI, tau, 0.0).map_err(|e| CliError::Config(format!("tvd.taus: {e}")))?;
    let src = SourceSpec::two_level(cfg.gamma)
        .with_pulse(&pulse)
        .build()
        .map_err(|e| CliError::Config(format!("tvd: {e}")))?;
    EmitterNetwork::new(vec![src; cfg.modes], haar_unitary(cfg.modes, seed))
        .map_err(|e| CliError::Config(format!("tvd: {e}")))
}

/// TVD between the simulated distribution and ideal interference of single photons.
pub fn tvd_point(cfg: &TvdConfig, tau: f64, seed: u64, run: &RunConfig) -> CliResult<f64> {
    let network = tvd_network(cfg, tau, seed)?;
    let mut settings = PropagationSettings::for_network(&network).with_tolerances(run.rtol, run.atol);
    settings.workers = run.workers;
    settings.conjugate_shortcut = run.conjugate_shortcut;
    let n = cfg.truncation.unwrap_or(cfg.modes + 1);
    let dist = photon_number_distribution(&network, &vec![n; cfg.modes], &settings)
        .map_err(CliError::stage("tvd_benchmark"))?;
    let ideal = ideal_interference_distribution(network.unitary(), &vec![true; cfg.modes])
        .map_err(CliError::stage("permanent oracle"))?;
    Ok(tvd(&dist, &ideal))
}

fn run_tvd(config: &mut ExperimentConfig, timings: &mut Timings) -> CliResult<TaskOutput> {
    let cfg = config.tvd.clone();
    let mut rows = Vec::new();
    let mut curve = Vec::new();
    for &tau in &cfg.taus {
        let mut values = Vec::new();
        for &seed in &cfg.seeds {
            let v = timings.time(&format!("tvd tau={tau} seed={seed}"), || tvd_point(&cfg, tau, seed, &config.run))?;
            rows.push(vec![tau, seed as f64, v]);
            values.push(v);
        }
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        curve.push(vec![tau, mean]);
    }
    let summary = json!({
        "task": "tvd_benchmark",
        "modes": cfg.modes,
        "per_seed": rows.iter().map(|r| json!({ "tau": r[0], "seed": r[1] as u64, "tvd": r[2] })).collect::<Vec<_>>(),
        "mean_tvd": curve.iter().map(|r| json!({ "tau": r[0], "tvd": r[1] })).collect::<Vec<_>>(),
    });
    let tables = vec![
        Table { name: "results".into(), header: vec!["tau".into(), "seed".into(), "tvd".into()], rows },
        Table { name: "tvd_vs_tau".into(), header: vec!["tau".into(), "mean_tvd".into()], rows: curve },
    ];
    Ok((summary, tables))
}

/// One oracle run of the scaling ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRung {
    pub points_per_lifetime: usize,
    pub mesh_points: usize,
    pub evaluations: u64,
    pub seconds: f64,
    pub error: f64,
}

/// Timing comparison at equal accuracy on the top-order probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub n_max: usize,
    pub tolerance: f64,
    pub zpg_truncation: usize,
    pub zpg_seconds: f64,
    pub zpg_error: f64,
    pub oracle: Vec<OracleRung>,
    /// Oracle time at the first rung meeting the tolerance over the ZPG time.
    pub speedup: Option<f64>,
    /// Slope of log(evaluations) against log(mesh points) over the last two rungs.
    pub cost_exponent: Option<f64>,
}

fn top_order(dist: &PhotonNumberDistribution, n_max: usize) -> Vec<f64> {
    dist.iter().filter(|(n, _)| n.iter().sum::<usize>() == n_max).map(|(_, p)| p).collect()
}

fn fastest<T>(repeats: usize, mut f: impl FnMut() -> crate::Result<T>) -> crate::Result<(T, f64)> {
    let mut best: Option<(T, f64)> = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let out = f()?;
        let secs = start.elapsed().as_secs_f64();
        if best.as_ref().is_none_or(|(_, b)| secs < *b) {
            best = Some((out, secs));
        }
    }
    Ok(best.expect("at least one repeat"))
}

/// Times the ZPG pipeline and the recursive oracle at matched accuracy on `p(n)`, `|n| = n_max`.
pub fn bench_scaling(
    network: &EmitterNetwork,
    bench: &BenchConfig,
    settings: &PropagationSettings,
) -> crate::Result<ScalingReport> {
    let n_max = bench.n_max;
    let m = network.num_modes();
    let mut serial = settings.clone();
    serial.workers = Some(1);
    let reference = photon_number_distribution(network, &vec![bench.reference_truncation; m], &serial)?;
    let embed = |d: &PhotonNumberDistribution| -> Vec<f64> {
        reference.iter().filter(|(n, _)| n.iter().sum::<usize>() == n_max).map(|(n, _)| d.get(&n)).collect()
    };
    let exact = top_order(&reference, n_max);
    let scale = exact.iter().fold(0.0f64, |a, p| a.max(p.abs()));
    let tolerance = if scale > 0.0 {
        0.5 * 10f64.powi(scale.log10().floor() as i32 - bench.digits as i32 + 1)
    } else {
        0.5 * 10f64.powi(-(bench.digits as i32))
    };
    let error = |v: &[f64]| v.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    // both methods integrate two orders below the target, so only their discretizations differ
    let matched = serial.clone().with_tolerances(tolerance * 1e-2, tolerance * 1e-4);

    let mut zpg = None;
    for n in (n_max + 1)..=bench.reference_truncation {
        let (dist, secs) = fastest(bench.repeats, || photon_number_distribution(network, &vec![n; m], &matched))?;
        let e = error(&embed(&dist));
        if e <= tolerance {
            zpg = Some((n, secs, e));
            break;
        }
    }
    let (zpg_truncation, zpg_seconds, zpg_error) = zpg.unwrap_or((bench.reference_truncation, f64::NAN, f64::NAN));

    let mut oracle = Vec::new();
    let mut speedup = None;
    for &p in &bench.points_ladder {
        let quad = QuadratureSettings::new(p, matched.clone());
        let start = Instant::now();
        let r = recursive_pn(network, n_max, &quad)?;
        let seconds = start.elapsed().as_secs_f64();
        let e = error(&embed(&r.distribution));
        oracle.push(OracleRung {
            points_per_lifetime: p,
            mesh_points: r.mesh_points,
            evaluations: r.evaluations,
            seconds,
            error: e,
        });
        if e <= tolerance {
            speedup = Some(seconds / zpg_seconds);
            break;
        }
    }
    let cost_exponent = match oracle.as_slice() {
        [.., a, b] if b.mesh_points > a.mesh_points => Some(
            (b.evaluations as f64 / a.evaluations as f64).ln() / (b.mesh_points as f64 / a.mesh_points as f64).ln(),
        ),
        _ => None,
    };
    Ok(ScalingReport { n_max, tolerance, zpg_truncation, zpg_seconds, zpg_error, oracle, speedup, cost_exponent })
}

fn run_bench(
    config: &ExperimentConfig,
    network: &EmitterNetwork,
    settings: &PropagationSettings,
    timings: &mut Timings,
) -> CliResult<TaskOutput> {
    let report = timings
        .time("bench_scaling", || bench_scaling(network, &config.bench, settings))
        .map_err(CliError::stage("bench_scaling"))?;
    let rows = report
        .oracle
        .iter()
        .map(|r| vec![r.points_per_lifetime as f64, r.mesh_points as f64, r.evaluations as f64, r.seconds, r.error])
        .collect();
    let table = Table {
        name: "oracle_scaling".into(),
        header: ["points_per_lifetime", "mesh_points", "evaluations", "seconds", "error"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows,
    };
    // wall-clock numbers vary run to run, so the whole report goes to the summary
    Ok((json!({ "task": "bench_scaling", "report": report }), vec![table]))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG: &str = r#"
task = "pn_dist"

[[sources]]
kind = "two_level"
gamma = 1.0
pulse = { theta_over_pi = 1.0, tau = 0.5 }

[detectors]
truncations = [6]
"#;

    #[test]
    fn parses_and_round_trips() {
        let c = ExperimentConfig::from_toml(FIG).unwrap();
        assert_eq!(c.task, Some(Task::PnDist));
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn custom_source_and_explicit_circuit_round_trip() {
        let text = r#"
[[sources]]
kind = "custom"
hamiltonian = [[0.0, [0.5, 0.0]], [0.5, 0.0]]
collection = [[0.0, 1.0], [0.0, 0.0]]
rate = 2.0
initial_state = [[0.0, 0.0], [0.0, 1.0]]
dissipation = [{ op = [[0.0, 0.0], [0.0, 1.0]], rate = 0.1 }]

[circuit]
kind = "explicit"
matrix = [[[0.0, 1.0]]]
"#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let net = c.build_network().unwrap();
        assert_eq!(net.sources()[0].collection_rate(), 2.0);
        assert_eq!(net.unitary()[(0, 0)], C64::new(0.0, 1.0));
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = ExperimentConfig::from_toml("[run]\nrtoll = 1e-9\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rtoll") && msg.contains("line 2"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let mut c = ExperimentConfig::from_toml(FIG).unwrap();
        c.sources[0] = SourceConfig::TwoLevel {
            gamma: -1.0,
            pulse: None,
            detuning: 0.0,
            dephasing: 0.0,
            initial: InitialLevel::Ground,
        };
        let msg = run_experiment(&c, None).unwrap_err().to_string();
        assert!(msg.contains("sources[0]"), "{msg}");
        c.run.workers = Some(0);
        assert!(run_experiment(&c, None).unwrap_err().to_string().contains("run.workers"));
    }

    #[test]
    fn pn_dist_report_is_deterministic_across_workers() {
        let mut c = ExperimentConfig::from_toml(FIG).unwrap();
        c.run.workers = Some(1);
        let a = run_experiment(&c, None).unwrap();
        c.run.workers = Some(3);
        let b = run_experiment(&c, None).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.tables, b.tables);
        assert!((a.summary["distribution"]["total"].as_f64().unwrap() - 1.0).abs() < 1e-9);
        assert!(a.manifest["config"]["run"]["t1"].as_f64().unwrap() > 15.0);
    }

    #[test]
    fn manifest_config_reproduces_results() {
        let c = ExperimentConfig::from_toml(FIG).unwrap();
        let a = run_experiment(&c, None).unwrap();
        let echoed: ExperimentConfig = serde_json::from_value(a.manifest["config"].clone()).unwrap();
        let b = run_experiment(&echoed, None).unwrap();
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn seed_override_reaches_circuit_and_benchmark() {
        let mut c = ExperimentConfig::from_toml(FIG).unwrap();
        c.circuit = CircuitConfig::Haar { seed: 1 };
        c.apply_seed(40);
        assert_eq!(c.circuit, CircuitConfig::Haar { seed: 40 });
        assert_eq!(c.tvd.seeds, vec![40, 41, 42, 43, 44]);
    }

    #[test]
    fn missing_task_is_a_config_error() {
        let mut c = ExperimentConfig::from_toml(FIG).unwrap();
        c.task = None;
        assert_eq!(run_experiment(&c, None).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn threshold_and_fom_tasks_run() {
        let c = ExperimentConfig::from_toml(FIG).unwrap();
        let th = run_experiment(&c, Some(Task::Threshold)).unwrap();
        assert!((th.summary["total"].as_f64().unwrap() - 1.0).abs() < 1e-9);
        let fom = run_experiment(&c, Some(Task::Fom)).unwrap();
        assert!(fom.summary["mu"].as_f64().unwrap() > 0.5);
    }

    #[test]
    fn guard_refusal_maps_to_exit_four() {
        let mut c = ExperimentConfig::from_toml(FIG).unwrap();
        c.bench = BenchConfig { n_max: 4, points_ladder: vec![200], reference_truncation: 8, ..BenchConfig::default() };
        let err = run_experiment(&c, Some(Task::BenchScaling)).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
    }

    #[test]
    fn writes_requested_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::from_toml(FIG).unwrap();
        let bundle = run_experiment(&c, None).unwrap();
        let files = bundle.write(dir.path(), &[Format::Csv, Format::Json]).unwrap();
        assert_eq!(files.len(), 3);
        let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(csv.starts_with("n1,probability,residue\n"));
        assert_eq!(csv.lines().count(), 7);
    }
}
