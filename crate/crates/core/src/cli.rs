//! Batch front end: TOML run configuration, CSV/JSON outputs, and the
//! `simulate`, `scan`, `fit`, `rates`, `identify` and `selftest` subcommands.
//!
//! Files always carry Hz, seconds and 1/s. Grid values written to disk are
//! the ones read from the configuration, never values converted back from
//! angular units.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::analysis::{
    classify_polarity, find_features_with, fit_decay, gamma_prime_exact, gamma_prime_one_sided, purcell_rate,
    FeatureConfig, FitModel, Polarity, RelaxationSpectrum, DEFAULT_BASELINE_WINDOW, DEFAULT_DEPTH_RATIO,
    DEFAULT_NOISE_FLOOR,
};
use crate::dynamics::{propagator_oracle, Integrator};
use crate::model::{
    build_collapse_operators, build_rotating_hamiltonian, hz_to_angular, initial_state, initial_state_for,
    DefectParams, DriveParams, QubitParams, SequenceKind, SystemModel,
};
use crate::protocols::{linspace, refit, scan, steady_level, PulseMode, ScanOptions, ScanResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

/// Successful run; `Partial` means some rows or cells failed and were
/// reported.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    Partial(usize),
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Complete => EXIT_OK,
            Outcome::Partial(_) => EXIT_PARTIAL,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QubitSection {
    pub freq_hz: f64,
    #[serde(default)]
    pub gamma1: f64,
    #[serde(default)]
    pub gamma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectSection {
    /// ω_TLS − ω_q in Hz.
    pub detuning_hz: f64,
    pub gamma1: f64,
    #[serde(default)]
    pub gamma2: f64,
    pub coupling_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSection {
    pub rabi_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RabiGrid {
    pub start_hz: f64,
    pub stop_hz: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationGrid {
    pub start_s: f64,
    pub stop_s: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum PulseModeArg {
    #[default]
    Ideal,
    Finite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSection {
    #[serde(default)]
    pub mode: PulseModeArg,
    #[serde(default = "default_pi_half")]
    pub pi_half_s: f64,
}

fn default_pi_half() -> f64 {
    100e-9
}

impl Default for PulseSection {
    fn default() -> Self {
        Self {
            mode: PulseModeArg::Ideal,
            pi_half_s: default_pi_half(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Worker threads; absent means all available cores.
    pub workers: Option<usize>,
    /// Seed for the synthetic readout noise.
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of Gaussian noise added to simulated populations.
    #[serde(default)]
    pub readout_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_noise_floor")]
    pub noise_floor: f64,
    #[serde(default = "default_depth")]
    pub depth_ratio: f64,
    #[serde(default = "default_window")]
    pub baseline_window: usize,
}

fn default_noise_floor() -> f64 {
    DEFAULT_NOISE_FLOOR
}
fn default_depth() -> f64 {
    DEFAULT_DEPTH_RATIO
}
fn default_window() -> usize {
    DEFAULT_BASELINE_WINDOW
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            noise_floor: DEFAULT_NOISE_FLOOR,
            depth_ratio: DEFAULT_DEPTH_RATIO,
            baseline_window: DEFAULT_BASELINE_WINDOW,
        }
    }
}

/// Parsed run configuration. Frequencies in Hz, rates in 1/s, times in s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub qubit: QubitSection,
    #[serde(default)]
    pub defects: Vec<DefectSection>,
    pub drive: Option<DriveSection>,
    pub rabi: Option<RabiGrid>,
    pub durations: DurationGrid,
    #[serde(default)]
    pub pulse: PulseSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn require(ok: bool, field: &str, msg: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("{field}: {msg}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        require(self.qubit.freq_hz.is_finite() && self.qubit.freq_hz > 0.0, "qubit.freq_hz", "must be positive")?;
        require(finite_nonneg(self.qubit.gamma1), "qubit.gamma1", "must be >= 0")?;
        require(finite_nonneg(self.qubit.gamma2), "qubit.gamma2", "must be >= 0")?;
        for (i, d) in self.defects.iter().enumerate() {
            require(d.detuning_hz.is_finite(), &format!("defects[{i}].detuning_hz"), "must be finite")?;
            require(finite_nonneg(d.gamma1), &format!("defects[{i}].gamma1"), "must be >= 0")?;
            require(finite_nonneg(d.gamma2), &format!("defects[{i}].gamma2"), "must be >= 0")?;
            require(finite_nonneg(d.coupling_hz), &format!("defects[{i}].coupling_hz"), "must be >= 0")?;
        }
        if let Some(d) = &self.drive {
            require(finite_nonneg(d.rabi_hz), "drive.rabi_hz", "must be >= 0")?;
        }
        if let Some(r) = &self.rabi {
            require(r.count >= 1, "rabi.count", "must be >= 1")?;
            require(finite_nonneg(r.start_hz) && r.stop_hz.is_finite(), "rabi", "start/stop must be finite, start >= 0")?;
            require(r.start_hz <= r.stop_hz, "rabi", "start_hz must not exceed stop_hz")?;
        }
        let t = &self.durations;
        require(t.count >= 1, "durations.count", "must be >= 1")?;
        require(finite_nonneg(t.start_s) && t.stop_s.is_finite(), "durations", "start/stop must be finite, start >= 0")?;
        require(t.start_s <= t.stop_s, "durations", "start_s must not exceed stop_s")?;
        require(t.count == 1 || t.start_s < t.stop_s, "durations", "start_s == stop_s needs count = 1")?;
        require(self.pulse.pi_half_s > 0.0 && self.pulse.pi_half_s.is_finite(), "pulse.pi_half_s", "must be positive")?;
        require(finite_nonneg(self.run.readout_noise), "run.readout_noise", "must be >= 0")?;
        require(self.run.workers != Some(0), "run.workers", "must be >= 1")?;
        let a = &self.analysis;
        require(finite_nonneg(a.noise_floor), "analysis.noise_floor", "must be >= 0")?;
        require(a.depth_ratio > 0.0 && a.depth_ratio <= 1.0, "analysis.depth_ratio", "must be in (0, 1]")?;
        require(a.baseline_window >= 3, "analysis.baseline_window", "must be >= 3")?;
        Ok(())
    }

    pub fn qubit_params(&self) -> QubitParams {
        QubitParams {
            omega_q: hz_to_angular(self.qubit.freq_hz),
            gamma1: self.qubit.gamma1,
            gamma2: self.qubit.gamma2,
        }
    }

    pub fn defect_params(&self) -> Vec<DefectParams> {
        self.defects
            .iter()
            .map(|d| DefectParams {
                delta_tls: hz_to_angular(d.detuning_hz),
                gamma1: d.gamma1,
                gamma2: d.gamma2,
                coupling_g: hz_to_angular(d.coupling_hz),
            })
            .collect()
    }

    /// Qubit-only template; defects are passed to the scan separately.
    pub fn template(&self) -> SystemModel {
        SystemModel {
            qubit: self.qubit_params(),
            defect: None,
            drive: DriveParams::resonant(0.0),
        }
    }

    pub fn duration_grid(&self) -> Vec<f64> {
        linspace(self.durations.start_s, self.durations.stop_s, self.durations.count)
    }

    pub fn rabi_grid_hz(&self) -> Option<Vec<f64>> {
        self.rabi.as_ref().map(|r| linspace(r.start_hz, r.stop_hz, r.count))
    }

    pub fn pulse_mode(&self, mode: PulseModeArg) -> PulseMode {
        match mode {
            PulseModeArg::Ideal => PulseMode::Ideal,
            PulseModeArg::Finite => PulseMode::FiniteRect {
                pi_half_duration: self.pulse.pi_half_s,
            },
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            baseline_window: self.analysis.baseline_window,
            depth_ratio: self.analysis.depth_ratio,
            noise_floor: self.analysis.noise_floor,
        }
    }
}

/// Overrides taken from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub pulse_mode: Option<PulseModeArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

// ---------------------------------------------------------------------------
// Number formatting

/// 17 significant digits, which round-trips every finite f64.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

pub fn parse_f64(s: &str) -> Result<f64, CliError> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| CliError::Config(format!("bad number {s:?}: {e}")))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, &text)
}

/// `tau_s,population` trace file.
pub fn trace_csv(durations: &[f64], populations: &[f64]) -> String {
    let mut s = String::from("tau_s,population\n");
    for (t, p) in durations.iter().zip(populations) {
        let _ = writeln!(s, "{},{}", fmt_f64(*t), fmt_f64(*p));
    }
    s
}

pub fn parse_trace_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let mut lines = text.lines();
    if lines.next() != Some("tau_s,population") {
        return Err(CliError::Config("trace csv: bad header".into()));
    }
    let mut taus = Vec::new();
    let mut pops = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| CliError::Config(format!("trace csv: bad row {line:?}")))?;
        taus.push(parse_f64(a)?);
        pops.push(parse_f64(b)?);
    }
    Ok((taus, pops))
}

/// Map file: header `rabi_hz,<tau_0>,…`, one row per Rabi frequency.
pub fn map_csv(rabi_hz: &[f64], durations: &[f64], rows: &[Vec<f64>]) -> String {
    let mut s = String::from("rabi_hz");
    for t in durations {
        s.push(',');
        s.push_str(&fmt_f64(*t));
    }
    s.push('\n');
    for (r, row) in rabi_hz.iter().zip(rows) {
        s.push_str(&fmt_f64(*r));
        for v in row {
            s.push(',');
            s.push_str(&fmt_f64(*v));
        }
        s.push('\n');
    }
    s
}

/// (rabi_hz, durations, rows) as read back from a map file.
pub type MapData = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

/// Inverse of [`map_csv`].
pub fn parse_map_csv(text: &str) -> Result<MapData, CliError> {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| CliError::Config("map csv: empty".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("rabi_hz") {
        return Err(CliError::Config("map csv: bad header".into()));
    }
    let durations = cols.map(parse_f64).collect::<Result<Vec<_>, _>>()?;
    let mut rabi = Vec::new();
    let mut rows = Vec::new();
    for line in lines {
        let mut vals = line.split(',').map(parse_f64);
        rabi.push(vals.next().ok_or_else(|| CliError::Config("map csv: empty row".into()))??);
        let row = vals.collect::<Result<Vec<_>, _>>()?;
        if row.len() != durations.len() {
            return Err(CliError::Config("map csv: ragged row".into()));
        }
        rows.push(row);
    }
    Ok((rabi, durations, rows))
}

// ---------------------------------------------------------------------------
// T1 table

/// One row of a digitized or synthetic T₁(flux) measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T1Row {
    pub flux: f64,
    pub freq_hz: f64,
    pub t1_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct T1Table {
    pub rows: Vec<T1Row>,
}

impl T1Table {
    /// Reads CSV with header `flux,freq_hz,t1_s`.
    pub fn from_csv(text: &str) -> Result<Self, CliError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| CliError::Config(format!("T1 table: {e}")))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["flux", "freq_hz", "t1_s"] {
            return Err(CliError::Config(format!(
                "T1 table: header must be flux,freq_hz,t1_s (got {})",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<T1Row>().enumerate() {
            let line = i + 2;
            let row = rec.map_err(|e| CliError::Config(format!("T1 table line {line}: {e}")))?;
            if !(row.t1_s > 0.0 && row.t1_s.is_finite()) {
                return Err(CliError::Config(format!("T1 table line {line}: t1_s must be positive")));
            }
            if !(row.freq_hz > 0.0 && row.freq_hz.is_finite()) {
                return Err(CliError::Config(format!("T1 table line {line}: freq_hz must be positive")));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(CliError::Config("T1 table has no rows".into()));
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_csv(&text)
    }

    pub fn spectrum(&self) -> Result<RelaxationSpectrum, CliError> {
        let samples: Vec<(f64, f64)> = self.rows.iter().map(|r| (hz_to_angular(r.freq_hz), r.t1_s)).collect();
        RelaxationSpectrum::from_t1_samples(&samples).map_err(|e| CliError::Config(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// simulate / scan

fn scan_options(cfg: &RunConfig, ov: &Overrides) -> ScanOptions {
    let mode = ov.pulse_mode.unwrap_or(cfg.pulse.mode);
    ScanOptions {
        pulse_mode: cfg.pulse_mode(mode),
        workers: ov.workers.or(cfg.run.workers),
        integrator: Integrator::default(),
    }
}

/// Adds seeded Gaussian readout noise row by row, so the result does not
/// depend on scheduling.
fn add_readout_noise(result: &mut ScanResult, sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    for (i, (up, down)) in result.d_up.iter_mut().zip(result.d_down.iter_mut()).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        for v in up.iter_mut().chain(down.iter_mut()) {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    refit(result);
}

fn run_scan(cfg: &RunConfig, rabi_hz: &[f64], ov: &Overrides) -> Result<ScanResult, CliError> {
    let rabi: Vec<f64> = rabi_hz.iter().map(|&f| hz_to_angular(f)).collect();
    let mut result = scan(&cfg.template(), &cfg.defect_params(), &rabi, &cfg.duration_grid(), &scan_options(cfg, ov))
        .map_err(|e| CliError::Numerical(format!("{e}; model: {:?}", cfg.qubit)))?;
    add_readout_noise(&mut result, cfg.run.readout_noise, cfg.run.seed);
    Ok(result)
}

fn fit_json(result: &ScanResult, i: usize, rabi_hz: f64) -> serde_json::Value {
    let col = &result.fits[i];
    match &col.fit {
        Ok(f) => json!({
            "rabi_hz": rabi_hz,
            "gamma_1rho": f.gamma,
            "gamma_1rho_stderr": f.gamma_stderr,
            "t1rho_s": f.t1rho(),
            "amplitude": f.amplitude,
            "offset": f.offset,
            "residual_rms": f.residual_rms,
            "converged": f.converged,
            "up_steady": col.up_steady,
            "down_steady": col.down_steady,
        }),
        Err(e) => json!({
            "rabi_hz": rabi_hz,
            "error": e.to_string(),
            "converged": false,
            "up_steady": col.up_steady,
            "down_steady": col.down_steady,
        }),
    }
}

fn invariants_json(result: &ScanResult) -> serde_json::Value {
    let inv = &result.invariants;
    let pop_ok = result
        .d_up
        .iter()
        .chain(&result.d_down)
        .flatten()
        .filter(|v| !v.is_nan())
        .all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v));
    json!({
        "max_trace_drift": inv.max_trace_drift,
        "max_hermiticity_error": inv.max_hermiticity_error,
        "min_eigenvalue": inv.min_eigenvalue,
        "state_invariants_ok": inv.within_tolerances(),
        "populations_in_range": pop_ok,
    })
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Simulates D↑, D↓ and P at the single Rabi frequency in `[drive]`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path, format: OutputFormat, ov: &Overrides) -> Result<Outcome, CliError> {
    let rabi_hz = cfg
        .drive
        .as_ref()
        .map(|d| d.rabi_hz)
        .ok_or_else(|| CliError::Config("simulate needs [drive] rabi_hz".into()))?;
    let result = run_scan(cfg, &[rabi_hz], ov)?;
    if let Some(f) = result.failures.first() {
        return Err(CliError::Numerical(format!("{}; config: {:?}", f.message, cfg)));
    }
    ensure_dir(out)?;
    let taus = &result.duration_grid;
    let col = &result.fits[0];
    let polarity = classify_polarity(col.up_steady, col.down_steady, cfg.analysis.noise_floor);
    let mut sidecar = json!({
        "config": cfg,
        "fit": fit_json(&result, 0, rabi_hz),
        "polarity": polarity,
        "invariants": invariants_json(&result),
    });
    match format {
        OutputFormat::Csv => {
            write_file(&out.join("d_up.csv"), &trace_csv(taus, &result.d_up[0]))?;
            write_file(&out.join("d_down.csv"), &trace_csv(taus, &result.d_down[0]))?;
            write_file(&out.join("p.csv"), &trace_csv(taus, &result.p[0]))?;
            sidecar["files"] = json!(["d_up.csv", "d_down.csv", "p.csv"]);
        }
        OutputFormat::Json => {
            sidecar["traces"] = json!({
                "tau_s": taus,
                "d_up": result.d_up[0],
                "d_down": result.d_down[0],
                "p": result.p[0],
            });
        }
    }
    write_json(&out.join("simulate.json"), &sidecar)?;
    Ok(Outcome::Complete)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub rabi_hz: f64,
    pub polarity: Polarity,
    pub tls_freq_hz: Option<f64>,
    pub t1rho_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFile {
    pub qubit_freq_hz: f64,
    pub rabi_step_hz: Option<f64>,
    pub features: Vec<FeatureEntry>,
    pub failures: Vec<serde_json::Value>,
}

fn tls_freq_hz(qubit_freq_hz: f64, rabi_hz: f64, polarity: Polarity) -> Option<f64> {
    match polarity {
        Polarity::Positive => Some(qubit_freq_hz + rabi_hz),
        Polarity::Negative => Some(qubit_freq_hz - rabi_hz),
        Polarity::Undetermined => None,
    }
}

/// Runs the Rabi × duration scan from `[rabi]` and writes maps, fits and the
/// feature report.
pub fn cmd_scan(cfg: &RunConfig, out: &Path, format: OutputFormat, ov: &Overrides) -> Result<Outcome, CliError> {
    let rabi_hz = cfg
        .rabi_grid_hz()
        .ok_or_else(|| CliError::Config("scan needs a [rabi] grid".into()))?;
    let result = run_scan(cfg, &rabi_hz, ov)?;
    ensure_dir(out)?;
    let taus = &result.duration_grid;

    let features: Vec<FeatureEntry> = find_features_with(&result, &cfg.feature_config())
        .into_iter()
        .map(|f| {
            let rabi = rabi_hz[f.grid_index];
            FeatureEntry {
                rabi_hz: rabi,
                polarity: f.polarity,
                tls_freq_hz: tls_freq_hz(cfg.qubit.freq_hz, rabi, f.polarity),
                t1rho_s: f.t1rho_at_feature,
            }
        })
        .collect();
    let failures: Vec<serde_json::Value> = result
        .failures
        .iter()
        .map(|f| json!({"rabi_hz": rabi_hz[f.rabi_index], "message": f.message}))
        .collect();
    let feature_file = FeatureFile {
        qubit_freq_hz: cfg.qubit.freq_hz,
        rabi_step_hz: (rabi_hz.len() > 1).then(|| (rabi_hz[rabi_hz.len() - 1] - rabi_hz[0]) / (rabi_hz.len() - 1) as f64),
        features,
        failures: failures.clone(),
    };
    write_json(&out.join("features.json"), &serde_json::to_value(&feature_file).expect("serializable"))?;

    let fits: Vec<serde_json::Value> = rabi_hz.iter().enumerate().map(|(i, &r)| fit_json(&result, i, r)).collect();
    let mut sidecar = json!({
        "config": cfg,
        "fits": fits,
        "failures": failures,
        "invariants": invariants_json(&result),
    });
    match format {
        OutputFormat::Csv => {
            write_file(&out.join("d_up.csv"), &map_csv(&rabi_hz, taus, &result.d_up))?;
            write_file(&out.join("d_down.csv"), &map_csv(&rabi_hz, taus, &result.d_down))?;
            write_file(&out.join("p.csv"), &map_csv(&rabi_hz, taus, &result.p))?;
            let mut s = String::from("rabi_hz,gamma_1rho,t1rho_s,converged\n");
            for (col, r) in result.fits.iter().zip(&rabi_hz) {
                let (g, conv) = match &col.fit {
                    Ok(f) => (f.gamma, f.converged),
                    Err(_) => (f64::NAN, false),
                };
                let _ = writeln!(s, "{},{},{},{}", fmt_f64(*r), fmt_f64(g), fmt_f64(1.0 / g), conv);
            }
            write_file(&out.join("fits.csv"), &s)?;
            sidecar["files"] = json!(["d_up.csv", "d_down.csv", "p.csv", "fits.csv", "features.json"]);
        }
        OutputFormat::Json => {
            sidecar["maps"] = json!({
                "rabi_hz": rabi_hz,
                "tau_s": taus,
                "d_up": result.d_up,
                "d_down": result.d_down,
                "p": result.p,
            });
        }
    }
    write_json(&out.join("scan.json"), &sidecar)?;
    if result.failures.is_empty() {
        Ok(Outcome::Complete)
    } else {
        Ok(Outcome::Partial(result.failures.len()))
    }
}

/// Fits a `tau_s,population` trace file.
pub fn cmd_fit(trace: &Path, model: FitModel, out: &Path) -> Result<Outcome, CliError> {
    let text = fs::read_to_string(trace).map_err(io_err(trace))?;
    let (taus, pops) = parse_trace_csv(&text)?;
    let fit = fit_decay(&taus, &pops, model).map_err(|e| CliError::Numerical(e.to_string()))?;
    ensure_dir(out)?;
    write_json(
        &out.join("fit.json"),
        &json!({
            "trace": trace.file_name().map(|n| n.to_string_lossy().into_owned()),
            "model": model,
            "gamma_1rho": fit.gamma,
            "gamma_1rho_stderr": fit.gamma_stderr,
            "t1rho_s": fit.t1rho(),
            "amplitude": fit.amplitude,
            "offset": fit.offset,
            "residual_rms": fit.residual_rms,
            "converged": fit.converged,
            "steady_level": steady_level(&pops),
        }),
    )?;
    Ok(Outcome::Complete)
}

// ---------------------------------------------------------------------------
// rates

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Lower sideband frozen at Γ₁(ω_q).
    #[default]
    OneSided,
    /// Symmetric average of both sidebands.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateRow {
    pub rabi_hz: f64,
    pub gamma_prime: f64,
    pub gamma_prime_half_inverse_s: f64,
}

/// Computed rows plus (rabi_hz, reason) for rows outside the table.
pub type RateReport = (Vec<RateRow>, Vec<(f64, String)>);

/// Sideband-averaged Γ′₁ for each Rabi frequency. Rows outside the table's
/// frequency range are returned separately.
pub fn compute_rates(
    table: &T1Table,
    qubit_freq_hz: f64,
    rabi_hz: &[f64],
    estimator: Estimator,
) -> Result<RateReport, CliError> {
    let spec = table.spectrum()?;
    let wq = hz_to_angular(qubit_freq_hz);
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &r in rabi_hz {
        let rabi = hz_to_angular(r);
        let gp = match estimator {
            Estimator::OneSided => gamma_prime_one_sided(&spec, wq, rabi),
            Estimator::Exact => gamma_prime_exact(&spec, wq, rabi),
        };
        match gp {
            Ok(g) => rows.push(RateRow {
                rabi_hz: r,
                gamma_prime: g,
                gamma_prime_half_inverse_s: 2.0 / g,
            }),
            Err(e) => skipped.push((r, e.to_string())),
        }
    }
    Ok((rows, skipped))
}

pub fn rates_csv(rows: &[RateRow]) -> String {
    let mut s = String::from("rabi_hz,gamma_prime,gamma_prime_half_inverse_s\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{}",
            fmt_f64(r.rabi_hz),
            fmt_f64(r.gamma_prime),
            fmt_f64(r.gamma_prime_half_inverse_s)
        );
    }
    s
}

pub fn cmd_rates(
    table_path: &Path,
    qubit_freq_hz: f64,
    rabi_hz: &[f64],
    estimator: Estimator,
    out: &Path,
    format: OutputFormat,
) -> Result<Outcome, CliError> {
    require(qubit_freq_hz > 0.0 && qubit_freq_hz.is_finite(), "qubit frequency", "must be positive")?;
    require(!rabi_hz.is_empty(), "rabi frequencies", "at least one is required")?;
    let table = T1Table::load(table_path)?;
    let (rows, skipped) = compute_rates(&table, qubit_freq_hz, rabi_hz, estimator)?;
    ensure_dir(out)?;
    for (r, msg) in &skipped {
        eprintln!("rates: skipping rabi_hz = {r}: {msg}");
    }
    let mut sidecar = json!({
        "qubit_freq_hz": qubit_freq_hz,
        "estimator": estimator,
        "table": table_path.file_name().map(|n| n.to_string_lossy().into_owned()),
        "out_of_domain": skipped.iter().map(|(r, m)| json!({"rabi_hz": r, "message": m})).collect::<Vec<_>>(),
    });
    match format {
        OutputFormat::Csv => write_file(&out.join("rates.csv"), &rates_csv(&rows))?,
        OutputFormat::Json => {
            sidecar["rows"] = rows
                .iter()
                .map(|r| {
                    json!({
                        "rabi_hz": r.rabi_hz,
                        "gamma_prime": r.gamma_prime,
                        "gamma_prime_half_inverse_s": r.gamma_prime_half_inverse_s,
                    })
                })
                .collect();
        }
    }
    write_json(&out.join("rates.json"), &sidecar)?;
    Ok(if skipped.is_empty() {
        Outcome::Complete
    } else {
        Outcome::Partial(skipped.len())
    })
}

// ---------------------------------------------------------------------------
// identify

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedDefect {
    pub source: String,
    pub rabi_hz: f64,
    pub qubit_freq_hz: f64,
    pub polarity: Polarity,
    pub tls_freq_hz: f64,
    pub t1rho_s: f64,
    /// Present when a detuned scan was supplied: whether the same defect
    /// frequency (and polarity) shows up in the other scan.
    pub consistent: Option<bool>,
}

fn load_features(dir: &Path) -> Result<FeatureFile, CliError> {
    let path = if dir.is_dir() { dir.join("features.json") } else { dir.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn place(file: &FeatureFile, qubit_freq_hz: f64, source: &str) -> Vec<IdentifiedDefect> {
    file.features
        .iter()
        .filter_map(|f| {
            let tls = tls_freq_hz(qubit_freq_hz, f.rabi_hz, f.polarity)?;
            Some(IdentifiedDefect {
                source: source.to_string(),
                rabi_hz: f.rabi_hz,
                qubit_freq_hz,
                polarity: f.polarity,
                tls_freq_hz: tls,
                t1rho_s: f.t1rho_s,
                consistent: None,
            })
        })
        .collect()
}

/// Places defects from one or two feature reports. With a detuned scan the
/// qubit sits at `qubit_freq_hz + delta_qubit_hz` there, and each defect is
/// flagged by whether the other scan places a same-polarity defect within
/// `tolerance_hz`.
pub fn identify(
    optimal: &FeatureFile,
    qubit_freq_hz: f64,
    detuned: Option<(&FeatureFile, f64)>,
    tolerance_hz: f64,
) -> Vec<IdentifiedDefect> {
    let mut found = place(optimal, qubit_freq_hz, "optimal");
    if let Some((other, delta)) = detuned {
        let mut shifted = place(other, qubit_freq_hz + delta, "detuned");
        let matches = |a: &IdentifiedDefect, pool: &[IdentifiedDefect]| {
            pool.iter()
                .any(|b| b.polarity == a.polarity && (b.tls_freq_hz - a.tls_freq_hz).abs() <= tolerance_hz)
        };
        let flags_a: Vec<bool> = found.iter().map(|a| matches(a, &shifted)).collect();
        let flags_b: Vec<bool> = shifted.iter().map(|b| matches(b, &found)).collect();
        for (d, f) in found.iter_mut().zip(flags_a) {
            d.consistent = Some(f);
        }
        for (d, f) in shifted.iter_mut().zip(flags_b) {
            d.consistent = Some(f);
        }
        found.extend(shifted);
    }
    found
}

pub fn cmd_identify(
    scan: &Path,
    qubit_freq_hz: Option<f64>,
    detuned: Option<(&Path, f64)>,
    tolerance_hz: f64,
    out: &Path,
) -> Result<Outcome, CliError> {
    let optimal = load_features(scan)?;
    let wq = qubit_freq_hz.unwrap_or(optimal.qubit_freq_hz);
    require(wq > 0.0 && wq.is_finite(), "qubit frequency", "must be positive")?;
    let other = match detuned {
        Some((p, d)) => Some((load_features(p)?, d)),
        None => None,
    };
    let defects = identify(&optimal, wq, other.as_ref().map(|(f, d)| (f, *d)), tolerance_hz);
    ensure_dir(out)?;
    write_json(
        &out.join("identify.json"),
        &json!({
            "qubit_freq_hz": wq,
            "delta_qubit_hz": detuned.map(|(_, d)| d),
            "tolerance_hz": tolerance_hz,
            "defects": defects,
        }),
    )?;
    Ok(Outcome::Complete)
}

// ---------------------------------------------------------------------------
// selftest

/// Fast invariant checks; prints one line per check.
pub fn cmd_selftest() -> Result<Outcome, CliError> {
    let mut failures = 0;
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let fig = SystemModel {
        qubit: QubitParams {
            omega_q: hz_to_angular(4.33e9),
            gamma1: 1.5e4,
            gamma2: 0.0,
        },
        defect: Some(DefectParams {
            delta_tls: hz_to_angular(51.3e6),
            gamma1: 1e6,
            gamma2: 0.0,
            coupling_g: hz_to_angular(28e3),
        }),
        drive: DriveParams::resonant(hz_to_angular(51.3e6)),
    };
    let h = build_rotating_hamiltonian(&fig).map_err(|e| CliError::Numerical(e.to_string()))?;
    let cs = build_collapse_operators(&fig);
    let t = 1e-6;
    let rho0 = initial_state(SequenceKind::S1);
    let traj = Integrator::default()
        .with_tolerance(1e-10)
        .keeping_states()
        .evolve(&rho0, &h, &cs, t, &linspace(0.0, t, 5))
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let inv = traj.invariants;
    report(
        "state invariants",
        inv.within_tolerances(),
        format!(
            "trace drift {:.1e}, hermiticity {:.1e}, min eigenvalue {:.1e}",
            inv.max_trace_drift, inv.max_hermiticity_error, inv.min_eigenvalue
        ),
    );
    let exact = propagator_oracle(&rho0, &h, &cs, t).map_err(|e| CliError::Numerical(e.to_string()))?;
    let diff = traj.states.as_ref().and_then(|s| s.last()).map_or(f64::INFINITY, |s| {
        s.matrix().max_abs_diff(exact.matrix())
    });
    report("integrator vs propagator", diff <= 1e-8, format!("max-norm {diff:.2e}"));

    let qubit_only = fig.with_defect(None);
    let hq = build_rotating_hamiltonian(&qubit_only).map_err(|e| CliError::Numerical(e.to_string()))?;
    let taus = linspace(0.0, 100e-6, 21);
    let decay = Integrator::default()
        .evolve(
            &initial_state_for(&qubit_only, SequenceKind::S1),
            &hq,
            &build_collapse_operators(&qubit_only),
            100e-6,
            &taus,
        )
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let worst = decay
        .times
        .iter()
        .zip(&decay.sigma_x_qubit)
        .map(|(t, x)| (x / (-0.75e4 * t).exp() - 1.0).abs())
        .fold(0.0, f64::max);
    report("spin-locked decay", worst <= 1e-6, format!("relative error {worst:.2e}"));

    let ps: Vec<f64> = taus.iter().map(|t| 0.5 + 0.5 * (-4.5e4 * t).exp()).collect();
    let fit = fit_decay(&taus, &ps, FitModel::Free).map_err(|e| CliError::Numerical(e.to_string()))?;
    let rel = (fit.gamma / 4.5e4 - 1.0).abs();
    report("exponential fit", rel <= 1e-6, format!("relative error {rel:.2e}"));

    let purcell = purcell_rate(hz_to_angular(28e3), 1e6).map_err(|e| CliError::Numerical(e.to_string()))?;
    report(
        "purcell estimate",
        format!("{purcell:.1e}") == "3.1e4",
        format!("{purcell:.4e} 1/s"),
    );

    if failures == 0 {
        Ok(Outcome::Complete)
    } else {
        Err(CliError::Numerical(format!("{failures} self-test check(s) failed")))
    }
}

// ---------------------------------------------------------------------------
// argument parsing

#[derive(Debug, Parser)]
#[command(name = "spinlock", version, about = "Spin-locking spectroscopy of a qubit coupled to TLS defects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; falls back to [output] dir, then the current directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub pulse_mode: Option<PulseModeArg>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate D↑, D↓ and P at one Rabi frequency.
    Simulate,
    /// Scan Rabi frequency × spin-lock duration and report features.
    Scan,
    /// Fit a decay to a tau_s,population trace file.
    Fit {
        #[arg(long)]
        trace: PathBuf,
        /// Use the fixed form (1 + e^(−Γτ))/2 instead of a free offset and amplitude.
        #[arg(long)]
        constrained: bool,
    },
    /// Estimate (Γ′₁/2)⁻¹ from a T₁ table.
    Rates {
        /// CSV with header flux,freq_hz,t1_s.
        #[arg(long)]
        table: PathBuf,
        /// Qubit frequency in Hz (default: [qubit] freq_hz from --config).
        #[arg(long)]
        qubit_freq_hz: Option<f64>,
        /// Comma-separated Rabi frequencies in Hz (default: [rabi] grid).
        #[arg(long, value_delimiter = ',')]
        rabi_hz: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Estimator::OneSided)]
        estimator: Estimator,
    },
    /// Turn scan features into defect frequencies.
    Identify {
        /// Scan output directory (or features.json) at the reference bias.
        #[arg(long)]
        scan: PathBuf,
        /// Qubit frequency in Hz (default: the one recorded in the scan).
        #[arg(long)]
        qubit_freq_hz: Option<f64>,
        /// Scan taken with the qubit shifted by --delta-qubit-hz.
        #[arg(long, requires = "delta_qubit_hz")]
        detuned_scan: Option<PathBuf>,
        #[arg(long)]
        delta_qubit_hz: Option<f64>,
        /// Maximum defect-frequency mismatch for the consistency flag.
        #[arg(long, default_value_t = 1e6)]
        tolerance_hz: f64,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    RunConfig::load(path)
}

pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    if cli.workers == Some(0) {
        return Err(CliError::Config("--workers must be >= 1".into()));
    }
    let ov = Overrides {
        workers: cli.workers,
        pulse_mode: cli.pulse_mode,
    };
    match &cli.command {
        Command::Simulate => {
            let cfg = load_config(cli)?;
            cmd_simulate(&cfg, &out_dir(cli, Some(&cfg)), cli.format, &ov)
        }
        Command::Scan => {
            let cfg = load_config(cli)?;
            cmd_scan(&cfg, &out_dir(cli, Some(&cfg)), cli.format, &ov)
        }
        Command::Fit { trace, constrained } => {
            let model = if *constrained { FitModel::Symmetric } else { FitModel::Free };
            cmd_fit(trace, model, &out_dir(cli, None))
        }
        Command::Rates {
            table,
            qubit_freq_hz,
            rabi_hz,
            estimator,
        } => {
            let cfg = cli.config.as_ref().map(|p| RunConfig::load(p)).transpose()?;
            let wq = qubit_freq_hz
                .or(cfg.as_ref().map(|c| c.qubit.freq_hz))
                .ok_or_else(|| CliError::Config("rates needs --qubit-freq-hz or --config".into()))?;
            let rabi = if rabi_hz.is_empty() {
                cfg.as_ref()
                    .and_then(RunConfig::rabi_grid_hz)
                    .ok_or_else(|| CliError::Config("rates needs --rabi-hz or a [rabi] grid".into()))?
            } else {
                rabi_hz.clone()
            };
            cmd_rates(table, wq, &rabi, *estimator, &out_dir(cli, cfg.as_ref()), cli.format)
        }
        Command::Identify {
            scan,
            qubit_freq_hz,
            detuned_scan,
            delta_qubit_hz,
            tolerance_hz,
        } => {
            let detuned = match (detuned_scan, delta_qubit_hz) {
                (Some(p), Some(d)) => Some((p.as_path(), *d)),
                (None, _) => None,
                (Some(_), None) => return Err(CliError::Config("--detuned-scan needs --delta-qubit-hz".into())),
            };
            cmd_identify(scan, *qubit_freq_hz, detuned, *tolerance_hz, &out_dir(cli, None))
        }
        Command::Selftest => cmd_selftest(),
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            if let Outcome::Partial(n) = outcome {
                eprintln!("completed with {n} failed row(s) or cell(s); see the JSON report");
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
