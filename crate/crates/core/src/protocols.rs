//! Spin-locking experiments: S1/S2 sequences, phase cycling, and the
//! Rabi-frequency × duration scan engine.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{fit_exponential, ExpFit, FitError};
use crate::dynamics::{DensityMatrix, DynamicsError, Integrator, InvariantSummary};
use crate::model::{
    build_collapse_operators, build_pulse_hamiltonian, build_rotating_hamiltonian, ground_state_for,
    initial_state_for, qubit_excited_projector, DefectParams, ModelError, SequenceKind, SystemModel,
};

/// Fraction of the duration grid, counted from the end, averaged for the
/// steady level.
pub const STEADY_WINDOW_FRACTION: f64 = 0.2;

/// Population bounds tolerance.
pub const POPULATION_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("invalid pulse sequence: {0}")]
    InvalidSequence(String),
    #[error("traces have different {0}")]
    GridMismatch(&'static str),
    #[error("scan grids must be non-empty")]
    EmptyGrid,
}

/// How the π/2 pulses around the spin-lock are realized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PulseMode {
    /// Instantaneous rotations folded into preparation and readout.
    #[default]
    Ideal,
    /// Rectangular y-pulses of the given length, with dissipation and
    /// coupling active.
    FiniteRect { pi_half_duration: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub kind: SequenceKind,
    pub rabi: f64,
    pub durations: Vec<f64>,
    pub pulse_mode: PulseMode,
}

impl PulseSequence {
    pub fn new(kind: SequenceKind, rabi: f64, durations: Vec<f64>, pulse_mode: PulseMode) -> Result<Self, ProtocolError> {
        let seq = Self {
            kind,
            rabi,
            durations,
            pulse_mode,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.rabi >= 0.0 && self.rabi.is_finite()) {
            return Err(ProtocolError::InvalidSequence(format!("rabi = {}", self.rabi)));
        }
        if self.durations.is_empty() {
            return Err(ProtocolError::InvalidSequence("no durations".into()));
        }
        if self.durations.iter().any(|&t| !(t >= 0.0 && t.is_finite())) {
            return Err(ProtocolError::InvalidSequence("durations must be non-negative".into()));
        }
        if !self.durations.windows(2).all(|w| w[0] < w[1]) {
            return Err(ProtocolError::InvalidSequence("durations must be strictly increasing".into()));
        }
        if let PulseMode::FiniteRect { pi_half_duration } = self.pulse_mode {
            if !(pi_half_duration > 0.0 && pi_half_duration.is_finite()) {
                return Err(ProtocolError::InvalidSequence(format!(
                    "pi_half_duration = {pi_half_duration}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    DUp,
    DDown,
    PhaseCycled,
}

impl Channel {
    pub fn of(kind: SequenceKind) -> Self {
        match kind {
            SequenceKind::S1 => Channel::DUp,
            SequenceKind::S2 => Channel::DDown,
        }
    }
}

/// Excited-state population versus spin-lock duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayTrace {
    pub rabi: f64,
    pub durations: Vec<f64>,
    pub populations: Vec<f64>,
    pub channel: Channel,
}

impl DecayTrace {
    /// Mean over the last [`STEADY_WINDOW_FRACTION`] of the samples (at least
    /// one).
    pub fn steady_level(&self) -> f64 {
        steady_level(&self.populations)
    }
}

pub fn steady_level(values: &[f64]) -> f64 {
    let n = values.len();
    let take = ((n as f64 * STEADY_WINDOW_FRACTION).round() as usize).clamp(1, n.max(1));
    values[n - take..].iter().sum::<f64>() / take as f64
}

/// A trace together with the integrator's invariant residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRun {
    pub trace: DecayTrace,
    pub invariants: InvariantSummary,
}

/// Runs one sequence; `seq.rabi` overrides the model's drive.
pub fn run_sequence(m: &SystemModel, seq: &PulseSequence) -> Result<DecayTrace, ProtocolError> {
    run_sequence_with(m, seq, &Integrator::default()).map(|r| r.trace)
}

pub fn run_sequence_with(
    m: &SystemModel,
    seq: &PulseSequence,
    integrator: &Integrator,
) -> Result<SequenceRun, ProtocolError> {
    seq.validate()?;
    let model = m.with_rabi(seq.rabi);
    model.validate()?;
    let h = build_rotating_hamiltonian(&model)?;
    let collapses = build_collapse_operators(&model);
    let last = *seq.durations.last().expect("validated non-empty");

    match seq.pulse_mode {
        PulseMode::Ideal => {
            let rho0 = initial_state_for(&model, seq.kind);
            let traj = integrator.evolve(&rho0, &h, &collapses, last, &seq.durations)?;
            let sign = seq.kind.lock_sign();
            let populations = traj.sigma_x_qubit.iter().map(|x| (1.0 + sign * x) / 2.0).collect();
            Ok(SequenceRun {
                trace: DecayTrace {
                    rabi: seq.rabi,
                    durations: seq.durations.clone(),
                    populations,
                    channel: Channel::of(seq.kind),
                },
                invariants: traj.invariants,
            })
        }
        PulseMode::FiniteRect { pi_half_duration } => {
            // S1 uses (−π/2)_Y pulses, S2 (+π/2)_Y; both start from the ground
            // state and read out the excited |0> population.
            let pulse_rabi = std::f64::consts::FRAC_PI_2 / pi_half_duration;
            let signed = -seq.kind.lock_sign() * pulse_rabi;
            let h_pulse = build_pulse_hamiltonian(&model, signed)?;
            let pulse = integrator.keeping_states();
            let mut invariants = InvariantSummary::default();

            let opened = pulse.evolve(
                &ground_state_for(&model),
                &h_pulse,
                &collapses,
                pi_half_duration,
                &[pi_half_duration],
            )?;
            invariants = invariants.merge(&opened.invariants);
            let locked_start = opened.states.expect("kept").pop().expect("one sample");

            let locked = pulse.evolve(&locked_start, &h, &collapses, last, &seq.durations)?;
            invariants = invariants.merge(&locked.invariants);
            let projector = qubit_excited_projector(model.dim());

            let mut populations = Vec::with_capacity(seq.durations.len());
            for state in locked.states.expect("kept") {
                let closed = pulse.evolve(&state, &h_pulse, &collapses, pi_half_duration, &[pi_half_duration])?;
                invariants = invariants.merge(&closed.invariants);
                let end: DensityMatrix = closed.states.expect("kept").pop().expect("one sample");
                populations.push(end.expect(&projector));
            }
            Ok(SequenceRun {
                trace: DecayTrace {
                    rabi: seq.rabi,
                    durations: seq.durations.clone(),
                    populations,
                    channel: Channel::of(seq.kind),
                },
                invariants,
            })
        }
    }
}

/// `P = (D↑ + D↓)/2` pointwise.
pub fn phase_cycle(up: &DecayTrace, down: &DecayTrace) -> Result<DecayTrace, ProtocolError> {
    if up.rabi != down.rabi {
        return Err(ProtocolError::GridMismatch("Rabi frequencies"));
    }
    if up.durations != down.durations || up.populations.len() != down.populations.len() {
        return Err(ProtocolError::GridMismatch("duration grids"));
    }
    Ok(DecayTrace {
        rabi: up.rabi,
        durations: up.durations.clone(),
        populations: up
            .populations
            .iter()
            .zip(&down.populations)
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
        channel: Channel::PhaseCycled,
    })
}

/// Scan settings beyond the grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub pulse_mode: PulseMode,
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
    pub integrator: Integrator,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            pulse_mode: PulseMode::Ideal,
            workers: None,
            integrator: Integrator::default(),
        }
    }
}

/// Decay fit and steady levels for one Rabi-frequency column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnFit {
    pub rabi: f64,
    pub fit: Result<ExpFit, FitError>,
    pub up_steady: f64,
    pub down_steady: f64,
}

impl ColumnFit {
    pub fn t1rho(&self) -> Option<f64> {
        self.fit.as_ref().ok().filter(|f| f.converged).map(|f| 1.0 / f.gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub rabi_index: usize,
    pub rabi: f64,
    pub message: String,
}

/// Maps of shape `rabi_grid.len() × duration_grid.len()`, row-major by Rabi
/// frequency. Failed columns hold NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub omega_q: f64,
    pub rabi_grid: Vec<f64>,
    pub duration_grid: Vec<f64>,
    pub d_up: Vec<Vec<f64>>,
    pub d_down: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub fits: Vec<ColumnFit>,
    pub failures: Vec<CellFailure>,
    pub invariants: InvariantSummary,
}

impl ScanResult {
    pub fn t1rho_column(&self) -> Vec<Option<f64>> {
        self.fits.iter().map(ColumnFit::t1rho).collect()
    }
}

struct Column {
    up: Vec<f64>,
    down: Vec<f64>,
    invariants: InvariantSummary,
}

fn run_pair(
    m: &SystemModel,
    rabi: f64,
    durations: &[f64],
    opts: &ScanOptions,
) -> Result<Column, ProtocolError> {
    let mut traces = Vec::with_capacity(2);
    let mut invariants = InvariantSummary::default();
    for kind in [SequenceKind::S1, SequenceKind::S2] {
        let seq = PulseSequence::new(kind, rabi, durations.to_vec(), opts.pulse_mode)?;
        let run = run_sequence_with(m, &seq, &opts.integrator)?;
        invariants = invariants.merge(&run.invariants);
        traces.push(run.trace.populations);
    }
    let down = traces.pop().expect("two traces");
    let up = traces.pop().expect("two traces");
    Ok(Column { up, down, invariants })
}

/// Composes single-defect responses: each defect contributes its deviation
/// from the defect-free baseline, and the sum is clipped to [0, 1].
fn scan_column(
    template: &SystemModel,
    defects: &[DefectParams],
    rabi: f64,
    durations: &[f64],
    opts: &ScanOptions,
) -> Result<Column, ProtocolError> {
    let base = run_pair(&template.with_defect(None), rabi, durations, opts)?;
    if defects.is_empty() {
        return Ok(base);
    }
    let mut up = base.up.clone();
    let mut down = base.down.clone();
    let mut invariants = base.invariants;
    for defect in defects {
        let pair = run_pair(&template.with_defect(Some(*defect)), rabi, durations, opts)?;
        invariants = invariants.merge(&pair.invariants);
        for i in 0..durations.len() {
            up[i] += pair.up[i] - base.up[i];
            down[i] += pair.down[i] - base.down[i];
        }
    }
    for v in up.iter_mut().chain(down.iter_mut()) {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Column { up, down, invariants })
}

/// Simulates D↑ and D↓ for every Rabi frequency and fits the phase-cycled
/// decay of each column. The template's own defect is ignored; `defects`
/// lists every defect to include.
pub fn scan(
    template: &SystemModel,
    defects: &[DefectParams],
    rabi_grid: &[f64],
    duration_grid: &[f64],
    opts: &ScanOptions,
) -> Result<ScanResult, ProtocolError> {
    if rabi_grid.is_empty() || duration_grid.is_empty() {
        return Err(ProtocolError::EmptyGrid);
    }
    template.with_defect(None).validate()?;
    for d in defects {
        d.validate()?;
    }
    PulseSequence::new(SequenceKind::S1, 0.0, duration_grid.to_vec(), opts.pulse_mode)?;

    let compute = || -> Vec<Result<Column, ProtocolError>> {
        rabi_grid
            .par_iter()
            .map(|&rabi| scan_column(template, defects, rabi, duration_grid, opts))
            .collect()
    };
    let columns = match opts.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| ProtocolError::InvalidSequence(format!("thread pool: {e}")))?
            .install(compute),
        None => compute(),
    };

    let n_tau = duration_grid.len();
    let mut result = ScanResult {
        omega_q: template.qubit.omega_q,
        rabi_grid: rabi_grid.to_vec(),
        duration_grid: duration_grid.to_vec(),
        d_up: Vec::with_capacity(rabi_grid.len()),
        d_down: Vec::with_capacity(rabi_grid.len()),
        p: Vec::with_capacity(rabi_grid.len()),
        fits: Vec::with_capacity(rabi_grid.len()),
        failures: Vec::new(),
        invariants: InvariantSummary::default(),
    };
    for (idx, (column, &rabi)) in columns.into_iter().zip(rabi_grid).enumerate() {
        match column {
            Ok(col) => {
                result.invariants = result.invariants.merge(&col.invariants);
                result.d_up.push(col.up);
                result.d_down.push(col.down);
            }
            Err(e) => {
                result.failures.push(CellFailure {
                    rabi_index: idx,
                    rabi,
                    message: e.to_string(),
                });
                result.d_up.push(vec![f64::NAN; n_tau]);
                result.d_down.push(vec![f64::NAN; n_tau]);
            }
        }
    }
    refit(&mut result);
    Ok(result)
}

/// Recomputes `p` and the per-column fits from `d_up` and `d_down`, e.g.
/// after the maps have been perturbed.
pub fn refit(result: &mut ScanResult) {
    result.p.clear();
    result.fits.clear();
    for (i, &rabi) in result.rabi_grid.iter().enumerate() {
        let (up, down) = (&result.d_up[i], &result.d_down[i]);
        let p: Vec<f64> = up.iter().zip(down).map(|(a, b)| 0.5 * (a + b)).collect();
        let failed = result.failures.iter().find(|f| f.rabi_index == i);
        let fit = match failed {
            Some(f) => Err(FitError::Failed(f.message.clone())),
            None => fit_exponential(&DecayTrace {
                rabi,
                durations: result.duration_grid.clone(),
                populations: p.clone(),
                channel: Channel::PhaseCycled,
            }),
        };
        result.fits.push(ColumnFit {
            rabi,
            fit,
            up_steady: steady_level(up),
            down_steady: steady_level(down),
        });
        result.p.push(p);
    }
}

/// Evenly spaced grid including both ends (`count == 1` gives `[start]`).
pub fn linspace(start: f64, stop: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let step = (stop - start) / (count - 1) as f64;
            (0..count)
                .map(|i| if i == count - 1 { stop } else { start + step * i as f64 })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{hz_to_angular, DriveParams, QubitParams};

    fn qubit_only(gamma1: f64) -> SystemModel {
        SystemModel {
            qubit: QubitParams {
                omega_q: hz_to_angular(4.33e9),
                gamma1,
                gamma2: 0.0,
            },
            defect: None,
            drive: DriveParams::resonant(0.0),
        }
    }

    fn trace(pops: Vec<f64>, channel: Channel) -> DecayTrace {
        DecayTrace {
            rabi: 1.0,
            durations: (0..pops.len()).map(|i| i as f64).collect(),
            populations: pops,
            channel,
        }
    }

    #[test]
    fn s1_at_zero_duration_is_fully_excited() {
        let m = qubit_only(1.5e4);
        let seq = PulseSequence::new(SequenceKind::S1, hz_to_angular(30e6), vec![0.0], PulseMode::Ideal).unwrap();
        let t = run_sequence(&m, &seq).unwrap();
        assert_eq!(t.populations, vec![1.0]);
        assert_eq!(t.channel, Channel::DUp);
    }

    #[test]
    fn sequence_validation() {
        assert!(PulseSequence::new(SequenceKind::S1, 1.0, vec![1.0, 0.5], PulseMode::Ideal).is_err());
        assert!(PulseSequence::new(SequenceKind::S1, 1.0, vec![-1.0], PulseMode::Ideal).is_err());
        assert!(PulseSequence::new(
            SequenceKind::S1,
            1.0,
            vec![0.0],
            PulseMode::FiniteRect { pi_half_duration: 0.0 }
        )
        .is_err());
    }

    #[test]
    fn phase_cycle_cases() {
        let up = trace(vec![1.0, 0.8, 0.6], Channel::DUp);
        let same = phase_cycle(&up, &DecayTrace { channel: Channel::DDown, ..up.clone() }).unwrap();
        assert_eq!(same.populations, up.populations);
        assert_eq!(same.channel, Channel::PhaseCycled);

        let down = trace(up.populations.iter().map(|p| 1.0 - p).collect(), Channel::DDown);
        let p = phase_cycle(&up, &down).unwrap();
        assert!(p.populations.iter().all(|&x| (x - 0.5).abs() < 1e-15));

        let short = trace(vec![1.0, 0.8], Channel::DDown);
        assert!(matches!(phase_cycle(&up, &short), Err(ProtocolError::GridMismatch(_))));
    }

    #[test]
    fn steady_level_uses_final_fifth() {
        let v: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(steady_level(&v), 8.5);
        assert_eq!(steady_level(&[3.0]), 3.0);
    }

    #[test]
    fn finite_pulses_match_ideal_for_isolated_qubit() {
        let m = qubit_only(1.5e4);
        let durations = linspace(0.0, 40e-6, 5);
        let ideal = PulseSequence::new(SequenceKind::S2, hz_to_angular(30e6), durations.clone(), PulseMode::Ideal)
            .unwrap();
        let finite = PulseSequence {
            pulse_mode: PulseMode::FiniteRect { pi_half_duration: 20e-9 },
            ..ideal.clone()
        };
        let a = run_sequence(&m, &ideal).unwrap();
        let b = run_sequence(&m, &finite).unwrap();
        for (x, y) in a.populations.iter().zip(&b.populations) {
            // pulses add 40 ns of decay at most
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn defect_free_steady_level_is_mixed() {
        let m = qubit_only(1.5e4);
        // steady window starts at 1.6 ms, where e^(-Γ1 τ/2) < 1e-5
        let durations = linspace(0.0, 2e-3, 41);
        let mut ps = Vec::new();
        for kind in [SequenceKind::S1, SequenceKind::S2] {
            let seq = PulseSequence::new(kind, hz_to_angular(40e6), durations.clone(), PulseMode::Ideal).unwrap();
            ps.push(run_sequence(&m, &seq).unwrap());
        }
        let p = phase_cycle(&ps[0], &ps[1]).unwrap();
        assert!((p.steady_level() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn defect_free_scan_decays_at_half_gamma1() {
        let gamma1 = 1.5e4;
        let rabi = linspace(hz_to_angular(20e6), hz_to_angular(80e6), 3);
        let durations = linspace(0.0, 200e-6, 41);
        let r = scan(&qubit_only(gamma1), &[], &rabi, &durations, &ScanOptions::default()).unwrap();
        assert!(r.failures.is_empty());
        for fit in &r.fits {
            let g = fit.fit.as_ref().unwrap().gamma;
            assert!((g - gamma1 / 2.0).abs() <= 0.01 * gamma1 / 2.0, "{g}");
        }
        for row in r.d_up.iter().chain(&r.d_down) {
            assert!(row.iter().all(|&p| (-POPULATION_TOL..=1.0 + POPULATION_TOL).contains(&p)));
        }
    }

    #[test]
    fn empty_grids_rejected() {
        assert_eq!(
            scan(&qubit_only(1.0), &[], &[], &[0.0], &ScanOptions::default()),
            Err(ProtocolError::EmptyGrid)
        );
    }

    #[test]
    fn linspace_endpoints() {
        assert_eq!(linspace(1.0, 2.0, 1), vec![1.0]);
        let g = linspace(40.0, 62.0, 41);
        assert_eq!(g.len(), 41);
        assert_eq!(g[40], 62.0);
        assert!((g[1] - 40.55).abs() < 1e-12);
    }
}
