//! Lindblad time evolution.
//!
//! Two independent routes are provided:
//!
//! * [`Integrator::evolve`]: fixed-step classical Runge–Kutta (RK4) on
//!   `dρ/dt = −i[H, ρ] + Σ_k (c_k ρ c_k† − ½{c_k†c_k, ρ})`, re-hermitizing
//!   the state after every step.
//! * [`propagator_oracle`]: `exp(L t)` of the column-stacked Liouvillian
//!   superoperator, used to check the integrator.
//!
//! The generator is linear and constant during an `evolve` call, so one RK4
//! step is exactly the polynomial `I + hL + (hL)²/2 + (hL)³/6 + (hL)⁴/24`
//! applied to the state. The integrator builds that step map once, with `L`
//! obtained by applying [`lindblad_rhs`] to the matrix units in row-major
//! order, and then iterates it. [`rk4_step`] is the stage-by-stage form of
//! the same update.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::qubit_sigma_x;
use crate::qlinalg::{eigvalsh, expm, hermitize_in_place, kron, ComplexMatrix, LinalgError, StateVector, C64, ONE, ZERO};

pub const HERMITICITY_TOL: f64 = 1e-9;
pub const TRACE_TOL: f64 = 1e-9;
pub const POSITIVITY_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dimension mismatch: state is {state}x{state}, operator is {op_rows}x{op_cols}")]
    DimensionMismatch {
        state: usize,
        op_rows: usize,
        op_cols: usize,
    },
    #[error("not a density matrix: {0}")]
    InvalidState(String),
    #[error("Hamiltonian is not Hermitian (error {0:e})")]
    NonHermitianHamiltonian(f64),
    #[error("sample times must be strictly increasing within [0, {duration}]")]
    InvalidSampleTimes { duration: f64 },
    #[error("{required} steps of {step:e} s needed, cap is {cap}")]
    StepUnderflow { required: u64, step: f64, cap: u64 },
    #[error("trace drifted by {drift:e} at t = {time:e} s (limit {limit:e})")]
    TraceDrift { time: f64, drift: f64, limit: f64 },
    #[error("superoperator oracle supports dimension <= 4, got {0}")]
    DimensionTooLarge(usize),
}

/// Hermitian, unit-trace, positive semidefinite state (to numerical
/// tolerance).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: ComplexMatrix,
}

impl DensityMatrix {
    /// Validates Hermiticity, trace and positivity.
    pub fn new(matrix: ComplexMatrix) -> Result<Self, DynamicsError> {
        if !matrix.is_square() {
            return Err(DynamicsError::InvalidState(format!(
                "{}x{} is not square",
                matrix.rows(),
                matrix.cols()
            )));
        }
        let herm = matrix.hermiticity_error();
        if herm > HERMITICITY_TOL {
            return Err(DynamicsError::InvalidState(format!("hermiticity error {herm:e}")));
        }
        let tr = matrix.trace();
        if (tr - ONE).norm() > TRACE_TOL {
            return Err(DynamicsError::InvalidState(format!("trace {tr}")));
        }
        let rho = Self { matrix };
        let min = rho.min_eigenvalue();
        if min < -POSITIVITY_TOL {
            return Err(DynamicsError::InvalidState(format!("eigenvalue {min:e}")));
        }
        Ok(rho)
    }

    pub fn from_pure(psi: &StateVector) -> Self {
        Self {
            matrix: psi.projector(),
        }
    }

    /// The maximally mixed state `I/dim`.
    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            matrix: ComplexMatrix::identity(dim).scale_real(1.0 / dim as f64),
        }
    }

    /// Wraps an integrator output without the eigenvalue check.
    pub(crate) fn from_evolved(matrix: ComplexMatrix) -> Self {
        Self { matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    /// `tr(ρ·op)`, real part.
    pub fn expect(&self, op: &ComplexMatrix) -> f64 {
        expectation(&self.matrix, op)
    }

    pub fn purity(&self) -> f64 {
        (&self.matrix * &self.matrix).trace().re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        eigvalsh(&self.matrix).map_or(f64::NAN, |v| v[0])
    }

    /// `½ Σ |λ_i(ρ − σ)|`
    pub fn trace_distance(&self, other: &Self) -> f64 {
        let diff = &self.matrix - &other.matrix;
        0.5 * eigvalsh(&diff).expect("square").iter().map(|x| x.abs()).sum::<f64>()
    }

    pub fn sigma_x_qubit(&self) -> f64 {
        self.expect(&qubit_sigma_x(self.dim()))
    }
}

fn expectation(rho: &ComplexMatrix, op: &ComplexMatrix) -> f64 {
    let n = rho.rows();
    let mut acc = ZERO;
    for i in 0..n {
        for k in 0..n {
            acc += rho[(i, k)] * op[(k, i)];
        }
    }
    acc.re
}

fn check_operator(dim: usize, op: &ComplexMatrix) -> Result<(), DynamicsError> {
    if op.rows() != dim || op.cols() != dim {
        return Err(DynamicsError::DimensionMismatch {
            state: dim,
            op_rows: op.rows(),
            op_cols: op.cols(),
        });
    }
    Ok(())
}

fn check_generator(dim: usize, h: &ComplexMatrix, collapses: &[ComplexMatrix]) -> Result<(), DynamicsError> {
    check_operator(dim, h)?;
    for c in collapses {
        check_operator(dim, c)?;
    }
    let herm = h.hermiticity_error();
    if herm > HERMITICITY_TOL * h.max_norm().max(1.0) {
        return Err(DynamicsError::NonHermitianHamiltonian(herm));
    }
    Ok(())
}

/// Lindblad generator applied to `rho`; the result is traceless and
/// Hermitian.
pub fn lindblad_rhs(
    rho: &DensityMatrix,
    h: &ComplexMatrix,
    collapses: &[ComplexMatrix],
) -> Result<ComplexMatrix, DynamicsError> {
    check_generator(rho.dim(), h, collapses)?;
    Ok(rhs_unchecked(rho.matrix(), h, collapses))
}

/// The same generator on an arbitrary square matrix (not necessarily a state).
pub fn lindblad_generator(
    x: &ComplexMatrix,
    h: &ComplexMatrix,
    collapses: &[ComplexMatrix],
) -> Result<ComplexMatrix, DynamicsError> {
    check_generator(x.rows(), h, collapses)?;
    Ok(rhs_unchecked(x, h, collapses))
}

fn rhs_unchecked(x: &ComplexMatrix, h: &ComplexMatrix, collapses: &[ComplexMatrix]) -> ComplexMatrix {
    let minus_i = C64::new(0.0, -1.0);
    let mut out = (&(h * x) - &(x * h)).scale(minus_i);
    for c in collapses {
        let cd = c.dagger();
        let cdc = &cd * c;
        let jump = &(c * x) * &cd;
        let anti = &(&cdc * x) + &(x * &cdc);
        out = &out + &(&jump - &anti.scale_real(0.5));
    }
    out
}

/// One classical RK4 step of size `dt`, stage by stage.
pub fn rk4_step(
    rho: &ComplexMatrix,
    h: &ComplexMatrix,
    collapses: &[ComplexMatrix],
    dt: f64,
) -> ComplexMatrix {
    let f = |x: &ComplexMatrix| rhs_unchecked(x, h, collapses);
    let k1 = f(rho);
    let k2 = f(&(rho + &k1.scale_real(dt / 2.0)));
    let k3 = f(&(rho + &k2.scale_real(dt / 2.0)));
    let k4 = f(&(rho + &k3.scale_real(dt)));
    let sum = &(&(&k1 + &k2.scale_real(2.0)) + &k3.scale_real(2.0)) + &k4;
    rho + &sum.scale_real(dt / 6.0)
}

/// Expectation values (and optionally states) at the requested sample times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub sigma_x_qubit: Vec<f64>,
    #[serde(skip)]
    pub states: Option<Vec<DensityMatrix>>,
    pub invariants: InvariantSummary,
}

/// Worst-case invariant residuals over the sampled states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvariantSummary {
    pub max_trace_drift: f64,
    pub max_hermiticity_error: f64,
    pub min_eigenvalue: f64,
}

impl Default for InvariantSummary {
    fn default() -> Self {
        Self {
            max_trace_drift: 0.0,
            max_hermiticity_error: 0.0,
            min_eigenvalue: f64::INFINITY,
        }
    }
}

impl InvariantSummary {
    fn record(&mut self, rho: &ComplexMatrix) {
        self.max_trace_drift = self.max_trace_drift.max((rho.trace() - ONE).norm());
        self.max_hermiticity_error = self.max_hermiticity_error.max(rho.hermiticity_error());
        let min = eigvalsh(rho).map_or(f64::NAN, |v| v[0]);
        self.min_eigenvalue = self.min_eigenvalue.min(min);
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            max_trace_drift: self.max_trace_drift.max(other.max_trace_drift),
            max_hermiticity_error: self.max_hermiticity_error.max(other.max_hermiticity_error),
            min_eigenvalue: self.min_eigenvalue.min(other.min_eigenvalue),
        }
    }

    pub fn within_tolerances(&self) -> bool {
        self.max_trace_drift <= TRACE_TOL
            && self.max_hermiticity_error <= HERMITICITY_TOL
            && self.min_eigenvalue >= -POSITIVITY_TOL
    }
}

/// Fixed-step RK4 settings.
///
/// The step is the largest `h` satisfying every bound:
/// `h ≤ (2π/ω_fast)/steps_per_period`, where ω_fast is the eigenvalue
/// spread of `H`; `h ≤ rate_fraction/Γ_total`; and, when `tolerance` is set,
/// `h ≤ (120·tol / (T·ω⁵))^(1/4)` with `ω = ω_fast + Γ_total`, the leading
/// RK4 global-error term over a run of length `T`. Each gap between sample
/// times is split into equal steps no larger than that.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Integrator {
    pub steps_per_period: f64,
    pub rate_fraction: f64,
    pub tolerance: Option<f64>,
    pub max_steps: u64,
    /// Abort when `|tr ρ − 1|` exceeds this at a sample.
    pub trace_limit: f64,
    pub keep_states: bool,
}

impl Default for Integrator {
    fn default() -> Self {
        Self {
            steps_per_period: 50.0,
            rate_fraction: 0.01,
            tolerance: None,
            max_steps: 200_000_000,
            trace_limit: 1e-6,
            keep_states: false,
        }
    }
}

impl Integrator {
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = Some(tol);
        self
    }

    pub fn keeping_states(mut self) -> Self {
        self.keep_states = true;
        self
    }

    /// Largest admissible step for this generator over a run of `duration`.
    pub fn max_step(&self, h: &ComplexMatrix, collapses: &[ComplexMatrix], duration: f64) -> f64 {
        let spread = eigvalsh(h).map_or(0.0, |v| v[v.len() - 1] - v[0]);
        let total_rate: f64 = collapses.iter().map(|c| (&c.dagger() * c).norm_inf()).sum();
        let mut step = f64::INFINITY;
        if spread > 0.0 {
            step = step.min(std::f64::consts::TAU / spread / self.steps_per_period);
        }
        if total_rate > 0.0 {
            step = step.min(self.rate_fraction / total_rate);
        }
        if let Some(tol) = self.tolerance {
            let omega = spread + total_rate;
            if omega > 0.0 && duration > 0.0 {
                step = step.min((120.0 * tol / (duration * omega.powi(5))).powf(0.25));
            }
        }
        step
    }

    /// Integrates from `rho0` at t = 0 and samples ⟨σ_x⁽¹⁾⟩ at
    /// `sample_times`.
    pub fn evolve(
        &self,
        rho0: &DensityMatrix,
        h: &ComplexMatrix,
        collapses: &[ComplexMatrix],
        duration: f64,
        sample_times: &[f64],
    ) -> Result<Trajectory, DynamicsError> {
        let n = rho0.dim();
        check_generator(n, h, collapses)?;
        let ordered = sample_times.windows(2).all(|w| w[0] < w[1]);
        let in_range = sample_times.iter().all(|&t| (0.0..=duration).contains(&t));
        if !ordered || !in_range || !duration.is_finite() {
            return Err(DynamicsError::InvalidSampleTimes { duration });
        }

        let h_max = self.max_step(h, collapses, duration);
        let mut plan = Vec::with_capacity(sample_times.len());
        let mut total: u64 = 0;
        let mut prev = 0.0;
        for &t in sample_times {
            let gap = t - prev;
            let steps = if gap > 0.0 {
                let s = (gap / h_max).ceil();
                if s > self.max_steps as f64 {
                    return Err(DynamicsError::StepUnderflow {
                        required: u64::MAX,
                        step: h_max,
                        cap: self.max_steps,
                    });
                }
                (s as u64).max(1)
            } else {
                0
            };
            total = total.saturating_add(steps);
            plan.push((gap, steps));
            prev = t;
        }
        if total > self.max_steps {
            return Err(DynamicsError::StepUnderflow {
                required: total,
                step: h_max,
                cap: self.max_steps,
            });
        }

        let generator = generator_matrix(n, h, collapses);
        let sx = qubit_sigma_x(n);
        let mut maps: HashMap<u64, ComplexMatrix> = HashMap::new();
        let mut state = rho0.matrix().as_slice().to_vec();
        let mut scratch = vec![ZERO; n * n];
        let mut traj = Trajectory {
            times: Vec::with_capacity(sample_times.len()),
            sigma_x_qubit: Vec::with_capacity(sample_times.len()),
            states: self.keep_states.then(Vec::new),
            invariants: InvariantSummary::default(),
        };

        for (&t, &(gap, steps)) in sample_times.iter().zip(&plan) {
            if steps > 0 {
                let dt = gap / steps as f64;
                let map = maps
                    .entry(dt.to_bits())
                    .or_insert_with(|| rk4_step_map(&generator, dt));
                let m = map.as_slice();
                let dim2 = n * n;
                for _ in 0..steps {
                    for (i, out) in scratch.iter_mut().enumerate() {
                        let row = &m[i * dim2..(i + 1) * dim2];
                        *out = row.iter().zip(&state).map(|(a, b)| a * b).sum();
                    }
                    std::mem::swap(&mut state, &mut scratch);
                    hermitize_in_place(&mut state, n);
                }
            }
            let rho = ComplexMatrix::from_vec(n, n, state.clone())?;
            let drift = (rho.trace() - ONE).norm();
            if drift > self.trace_limit || !rho.is_finite() {
                return Err(DynamicsError::TraceDrift {
                    time: t,
                    drift,
                    limit: self.trace_limit,
                });
            }
            traj.invariants.record(&rho);
            traj.times.push(t);
            traj.sigma_x_qubit.push(expectation(&rho, &sx));
            if let Some(states) = traj.states.as_mut() {
                states.push(DensityMatrix::from_evolved(rho));
            }
        }
        Ok(traj)
    }
}

/// [`Integrator::evolve`] with default settings.
pub fn evolve(
    rho0: &DensityMatrix,
    h: &ComplexMatrix,
    collapses: &[ComplexMatrix],
    duration: f64,
    sample_times: &[f64],
) -> Result<Trajectory, DynamicsError> {
    Integrator::default().evolve(rho0, h, collapses, duration, sample_times)
}

/// Generator acting on row-major flattened matrices, built column by column
/// from the right-hand side evaluated on matrix units.
fn generator_matrix(n: usize, h: &ComplexMatrix, collapses: &[ComplexMatrix]) -> ComplexMatrix {
    let d = n * n;
    let mut gen = ComplexMatrix::zeros(d, d);
    for k in 0..d {
        let mut unit = ComplexMatrix::zeros(n, n);
        unit.as_mut_slice()[k] = ONE;
        let image = rhs_unchecked(&unit, h, collapses);
        for (row, &z) in image.as_slice().iter().enumerate() {
            gen[(row, k)] = z;
        }
    }
    gen
}

/// `I + hL(I + hL/2(I + hL/3(I + hL/4)))`
fn rk4_step_map(generator: &ComplexMatrix, dt: f64) -> ComplexMatrix {
    let d = generator.rows();
    let id = ComplexMatrix::identity(d);
    let hl = generator.scale_real(dt);
    let mut acc = id.clone();
    for k in [4.0, 3.0, 2.0, 1.0] {
        acc = &id + &(&hl * &acc).scale_real(1.0 / k);
    }
    acc
}

/// Column-stacking vectorization: `vec(ρ)[i + n·j] = ρ[i, j]`.
pub fn vectorize(rho: &ComplexMatrix) -> Vec<C64> {
    let n = rho.rows();
    let mut v = Vec::with_capacity(n * rho.cols());
    for j in 0..rho.cols() {
        for i in 0..n {
            v.push(rho[(i, j)]);
        }
    }
    v
}

pub fn unvectorize(v: &[C64], n: usize) -> ComplexMatrix {
    let mut m = ComplexMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            m[(i, j)] = v[i + n * j];
        }
    }
    m
}

/// Liouvillian superoperator for column-stacked states:
/// `L = −i(I⊗H − Hᵀ⊗I) + Σ_k [c̄_k⊗c_k − ½(I⊗c_k†c_k + (c_k†c_k)ᵀ⊗I)]`.
pub fn liouvillian(h: &ComplexMatrix, collapses: &[ComplexMatrix]) -> Result<ComplexMatrix, DynamicsError> {
    let n = h.rows();
    check_generator(n, h, collapses)?;
    let id = ComplexMatrix::identity(n);
    let mut l = (&kron(&id, h) - &kron(&h.transpose(), &id)).scale(C64::new(0.0, -1.0));
    for c in collapses {
        let cdc = &c.dagger() * c;
        let anti = &kron(&id, &cdc) + &kron(&cdc.transpose(), &id);
        l = &l + &(&kron(&c.conj(), c) - &anti.scale_real(0.5));
    }
    Ok(l)
}

/// `unvec(exp(L t)·vec(ρ₀))`
pub fn propagator_oracle(
    rho0: &DensityMatrix,
    h: &ComplexMatrix,
    collapses: &[ComplexMatrix],
    t: f64,
) -> Result<DensityMatrix, DynamicsError> {
    let n = rho0.dim();
    if n > 4 {
        return Err(DynamicsError::DimensionTooLarge(n));
    }
    check_generator(n, h, collapses)?;
    if t == 0.0 {
        return Ok(rho0.clone());
    }
    let prop = expm(&liouvillian(h, collapses)?.scale_real(t))?;
    let v = prop.apply(&vectorize(rho0.matrix()))?;
    Ok(DensityMatrix::from_evolved(unvectorize(&v, n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        build_collapse_operators, build_rotating_hamiltonian, initial_state, initial_state_for, DefectParams,
        DriveParams, QubitParams, SequenceKind, SystemModel,
    };
    use crate::qlinalg::{hermitize, pauli};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_density(rng: &mut ChaCha8Rng, n: usize) -> DensityMatrix {
        // A·A† / tr is positive with unit trace
        let a = ComplexMatrix::from_vec(
            n,
            n,
            (0..n * n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect(),
        )
        .unwrap();
        let p = &a * &a.dagger();
        let tr = p.trace().re;
        DensityMatrix::new(hermitize(&p.scale_real(1.0 / tr)).unwrap()).unwrap()
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> ComplexMatrix {
        let a = ComplexMatrix::from_vec(
            n,
            n,
            (0..n * n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect(),
        )
        .unwrap();
        hermitize(&a.scale_real(scale)).unwrap()
    }

    fn coupled_model(rabi_hz: f64, delta_hz: f64, g_hz: f64) -> SystemModel {
        SystemModel {
            qubit: QubitParams {
                omega_q: 2.0 * std::f64::consts::PI * 4.33e9,
                gamma1: 1.5e4,
                gamma2: 2e3,
            },
            defect: Some(DefectParams {
                delta_tls: std::f64::consts::TAU * delta_hz,
                gamma1: 1e6,
                gamma2: 5e4,
                coupling_g: std::f64::consts::TAU * g_hz,
            }),
            drive: DriveParams::resonant(std::f64::consts::TAU * rabi_hz),
        }
    }

    #[test]
    fn density_matrix_validation() {
        assert!(DensityMatrix::new(ComplexMatrix::identity(2)).is_err());
        assert!(DensityMatrix::new(ComplexMatrix::diag(&[C64::new(1.5, 0.0), C64::new(-0.5, 0.0)])).is_err());
        assert!(DensityMatrix::new(ComplexMatrix::identity(2).scale_real(0.5)).is_ok());
    }

    #[test]
    fn maximally_mixed_is_stationary_without_dissipation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_hermitian(&mut rng, 4, 3.0);
        let d = lindblad_rhs(&DensityMatrix::maximally_mixed(4), &h, &[]).unwrap();
        assert!(d.max_norm() < 1e-15);
    }

    #[test]
    fn excited_population_decays_at_gamma1() {
        let gamma: f64 = 2.5e4;
        let rho = DensityMatrix::from_pure(&StateVector::basis(2, 0));
        let c = pauli::lowering().scale_real(gamma.sqrt());
        let d = lindblad_rhs(&rho, &ComplexMatrix::zeros(2, 2), &[c]).unwrap();
        assert!((d[(0, 0)].re + gamma).abs() < 1e-9);
        assert!((d[(1, 1)].re - gamma).abs() < 1e-9);
    }

    #[test]
    fn rhs_rejects_dimension_mismatch() {
        let rho = DensityMatrix::maximally_mixed(4);
        assert!(matches!(
            lindblad_rhs(&rho, &ComplexMatrix::zeros(2, 2), &[]),
            Err(DynamicsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rhs_is_traceless_and_hermitian_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let rho = random_density(&mut rng, 4);
            let h = random_hermitian(&mut rng, 4, 1e8);
            let cs: Vec<_> = (0..3)
                .map(|_| {
                    let a = random_hermitian(&mut rng, 4, 1.0);
                    let b = random_hermitian(&mut rng, 4, 1.0);
                    (&a + &b.scale(C64::new(0.0, 1.0))).scale_real(rng.gen_range(0.0..3e3))
                })
                .collect();
            let d = lindblad_rhs(&rho, &h, &cs).unwrap();
            let scale = d.max_norm().max(1.0);
            assert!(d.trace().norm() <= 1e-12 * scale * 16.0, "{}", d.trace());
            assert!(d.hermiticity_error() <= 1e-12 * scale);
        }
    }

    #[test]
    fn liouvillian_matches_rhs_under_column_stacking() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = coupled_model(51.3e6, 40e6, 1e6);
        let h = build_rotating_hamiltonian(&m).unwrap();
        let cs = build_collapse_operators(&m);
        let l = liouvillian(&h, &cs).unwrap();
        for _ in 0..10 {
            let rho = random_density(&mut rng, 4);
            let lhs = unvectorize(&l.apply(&vectorize(rho.matrix())).unwrap(), 4);
            let rhs = lindblad_rhs(&rho, &h, &cs).unwrap();
            assert!(lhs.max_abs_diff(&rhs) <= 1e-12 * rhs.max_norm());
        }
    }

    #[test]
    fn step_map_equals_staged_rk4() {
        let m = coupled_model(51.3e6, 51.3e6, 2e6);
        let h = build_rotating_hamiltonian(&m).unwrap();
        let cs = build_collapse_operators(&m);
        let rho = initial_state(SequenceKind::S1);
        let dt = 1e-10;
        let staged = rk4_step(rho.matrix(), &h, &cs, dt);
        let map = rk4_step_map(&generator_matrix(4, &h, &cs), dt);
        let flat = map.apply(rho.matrix().as_slice()).unwrap();
        let mapped = ComplexMatrix::from_vec(4, 4, flat).unwrap();
        assert!(staged.max_abs_diff(&mapped) < 1e-15);
    }

    #[test]
    fn zero_duration_returns_initial_expectation() {
        let m = coupled_model(50e6, 50e6, 28e3);
        let h = build_rotating_hamiltonian(&m).unwrap();
        let traj = evolve(&initial_state(SequenceKind::S2), &h, &[], 0.0, &[0.0]).unwrap();
        assert_eq!(traj.sigma_x_qubit.len(), 1);
        assert!((traj.sigma_x_qubit[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn spin_locked_decay_matches_closed_form() {
        let gamma1 = 1.5e4;
        let m = SystemModel {
            qubit: QubitParams {
                omega_q: 1e10,
                gamma1,
                gamma2: 0.0,
            },
            defect: None,
            drive: DriveParams::resonant(std::f64::consts::TAU * 30e6),
        };
        let h = build_rotating_hamiltonian(&m).unwrap();
        let cs = build_collapse_operators(&m);
        let times: Vec<f64> = (0..=20).map(|k| k as f64 * 5e-6).collect();
        let traj = evolve(&initial_state_for(&m, SequenceKind::S1), &h, &cs, 100e-6, &times).unwrap();
        for (t, x) in traj.times.iter().zip(&traj.sigma_x_qubit) {
            let exact = (-gamma1 * t / 2.0).exp();
            assert!((x - exact).abs() <= 1e-6 * exact, "t={t}: {x} vs {exact}");
        }
    }

    #[test]
    fn sample_time_validation_and_step_cap() {
        let h = pauli::x().scale_real(1e8);
        let rho = DensityMatrix::from_pure(&StateVector::basis(2, 0));
        assert!(matches!(
            evolve(&rho, &h, &[], 1e-6, &[2e-7, 1e-7]),
            Err(DynamicsError::InvalidSampleTimes { .. })
        ));
        assert!(matches!(
            evolve(&rho, &h, &[], 1e-6, &[2e-6]),
            Err(DynamicsError::InvalidSampleTimes { .. })
        ));
        let capped = Integrator {
            max_steps: 10,
            ..Integrator::default()
        };
        assert!(matches!(
            capped.evolve(&rho, &h, &[], 1e-6, &[1e-6]),
            Err(DynamicsError::StepUnderflow { .. })
        ));
    }

    #[test]
    fn step_respects_both_bounds() {
        let m = coupled_model(51.3e6, 51.3e6, 28e3);
        let h = build_rotating_hamiltonian(&m).unwrap();
        let cs = build_collapse_operators(&m);
        let step = Integrator::default().max_step(&h, &cs, 1e-4);
        let spec_fast = [m.drive.rabi, m.defect.unwrap().delta_tls.abs(), 2.0 * m.defect.unwrap().coupling_g]
            .into_iter()
            .fold(0.0, f64::max);
        assert!(step <= std::f64::consts::TAU / spec_fast / 50.0);
        assert!(step <= 0.01 / 1e6);
    }

    #[test]
    fn oracle_identity_at_zero_and_semigroup() {
        let m = coupled_model(60e6, -45e6, 3e6);
        let h = build_rotating_hamiltonian(&m).unwrap();
        let cs = build_collapse_operators(&m);
        let rho0 = initial_state(SequenceKind::S1);
        assert_eq!(propagator_oracle(&rho0, &h, &cs, 0.0).unwrap(), rho0);
        let t = 0.37e-6;
        let once = propagator_oracle(&rho0, &h, &cs, t).unwrap();
        let twice = propagator_oracle(&once, &h, &cs, t).unwrap();
        let direct = propagator_oracle(&rho0, &h, &cs, 2.0 * t).unwrap();
        assert!(twice.matrix().max_abs_diff(direct.matrix()) < 1e-10);
    }

    #[test]
    fn oracle_closed_system_preserves_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_hermitian(&mut rng, 4, 2e8);
        let rho0 = initial_state(SequenceKind::S2);
        let rho = propagator_oracle(&rho0, &h, &[], 1.3e-6).unwrap();
        assert!((rho.purity() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn oracle_rejects_large_dimension() {
        let rho = DensityMatrix::maximally_mixed(8);
        assert_eq!(
            propagator_oracle(&rho, &ComplexMatrix::zeros(8, 8), &[], 1.0),
            Err(DynamicsError::DimensionTooLarge(8))
        );
    }

    #[test]
    fn integrator_agrees_with_oracle_short_run() {
        let m = coupled_model(51.3e6, 51.3e6, 2e6);
        let h = build_rotating_hamiltonian(&m).unwrap();
        let cs = build_collapse_operators(&m);
        let rho0 = initial_state(SequenceKind::S1);
        let t = 0.5e-6;
        let traj = Integrator::default()
            .with_tolerance(1e-10)
            .keeping_states()
            .evolve(&rho0, &h, &cs, t, &[t])
            .unwrap();
        let exact = propagator_oracle(&rho0, &h, &cs, t).unwrap();
        let got = &traj.states.unwrap()[0];
        assert!(got.matrix().max_abs_diff(exact.matrix()) < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn evolution_is_contractive(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = coupled_model(rng.gen_range(1e6..8e7), rng.gen_range(-8e7..8e7), rng.gen_range(0.0..5e6));
            let h = build_rotating_hamiltonian(&m).unwrap();
            let cs = build_collapse_operators(&m);
            let times: Vec<f64> = (1..=10).map(|k| k as f64 * 1e-7).collect();
            let a = random_density(&mut rng, 4);
            let b = random_density(&mut rng, 4);
            let integ = Integrator::default().keeping_states();
            let ta = integ.evolve(&a, &h, &cs, 1e-6, &times).unwrap();
            let tb = integ.evolve(&b, &h, &cs, 1e-6, &times).unwrap();
            let mut prev = a.trace_distance(&b);
            for (x, y) in ta.states.unwrap().iter().zip(tb.states.unwrap().iter()) {
                let d = x.trace_distance(y);
                prop_assert!(d <= prev + 1e-9, "{d} > {prev}");
                prev = d;
            }
        }
    }
}
