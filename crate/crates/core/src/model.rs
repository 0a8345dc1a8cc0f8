//! Physical model of a resonantly driven qubit coupled to a single TLS defect.
//!
//! All frequencies are angular (rad/s) and all rates are in 1/s. The product
//! basis is qubit-major: `index = 2·qubit + defect`, where index 0 of each
//! two-level system is the σ_z = +1 state |0> and index 1 is |1>.
//!
//! With `H_TLS = (ħω/2)σ_z` the σ_z = −1 state |1>_d is the lower level, so
//! the defect ground state is |1>_d. For the qubit, |0> is the excited state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::DensityMatrix;
use crate::qlinalg::{kron, pauli, ComplexMatrix, StateVector, C64};

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Converts a frequency in Hz to angular units.
#[inline]
pub fn hz_to_angular(hz: f64) -> f64 {
    TWO_PI * hz
}

#[inline]
pub fn angular_to_hz(omega: f64) -> f64 {
    omega / TWO_PI
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("detuned driving (ω_q − ω_MW = {0} rad/s) is not supported; only resonant drive")]
    DetunedDrive(f64),
}

fn check(name: &'static str, value: f64, ok: bool, reason: &'static str) -> Result<(), ModelError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter {
            name,
            value,
            reason,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitParams {
    /// Qubit transition frequency ω_q.
    pub omega_q: f64,
    /// Energy-relaxation rate Γ₁.
    pub gamma1: f64,
    /// Pure-dephasing rate Γ₂.
    pub gamma2: f64,
}

impl QubitParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        check("qubit.omega_q", self.omega_q, self.omega_q > 0.0, "must be positive")?;
        check("qubit.gamma1", self.gamma1, self.gamma1 >= 0.0, "must be non-negative")?;
        check("qubit.gamma2", self.gamma2, self.gamma2 >= 0.0, "must be non-negative")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectParams {
    /// Signed detuning Δ_TLS = ω_TLS − ω_q.
    pub delta_tls: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Transverse coupling strength g.
    pub coupling_g: f64,
}

impl DefectParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        check("defect.delta_tls", self.delta_tls, true, "must be finite")?;
        check("defect.gamma1", self.gamma1, self.gamma1 >= 0.0, "must be non-negative")?;
        check("defect.gamma2", self.gamma2, self.gamma2 >= 0.0, "must be non-negative")?;
        check(
            "defect.coupling_g",
            self.coupling_g,
            self.coupling_g >= 0.0,
            "must be non-negative",
        )
    }

    /// Absolute defect frequency for a qubit at `omega_q`.
    pub fn tls_frequency(&self, omega_q: f64) -> f64 {
        omega_q + self.delta_tls
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveParams {
    /// Rabi frequency Ω_R of the spin-locking drive.
    pub rabi: f64,
    /// ω_q − ω_MW; must be zero.
    pub drive_detuning: f64,
}

impl DriveParams {
    pub fn resonant(rabi: f64) -> Self {
        Self {
            rabi,
            drive_detuning: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check("drive.rabi", self.rabi, self.rabi >= 0.0, "must be non-negative")?;
        if self.drive_detuning != 0.0 {
            return Err(ModelError::DetunedDrive(self.drive_detuning));
        }
        Ok(())
    }
}

/// One qubit, at most one defect, and the drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub qubit: QubitParams,
    pub defect: Option<DefectParams>,
    pub drive: DriveParams,
}

impl SystemModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.qubit.validate()?;
        if let Some(d) = &self.defect {
            d.validate()?;
        }
        self.drive.validate()
    }

    /// Hilbert-space dimension: 2 for an isolated qubit, 4 with a defect.
    pub fn dim(&self) -> usize {
        if self.defect.is_some() {
            4
        } else {
            2
        }
    }

    pub fn with_rabi(mut self, rabi: f64) -> Self {
        self.drive.rabi = rabi;
        self
    }

    pub fn with_defect(mut self, defect: Option<DefectParams>) -> Self {
        self.defect = defect;
        self
    }

    /// Moves the qubit frequency by `delta_omega` while keeping the absolute
    /// defect frequency fixed, so Δ_TLS shrinks by the same amount.
    pub fn with_qubit_shift(mut self, delta_omega: f64) -> Self {
        self.qubit.omega_q += delta_omega;
        if let Some(d) = self.defect.as_mut() {
            d.delta_tls -= delta_omega;
        }
        self
    }
}

/// Spin-locking sequence type: S1 locks along +x, S2 along −x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SequenceKind {
    S1,
    S2,
}

impl SequenceKind {
    /// Sign of the qubit's x-polarization after the opening π/2 pulse.
    pub fn lock_sign(self) -> f64 {
        match self {
            SequenceKind::S1 => 1.0,
            SequenceKind::S2 => -1.0,
        }
    }
}

/// Embeds a qubit operator into the model's space.
pub fn on_qubit(op: &ComplexMatrix, dim: usize) -> ComplexMatrix {
    if dim == 2 {
        op.clone()
    } else {
        kron(op, &pauli::identity())
    }
}

/// Embeds a defect operator into the 4-dimensional product space.
pub fn on_defect(op: &ComplexMatrix) -> ComplexMatrix {
    kron(&pauli::identity(), op)
}

/// Rotating-frame terms that do not involve the qubit drive:
/// `(Δ/2)σ_z⁽²⁾ + g(σ_+⁽¹⁾σ_−⁽²⁾ + σ_−⁽¹⁾σ_+⁽²⁾)`, zero for an isolated qubit.
fn static_hamiltonian(m: &SystemModel) -> ComplexMatrix {
    match &m.defect {
        None => ComplexMatrix::zeros(2, 2),
        Some(d) => {
            let detuning = on_defect(&pauli::z()).scale_real(d.delta_tls / 2.0);
            let flip_flop = &kron(&pauli::raising(), &pauli::lowering())
                + &kron(&pauli::lowering(), &pauli::raising());
            &detuning + &flip_flop.scale_real(d.coupling_g)
        }
    }
}

/// Spin-locking Hamiltonian in the frame rotating at the drive frequency
/// (units of ħ = 1): `(Ω_R/2)σ_x⁽¹⁾ + (Δ/2)σ_z⁽²⁾ + g(σ_+⁽¹⁾σ_−⁽²⁾ + h.c.)`.
pub fn build_rotating_hamiltonian(m: &SystemModel) -> Result<ComplexMatrix, ModelError> {
    m.validate()?;
    let drive = on_qubit(&pauli::x(), m.dim()).scale_real(m.drive.rabi / 2.0);
    Ok(&drive + &static_hamiltonian(m))
}

/// Same frame, with the qubit driven about y at Rabi frequency
/// `signed_rabi` instead of the spin-locking x drive. Used for finite π/2
/// pulses.
pub fn build_pulse_hamiltonian(m: &SystemModel, signed_rabi: f64) -> Result<ComplexMatrix, ModelError> {
    m.validate()?;
    let drive = on_qubit(&pauli::y(), m.dim()).scale_real(signed_rabi / 2.0);
    Ok(&drive + &static_hamiltonian(m))
}

/// Collapse operators with strictly positive prefactors:
/// `√Γ₁⁽¹⁾σ_−⁽¹⁾, √Γ₁⁽²⁾σ_−⁽²⁾, √(Γ₂⁽¹⁾/2)σ_z⁽¹⁾, √(Γ₂⁽²⁾/2)σ_z⁽²⁾`.
pub fn build_collapse_operators(m: &SystemModel) -> Vec<ComplexMatrix> {
    let dim = m.dim();
    let mut ops = Vec::new();
    let mut push = |rate: f64, op: ComplexMatrix| {
        if rate > 0.0 {
            ops.push(op.scale_real(rate.sqrt()));
        }
    };
    push(m.qubit.gamma1, on_qubit(&pauli::lowering(), dim));
    if let Some(d) = &m.defect {
        push(d.gamma1, on_defect(&pauli::lowering()));
    }
    push(m.qubit.gamma2 / 2.0, on_qubit(&pauli::z(), dim));
    if let Some(d) = &m.defect {
        push(d.gamma2 / 2.0, on_defect(&pauli::z()));
    }
    ops
}

/// Qubit state after the opening π/2 pulse: |0>_x for S1, |1>_x for S2.
pub fn qubit_locked_state(kind: SequenceKind) -> StateVector {
    let s = kind.lock_sign() * std::f64::consts::FRAC_1_SQRT_2;
    StateVector::new(vec![C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0), C64::new(s, 0.0)])
        .expect("normalized")
}

pub fn qubit_ground_state() -> StateVector {
    StateVector::basis(2, 1)
}

pub fn defect_ground_state() -> StateVector {
    StateVector::basis(2, 1)
}

fn product_state(qubit: StateVector, with_defect: bool) -> DensityMatrix {
    let psi = if with_defect {
        qubit.kron(&defect_ground_state())
    } else {
        qubit
    };
    DensityMatrix::from_pure(&psi)
}

/// Spin-locked initial state: qubit |0>_x (S1) or |1>_x (S2), defect in
/// its ground state |1>_d.
pub fn initial_state(kind: SequenceKind) -> DensityMatrix {
    product_state(qubit_locked_state(kind), true)
}

/// Like [`initial_state`] but sized for `m` (2x2 when there is no defect).
pub fn initial_state_for(m: &SystemModel, kind: SequenceKind) -> DensityMatrix {
    product_state(qubit_locked_state(kind), m.defect.is_some())
}

/// Both subsystems in their ground states, before any pulse.
pub fn ground_state_for(m: &SystemModel) -> DensityMatrix {
    product_state(qubit_ground_state(), m.defect.is_some())
}

/// `σ_x⁽¹⁾` embedded for dimension `dim`.
pub fn qubit_sigma_x(dim: usize) -> ComplexMatrix {
    on_qubit(&pauli::x(), dim)
}

/// Projector on the qubit excited state |0>, embedded for dimension `dim`.
pub fn qubit_excited_projector(dim: usize) -> ComplexMatrix {
    on_qubit(&StateVector::basis(2, 0).projector(), dim)
}
