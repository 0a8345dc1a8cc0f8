//! Spin-locking noise spectroscopy of a driven superconducting qubit coupled
//! to off-resonant two-level-system (TLS) defects.
//!
//! A defect at ω_TLS = ω_q ± Ω_R comes into resonance with the qubit's
//! dressed states while the qubit is spin-locked at Rabi frequency Ω_R. The
//! defect then acts as a lossy partner in the rotating frame and shortens the
//! driven-state lifetime T₁ρ. This crate simulates that situation with a
//! Lindblad master equation, reproduces the S1/S2 phase-cycled measurement,
//! and turns T₁ρ spectra back into defect frequencies.
//!
//! Module map:
//!
//! * [`qlinalg`]: dense complex matrices, `kron`, `expm`, Hermitian
//!   eigenvalues.
//! * [`model`]: rotating-frame Hamiltonian, collapse operators, initial
//!   states.
//! * [`dynamics`]: RK4 Lindblad integration and the superoperator
//!   propagator used to check it.
//! * [`protocols`]: S1/S2 sequences, phase cycling, 2-D scans.
//! * [`analysis`]: exponential fits, sideband rate relations, Purcell
//!   estimate, polarity and defect-frequency inference.
//! * [`cli`]: configuration, file formats and the `spinlock` subcommands.
//!
//! ```
//! use spinlock::model::{hz_to_angular, DefectParams, DriveParams, QubitParams, SystemModel};
//! use spinlock::model::{build_rotating_hamiltonian, build_collapse_operators};
//!
//! let model = SystemModel {
//!     qubit: QubitParams { omega_q: hz_to_angular(4.33e9), gamma1: 1.5e4, gamma2: 0.0 },
//!     defect: Some(DefectParams {
//!         delta_tls: hz_to_angular(51.3e6),
//!         gamma1: 1e6,
//!         gamma2: 0.0,
//!         coupling_g: hz_to_angular(28e3),
//!     }),
//!     drive: DriveParams::resonant(hz_to_angular(51.3e6)),
//! };
//! let h = build_rotating_hamiltonian(&model).unwrap();
//! assert_eq!(h.rows(), 4);
//! assert_eq!(build_collapse_operators(&model).len(), 2);
//! ```

pub mod analysis;
pub mod cli;
pub mod dynamics;
pub mod model;
pub mod protocols;
pub mod qlinalg;

pub use analysis::{ExpFit, FeatureReport, Polarity, RelaxationSpectrum};
pub use dynamics::{DensityMatrix, Trajectory};
pub use model::{DefectParams, DriveParams, QubitParams, SequenceKind, SystemModel};
pub use protocols::{DecayTrace, PulseMode, PulseSequence, ScanResult};
pub use qlinalg::{ComplexMatrix, StateVector};
