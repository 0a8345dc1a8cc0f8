//! Rate extraction and spectral interpretation.
//!
//! * exponential fits of spin-locking decays,
//! * the driven-state rate relation `Γ₁ρ = ½Γ′₁ + Γ_Ω(Ω_R)` with the
//!   sideband average `Γ′₁ = ½[Γ₁(ω_q − Ω_R) + Γ₁(ω_q + Ω_R)]`,
//! * the rotating-frame Purcell estimate `g²/Γ₁^TLS`,
//! * polarity classification and defect-frequency inference from scan
//!   features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocols::{DecayTrace, ScanResult, STEADY_WINDOW_FRACTION};

pub const DEFAULT_NOISE_FLOOR: f64 = 0.02;
pub const DEFAULT_DEPTH_RATIO: f64 = 0.7;
pub const DEFAULT_BASELINE_WINDOW: usize = 7;

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum FitError {
    #[error("need at least 4 samples, got {0}")]
    TooFewSamples(usize),
    #[error("trace does not decay (amplitude {amplitude:e}, residual rms {residual_rms:e})")]
    NonDecaying { amplitude: f64, residual_rms: f64 },
    #[error("fit did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("frequency {0:e} rad/s outside the tabulated spectrum")]
    OutOfDomain(f64),
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("zero total rate gives an infinite lifetime")]
    InfiniteLifetime,
    #[error("TLS relaxation rate must be positive")]
    ZeroTlsRate,
    #[error("polarity is undetermined; cannot place the defect")]
    UndeterminedPolarity,
}

/// Result of fitting `offset + amplitude·exp(−γτ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub gamma: f64,
    /// One-sigma uncertainty of `gamma` from the Gauss–Newton covariance.
    pub gamma_stderr: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub residual_rms: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl ExpFit {
    pub fn t1rho(&self) -> f64 {
        1.0 / self.gamma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FitModel {
    /// Free offset and amplitude.
    #[default]
    Free,
    /// `(1 + exp(−γτ))/2`, for decays towards the fully mixed state.
    Symmetric,
}

const MAX_ITERATIONS: usize = 100;
const REL_TOL: f64 = 1e-8;

/// Free-form exponential fit of a decay trace.
pub fn fit_exponential(trace: &DecayTrace) -> Result<ExpFit, FitError> {
    fit_decay(&trace.durations, &trace.populations, FitModel::Free)
}

/// Least-squares fit by Gauss–Newton with step halving, seeded from the tail
/// mean and a log-linear regression.
pub fn fit_decay(times: &[f64], values: &[f64], model: FitModel) -> Result<ExpFit, FitError> {
    let n = times.len().min(values.len());
    if n < 4 {
        return Err(FitError::TooFewSamples(n));
    }
    if times.iter().chain(values).any(|x| !x.is_finite()) {
        return Err(FitError::Failed("non-finite samples".into()));
    }
    let t_scale = times.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    if t_scale == 0.0 {
        return Err(FitError::Failed("all durations are zero".into()));
    }
    // Work in units of the longest duration so every parameter is O(1).
    let ts: Vec<f64> = times.iter().map(|t| t / t_scale).collect();
    let ys = &values[..n];

    let fit = match model {
        FitModel::Free => fit_free(&ts, ys)?,
        FitModel::Symmetric => fit_symmetric(&ts, ys)?,
    };
    Ok(ExpFit {
        gamma: fit.gamma / t_scale,
        gamma_stderr: fit.gamma_stderr / t_scale,
        ..fit
    })
}

fn residual_rms(ts: &[f64], ys: &[f64], offset: f64, amplitude: f64, gamma: f64) -> f64 {
    let ssr: f64 = ts
        .iter()
        .zip(ys)
        .map(|(t, y)| {
            let r = y - offset - amplitude * (-gamma * t).exp();
            r * r
        })
        .sum();
    (ssr / ts.len() as f64).sqrt()
}

/// Slope and intercept of `ln|y − offset|` over the samples that still carry
/// at least 2% of the initial excursion.
fn log_linear_seed(ts: &[f64], ys: &[f64], offset: f64) -> Option<(f64, f64)> {
    let first = ys[0] - offset;
    if first.abs() <= f64::EPSILON {
        return None;
    }
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(ys)
        .filter_map(|(&t, &y)| {
            let d = (y - offset) / first;
            (d > 0.02).then(|| (t, (d * first.abs()).ln()))
        })
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let gamma = (-slope).max(1e-3);
    let amplitude = first.signum() * (my - slope * mx).exp();
    Some((gamma, amplitude))
}

fn fit_free(ts: &[f64], ys: &[f64]) -> Result<ExpFit, FitError> {
    let n = ys.len();
    let tail = ((n as f64 * STEADY_WINDOW_FRACTION).round() as usize).clamp(1, n);
    let tail_mean = ys[n - tail..].iter().sum::<f64>() / tail as f64;
    let spread = ys.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - ys.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if spread <= 1e-12 {
        return Err(FitError::NonDecaying {
            amplitude: 0.0,
            residual_rms: 0.0,
        });
    }
    let Some((gamma0, amp0)) = log_linear_seed(ts, ys, tail_mean) else {
        return Err(FitError::NonDecaying {
            amplitude: ys[0] - tail_mean,
            residual_rms: residual_rms(ts, ys, tail_mean, 0.0, 1.0),
        });
    };

    let mut p = [tail_mean, amp0, gamma0];
    let cost = |p: &[f64; 3]| residual_rms(ts, ys, p[0], p[1], p[2]);
    let mut current = cost(&p);
    let mut converged = false;
    let mut iterations = 0;
    let mut jtj = [[0.0; 3]; 3];
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut jtr = [0.0; 3];
        jtj = [[0.0; 3]; 3];
        for (&t, &y) in ts.iter().zip(ys) {
            let e = (-p[2] * t).exp();
            let r = y - p[0] - p[1] * e;
            let j = [1.0, e, -p[1] * t * e];
            for a in 0..3 {
                jtr[a] += j[a] * r;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let Some(delta) = solve3(&jtj, &jtr) else {
            break;
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = [p[0] + scale * delta[0], p[1] + scale * delta[1], p[2] + scale * delta[2]];
            let c = cost(&trial);
            if c.is_finite() && c <= current {
                accepted = Some((trial, c));
                break;
            }
            scale *= 0.5;
        }
        let Some((trial, c)) = accepted else {
            // No descent direction left: at the floor of the cost.
            converged = true;
            break;
        };
        let step: f64 = (0..3).map(|k| (trial[k] - p[k]).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        p = trial;
        current = c;
        if step <= REL_TOL * norm {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(FitError::NotConverged { iterations });
    }
    let rms = current;
    if p[1].abs() <= 3.0 * rms || p[2] <= 0.0 {
        return Err(FitError::NonDecaying {
            amplitude: p[1],
            residual_rms: rms,
        });
    }
    let dof = (ys.len() as f64 - 3.0).max(1.0);
    let s2 = rms * rms * ys.len() as f64 / dof;
    let gamma_stderr = invert3(&jtj).map_or(f64::NAN, |inv| (s2 * inv[2][2]).max(0.0).sqrt());
    Ok(ExpFit {
        gamma: p[2],
        gamma_stderr,
        amplitude: p[1],
        offset: p[0],
        residual_rms: rms,
        converged,
        iterations,
    })
}

fn fit_symmetric(ts: &[f64], ys: &[f64]) -> Result<ExpFit, FitError> {
    let Some((mut gamma, _)) = log_linear_seed(ts, ys, 0.5) else {
        return Err(FitError::NonDecaying {
            amplitude: ys[0] - 0.5,
            residual_rms: residual_rms(ts, ys, 0.5, 0.0, 1.0),
        });
    };
    let cost = |g: f64| residual_rms(ts, ys, 0.5, 0.5, g);
    let mut current = cost(gamma);
    let mut converged = false;
    let mut iterations = 0;
    let mut jtj = 0.0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (mut num, mut den) = (0.0, 0.0);
        for (&t, &y) in ts.iter().zip(ys) {
            let e = (-gamma * t).exp();
            let r = y - 0.5 - 0.5 * e;
            let j = -0.5 * t * e;
            num += j * r;
            den += j * j;
        }
        jtj = den;
        if den <= 0.0 {
            break;
        }
        let delta = num / den;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let g = gamma + scale * delta;
            let c = cost(g);
            if c.is_finite() && c <= current {
                accepted = Some((g, c));
                break;
            }
            scale *= 0.5;
        }
        let Some((g, c)) = accepted else {
            converged = true;
            break;
        };
        let step = (g - gamma).abs();
        gamma = g;
        current = c;
        if step <= REL_TOL * gamma.abs() {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(FitError::NotConverged { iterations });
    }
    if gamma <= 0.0 {
        return Err(FitError::NonDecaying {
            amplitude: 0.5,
            residual_rms: current,
        });
    }
    let dof = (ys.len() as f64 - 1.0).max(1.0);
    let s2 = current * current * ys.len() as f64 / dof;
    Ok(ExpFit {
        gamma,
        gamma_stderr: if jtj > 0.0 { (s2 / jtj).sqrt() } else { f64::NAN },
        amplitude: 0.5,
        offset: 0.5,
        residual_rms: current,
        converged,
        iterations,
    })
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let d = det3(m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, e) = ((i + 1) % 3, (i + 2) % 3);
            *cell = (m[a][c] * m[b][e] - m[a][e] * m[b][c]) / d;
        }
    }
    Some(inv)
}

fn solve3(m: &[[f64; 3]; 3], v: &[f64; 3]) -> Option<[f64; 3]> {
    let inv = invert3(m)?;
    Some([
        inv[0][0] * v[0] + inv[0][1] * v[1] + inv[0][2] * v[2],
        inv[1][0] * v[0] + inv[1][1] * v[1] + inv[1][2] * v[2],
        inv[2][0] * v[0] + inv[2][1] * v[1] + inv[2][2] * v[2],
    ])
}

/// Γ₁(ω) sampled at increasing angular frequencies, linearly interpolated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxationSpectrum {
    frequencies: Vec<f64>,
    gamma1: Vec<f64>,
}

impl RelaxationSpectrum {
    pub fn new(frequencies: Vec<f64>, gamma1: Vec<f64>) -> Result<Self, AnalysisError> {
        if frequencies.len() != gamma1.len() || frequencies.is_empty() {
            return Err(AnalysisError::InvalidSpectrum("length mismatch or empty".into()));
        }
        if !frequencies.windows(2).all(|w| w[0] < w[1]) {
            return Err(AnalysisError::InvalidSpectrum("frequencies must be strictly increasing".into()));
        }
        if gamma1.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(AnalysisError::InvalidSpectrum("rates must be positive".into()));
        }
        Ok(Self { frequencies, gamma1 })
    }

    /// Builds the spectrum from (angular frequency, T₁) samples in any order.
    /// Samples at the same frequency are merged by averaging their rates.
    pub fn from_t1_samples(samples: &[(f64, f64)]) -> Result<Self, AnalysisError> {
        if samples.iter().any(|&(w, t1)| !(w > 0.0 && t1 > 0.0 && w.is_finite() && t1.is_finite())) {
            return Err(AnalysisError::InvalidSpectrum("frequencies and T1 must be positive".into()));
        }
        let mut sorted: Vec<(f64, f64)> = samples.iter().map(|&(w, t1)| (w, 1.0 / t1)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut freqs: Vec<f64> = Vec::new();
        let mut rates: Vec<f64> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        for (w, g) in sorted {
            if freqs.last() == Some(&w) {
                *rates.last_mut().unwrap() += g;
                *counts.last_mut().unwrap() += 1.0;
            } else {
                freqs.push(w);
                rates.push(g);
                counts.push(1.0);
            }
        }
        let rates = rates.iter().zip(&counts).map(|(g, c)| g / c).collect();
        Self::new(freqs, rates)
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn rates(&self) -> &[f64] {
        &self.gamma1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.frequencies[0], *self.frequencies.last().unwrap())
    }

    pub fn gamma1_at(&self, omega: f64) -> Result<f64, AnalysisError> {
        let (lo, hi) = self.domain();
        let slack = 1e-12 * hi.abs();
        if !(omega >= lo - slack && omega <= hi + slack) {
            return Err(AnalysisError::OutOfDomain(omega));
        }
        let omega = omega.clamp(lo, hi);
        let k = self.frequencies.partition_point(|&w| w <= omega);
        if k == 0 {
            return Ok(self.gamma1[0]);
        }
        if k == self.frequencies.len() {
            return Ok(*self.gamma1.last().unwrap());
        }
        let (w0, w1) = (self.frequencies[k - 1], self.frequencies[k]);
        let (g0, g1) = (self.gamma1[k - 1], self.gamma1[k]);
        Ok(g0 + (g1 - g0) * (omega - w0) / (w1 - w0))
    }
}

/// `Γ′₁ = ½[Γ₁(ω_q − Ω_R) + Γ₁(ω_q + Ω_R)]`
pub fn gamma_prime_exact(spec: &RelaxationSpectrum, omega_q: f64, rabi: f64) -> Result<f64, AnalysisError> {
    Ok(0.5 * (spec.gamma1_at(omega_q - rabi)? + spec.gamma1_at(omega_q + rabi)?))
}

/// `Γ′₁ ≈ ½[Γ₁(ω_q) + Γ₁(ω_q + Ω_R)]`, with the lower sideband frozen at
/// Γ₁(ω_q).
pub fn gamma_prime_one_sided(spec: &RelaxationSpectrum, omega_q: f64, rabi: f64) -> Result<f64, AnalysisError> {
    Ok(0.5 * (spec.gamma1_at(omega_q)? + spec.gamma1_at(omega_q + rabi)?))
}

/// `T₁ρ = 1/(½Γ′₁ + Γ_Ω)`
pub fn gbe_t1rho(gamma_prime: f64, gamma_omega: f64) -> Result<f64, AnalysisError> {
    if !(gamma_prime >= 0.0 && gamma_omega >= 0.0) {
        return Err(AnalysisError::InvalidInput(format!(
            "rates must be non-negative (Γ′₁ = {gamma_prime}, Γ_Ω = {gamma_omega})"
        )));
    }
    let total = 0.5 * gamma_prime + gamma_omega;
    if total == 0.0 {
        return Err(AnalysisError::InfiniteLifetime);
    }
    Ok(1.0 / total)
}

/// Low-frequency part left over after removing `½Γ′₁` from a measured Γ₁ρ.
pub fn residual_gamma_omega(gamma_1rho: f64, gamma_prime: f64) -> f64 {
    gamma_1rho - 0.5 * gamma_prime
}

/// Low-frequency noise contribution Γ_Ω(Ω_R).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaOmega {
    #[default]
    Zero,
    /// `A/Ω_R`, a 1/f-like rise at low Rabi frequency.
    InverseRabi { amplitude: f64 },
    /// (Ω_R, Γ_Ω) pairs, linearly interpolated and held flat outside.
    Table { points: Vec<(f64, f64)> },
}

impl GammaOmega {
    pub fn rate(&self, rabi: f64) -> f64 {
        match self {
            GammaOmega::Zero => 0.0,
            GammaOmega::InverseRabi { amplitude } => {
                if rabi > 0.0 {
                    amplitude / rabi
                } else {
                    f64::INFINITY
                }
            }
            GammaOmega::Table { points } => {
                let Some(first) = points.first() else {
                    return 0.0;
                };
                if rabi <= first.0 {
                    return first.1;
                }
                for w in points.windows(2) {
                    let ((x0, y0), (x1, y1)) = (w[0], w[1]);
                    if rabi <= x1 {
                        return y0 + (y1 - y0) * (rabi - x0) / (x1 - x0);
                    }
                }
                points.last().unwrap().1
            }
        }
    }
}

/// Rotating-frame Purcell rate `g²/Γ₁^TLS`, `g` in rad/s.
pub fn purcell_rate(g: f64, gamma1_tls: f64) -> Result<f64, AnalysisError> {
    if gamma1_tls.is_nan() || gamma1_tls <= 0.0 {
        return Err(AnalysisError::ZeroTlsRate);
    }
    Ok(g * g / gamma1_tls)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// D↑ < D↓: cooling by a defect above the qubit (Δ_TLS > 0).
    Positive,
    /// D↑ > D↓: heating by a defect below the qubit (Δ_TLS < 0).
    Negative,
    Undetermined,
}

pub fn classify_polarity(up_steady: f64, down_steady: f64, noise_floor: f64) -> Polarity {
    if down_steady - up_steady > noise_floor {
        Polarity::Positive
    } else if up_steady - down_steady > noise_floor {
        Polarity::Negative
    } else {
        Polarity::Undetermined
    }
}

/// `ω_q + Ω_R` for Positive features, `ω_q − Ω_R` for Negative ones.
pub fn infer_defect_frequency(omega_q: f64, rabi_at_feature: f64, polarity: Polarity) -> Result<f64, AnalysisError> {
    match polarity {
        Polarity::Positive => Ok(omega_q + rabi_at_feature),
        Polarity::Negative => Ok(omega_q - rabi_at_feature),
        Polarity::Undetermined => Err(AnalysisError::UndeterminedPolarity),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    /// Index into the scan's Rabi grid.
    pub grid_index: usize,
    pub rabi_at_feature: f64,
    pub polarity: Polarity,
    pub inferred_tls_frequency: Option<f64>,
    pub t1rho_at_feature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Grid points in the rolling-median baseline (centred, truncated at the
    /// edges).
    pub baseline_window: usize,
    /// A feature's T₁ρ must fall below this fraction of the baseline.
    pub depth_ratio: f64,
    pub noise_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            baseline_window: DEFAULT_BASELINE_WINDOW,
            depth_ratio: DEFAULT_DEPTH_RATIO,
            noise_floor: DEFAULT_NOISE_FLOOR,
        }
    }
}

/// Local T₁ρ minima well below the rolling-median baseline, with polarity and
/// defect frequency attached.
pub fn find_features(scan: &ScanResult, baseline_window: usize) -> Vec<FeatureReport> {
    find_features_with(
        scan,
        &FeatureConfig {
            baseline_window,
            ..FeatureConfig::default()
        },
    )
}

pub fn find_features_with(scan: &ScanResult, cfg: &FeatureConfig) -> Vec<FeatureReport> {
    let t1rho = scan.t1rho_column();
    let n = t1rho.len();
    let half = cfg.baseline_window.max(1) / 2;
    let mut out = Vec::new();
    for i in 0..n {
        let Some(here) = t1rho[i] else { continue };
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        let mut window: Vec<f64> = t1rho[lo..hi].iter().flatten().copied().collect();
        if window.len() < 3 {
            continue;
        }
        window.sort_by(f64::total_cmp);
        let median = if window.len() % 2 == 1 {
            window[window.len() / 2]
        } else {
            0.5 * (window[window.len() / 2 - 1] + window[window.len() / 2])
        };
        let left_ok = i == 0 || t1rho[i - 1].is_none_or(|v| here <= v);
        let right_ok = i + 1 == n || t1rho[i + 1].is_none_or(|v| here <= v);
        if !(here < cfg.depth_ratio * median && left_ok && right_ok) {
            continue;
        }
        let fit = &scan.fits[i];
        let polarity = classify_polarity(fit.up_steady, fit.down_steady, cfg.noise_floor);
        out.push(FeatureReport {
            grid_index: i,
            rabi_at_feature: fit.rabi,
            polarity,
            inferred_tls_frequency: infer_defect_frequency(scan.omega_q, fit.rabi, polarity).ok(),
            t1rho_at_feature: here,
        });
    }
    out
}
