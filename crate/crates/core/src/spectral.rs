//! Spectral constants of the consensus iteration and the mean-square /
//! almost-sure error bounds built from them.
//!
//! Everything here is a pure function of a (graph, step size, quantization
//! step, measurement vector) tuple. The central objects are P = I − αL, its
//! deviation Q = P − 1ωᵀ, and the resolvent-style products Q̃ = (I−Q)⁻¹Q and
//! L̃ = (I−Q)⁻¹L. Matrix ‖·‖₂ means largest singular value throughout; logs
//! are natural.

use crate::graph::{Laplacian, LeftEigenvector};
use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use std::f64::consts::{E, SQRT_2};
use thiserror::Error;

/// Horizon for the empirical power-decay constant scan.
pub const DEFAULT_DECAY_HORIZON: usize = 500;

/// Minimum ensemble size for covariance estimation.
pub const MIN_COVARIANCE_RUNS: usize = 30;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("spectral radius {rho} is not below 1; pick a smaller step size")]
    RhoNotLessThanOne { rho: f64 },
    #[error("I - Q is numerically singular; the consensus iteration does not mix")]
    SingularIminusQ,
    #[error("eta must lie strictly between 0 and 1, got {eta}")]
    EtaOutOfRange { eta: f64 },
    #[error("covariance estimation needs at least {MIN_COVARIANCE_RUNS} runs, got {runs}")]
    InsufficientRuns { runs: usize },
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// P = I − αL and Q = P − 1ωᵀ.
pub fn consensus_matrices(
    lap: &Laplacian,
    omega: &DVector<f64>,
    alpha: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    assert!(alpha >= 0.0);
    let n = lap.matrix.nrows();
    let p = DMatrix::identity(n, n) - alpha * &lap.matrix;
    let ones = DVector::from_element(n, 1.0);
    let q = &p - ones * omega.transpose();
    (p, q)
}

/// Largest eigenvalue magnitude of Q.
pub fn spectral_radius_q(q: &DMatrix<f64>) -> f64 {
    q.complex_eigenvalues().iter().map(|ev| ev.norm()).fold(0.0, f64::max)
}

/// Step-size admissibility thresholds.
#[derive(Debug, Clone, Copy)]
pub struct AlphaBounds {
    /// min over nonzero Laplacian eigenvalues of 2 Re(λ)/|λ|²; the iteration
    /// mixes exactly when α stays below this.
    pub exact: f64,
    /// 1/max_i d_i, always at most `exact`.
    pub crude: f64,
}

pub fn alpha_upper_bound(lap: &Laplacian) -> AlphaBounds {
    let norm = spectral_norm(&lap.matrix);
    let zero_tol = 1e-9 * norm.max(f64::MIN_POSITIVE);
    let exact = lap
        .matrix
        .complex_eigenvalues()
        .iter()
        .filter(|ev| ev.norm() >= zero_tol)
        .map(|ev| 2.0 * ev.re / ev.norm_sqr())
        .fold(f64::INFINITY, f64::min);
    let crude = 1.0 / lap.max_degree;
    debug_assert!(exact >= crude - 1e-9, "exact bound {exact} below crude bound {crude}");
    AlphaBounds { exact, crude }
}

/// Constants of the power decay ‖Qᵏ‖_F ≤ n·c_Q·k^{q−1}·ρᵏ.
#[derive(Debug, Clone, Copy)]
pub struct PowerDecay {
    /// Max multiplicity of a nonzero eigenvalue of Q in its minimal
    /// polynomial; 1 for generic graphs.
    pub jordan_q: usize,
    pub c_q: f64,
    pub c_qn: f64,
    pub c_q_prime: f64,
}

/// Singular values below this fraction of ‖Q‖₂ count as zero in rank tests.
const RANK_REL_TOL: f64 = 1e-8;

fn max_minimal_poly_multiplicity(q: &DMatrix<f64>, norm_q: f64) -> usize {
    let n = q.nrows();
    let zero_tol = RANK_REL_TOL * norm_q;
    let cluster_tol = 1e-7 * norm_q.max(1.0);
    let eigs: Vec<Complex<f64>> = q
        .complex_eigenvalues()
        .iter()
        .copied()
        .filter(|ev| ev.norm() >= zero_tol)
        .collect();

    let mut used = vec![false; eigs.len()];
    let mut max_mult = 1usize;
    for i in 0..eigs.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let mut members = vec![eigs[i]];
        for j in i + 1..eigs.len() {
            if !used[j] && (eigs[j] - eigs[i]).norm() < cluster_tol {
                used[j] = true;
                members.push(eigs[j]);
            }
        }
        let m = members.len();
        if m < 2 {
            continue;
        }
        let center = members.iter().sum::<Complex<f64>>() / m as f64;
        let qc: DMatrix<Complex<f64>> = q.map(|x| Complex::new(x, 0.0));
        let shifted = &qc - DMatrix::from_diagonal_element(n, n, center);
        // Multiplicity in the minimal polynomial is the first power whose
        // null space swallows the whole generalized eigenspace.
        let mut power = shifted.clone();
        let mut mult = m;
        for k in 1..=m {
            let sv = power.clone().svd(false, false).singular_values;
            let rank = sv.iter().filter(|s| **s > zero_tol).count();
            if n - rank >= m {
                mult = k;
                break;
            }
            if k < m {
                power *= &shifted;
            }
        }
        max_mult = max_mult.max(mult);
    }
    max_mult
}

pub fn power_decay_constants(
    q: &DMatrix<f64>,
    horizon: usize,
) -> Result<PowerDecay, SpectralError> {
    assert!(horizon >= 1);
    let n = q.nrows();
    let rho = spectral_radius_q(q);
    if rho >= 1.0 {
        return Err(SpectralError::RhoNotLessThanOne { rho });
    }
    let norm_q = spectral_norm(q);

    // Covers exact rank-one collapse (P = 1ωᵀ), where Q is zero up to
    // rounding and every power ratio is noise over noise.
    if norm_q <= 1e-13 {
        return Ok(PowerDecay {
            jordan_q: 1,
            c_q: 0.0,
            c_qn: ((n as f64) + 2.0).sqrt(),
            c_q_prime: 0.0,
        });
    }

    let jordan_q = max_minimal_poly_multiplicity(q, norm_q);

    let mut c_q = 0.0f64;
    let mut power = q.clone();
    for k in 1..=horizon {
        let denom =
            n as f64 * (k as f64).powi(jordan_q as i32 - 1) * rho.powi(k as i32);
        let num = power.norm();
        if denom < 1e-280 {
            if num > 1e-280 && k == 1 {
                c_q = f64::INFINITY;
            }
            break;
        }
        c_q = c_q.max(num / denom);
        if k < horizon {
            power *= q;
        }
    }

    let growth = if jordan_q == 1 {
        1.0
    } else {
        let base = (jordan_q as f64 - 1.0) / (E * -rho.ln());
        base.powi(2 * (jordan_q as i32 - 1))
    };
    let c_qn = ((n as f64) + 2.0 + (n as f64).powi(2) * c_q * c_q * growth).sqrt();

    let c_q_prime = if jordan_q == 1 {
        rho / (1.0 - rho)
    } else {
        let qm1 = jordan_q as f64 - 1.0;
        let neg_ln = -rho.ln();
        let head = (qm1 / (E * neg_ln)).powf(qm1);
        let fact_qm1: f64 = (1..jordan_q).map(|v| v as f64).product();
        let mut tail = 0.0;
        let mut fact_j = 1.0f64;
        for j in 0..jordan_q {
            if j > 0 {
                fact_j *= j as f64;
            }
            tail += fact_qm1 * rho / (fact_j * neg_ln.powi((jordan_q - j) as i32));
        }
        head + tail
    };

    Ok(PowerDecay { jordan_q, c_q, c_qn, c_q_prime })
}

/// Every constant the error bounds need, for one (graph, α, Δ, y) tuple.
#[derive(Debug, Clone)]
pub struct SpectralReport {
    pub n: usize,
    pub alpha: f64,
    pub delta: f64,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub rho_q: f64,
    pub jordan_q: usize,
    pub c_q: f64,
    pub c_qn: f64,
    pub c_q_prime: f64,
    pub q_tilde: DMatrix<f64>,
    pub l_tilde: DMatrix<f64>,
    pub norm_q_tilde: f64,
    pub norm_l_tilde: f64,
    pub nu: f64,
    /// Empirical estimate of the accumulated-stage-1-noise bound; feeds `mu`.
    pub c_u: f64,
    pub mu: f64,
    /// `mu` evaluated with c_u = 0.
    pub mu_lower: f64,
    pub y_prime: f64,
    pub y_double_prime: f64,
    pub varpi: f64,
}

impl SpectralReport {
    /// Swaps in measurement magnitudes (e.g. an envelope over a whole
    /// ensemble) and refreshes the gain that depends on them.
    pub fn set_measurement_magnitudes(&mut self, y_prime: f64, y_double_prime: f64) {
        self.y_prime = y_prime;
        self.y_double_prime = y_double_prime;
        self.varpi =
            2.0 * self.c_qn * y_prime * self.norm_q_tilde + (self.n as f64).sqrt() * y_double_prime;
    }

    /// Swaps in a measured accumulated-noise bound and refreshes `mu`.
    pub fn set_cumulative_noise(&mut self, c_u: f64) {
        let nf = self.n as f64;
        self.c_u = c_u;
        self.mu = (nf + 2.0).sqrt() * self.norm_q_tilde
            + self.alpha
                * nf
                * (nf * self.c_q * self.c_q_prime * self.delta + c_u)
                * self.norm_l_tilde;
    }
}

/// Largest |y_i|/ω_i² and |y_i|/ω_i over the nodes; these magnitudes scale
/// the stage-2 bounds.
pub fn measurement_magnitudes(y: &DVector<f64>, omega: &DVector<f64>) -> (f64, f64) {
    let mut y_prime = 0.0f64;
    let mut y_double_prime = 0.0f64;
    for i in 0..y.len() {
        let w = omega[i];
        y_prime = y_prime.max(y[i].abs() / (w * w));
        y_double_prime = y_double_prime.max(y[i].abs() / w);
    }
    (y_prime, y_double_prime)
}

pub fn spectral_report(
    lap: &Laplacian,
    eig: &LeftEigenvector,
    alpha: f64,
    delta: f64,
    y: &DVector<f64>,
    c_u: f64,
    horizon: usize,
) -> Result<SpectralReport, SpectralError> {
    let n = lap.matrix.nrows();
    let nf = n as f64;
    let (p, q) = consensus_matrices(lap, &eig.omega, alpha);
    let rho_q = spectral_radius_q(&q);
    if rho_q >= 1.0 {
        return Err(SpectralError::RhoNotLessThanOne { rho: rho_q });
    }
    let decay = power_decay_constants(&q, horizon)?;

    let i_minus_q = DMatrix::identity(n, n) - &q;
    let inv = i_minus_q.clone().try_inverse().ok_or(SpectralError::SingularIminusQ)?;
    if (&i_minus_q * &inv - DMatrix::identity(n, n)).norm() >= 1e-9 {
        return Err(SpectralError::SingularIminusQ);
    }
    let q_tilde = &inv * &q;
    let l_tilde = &inv * &lap.matrix;
    let norm_q_tilde = spectral_norm(&q_tilde);
    let norm_l_tilde = spectral_norm(&l_tilde);

    let nu = alpha * (nf + 2.0).sqrt() * delta * norm_l_tilde;
    let mu_at = |cu: f64| {
        (nf + 2.0).sqrt() * norm_q_tilde
            + alpha * nf * (nf * decay.c_q * decay.c_q_prime * delta + cu) * norm_l_tilde
    };

    let (y_prime, y_double_prime) = measurement_magnitudes(y, &eig.omega);
    let varpi = 2.0 * decay.c_qn * y_prime * norm_q_tilde + nf.sqrt() * y_double_prime;

    Ok(SpectralReport {
        n,
        alpha,
        delta,
        p,
        q,
        rho_q,
        jordan_q: decay.jordan_q,
        c_q: decay.c_q,
        c_qn: decay.c_qn,
        c_q_prime: decay.c_q_prime,
        q_tilde,
        l_tilde,
        norm_q_tilde,
        norm_l_tilde,
        nu,
        c_u,
        mu: mu_at(c_u),
        mu_lower: mu_at(0.0),
        y_prime,
        y_double_prime,
        varpi,
    })
}

/// Mean-square bound for the stage-1 running average at sample count K:
/// nν²/(4K).
pub fn ms_bound_stage1(report: &SpectralReport, k: usize) -> f64 {
    assert!(k >= 1);
    report.n as f64 * report.nu * report.nu / (4.0 * k as f64)
}

/// Mean-square bound for the stage-2 running average at sample count K.
pub fn ms_bound_stage2(report: &SpectralReport, eta: f64, k: usize) -> Result<f64, SpectralError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(SpectralError::EtaOutOfRange { eta });
    }
    debug_assert!(k >= 2);
    let n = report.n as f64;
    let kf = k as f64;
    let num = 3.0
        * report.nu
        * report.nu
        * (n * report.y_double_prime * report.y_double_prime
            + 2.0
                * report.c_qn
                * report.c_qn
                * report.y_prime
                * report.y_prime
                * report.norm_q_tilde
                * report.norm_q_tilde);
    Ok(num / (n * eta.powi(4)) * kf.ln() / kf)
}

/// Which of the two injected-noise sequences is assumed almost surely
/// bounded: U is the stage-1 quantization error, v the stage-2 one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseRegime {
    BothBounded,
    UnboundedU,
    UnboundedV,
    BothUnbounded,
}

/// Almost-sure error-norm bound; `loglog_clamped` marks that some covariance
/// budget r was ≤ e, where the log log factor is undefined and clamped to 0.
#[derive(Debug, Clone, Copy)]
pub struct AlmostSureBound {
    pub value: f64,
    pub loglog_clamped: bool,
}

/// Almost-sure bound on the stage-2 running-average error norm at sample
/// count K; the bound's form depends on the noise regime. `r_u` and `r_v`
/// are the accumulated covariance budgets; bounded regimes ignore the
/// corresponding argument.
pub fn almost_sure_bound(
    report: &SpectralReport,
    eta: f64,
    k: f64,
    regime: NoiseRegime,
    r_u: f64,
    r_v: f64,
) -> Result<AlmostSureBound, SpectralError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(SpectralError::EtaOutOfRange { eta });
    }
    assert!(k > 1.0);
    let n = report.n as f64;
    let log_k = k.ln();
    let mut clamped = false;
    let mut loglog = |r: f64| -> f64 {
        if r > E {
            (r * r.ln().ln()).sqrt()
        } else {
            clamped = true;
            0.0
        }
    };
    let value = match regime {
        NoiseRegime::BothBounded => {
            SQRT_2 * report.mu / (n * eta * eta) * report.varpi * log_k / k
        }
        NoiseRegime::UnboundedU => {
            let fu = loglog(r_u);
            2.0 * report.alpha / (eta * eta) * report.varpi * report.norm_l_tilde * log_k / k * fu
        }
        NoiseRegime::UnboundedV => {
            let fv = loglog(r_v);
            SQRT_2 / (n * eta * eta)
                * (report.alpha * n * eta * eta * report.norm_l_tilde + report.mu * report.varpi)
                / k
                * fv.max(log_k)
        }
        NoiseRegime::BothUnbounded => {
            let fv = loglog(r_v);
            let fu = loglog(r_u);
            SQRT_2 * report.alpha / (eta * eta) * (1.0 + SQRT_2 * report.varpi)
                * report.norm_l_tilde
                / k
                * fv.max(fu * log_k)
        }
    };
    Ok(AlmostSureBound { value, loglog_clamped: clamped })
}

/// Analytic per-K cap on either accumulated covariance budget: nΔ²K/4.
pub fn covariance_budget_cap(n: usize, delta: f64, k: usize) -> f64 {
    n as f64 * delta * delta * k as f64 / 4.0
}

/// Accumulates zero-mean error vectors across runs and reports the largest
/// eigenvalue of the accumulated sample covariance, per prefix length.
#[derive(Debug, Clone)]
pub struct RunningCovariance {
    dim: usize,
    steps: usize,
    runs: usize,
    sums: Vec<DMatrix<f64>>,
}

impl RunningCovariance {
    pub fn new(dim: usize, steps: usize) -> Self {
        Self { dim, steps, runs: 0, sums: vec![DMatrix::zeros(dim, dim); steps] }
    }

    pub fn runs(&self) -> usize {
        self.runs
    }

    /// Adds one run's error-vector trace, one vector per step.
    pub fn record_run(&mut self, trace: &[DVector<f64>]) {
        assert_eq!(trace.len(), self.steps);
        for (k, u) in trace.iter().enumerate() {
            assert_eq!(u.len(), self.dim);
            self.sums[k] += u * u.transpose();
        }
        self.runs += 1;
    }

    /// λ_max of Σ_{k<K} Cov(u(k)) for K = 1..=steps. Nondecreasing in K
    /// because every increment is positive semidefinite.
    pub fn prefix_max_eigenvalues(&self) -> Result<Vec<f64>, SpectralError> {
        if self.runs < MIN_COVARIANCE_RUNS {
            return Err(SpectralError::InsufficientRuns { runs: self.runs });
        }
        let mut acc = DMatrix::zeros(self.dim, self.dim);
        let mut out = Vec::with_capacity(self.steps);
        let mut prev = 0.0f64;
        for sum in &self.sums {
            acc += sum / self.runs as f64;
            let lmax = SymmetricEigen::new(acc.clone()).eigenvalues.max();
            debug_assert!(
                lmax >= prev - 1e-9 * prev.abs().max(1.0),
                "prefix covariance eigenvalue decreased: {prev} -> {lmax}"
            );
            prev = lmax;
            out.push(lmax);
        }
        Ok(out)
    }
}
