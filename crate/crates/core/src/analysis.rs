//! Heterogeneity estimators, convergence-bound terms and communication checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::mixing_time_tau;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSqEstimate {
    /// Dissimilarity after flooring at 1.
    pub value: f64,
    pub raw: f64,
    pub clamped: bool,
}

/// Mean squared local gradient norm over the squared global gradient norm,
/// floored at 1.
pub fn estimate_delta_sq(local_grad_sq_norms: &[f64], global_grad_sq_norm: f64) -> Result<DeltaSqEstimate> {
    if local_grad_sq_norms.is_empty() {
        return Err(Error::Analysis("no local gradients".into()));
    }
    if !(global_grad_sq_norm > 0.0) {
        return Err(Error::Analysis("stationary point, δ undefined".into()));
    }
    let mean = local_grad_sq_norms.iter().sum::<f64>() / local_grad_sq_norms.len() as f64;
    let raw = mean / global_grad_sq_norm;
    Ok(DeltaSqEstimate {
        value: raw.max(1.0),
        raw,
        clamped: raw < 1.0,
    })
}

/// `min(1, after / before)`.
pub fn estimate_gamma(grad_norm_after: f64, grad_norm_before: f64) -> Result<f64> {
    if !(grad_norm_before > 0.0) {
        return Err(Error::Analysis("reference gradient norm must be positive".into()));
    }
    Ok((grad_norm_after / grad_norm_before).min(1.0))
}

/// Product of per-step inexactness ratios along a chain.
pub fn chain_inexactness(per_step_gammas: &[f64]) -> f64 {
    per_step_gammas.iter().product()
}

fn default_w0() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    /// Device count.
    pub n: usize,
    /// Gradient-norm bound `D`.
    pub grad_bound: f64,
    pub zeta: f64,
    pub k_p: u64,
    pub lambda_p: f64,
    pub delta_sq: f64,
    pub gamma_hat: f64,
    /// Model dimension `d`.
    pub dim: usize,
    /// Quantization interval `s` (0 disables the quantization term).
    pub s: f64,
    /// Parameter-norm bound `σ`.
    pub sigma: f64,
    pub q_exp: f64,
    pub r_const: f64,
    /// Surrogate for `‖w⁰ − w*‖`; the total is relative to it.
    #[serde(default = "default_w0")]
    pub w0_dist: f64,
    /// First index `K̄` of the log-weighted sum.
    pub k_bar_start: u64,
}

impl TheoryInputs {
    /// Errors on violated preconditions; returns advisory flags otherwise.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |what: &str| Err(Error::Analysis(what.to_string()));
        if !(self.lambda_p > 0.0 && self.lambda_p < 1.0) {
            return bad("λ_P must lie in (0, 1)");
        }
        if self.n == 0 || self.dim == 0 {
            return bad("n and d must be positive");
        }
        for (name, v) in [
            ("D", self.grad_bound),
            ("ζ", self.zeta),
            ("σ", self.sigma),
            ("R", self.r_const),
            ("‖w⁰ − w*‖", self.w0_dist),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Analysis(format!("{name} must be positive and finite")));
            }
        }
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return bad("s must be non-negative");
        }
        if !(self.delta_sq >= 1.0 && self.delta_sq.is_finite()) {
            return bad("δ² must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gamma_hat) {
            return bad("γ̂ must lie in [0, 1]");
        }
        if self.k_p == 0 || self.k_bar_start == 0 {
            return bad("K_P and K̄ must be at least 1");
        }
        if !(self.q_exp > 0.0 && self.q_exp < 1.0) {
            return bad("q must lie in (0, 1)");
        }
        let mut flags = Vec::new();
        if self.q_exp <= 0.5 {
            flags.push(format!(
                "q = {} is outside (1/2, 1): the bound's series do not converge",
                self.q_exp
            ));
        }
        Ok(flags)
    }

    fn eta(&self, j: u64) -> f64 {
        1.0 / (self.r_const * (j as f64).powf(self.q_exp))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub horizon: u64,
    /// `ψ(n, λ_P)`.
    pub psi_n_lambda: f64,
    /// `κ(δ, γ̂)`.
    pub kappa: f64,
    /// `λ(n)`.
    pub lambda_n: f64,
    /// `ψ(d, s)`; zero without quantization.
    pub psi_d_s: f64,
    /// Partial sums to the horizon, normalized by `k^{1−q}`.
    pub total_bound: f64,
    /// Same with the convergent series completed by integral tails; absent
    /// when they diverge.
    pub asymptotic_total: Option<f64>,
    pub valid: bool,
    pub flags: Vec<String>,
}

struct Sums {
    eta_sq: f64,
    log_eta_sq: f64,
    eta_over_j: f64,
}

fn partial_sums(inp: &TheoryInputs, k: u64) -> Sums {
    let mut s = Sums {
        eta_sq: 0.0,
        log_eta_sq: 0.0,
        eta_over_j: 0.0,
    };
    for j in 1..=k {
        let eta = inp.eta(j);
        s.eta_sq += eta * eta;
        s.eta_over_j += eta / j as f64;
        if j >= inp.k_bar_start {
            s.log_eta_sq += (j as f64).ln() * eta * eta;
        }
    }
    s
}

/// Integral tails `∫_{k+½}^∞` of the three convergent series (needs `q > ½`).
fn tail_sums(inp: &TheoryInputs, k: u64) -> Sums {
    let a = k as f64 + 0.5;
    let p = 2.0 * inp.q_exp;
    let r2 = inp.r_const * inp.r_const;
    Sums {
        eta_sq: a.powf(1.0 - p) / ((p - 1.0) * r2),
        log_eta_sq: a.powf(1.0 - p) * (a.ln() / (p - 1.0) + 1.0 / (p - 1.0).powi(2)) / r2,
        eta_over_j: a.powf(-inp.q_exp) / (inp.q_exp * inp.r_const),
    }
}

/// `(ψ(n,λ_P), κ, λ(n))` from the given sums.
fn theorem1_terms(inp: &TheoryInputs, s: &Sums) -> (f64, f64, f64) {
    let n = inp.n as f64;
    let d2 = inp.grad_bound * inp.grad_bound;
    let psi = (1.0 + n) * 2.0 * d2 * s.log_eta_sq / (1.0 / inp.lambda_p).ln();
    let kappa = (inp.delta_sq + inp.gamma_hat * inp.gamma_hat) * d2 / 4.0 * s.eta_sq;
    let lambda = n / 2.0 * s.eta_over_j;
    (psi, kappa, lambda)
}

fn report(inp: &TheoryInputs, k: u64, psi_d_s: f64) -> Result<BoundReport> {
    let flags = inp.validate()?;
    if k == 0 {
        return Err(Error::Analysis("horizon must be at least 1".into()));
    }
    let sums = partial_sums(inp, k);
    let (psi, kappa, lambda) = theorem1_terms(inp, &sums);
    let norm = (k as f64).powf(1.0 - inp.q_exp);
    let head = 0.5 * inp.w0_dist * inp.w0_dist;
    let valid = inp.q_exp > 0.5;
    let asymptotic_total = valid.then(|| {
        let tail = tail_sums(inp, k);
        let (tp, tk, tl) = theorem1_terms(inp, &tail);
        (head + psi + tp + kappa + tk + lambda + tl + psi_d_s) / norm
    });
    Ok(BoundReport {
        horizon: k,
        psi_n_lambda: psi,
        kappa,
        lambda_n: lambda,
        psi_d_s,
        total_bound: (head + psi + kappa + lambda + psi_d_s) / norm,
        asymptotic_total,
        valid,
        flags,
    })
}

/// Full-precision bound terms at horizon `k`.
pub fn theorem1_bound(inp: &TheoryInputs, k: u64) -> Result<BoundReport> {
    report(inp, k, 0.0)
}

/// Quantized bound: the full-precision terms plus `ψ(d, s)`.
pub fn theorem2_bound(inp: &TheoryInputs, k: u64) -> Result<BoundReport> {
    inp.validate()?;
    let mut sum = 0.0;
    for j in 1..=k {
        let tau = mixing_time_tau(inp.lambda_p, inp.zeta, j, inp.k_p)?;
        sum += inp.eta(j) * tau as f64;
    }
    let psi_d_s = (1.0 + inp.n as f64) * inp.grad_bound * inp.sigma * (inp.dim as f64).sqrt() * inp.s
        / 2.0
        * sum;
    report(inp, k, psi_d_s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposition1Verdict {
    pub epsilon: f64,
    /// `(1+n)·D·σ·√d·s / √ln(1/λ_P)`.
    pub precision_threshold: f64,
    pub precision_ok: bool,
    pub bits: u32,
    /// `32/ϱ − 64/d`.
    pub bits_threshold: f64,
    pub bits_ok: bool,
    /// Both conditions hold: `b`-bit quantization sends fewer bits overall.
    pub saves_communication: bool,
}

/// Whether `b`-bit quantized training needs less communication than 32-bit
/// training, given target accuracy `epsilon` and round-count ratio `rho_ratio`.
pub fn proposition1_check(inp: &TheoryInputs, epsilon: f64, rho_ratio: f64, bits: u32) -> Result<Proposition1Verdict> {
    if !(rho_ratio > 1.0) {
        return Err(Error::Analysis("ϱ must exceed 1".into()));
    }
    if bits < 2 {
        return Err(Error::Analysis("b must be at least 2".into()));
    }
    if !(inp.lambda_p > 0.0 && inp.lambda_p < 1.0) {
        return Err(Error::Analysis("λ_P must lie in (0, 1)".into()));
    }
    let precision_threshold = (1.0 + inp.n as f64) * inp.grad_bound * inp.sigma * (inp.dim as f64).sqrt() * inp.s
        / (1.0 / inp.lambda_p).ln().sqrt();
    let bits_threshold = 32.0 / rho_ratio - 64.0 / inp.dim as f64;
    let precision_ok = epsilon > precision_threshold;
    let bits_ok = (bits as f64) < bits_threshold;
    Ok(Proposition1Verdict {
        epsilon,
        precision_threshold,
        precision_ok,
        bits,
        bits_threshold,
        bits_ok,
        saves_communication: precision_ok && bits_ok,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizeCheckpoint {
    pub k: u64,
    pub sum_eta: f64,
    pub sum_log_eta_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checkpoints: Vec<StepSizeCheckpoint>,
    /// `Σ η` diverges (`q ≤ 1`).
    pub sum_eta_diverges: bool,
    /// `Σ ln k·η²` converges (`q > ½`).
    pub sum_log_eta_sq_converges: bool,
    pub satisfied: bool,
    pub flags: Vec<String>,
}

/// Partial sums of `Σ η` and `Σ ln k·η²` at powers of ten up to `horizon`,
/// with the analytic verdict from the exponent.
pub fn assumption_check(r_const: f64, q_exp: f64, horizon: u64) -> Result<AssumptionReport> {
    if horizon < 10 {
        return Err(Error::Analysis("horizon must be at least 10".into()));
    }
    if !(r_const > 0.0) {
        return Err(Error::Analysis("R must be positive".into()));
    }
    let mut checkpoints = Vec::new();
    let (mut sum_eta, mut sum_log) = (0.0, 0.0);
    let mut next = 10;
    for j in 1..=horizon {
        let eta = 1.0 / (r_const * (j as f64).powf(q_exp));
        sum_eta += eta;
        sum_log += (j as f64).ln() * eta * eta;
        if j == next || j == horizon {
            checkpoints.push(StepSizeCheckpoint {
                k: j,
                sum_eta,
                sum_log_eta_sq: sum_log,
            });
            if j == next {
                next = next.saturating_mul(10);
            }
        }
    }
    let sum_eta_diverges = q_exp <= 1.0;
    let sum_log_eta_sq_converges = q_exp > 0.5;
    let mut flags = Vec::new();
    if !sum_eta_diverges {
        flags.push("step-size schedule violates Σ η = ∞".to_string());
    }
    if !sum_log_eta_sq_converges {
        flags.push("step-size schedule violates Σ ln k·η² < ∞".to_string());
    }
    Ok(AssumptionReport {
        checkpoints,
        sum_eta_diverges,
        sum_log_eta_sq_converges,
        satisfied: sum_eta_diverges && sum_log_eta_sq_converges,
        flags,
    })
}
