//! Capped Ornstein–Uhlenbeck model of the bottleneck discharge capacity.
//!
//! The free process `dC̃ = κ (c_max − C̃) dt + σ dW` runs in minutes with
//! flows in veh/h, so `σ` is in veh/h per √min. The observed capacity is
//! `C = min(C̃, c_max)`. Cumulative discharge `M(u) = ∫ C ds / 60` is in
//! vehicles.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::numerics::{integrate_adaptive, norm_cdf, norm_pdf, GaussLegendre};

/// Parameters of the capped OU capacity process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuParams {
    /// Mean-reversion rate [1/min].
    pub kappa_per_min: f64,
    /// Cap and long-run mean of the free process [veh/h].
    pub c_max_vph: f64,
    /// Diffusion scale [veh/h per √min].
    pub sigma: f64,
}

impl Default for OuParams {
    fn default() -> Self {
        Self { kappa_per_min: 0.2, c_max_vph: 6240.0, sigma: 139.5 }
    }
}

impl OuParams {
    pub fn new(kappa_per_min: f64, c_max_vph: f64, sigma: f64) -> Result<Self> {
        let p = Self { kappa_per_min, c_max_vph, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_per_min > 0.0 && self.kappa_per_min.is_finite()) {
            return Err(domain("kappa", self.kappa_per_min));
        }
        if !(self.c_max_vph > 0.0 && self.c_max_vph.is_finite()) {
            return Err(domain("c_max", self.c_max_vph));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(domain("sigma", self.sigma));
        }
        if self.delta() >= self.c_max_vph {
            return Err(Error::Config(format!(
                "mean capacity loss {} veh/h must stay below c_max {}",
                self.delta(),
                self.c_max_vph
            )));
        }
        Ok(())
    }

    /// Stationary mean loss below the cap, `σ / √(4πκ)` [veh/h].
    pub fn delta(&self) -> f64 {
        self.sigma / (4.0 * PI * self.kappa_per_min).sqrt()
    }

    /// Stationary variance of the free process, `σ² / 2κ` [(veh/h)²].
    pub fn stationary_var(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.kappa_per_min)
    }

    /// Mean and variance of the free process `s` minutes after starting at `c0`.
    pub fn free_moments(&self, s: f64, c0: f64) -> (f64, f64) {
        let a = self.c_max_vph - c0;
        let m = self.c_max_vph - a * (-self.kappa_per_min * s).exp();
        let v = self.stationary_var() * -(-2.0 * self.kappa_per_min * s).exp_m1();
        (m, v)
    }
}

/// Capped OU process advanced with the exact Gaussian transition.
#[derive(Debug, Clone, Copy)]
pub struct CappedOu {
    params: OuParams,
    /// State of the free process.
    free: f64,
}

impl CappedOu {
    pub fn new(params: OuParams, c0: f64) -> Self {
        Self { params, free: c0 }
    }

    /// Starts from a draw of the stationary free distribution.
    pub fn stationary<R: Rng + ?Sized>(params: OuParams, rng: &mut R) -> Self {
        let z: f64 = rng.sample(StandardNormal);
        Self::new(params, params.c_max_vph + params.stationary_var().sqrt() * z)
    }

    /// Current capacity [veh/h].
    pub fn value(&self) -> f64 {
        self.free.min(self.params.c_max_vph)
    }

    pub fn free_value(&self) -> f64 {
        self.free
    }

    pub fn advance<R: Rng + ?Sized>(&mut self, dt_min: f64, rng: &mut R) -> f64 {
        let step = Transition::new(&self.params, dt_min);
        self.advance_with(&step, rng)
    }

    /// Advances with a precomputed transition (hot loops).
    pub fn advance_with<R: Rng + ?Sized>(&mut self, step: &Transition, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        let c = self.params.c_max_vph;
        self.free = c - (c - self.free) * step.decay + step.sd * z;
        self.value()
    }
}

/// Exact one-step transition coefficients for a fixed step.
#[derive(Debug, Clone, Copy)]
pub struct Transition {
    decay: f64,
    sd: f64,
}

impl Transition {
    pub fn new(p: &OuParams, dt_min: f64) -> Self {
        let decay = (-p.kappa_per_min * dt_min).exp();
        let sd = (p.stationary_var() * (1.0 - decay * decay)).sqrt();
        Self { decay, sd }
    }
}

/// Capacity path of `n + 1` values on the grid `0, dt, …, n dt` [min].
pub fn sample_path<R: Rng + ?Sized>(
    p: &OuParams,
    c0: f64,
    dt_min: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    p.validate()?;
    if c0 > p.c_max_vph {
        return Err(domain("initial capacity", c0));
    }
    if !(dt_min > 0.0) {
        return Err(domain("time step", dt_min));
    }
    let step = Transition::new(p, dt_min);
    let mut proc = CappedOu::new(*p, c0);
    let mut out = Vec::with_capacity(n + 1);
    out.push(proc.value());
    for _ in 0..n {
        out.push(proc.advance_with(&step, rng));
    }
    Ok(out)
}

/// Mean capacity `s` minutes after starting at `c0` [veh/h]:
/// `c_max − a e^{−κs} Φ(d_s) − √v_s φ(d_s)` with `a = c_max − c0`.
pub fn capped_mean(s: f64, c0: f64, p: &OuParams) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(domain("lag", s));
    }
    Ok(capped_mean_unchecked(s, c0, p))
}

fn capped_mean_unchecked(s: f64, c0: f64, p: &OuParams) -> f64 {
    let (m, v) = p.free_moments(s, c0);
    let c = p.c_max_vph;
    if v <= 0.0 {
        return m.min(c);
    }
    let sd = v.sqrt();
    let d = (c - m) / sd;
    c - (c - m) * norm_cdf(d) - sd * norm_pdf(d)
}

/// Expected discharge over `u` minutes [veh], integrating the capped mean.
pub fn discharge_mean(u: f64, c0: f64, p: &OuParams) -> Result<f64> {
    if !(u >= 0.0) {
        return Err(domain("duration", u));
    }
    if u == 0.0 {
        return Ok(0.0);
    }
    let total = integrate_adaptive(|s| capped_mean_unchecked(s, c0, p), 0.0, u, 1e-11 * p.c_max_vph * u);
    Ok(total / 60.0)
}

/// Closed-form approximation
/// `c_max u − a/κ (1 − e^{−κu}) − δ u + δ/(4κ) (1 − e^{−2κu})` [veh].
///
/// It replaces `Φ(d_s)` by one and `√(1 − e^{−2κs})` by its first-order
/// expansion; [`discharge_mean`] integrates the capped mean instead.
pub fn discharge_mean_closed_form(u: f64, c0: f64, p: &OuParams) -> Result<f64> {
    if !(u >= 0.0) {
        return Err(domain("duration", u));
    }
    let k = p.kappa_per_min;
    let a = p.c_max_vph - c0;
    let delta = p.delta();
    let per_min_flow = p.c_max_vph * u - a / k * -(-k * u).exp_m1() - delta * u
        + delta / (4.0 * k) * -(-2.0 * k * u).exp_m1();
    Ok(per_min_flow / 60.0)
}

/// Covariance of `min(W₁ − d₁, 0)` and `min(W₂ − d₂, 0)` for a standard
/// bivariate normal `(W₁, W₂)` with correlation `rho`.
///
/// The inner expectation given `W₁` is evaluated in closed form and the outer
/// one by adaptive quadrature.
pub fn clipped_cov(d1: f64, d2: f64, rho: f64) -> f64 {
    let rho = rho.clamp(-1.0, 1.0);
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let upper = d1.min(10.0);
    let lower = -10.0;
    if upper <= lower {
        return 0.0;
    }
    let inner = |w1: f64| -> f64 {
        let mu = rho * w1 - d2;
        if s < 1e-12 {
            mu.min(0.0)
        } else {
            mu * norm_cdf(-mu / s) - s * norm_pdf(mu / s)
        }
    };
    let f = |w1: f64| (w1 - d1) * norm_pdf(w1) * inner(w1);
    // The inner term bends sharply where the conditional mean crosses zero.
    let mut cuts = vec![lower];
    if rho.abs() > 1e-12 {
        let kink = d2 / rho;
        if kink > lower && kink < upper {
            cuts.push(kink);
        }
    }
    cuts.push(upper);
    let joint: f64 = cuts
        .windows(2)
        .map(|w| integrate_adaptive(f, w[0], w[1], 1e-13))
        .sum();
    joint - clipped_mean(d1) * clipped_mean(d2)
}

/// `E[min(W − d, 0)]` for standard normal `W`.
fn clipped_mean(d: f64) -> f64 {
    -d * norm_cdf(d) - norm_pdf(d)
}

/// Clipped covariance kernel `h(ρ) = Cov[min(Z₁,0), min(Z₂,0)]`.
pub fn clipped_kernel(rho: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(domain("correlation", rho));
    }
    Ok(clipped_cov(0.0, 0.0, rho))
}

/// `K = ∫₀¹ h(r)/r dr`, computed once.
pub fn kernel_constant() -> f64 {
    static K: OnceLock<f64> = OnceLock::new();
    *K.get_or_init(|| integrate_adaptive(|r| clipped_cov(0.0, 0.0, r) / r, 0.0, 1.0, 1e-10))
}

/// `∫₀¹ ln(r) h(r)/r dr`, the constant offset of the stationary variance.
fn kernel_log_moment() -> f64 {
    static L: OnceLock<f64> = OnceLock::new();
    *L.get_or_init(|| integrate_adaptive(|r| r.ln() * clipped_cov(0.0, 0.0, r) / r, 0.0, 1.0, 1e-10))
}

/// Variance of the discharge over `u` minutes for a process started at `c0`
/// [veh²]. Integrates the transient clipped covariance over `[0, u]²`.
pub fn discharge_var(u: f64, c0: f64, p: &OuParams) -> Result<f64> {
    if !(u >= 0.0) {
        return Err(domain("duration", u));
    }
    if c0 > p.c_max_vph {
        return Err(domain("initial capacity", c0));
    }
    if u == 0.0 || p.sigma == 0.0 {
        return Ok(0.0);
    }
    let c = p.c_max_vph;
    let k = p.kappa_per_min;
    let cov = |s: f64, t: f64| -> f64 {
        // s <= t
        let (ms, vs) = p.free_moments(s, c0);
        let (mt, vt) = p.free_moments(t, c0);
        if vs <= 0.0 || vt <= 0.0 {
            return 0.0;
        }
        let rho = (-k * (t - s)).exp() * (vs / vt).sqrt();
        (vs * vt).sqrt() * clipped_cov((c - ms) / vs.sqrt(), (c - mt) / vt.sqrt(), rho)
    };
    // 2 ∫₀^u ∫₀^t Cov(t − x², t) 2x dx dt, with τ = x² removing the
    // square-root behaviour of the kernel at zero lag.
    let rule = GaussLegendre::order32();
    let panels = ((k * u).ceil() as usize).clamp(2, 64);
    let total = rule.integrate_composite(
        |t| {
            let xmax = t.sqrt();
            let inner_panels = ((k * t).sqrt().ceil() as usize).clamp(1, 8);
            rule.integrate_composite(|x| 2.0 * x * cov(t - x * x, t), 0.0, xmax, inner_panels)
        },
        0.0,
        u,
        panels,
    );
    Ok(2.0 * total / 3600.0)
}

/// Discharge variance over `u` minutes for a stationary start [veh²]:
/// `σ²/κ² ∫_{e^{−κu}}^1 (u + ln r / κ) h(r)/r dr`.
pub fn discharge_var_stationary(u: f64, p: &OuParams) -> Result<f64> {
    if !(u >= 0.0) {
        return Err(domain("duration", u));
    }
    if u == 0.0 {
        return Ok(0.0);
    }
    let k = p.kappa_per_min;
    let scale = p.sigma * p.sigma / (k * k);
    let lo = (-k * u).exp();
    let body = if lo < 1e-12 {
        kernel_constant() * u + kernel_log_moment() / k
    } else {
        integrate_adaptive(
            |r| (u + r.ln() / k) * clipped_cov(0.0, 0.0, r) / r,
            lo,
            1.0,
            1e-10 * u,
        )
    };
    Ok(scale * body / 3600.0)
}

/// Linear growth law `K σ² u / κ²` [veh²].
pub fn discharge_var_asymptotic(u: f64, p: &OuParams) -> f64 {
    let k = p.kappa_per_min;
    kernel_constant() * p.sigma * p.sigma / (k * k) * u / 3600.0
}

/// Variance rate used in the inverse-Gaussian queue-delay approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceRate {
    /// `K σ² / κ²`, the slope of the discharge variance.
    #[default]
    Kernel,
    /// Bare `σ²`.
    Bare,
}

/// Drift–diffusion approximation of the discharge process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGaussianDelay {
    /// Net discharge drift [veh/min].
    pub drift: f64,
    /// Variance growth [veh²/min].
    pub var_rate: f64,
}

impl InverseGaussianDelay {
    pub fn new(p: &OuParams, rate: VarianceRate) -> Self {
        let drift = (p.c_max_vph - p.delta()) / 60.0;
        let per_min = match rate {
            VarianceRate::Kernel => {
                kernel_constant() * p.sigma * p.sigma / (p.kappa_per_min * p.kappa_per_min)
            }
            VarianceRate::Bare => p.sigma * p.sigma,
        };
        Self { drift, var_rate: per_min / 3600.0 }
    }

    /// IG mean `μ = B / drift` [min] and shape `λ = B² / var_rate` [min].
    pub fn parameters(&self, backlog: f64) -> (f64, f64) {
        (backlog / self.drift, backlog * backlog / self.var_rate)
    }

    /// Mean [min] and variance [min²] of the time to discharge `backlog`.
    pub fn moments(&self, backlog: f64) -> (f64, f64) {
        if backlog <= 0.0 {
            return (0.0, 0.0);
        }
        (backlog / self.drift, backlog * self.var_rate / self.drift.powi(3))
    }

    pub fn pdf(&self, backlog: f64, t: f64) -> f64 {
        if t <= 0.0 || backlog <= 0.0 {
            return 0.0;
        }
        let (mu, lambda) = self.parameters(backlog);
        (lambda / (2.0 * PI * t.powi(3))).sqrt() * (-lambda * (t - mu).powi(2) / (2.0 * mu * mu * t)).exp()
    }

    pub fn cdf(&self, backlog: f64, t: f64) -> f64 {
        if backlog <= 0.0 {
            return 1.0;
        }
        if t <= 0.0 {
            return 0.0;
        }
        let (mu, lambda) = self.parameters(backlog);
        let r = (lambda / t).sqrt();
        let first = norm_cdf(r * (t / mu - 1.0));
        // e^{2λ/μ} Φ(−r(t/μ + 1)) overflows term by term for large λ/μ.
        let second = (2.0 * lambda / mu + crate::numerics::ln_norm_sf(r * (t / mu + 1.0))).exp();
        (first + second).min(1.0)
    }
}

/// Mean [min] and variance [min²] of the time to discharge `backlog` vehicles.
pub fn queue_delay_moments(backlog: f64, p: &OuParams, rate: VarianceRate) -> Result<(f64, f64)> {
    if !(backlog >= 0.0) {
        return Err(domain("backlog", backlog));
    }
    Ok(InverseGaussianDelay::new(p, rate).moments(backlog))
}

/// Simulated time [min] until the discharge of a stationary-start process
/// reaches `backlog`, with linear interpolation inside the crossing step.
/// `None` if it does not happen within `max_min`.
pub fn first_passage_time<R: Rng + ?Sized>(
    p: &OuParams,
    backlog: f64,
    dt_min: f64,
    max_min: f64,
    rng: &mut R,
) -> Option<f64> {
    if backlog <= 0.0 {
        return Some(0.0);
    }
    let step = Transition::new(p, dt_min);
    let mut proc = CappedOu::stationary(*p, rng);
    let mut c_prev = proc.value();
    let mut m = 0.0;
    let mut t = 0.0;
    while t < max_min {
        let c_next = proc.advance_with(&step, rng);
        let inc = 0.5 * (c_prev + c_next) * dt_min / 60.0;
        if m + inc >= backlog {
            return Some(t + dt_min * (backlog - m) / inc);
        }
        m += inc;
        t += dt_min;
        c_prev = c_next;
    }
    None
}
