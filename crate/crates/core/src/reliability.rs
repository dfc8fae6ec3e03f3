//! Day-to-day reliability optimisation: minimum average travel time per
//! demand realisation, its distribution under the peak-flow law, and the
//! mean–standard-deviation threshold policy in discrete and continuous form.

use serde::{Deserialize, Serialize};

use crate::demand::{
    trapezoid_alpha, trapezoid_beta, trapezoid_total, PeakDistribution, QUEUE_DISSIPATION_LIMIT,
    TRAPEZOID_A, TRAPEZOID_B, TRAPEZOID_END_H, TRAPEZOID_PEAK_H,
};
use crate::error::{domain, Error, Result};
use crate::numerics::{bisect, integrate_adaptive, GaussLegendre};

/// Free-flow travel time used by the analytic pipeline [min].
pub const FREE_FLOW_MIN: f64 = 5.0;

/// Which form of the queueing formulas to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MinTtVariant {
    /// Closed forms taken literally: maximum queue `L₂ = H²/2 (1/α + 1/β)`, exit time
    /// `t₁ = 2 + 2 sqrt(L₂ / (q_p - b))`, denominator `2 q_p + a + b`.
    Verbatim,
    /// Direct fluid-queue derivation: queue `H²/(2α)` at the peak, `t₁` from
    /// the zero-queue root, denominator `A(0, 5)` and a post-horizon drain.
    Corrected,
}

/// Minimum average travel time of one demand realisation with its
/// intermediate quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinTtBreakdown {
    pub q_p: f64,
    /// Minimum average travel time [min].
    pub minutes: f64,
    /// Rise slope [veh/h²].
    pub alpha: f64,
    /// Fall slope [veh/h²].
    pub beta: f64,
    /// Peak excess `q_p - q_bn` [veh/h].
    pub h: f64,
    /// Queue onset [h].
    pub t0: f64,
    /// Queue clearance [h].
    pub t1: f64,
    /// `t₁ - 2` [h].
    pub s1: f64,
    /// Queue at the peak used by the variant [veh].
    pub l2: f64,
    /// Total queueing delay [veh·h].
    pub t_queue: f64,
    /// Vehicles in the averaging denominator.
    pub vehicles: f64,
}

/// Analytic `T_min,avg(q_p)` for the trapezoid demand and a D/D/1 bottleneck.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinTtModel {
    pub q_bn: f64,
    pub variant: MinTtVariant,
}

impl MinTtModel {
    pub fn new(q_bn: f64, variant: MinTtVariant) -> Self {
        Self { q_bn, variant }
    }

    pub fn breakdown(&self, q_p: f64) -> Result<MinTtBreakdown> {
        if q_p > QUEUE_DISSIPATION_LIMIT {
            return Err(Error::QueuePersists { q_p, limit: QUEUE_DISSIPATION_LIMIT });
        }
        if !(q_p >= TRAPEZOID_A) {
            return Err(domain("peak flow", q_p));
        }
        let (alpha, beta) = (trapezoid_alpha(q_p), trapezoid_beta(q_p));
        let h = q_p - self.q_bn;
        let mut out = MinTtBreakdown {
            q_p,
            minutes: FREE_FLOW_MIN,
            alpha,
            beta,
            h,
            t0: f64::NAN,
            t1: f64::NAN,
            s1: 0.0,
            l2: 0.0,
            t_queue: 0.0,
            vehicles: match self.variant {
                MinTtVariant::Verbatim => 2.0 * q_p + TRAPEZOID_A + TRAPEZOID_B,
                MinTtVariant::Corrected => trapezoid_total(q_p),
            },
        };
        if h <= 0.0 {
            return Ok(out);
        }
        let t0 = (self.q_bn - TRAPEZOID_A) / alpha;
        let rise = alpha / 6.0 * (TRAPEZOID_PEAK_H - t0).powi(3);
        out.t0 = t0;
        match self.variant {
            MinTtVariant::Verbatim => {
                let l2 = h * h / 2.0 * (1.0 / alpha + 1.0 / beta);
                let t1 = 2.0 + 2.0 * (l2 / (q_p - TRAPEZOID_B)).sqrt();
                let s1 = t1 - 2.0;
                out.l2 = l2;
                out.t1 = t1;
                out.s1 = s1;
                out.t_queue = rise + l2 * s1 + h / 2.0 * s1 * s1 - beta / 6.0 * s1.powi(3);
            }
            MinTtVariant::Corrected => {
                let q2 = h * h / (2.0 * alpha);
                let s1 = (h + (h * h + 2.0 * beta * q2).sqrt()) / beta;
                let fall = TRAPEZOID_END_H - TRAPEZOID_PEAK_H;
                out.l2 = q2;
                if s1 <= fall {
                    out.s1 = s1;
                    out.t1 = TRAPEZOID_PEAK_H + s1;
                    out.t_queue = rise + q2 * s1 + h / 2.0 * s1 * s1 - beta / 6.0 * s1.powi(3);
                } else {
                    // Backlog left at the horizon drains at capacity with no arrivals.
                    let q5 = q2 + h * fall - beta / 2.0 * fall * fall;
                    let drain = q5 / self.q_bn;
                    out.s1 = fall + drain;
                    out.t1 = TRAPEZOID_END_H + drain;
                    out.t_queue = rise + q2 * fall + h / 2.0 * fall * fall - beta / 6.0 * fall.powi(3)
                        + q5 * q5 / (2.0 * self.q_bn);
                }
            }
        }
        out.minutes = FREE_FLOW_MIN + 60.0 * out.t_queue / out.vehicles;
        Ok(out)
    }

    /// `T_min,avg(q_p)` [min].
    pub fn minutes(&self, q_p: f64) -> Result<f64> {
        Ok(self.breakdown(q_p)?.minutes)
    }

    fn minutes_unchecked(&self, q_p: f64) -> f64 {
        self.breakdown(q_p).map(|b| b.minutes).unwrap_or(f64::NAN)
    }

    /// Peak flow at which the corrected queue just clears at the horizon.
    pub fn horizon_clearance_peak(&self) -> Option<f64> {
        if self.variant != MinTtVariant::Corrected {
            return None;
        }
        let f = |q: f64| self.breakdown(q).map(|b| b.t1 - TRAPEZOID_END_H).unwrap_or(f64::NAN);
        bisect(f, self.q_bn + 1e-6, QUEUE_DISSIPATION_LIMIT, 1e-9, 200).ok()
    }
}

/// [`MinTtModel`] with the calibrated bottleneck capacity 6240 veh/h.
pub fn min_avg_tt(q_p: f64, variant: MinTtVariant) -> Result<MinTtBreakdown> {
    MinTtModel::new(6240.0, variant).breakdown(q_p)
}

/// Mean, standard deviation and objective of the floored travel time
/// `max{T, r}` with the derivative of the objective in `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloorObjective {
    pub r: f64,
    /// `P(T <= r)`.
    pub p: f64,
    pub mean: f64,
    pub std: f64,
    pub j: f64,
    /// `dJ/dr`.
    pub dj: f64,
}

/// Distribution of `T_min,avg` induced by the peak-flow distribution.
#[derive(Debug, Clone)]
pub struct MinTtDistribution {
    pub model: MinTtModel,
    pub peak: PeakDistribution,
    /// Upper limit of the q-integrals; the truncated tail beyond carries
    /// less than 1e-30 of the mass.
    q_hi: f64,
    /// Points where `T(q)` is not smooth.
    kinks: Vec<f64>,
}

impl MinTtDistribution {
    pub fn new(model: MinTtModel, peak: PeakDistribution) -> Result<Self> {
        peak.validate()?;
        if peak.upper_vph > QUEUE_DISSIPATION_LIMIT {
            return Err(Error::QueuePersists { q_p: peak.upper_vph, limit: QUEUE_DISSIPATION_LIMIT });
        }
        if peak.lower_vph < TRAPEZOID_A {
            return Err(domain("peak lower bound", peak.lower_vph));
        }
        let q_hi = peak.upper_vph.min(peak.mean_vph + 12.0 * peak.std_vph);
        let mut kinks = vec![model.q_bn];
        kinks.extend(model.horizon_clearance_peak());
        kinks.retain(|&k| k > peak.lower_vph && k < q_hi);
        Ok(Self { model, peak, q_hi, kinks })
    }

    /// Calibrated distribution with the given pipeline variant.
    pub fn calibrated(variant: MinTtVariant) -> Self {
        Self::new(MinTtModel::new(6240.0, variant), PeakDistribution::default())
            .expect("calibrated inputs are valid")
    }

    pub fn t_of_q(&self, q: f64) -> f64 {
        self.model.minutes_unchecked(q)
    }

    /// Smallest peak flow with `T(q) >= t`.
    pub fn q_of_t(&self, t: f64) -> f64 {
        if t <= FREE_FLOW_MIN {
            return self.model.q_bn.max(self.peak.lower_vph);
        }
        let hi = self.peak.upper_vph;
        if t >= self.t_of_q(hi) {
            return hi;
        }
        let mut lo = self.model.q_bn;
        let mut up = hi;
        for _ in 0..200 {
            let mid = 0.5 * (lo + up);
            if mid <= lo || mid >= up {
                break;
            }
            if self.t_of_q(mid) < t {
                lo = mid;
            } else {
                up = mid;
            }
        }
        0.5 * (lo + up)
    }

    /// Mass of the atom at the free-flow time.
    pub fn atom(&self) -> f64 {
        self.peak.cdf(self.model.q_bn)
    }

    /// Essential supremum of `T_min,avg`.
    pub fn ess_sup(&self) -> f64 {
        self.t_of_q(self.peak.upper_vph)
    }

    /// `P(T <= r)`.
    pub fn cdf(&self, r: f64) -> f64 {
        if r < FREE_FLOW_MIN {
            0.0
        } else {
            self.peak.cdf(self.q_of_t(r))
        }
    }

    /// `∫_{q_lo}^{q_hi} g(T(q)) f(q) dq` split at the kinks of `T`.
    fn q_integral<G: Fn(f64) -> f64>(&self, q_lo: f64, g: G) -> f64 {
        let start = q_lo.max(self.peak.lower_vph);
        let mut edges = vec![start];
        edges.extend(self.kinks.iter().copied().filter(|&k| k > start));
        edges.push(self.q_hi);
        edges
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| {
                integrate_adaptive(|q| g(self.t_of_q(q)) * self.peak.pdf(q), w[0], w[1], 1e-14)
            })
            .sum()
    }

    /// Mean and standard deviation of `T_min,avg`.
    pub fn moments(&self) -> (f64, f64) {
        let o = self.objective(FREE_FLOW_MIN, 1.0);
        (o.mean, o.std)
    }

    /// Objective `J(r) = α E[max{T,r}] + (1-α) Std[max{T,r}]` and `J'(r)`.
    pub fn objective(&self, r: f64, alpha: f64) -> FloorObjective {
        let r = r.max(FREE_FLOW_MIN);
        let p = self.cdf(r);
        let q_r = self.q_of_t(r);
        let m1 = self.q_integral(q_r, |t| t);
        let mean = r * p + m1;
        let var = (p * (r - mean).powi(2) + self.q_integral(q_r, |t| (t - mean).powi(2))).max(0.0);
        let std = var.sqrt();
        let j = alpha * mean + (1.0 - alpha) * std;
        let dj = if std > 0.0 {
            alpha * p + (1.0 - alpha) * (r - mean) * p / std
        } else {
            alpha
        };
        FloorObjective { r, p, mean, std, j, dj }
    }

    /// `J'(r)` with the extra `½ r² φ(r)` term found in one stated scalar form,
    /// where `φ` is the density of `T`. Kept for comparison; it is not the
    /// derivative of `J`.
    pub fn literal_derivative(&self, r: f64, alpha: f64) -> f64 {
        let o = self.objective(r, alpha);
        if o.std == 0.0 {
            return alpha;
        }
        let phi = self.density(r);
        alpha * o.p + (1.0 - alpha) * (r * o.p + 0.5 * r * r * phi - o.mean * o.p) / o.std
    }

    /// Continuous density of `T_min,avg` at `t > 5`; the atom at 5 is
    /// reported by [`Self::atom`].
    pub fn density(&self, t: f64) -> f64 {
        if t <= FREE_FLOW_MIN || t >= self.ess_sup() {
            return 0.0;
        }
        let q = self.q_of_t(t);
        let h = 1e-3 * self.peak.std_vph;
        let lo = self.model.q_bn;
        let d = if q - 2.0 * h > lo && q + 2.0 * h < self.peak.upper_vph {
            (-self.t_of_q(q + 2.0 * h) + 8.0 * self.t_of_q(q + h) - 8.0 * self.t_of_q(q - h)
                + self.t_of_q(q - 2.0 * h))
                / (12.0 * h)
        } else if q + 2.0 * h < self.peak.upper_vph {
            (-3.0 * self.t_of_q(q) + 4.0 * self.t_of_q(q + h) - self.t_of_q(q + 2.0 * h)) / (2.0 * h)
        } else {
            (3.0 * self.t_of_q(q) - 4.0 * self.t_of_q(q - h) + self.t_of_q(q - 2.0 * h)) / (2.0 * h)
        };
        if d > 0.0 {
            self.peak.pdf(q) / d
        } else {
            0.0
        }
    }

    /// Weight above which the floor collapses to the free-flow time.
    pub fn alpha_crit(&self) -> f64 {
        let (m1, s0) = self.moments();
        (m1 - FREE_FLOW_MIN) / (m1 - FREE_FLOW_MIN + s0)
    }

    /// Optimal floor for weight `alpha`.
    pub fn solve_threshold(&self, alpha: f64) -> Result<ThresholdSolution> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(domain("alpha", alpha));
        }
        let sup = self.ess_sup();
        let r_star = if alpha >= 1.0 || alpha >= self.alpha_crit() {
            FREE_FLOW_MIN
        } else if alpha <= 0.0 {
            sup
        } else {
            let lo = FREE_FLOW_MIN;
            let dj = |r: f64| if r >= sup { alpha } else { self.objective(r, alpha).dj };
            bisect(dj, lo, sup, 1e-6, 60)?
        };
        let o = self.objective(r_star, alpha);
        Ok(ThresholdSolution {
            r_star,
            alpha,
            mean: o.mean,
            std: o.std,
            j: o.j,
            critical_index: None,
            q_p_star: (r_star > FREE_FLOW_MIN).then(|| self.q_of_t(r_star)),
            targets: Vec::new(),
        })
    }
}

/// Threshold policy: targets are `max{r*, bound}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSolution {
    /// Optimal floor [min].
    pub r_star: f64,
    pub alpha: f64,
    /// `E` of the targets [min].
    pub mean: f64,
    /// `Std` of the targets [min].
    pub std: f64,
    /// Objective value [min].
    pub j: f64,
    /// Discrete case: number of realisations lifted to (or sitting at) the
    /// floor, counted in ascending order of bounds.
    pub critical_index: Option<usize>,
    /// Continuous case: peak flow whose minimum travel time equals the floor.
    pub q_p_star: Option<f64>,
    /// Discrete case: targets in the input order.
    pub targets: Vec<f64>,
}

impl ThresholdSolution {
    /// Target for a realisation with minimum travel time `t_min`.
    pub fn target(&self, t_min: f64) -> f64 {
        t_min.max(self.r_star)
    }
}

fn weighted_moments(t: &[f64], p: &[f64]) -> (f64, f64) {
    let mean: f64 = t.iter().zip(p).map(|(t, p)| t * p).sum();
    let var: f64 = t.iter().zip(p).map(|(t, p)| p * (t - mean).powi(2)).sum();
    (mean, var.max(0.0).sqrt())
}

/// `α E[T] + (1-α) Std[T]` of a discrete target vector.
pub fn discrete_objective(t: &[f64], p: &[f64], alpha: f64) -> f64 {
    let (m, s) = weighted_moments(t, p);
    alpha * m + (1.0 - alpha) * s
}

fn validate_discrete(m: &[f64], p: &[f64], alpha: f64) -> Result<()> {
    if m.is_empty() {
        return Err(Error::Empty);
    }
    if m.len() != p.len() {
        return Err(Error::Config("bounds and probabilities differ in length".into()));
    }
    if let Some(&bad) = m.iter().find(|v| !v.is_finite()) {
        return Err(domain("bound", bad));
    }
    if let Some(&bad) = p.iter().find(|v| !(**v > 0.0)) {
        return Err(domain("probability", bad));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(domain("probability total", total));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(domain("alpha", alpha));
    }
    Ok(())
}

/// Minimises `α E[T] + (1-α) Std[T]` subject to `T_i >= m_i` over threshold
/// policies, scanning the sorted bounds and the stationary floor inside each
/// gap between consecutive bounds.
pub fn discrete_solve(m: &[f64], p: &[f64], alpha: f64) -> Result<ThresholdSolution> {
    validate_discrete(m, p, alpha)?;
    let n = m.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[a].total_cmp(&m[b]));
    let ms: Vec<f64> = order.iter().map(|&i| m[i]).collect();
    let ps: Vec<f64> = order.iter().map(|&i| p[i]).collect();

    let eval = |r: f64| {
        let t: Vec<f64> = ms.iter().map(|&b| b.max(r)).collect();
        discrete_objective(&t, &ps, alpha)
    };

    let mut candidates: Vec<f64> = ms.clone();
    let a2 = alpha * alpha;
    let b2 = (1.0 - alpha) * (1.0 - alpha);
    let mut p_low = 0.0;
    for j in 0..n - 1 {
        p_low += ps[j];
        let (lo, hi) = (ms[j], ms[j + 1]);
        if hi <= lo {
            continue;
        }
        let q = 1.0 - p_low;
        let s1: f64 = (j + 1..n).map(|i| ps[i] * ms[i]).sum();
        let s2: f64 = (j + 1..n).map(|i| ps[i] * ms[i] * ms[i]).sum();
        // (1-α)² (S1 - rQ)² = α² Var(r), a quadratic in r.
        let qa = b2 * q * q - a2 * p_low * q;
        let qb = -2.0 * b2 * s1 * q + 2.0 * a2 * p_low * s1;
        let qc = b2 * s1 * s1 - a2 * (s2 - s1 * s1);
        let mut roots = Vec::new();
        if qa.abs() > 1e-14 * (qb.abs() + qc.abs()).max(1e-300) {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                let r1 = (-qb - qb.signum() * sq) / (2.0 * qa);
                roots.push(r1);
                if r1 != 0.0 {
                    roots.push(qc / (qa * r1));
                }
            }
        } else if qb != 0.0 {
            roots.push(-qc / qb);
        }
        for r in roots {
            if r > lo && r < hi && s1 - r * q >= 0.0 {
                candidates.push(r);
            }
        }
    }

    let mut best_r = ms[0];
    let mut best_j = eval(best_r);
    for &r in &candidates {
        let j = eval(r);
        let better = j < best_j - 1e-15 * best_j.abs().max(1.0);
        let tie = (j - best_j).abs() <= 1e-15 * best_j.abs().max(1.0) && r < best_r;
        if better || tie {
            best_r = r;
            best_j = j;
        }
    }

    let targets: Vec<f64> = m.iter().map(|&b| b.max(best_r)).collect();
    let (mean, std) = weighted_moments(&targets, p);
    Ok(ThresholdSolution {
        r_star: best_r,
        alpha,
        mean,
        std,
        j: best_j,
        critical_index: Some(ms.iter().filter(|&&b| b <= best_r).count()),
        q_p_star: None,
        targets,
    })
}

/// Outcome of checking the four optimality conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// Multipliers `λ_i` in input order.
    pub lambda: Vec<f64>,
    /// Largest `|λ_i|` over non-binding targets.
    pub stationarity: f64,
    /// Largest `|λ_i (T_i - m_i)|`.
    pub complementary_slackness: f64,
    /// Smallest `T_i - m_i`.
    pub primal_slack: f64,
    /// Smallest `λ_i`.
    pub dual_min: f64,
    pub violations: Vec<String>,
}

impl KktReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks stationarity, complementary slackness, primal and dual
/// feasibility of `targets` for bounds `m`, weights `p` and weight `alpha`.
///
/// Multipliers are `λ_i = p_i (α + (1-α)(T_i - E)/Std)`. When all targets
/// coincide the standard deviation is not differentiable and the multipliers
/// come from the subgradient that zeroes the non-binding components.
pub fn kkt_verify(targets: &[f64], m: &[f64], p: &[f64], alpha: f64) -> KktReport {
    const TOL: f64 = 1e-8;
    let n = m.len();
    let (mean, std) = weighted_moments(targets, p);
    let scale = targets.iter().fold(1.0f64, |a, t| a.max(t.abs()));
    let binding: Vec<bool> = (0..n).map(|i| targets[i] - m[i] <= 1e-12 * scale).collect();
    let mut violations = Vec::new();

    let degenerate = std <= 1e-12 * scale;
    let lambda: Vec<f64> = if !degenerate {
        (0..n).map(|i| p[i] * (alpha + (1.0 - alpha) * (targets[i] - mean) / std)).collect()
    } else if alpha >= 1.0 {
        p.to_vec()
    } else {
        // Subgradient z with Σ p z = 0: z_i = -α/(1-α) off the bounds and a
        // common value on them.
        let ratio = alpha / (1.0 - alpha);
        let p_free: f64 = (0..n).filter(|&i| !binding[i]).map(|i| p[i]).sum();
        let p_bind = 1.0 - p_free;
        let c = if p_bind > 0.0 { p_free * ratio / p_bind } else { 0.0 };
        let norm2 = p_free * ratio * ratio + p_bind * c * c;
        if p_bind <= 0.0 && p_free > 0.0 || norm2 > 1.0 + TOL {
            violations.push(format!(
                "no subgradient of the standard deviation makes the free multipliers vanish (norm² {norm2:.3e})"
            ));
        }
        (0..n)
            .map(|i| if binding[i] { p[i] * (alpha + (1.0 - alpha) * c) } else { 0.0 })
            .collect()
    };

    let stationarity = (0..n)
        .filter(|&i| !binding[i])
        .map(|i| lambda[i].abs())
        .fold(0.0, f64::max);
    let complementary_slackness = (0..n)
        .map(|i| (lambda[i] * (targets[i] - m[i])).abs())
        .fold(0.0, f64::max);
    let primal_slack = (0..n).map(|i| targets[i] - m[i]).fold(f64::INFINITY, f64::min);
    let dual_min = lambda.iter().copied().fold(f64::INFINITY, f64::min);

    if stationarity > TOL {
        violations.push(format!("stationarity residual {stationarity:.3e}"));
    }
    if complementary_slackness > TOL {
        violations.push(format!("complementary slackness residual {complementary_slackness:.3e}"));
    }
    if primal_slack < 0.0 {
        violations.push(format!("target below its bound by {:.3e}", -primal_slack));
    }
    if dual_min < -TOL {
        violations.push(format!("negative multiplier {dual_min:.3e}"));
    }
    KktReport { lambda, stationarity, complementary_slackness, primal_slack, dual_min, violations }
}

/// Average travel time [min] of the uncontrolled corridor with capacity drop:
/// a fluid queue at the bottleneck that discharges at `(1-Δ) q_bn` from the
/// moment arrivals first exceed `q_bn` until it empties.
pub fn uncontrolled_avg_tt(q_p: f64, q_bn: f64, drop_fraction: f64) -> Result<f64> {
    let profile = crate::demand::trapezoid_profile(q_p)?;
    let dt = 1.0 / 7200.0;
    let reduced = (1.0 - drop_fraction) * q_bn;
    let (mut queue, mut dropped, mut delay) = (0.0f64, false, 0.0f64);
    let mut k = 0usize;
    loop {
        let t = k as f64 * dt;
        let arrivals = profile.cumulative(t + dt) - profile.cumulative(t);
        if !dropped && arrivals > q_bn * dt {
            dropped = drop_fraction > 0.0;
        }
        let service = if dropped { reduced } else { q_bn } * dt;
        let next = (queue + arrivals - service).max(0.0);
        delay += 0.5 * (queue + next) * dt;
        queue = next;
        if dropped && queue <= 0.0 {
            dropped = false;
        }
        k += 1;
        if t >= profile.end() && queue <= 0.0 {
            break;
        }
        if t > profile.end() + 50.0 {
            return Err(Error::HorizonTruncated { entry_h: profile.end(), end_h: t });
        }
    }
    Ok(FREE_FLOW_MIN + 60.0 * delay / profile.total())
}

/// Mean and standard deviation of [`uncontrolled_avg_tt`] under `peak`.
pub fn uncontrolled_moments(peak: &PeakDistribution, q_bn: f64, drop_fraction: f64) -> Result<(f64, f64)> {
    let rule = GaussLegendre::order32();
    let lo = peak.lower_vph.max(peak.mean_vph - 10.0 * peak.std_vph);
    let hi = peak.upper_vph.min(peak.mean_vph + 10.0 * peak.std_vph);
    let panels = 24;
    let width = (hi - lo) / panels as f64;
    let mut nodes = Vec::new();
    for i in 0..panels {
        let a = lo + width * i as f64;
        nodes.extend(rule.mapped(a, a + width));
    }
    let mut m0 = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (q, w) in nodes {
        let f = peak.pdf(q) * w;
        let t = uncontrolled_avg_tt(q, q_bn, drop_fraction)?;
        m0 += f;
        m1 += f * t;
        m2 += f * t * t;
    }
    let mean = m1 / m0;
    Ok((mean, (m2 / m0 - mean * mean).max(0.0).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::sample_peak;
    use crate::numerics::norm_cdf;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn free_flow_below_capacity() {
        for v in [MinTtVariant::Verbatim, MinTtVariant::Corrected] {
            assert_eq!(min_avg_tt(6240.0, v).unwrap().minutes, 5.0);
            assert_eq!(min_avg_tt(5800.0, v).unwrap().minutes, 5.0);
            assert!(matches!(min_avg_tt(10200.0, v), Err(Error::QueuePersists { .. })));
            assert!(min_avg_tt(5000.0, v).is_err());
        }
    }

    #[test]
    fn corrected_pipeline_matches_fluid_queue() {
        // Oracle: D/D/1 on a fine grid with the same trapezoid.
        for q_p in [6400.0, 6620.0, 7000.0, 7600.0, 9000.0] {
            let p = crate::demand::trapezoid_profile(q_p).unwrap();
            let analytic = min_avg_tt(q_p, MinTtVariant::Corrected).unwrap().minutes;
            let numeric = uncontrolled_avg_tt(q_p, 6240.0, 0.0).unwrap();
            assert!((analytic - numeric).abs() < 2e-4, "{q_p}: {analytic} vs {numeric}");
            let dd1 = crate::corridor_sim::dd1_average_travel_time(
                &p,
                9.3,
                &crate::fundamental_diagram::FundamentalDiagram::default(),
                6240.0,
                1e-4,
            )
            .unwrap();
            assert!((analytic - (dd1 * 60.0 + 5.0 - 9.3 / 112.0 * 60.0)).abs() < 2e-3);
        }
    }

    #[test]
    fn breakdown_intermediates() {
        let b = min_avg_tt(6620.0, MinTtVariant::Corrected).unwrap();
        assert!((b.alpha - (6620.0 - 5571.84) / 2.0).abs() < 1e-9);
        assert!((b.beta - (6620.0 - 4606.96) / 3.0).abs() < 1e-9);
        assert!((b.h - 380.0).abs() < 1e-9);
        assert!((b.l2 - 380.0 * 380.0 / (2.0 * b.alpha)).abs() < 1e-9);
        // queue vanishes at s1
        let q = b.l2 + b.h * b.s1 - b.beta / 2.0 * b.s1 * b.s1;
        assert!(q.abs() < 1e-8);
        let v = min_avg_tt(6620.0, MinTtVariant::Verbatim).unwrap();
        assert!((v.t1 - (2.0 + 2.0 * (v.l2 / (6620.0 - 4606.96)).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn curves_strictly_increase_above_capacity() {
        for v in [MinTtVariant::Verbatim, MinTtVariant::Corrected] {
            let mut prev = 5.0;
            for i in 1..=400 {
                let q = 6240.0 + (10152.0 - 6240.0) * i as f64 / 400.0;
                let t = min_avg_tt(q, v).unwrap().minutes;
                assert!(t > prev, "{v:?} at {q}");
                prev = t;
            }
        }
    }

    #[test]
    fn density_normalises_with_atom() {
        for v in [MinTtVariant::Verbatim, MinTtVariant::Corrected] {
            let d = MinTtDistribution::calibrated(v);
            let atom = d.atom();
            assert!((atom - norm_cdf((6240.0 - 6620.0) / 191.0)).abs() < 1e-6);
            assert!((atom - 0.0234).abs() < 5e-4);
            // t = 5 + u³ removes the integrable singularity at the atom.
            let top = (d.t_of_q(d.q_hi) - 5.0).cbrt();
            let mass = integrate_adaptive(|u| d.density(5.0 + u * u * u) * 3.0 * u * u, 0.0, top, 1e-10);
            assert!((mass + atom - 1.0).abs() < 1e-6, "{v:?}: {}", mass + atom);
        }
    }

    #[test]
    fn density_mean_matches_monte_carlo() {
        let d = MinTtDistribution::calibrated(MinTtVariant::Corrected);
        let top = (d.t_of_q(d.q_hi) - 5.0).cbrt();
        let mean_density = 5.0 * d.atom()
            + integrate_adaptive(
                |u| {
                    let t = 5.0 + u * u * u;
                    t * d.density(t) * 3.0 * u * u
                },
                0.0,
                top,
                1e-10,
            );
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| d.t_of_q(sample_peak(&d.peak, &mut rng)))
            .collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean_density - m).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean_density} vs {m}");
        assert!((d.moments().0 - mean_density).abs() < 1e-6);
    }

    #[test]
    fn objective_below_infimum_is_unfloored() {
        let d = MinTtDistribution::calibrated(MinTtVariant::Corrected);
        let (m, s) = d.moments();
        let o = d.objective(4.0, 0.4);
        assert!((o.j - (0.4 * m + 0.6 * s)).abs() < 1e-12);
        assert!((o.p - d.atom()).abs() < 1e-12);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let d = MinTtDistribution::calibrated(MinTtVariant::Corrected);
        let sup = d.t_of_q(8200.0);
        let h = 1e-4;
        for i in 0..50 {
            let r = 5.0 + 0.01 + (sup - 5.01) * i as f64 / 49.0;
            let o = d.objective(r, 0.3);
            let fd = (d.objective(r + h, 0.3).j - d.objective(r - h, 0.3).j) / (2.0 * h);
            assert!((o.dj - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "r {r}: {} vs {fd}", o.dj);
        }
    }

    #[test]
    fn threshold_limits() {
        let d = MinTtDistribution::calibrated(MinTtVariant::Corrected);
        let ac = d.alpha_crit();
        assert!(ac > 0.0 && ac < 1.0);
        let s = d.solve_threshold(ac + 0.01).unwrap();
        assert_eq!(s.r_star, 5.0);
        assert!(s.q_p_star.is_none());
        assert_eq!(d.solve_threshold(1.0).unwrap().r_star, 5.0);
        let s0 = d.solve_threshold(0.0).unwrap();
        assert!((s0.r_star - d.ess_sup()).abs() < 1e-12);
        let s = d.solve_threshold(0.3).unwrap();
        assert!(s.r_star > 5.0 && s.r_star < d.ess_sup());
        assert!(d.objective(s.r_star, 0.3).dj.abs() < 1e-4);
        // identity T* = E - α/(1-α) Std
        assert!((s.r_star - (s.mean - 0.3 / 0.7 * s.std)).abs() < 1e-5);
        let q = s.q_p_star.unwrap();
        assert!((d.t_of_q(q) - s.r_star).abs() < 1e-9);
    }

    #[test]
    fn objective_is_unimodal_on_grid() {
        let d = MinTtDistribution::calibrated(MinTtVariant::Corrected);
        let sup = d.t_of_q(8500.0);
        for alpha in [0.2, 0.3, 0.4, 0.5] {
            let signs: Vec<bool> = (0..200)
                .map(|i| d.objective(5.0 + (sup - 5.0) * i as f64 / 199.0, alpha).dj > 0.0)
                .collect();
            let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
            assert!(changes <= 1, "alpha {alpha}: {changes} sign changes");
        }
    }

    #[test]
    fn targets_dominate_minimum_travel_times() {
        let d = MinTtDistribution::calibrated(MinTtVariant::Corrected);
        let s = d.solve_threshold(0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let t = d.t_of_q(sample_peak(&d.peak, &mut rng));
            assert!(s.target(t) >= t);
        }
    }

    #[test]
    fn literal_derivative_differs_from_exact() {
        let d = MinTtDistribution::calibrated(MinTtVariant::Corrected);
        let r = 5.6;
        assert!(d.literal_derivative(r, 0.3) > d.objective(r, 0.3).dj + 1e-3);
    }

    #[test]
    fn uncontrolled_with_drop_is_slower() {
        let base = uncontrolled_avg_tt(6620.0, 6240.0, 0.0).unwrap();
        let dropped = uncontrolled_avg_tt(6620.0, 6240.0, 0.1).unwrap();
        assert!(dropped > base);
        assert_eq!(uncontrolled_avg_tt(6000.0, 6240.0, 0.1).unwrap(), 5.0);
    }

    #[test]
    fn discrete_degenerate_cases() {
        let s = discrete_solve(&[5.0, 5.0, 5.0], &[1.0 / 3.0; 3], 0.4).unwrap();
        assert_eq!(s.r_star, 5.0);
        assert_eq!(s.std, 0.0);
        assert!((s.j - 0.4 * 5.0).abs() < 1e-12);
        let m = [5.0, 6.5, 5.2, 9.0];
        let p = [0.1, 0.2, 0.3, 0.4];
        let s = discrete_solve(&m, &p, 1.0).unwrap();
        assert_eq!(s.targets, m.to_vec());
        let s = discrete_solve(&m, &p, 0.0).unwrap();
        assert!(s.std < 1e-12 && s.r_star == 9.0);
        assert!(matches!(discrete_solve(&[], &[], 0.5), Err(Error::Empty)));
        assert!(discrete_solve(&[1.0], &[0.5], 0.5).is_err());
    }

    #[test]
    fn kkt_detects_perturbations() {
        let m = [5.0, 5.5, 6.0, 7.5, 9.0];
        let p = [0.3, 0.2, 0.2, 0.2, 0.1];
        let s = discrete_solve(&m, &p, 0.3).unwrap();
        let rep = kkt_verify(&s.targets, &m, &p, 0.3);
        assert!(rep.ok(), "{:?}", rep.violations);
        let free = (0..5).find(|&i| s.targets[i] > m[i]).unwrap();
        let mut bumped = s.targets.clone();
        bumped[free] += 0.1;
        assert!(kkt_verify(&bumped, &m, &p, 0.3).stationarity > 1e-8);
        let mut below = s.targets.clone();
        below[4] = m[4] - 0.01;
        assert!(kkt_verify(&below, &m, &p, 0.3).primal_slack < 0.0);
    }

    /// Accelerated projected gradient on the smoothed objective over the box
    /// `m_i <= T_i <= max m`.
    fn projected_gradient(m: &[f64], p: &[f64], alpha: f64) -> f64 {
        let n = m.len();
        let hi = m.iter().cloned().fold(f64::MIN, f64::max);
        let eps = 1e-9;
        let obj = |t: &[f64]| {
            let (mean, _) = weighted_moments(t, p);
            let var: f64 = t.iter().zip(p).map(|(t, p)| p * (t - mean).powi(2)).sum();
            alpha * mean + (1.0 - alpha) * (var + eps * eps).sqrt()
        };
        let grad = |t: &[f64]| {
            let (mean, _) = weighted_moments(t, p);
            let var: f64 = t.iter().zip(p).map(|(t, p)| p * (t - mean).powi(2)).sum();
            let s = (var + eps * eps).sqrt();
            (0..n).map(|i| p[i] * (alpha + (1.0 - alpha) * (t[i] - mean) / s)).collect::<Vec<_>>()
        };
        let proj = |t: &mut [f64]| {
            for i in 0..n {
                t[i] = t[i].clamp(m[i], hi);
            }
        };
        let mut x: Vec<f64> = m.to_vec();
        let mut y = x.clone();
        let mut step = 1.0;
        let mut tk = 1.0f64;
        for _ in 0..200_000 {
            let g = grad(&y);
            let fy = obj(&y);
            let mut x_new;
            loop {
                x_new = y.iter().zip(&g).map(|(y, g)| y - step * g).collect::<Vec<_>>();
                proj(&mut x_new);
                let d: Vec<f64> = x_new.iter().zip(&y).map(|(a, b)| a - b).collect();
                let lin: f64 = d.iter().zip(&g).map(|(d, g)| d * g).sum();
                let quad: f64 = d.iter().map(|d| d * d).sum::<f64>() / (2.0 * step);
                if obj(&x_new) <= fy + lin + quad + 1e-15 {
                    break;
                }
                step *= 0.5;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
            let restart = obj(&x_new) > obj(&x);
            y = x_new
                .iter()
                .zip(&x)
                .map(|(a, b)| a + (tk - 1.0) / t_next * (a - b))
                .collect();
            if restart {
                y = x_new.clone();
                tk = 1.0;
            } else {
                tk = t_next;
            }
            x = x_new;
            step *= 1.1;
        }
        discrete_objective(&x, p, alpha)
    }

    #[test]
    fn discrete_matches_projected_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..6 {
            let m: Vec<f64> = (0..6).map(|_| rng.random_range(5.0..9.0)).collect();
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..1.0)).collect();
            let tot: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|x| x / tot).collect();
            let alpha = rng.random_range(0.05..0.95);
            let s = discrete_solve(&m, &p, alpha).unwrap();
            let oracle = projected_gradient(&m, &p, alpha);
            assert!((s.j - oracle).abs() < 1e-6, "{} vs {oracle}", s.j);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn discrete_solutions_have_threshold_structure(
            m in proptest::collection::vec(5.0f64..12.0, 1..=10),
            seed in any::<u64>(),
            alpha in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = m.iter().map(|_| rng.random_range(0.05..1.0)).collect();
            let tot: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|x| x / tot).collect();
            let s = discrete_solve(&m, &p, alpha).unwrap();
            let rep = kkt_verify(&s.targets, &m, &p, alpha);
            prop_assert!(rep.ok(), "{:?}", rep.violations);
            for (t, b) in s.targets.iter().zip(&m) {
                prop_assert!(*t == b.max(s.r_star));
            }
            if s.std > 0.0 && alpha < 1.0 && s.targets.iter().zip(&m).any(|(t, b)| t > b) {
                let rhs = s.mean - alpha / (1.0 - alpha) * s.std;
                prop_assert!((s.r_star - rhs).abs() < 1e-6);
            }
        }

        #[test]
        fn mean_preserving_contraction_improves(
            t in proptest::collection::vec(5.0f64..12.0, 3..=8),
            alpha in 0.0f64..0.99,
        ) {
            let n = t.len();
            let p = vec![1.0 / n as f64; n];
            let (ia, ib) = (0..n).fold((0, 0), |(lo, hi), i| {
                (if t[i] < t[lo] { i } else { lo }, if t[i] > t[hi] { i } else { hi })
            });
            prop_assume!(t[ib] - t[ia] > 1e-3);
            let eps = 0.25 * (t[ib] - t[ia]);
            let mut c = t.clone();
            c[ia] += eps;
            c[ib] -= eps;
            prop_assert!(discrete_objective(&c, &p, alpha) < discrete_objective(&t, &p, alpha));
        }
    }
}
