//! Upstream demand profiles and the day-to-day peak-flow distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::numerics::{norm_cdf, norm_pdf, norm_quantile, norm_sf};

/// Flow at `t = 0` of the stochastic profile [veh/h].
pub const TRAPEZOID_A: f64 = 5571.84;
/// Flow at the end of the stochastic profile [veh/h].
pub const TRAPEZOID_B: f64 = 4606.96;
/// Time of the peak of the stochastic profile [h].
pub const TRAPEZOID_PEAK_H: f64 = 2.0;
/// Horizon of the stochastic profile [h].
pub const TRAPEZOID_END_H: f64 = 5.0;
/// Largest peak flow for which the analytic queue model is used [veh/h].
pub const QUEUE_DISSIPATION_LIMIT: f64 = 10152.0;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Knot {
    t: f64,
    left: f64,
    right: f64,
}

/// Piecewise-linear flow profile `q(0, t)` [veh/h] over `[t_0, t_end]` [h].
///
/// Knots may carry a jump (`left != right`); the profile is left-continuous
/// there. Beyond the last knot demand is zero, which is how simulations let
/// the network drain after the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearProfile {
    knots: Vec<Knot>,
    /// Cumulative count at each knot.
    cum: Vec<f64>,
}

impl PiecewiseLinearProfile {
    /// Continuous profile through `(t_i, q_i)`.
    pub fn new(times: &[f64], values: &[f64]) -> Result<Self> {
        Self::with_jumps(times, values, values)
    }

    /// Profile with possibly different left and right limits at each knot.
    pub fn with_jumps(times: &[f64], left: &[f64], right: &[f64]) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Empty);
        }
        if left.len() != times.len() || right.len() != times.len() {
            return Err(Error::Config("profile times and values differ in length".into()));
        }
        for (i, w) in times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::NotMonotone { index: i + 1 });
            }
        }
        if let Some(&bad) = left.iter().chain(right).find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(domain("profile flow", bad));
        }
        let knots: Vec<Knot> = times
            .iter()
            .zip(left.iter().zip(right))
            .map(|(&t, (&l, &r))| Knot { t, left: l, right: r })
            .collect();
        let mut cum = Vec::with_capacity(knots.len());
        cum.push(0.0);
        for w in knots.windows(2) {
            let area = 0.5 * (w[0].right + w[1].left) * (w[1].t - w[0].t);
            cum.push(cum.last().copied().unwrap_or(0.0) + area);
        }
        Ok(Self { knots, cum })
    }

    pub fn start(&self) -> f64 {
        self.knots[0].t
    }

    pub fn end(&self) -> f64 {
        self.knots[self.knots.len() - 1].t
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.knots.iter().map(|k| k.t)
    }

    /// Segment index `i` with `t_i < t <= t_{i+1}` (or 0 at the start).
    fn segment(&self, t: f64) -> usize {
        let idx = self.knots.partition_point(|k| k.t < t);
        idx.saturating_sub(1).min(self.knots.len() - 2)
    }

    fn eval_in(&self, i: usize, t: f64) -> f64 {
        let (k0, k1) = (self.knots[i], self.knots[i + 1]);
        let s = (t - k0.t) / (k1.t - k0.t);
        k0.right + s * (k1.left - k0.right)
    }

    /// Flow at `t`; an error outside the profile's domain.
    pub fn value(&self, t: f64) -> Result<f64> {
        if !(self.start()..=self.end()).contains(&t) {
            return Err(domain("time", t));
        }
        Ok(self.eval_in(self.segment(t), t))
    }

    /// Flow at `t`, zero outside the domain.
    pub fn rate(&self, t: f64) -> f64 {
        if t < self.start() || t > self.end() {
            0.0
        } else {
            self.eval_in(self.segment(t), t)
        }
    }

    /// Exact integral of the profile from its start to `t` [veh].
    pub fn cumulative(&self, t: f64) -> f64 {
        if t <= self.start() {
            return 0.0;
        }
        if t >= self.end() {
            return self.cum[self.cum.len() - 1];
        }
        let i = self.segment(t);
        let k0 = self.knots[i];
        let q_t = self.eval_in(i, t);
        self.cum[i] + 0.5 * (k0.right + q_t) * (t - k0.t)
    }

    /// Total vehicles over the whole profile.
    pub fn total(&self) -> f64 {
        self.cum[self.cum.len() - 1]
    }

    /// Linear pieces `(t0, t1, q0, q1)` in time order.
    pub fn pieces(&self) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
        self.knots.windows(2).map(|w| (w[0].t, w[1].t, w[0].right, w[1].left))
    }

    /// Samples `(t, q)` on a uniform grid with spacing `dt`.
    pub fn sample_grid(&self, dt: f64) -> Vec<(f64, f64)> {
        let n = ((self.end() - self.start()) / dt).round() as usize;
        (0..=n)
            .map(|i| {
                let t = self.start() + dt * i as f64;
                (t, self.rate(t.min(self.end())))
            })
            .collect()
    }
}

/// Deterministic calibrated demand: `447.23 t + 5795.46` up to `t = 1.5 h`,
/// then `-620.37 t + 7708.81`, on `[0, 5]` h. The two pieces do not meet at
/// the breakpoint; the jump is kept.
pub fn det_profile() -> PiecewiseLinearProfile {
    let f1 = |t: f64| 447.23 * t + 5795.46;
    let f2 = |t: f64| -620.37 * t + 7708.81;
    PiecewiseLinearProfile::with_jumps(
        &[0.0, 1.5, TRAPEZOID_END_H],
        &[f1(0.0), f1(1.5), f2(TRAPEZOID_END_H)],
        &[f1(0.0), f2(1.5), f2(TRAPEZOID_END_H)],
    )
    .expect("calibrated profile is valid")
}

/// Rise slope `(q_p - a) / 2` of the trapezoid [veh/h²].
pub fn trapezoid_alpha(q_p: f64) -> f64 {
    (q_p - TRAPEZOID_A) / TRAPEZOID_PEAK_H
}

/// Fall slope `(q_p - b) / 3` of the trapezoid [veh/h²].
pub fn trapezoid_beta(q_p: f64) -> f64 {
    (q_p - TRAPEZOID_B) / (TRAPEZOID_END_H - TRAPEZOID_PEAK_H)
}

/// Stochastic-day profile: linear rise from `a` to `q_p` on `[0, 2]`, linear
/// fall at slope `beta(q_p)` to `b` at `t = 5`.
pub fn trapezoid_profile(q_p: f64) -> Result<PiecewiseLinearProfile> {
    if !(q_p >= TRAPEZOID_A) || !q_p.is_finite() {
        return Err(domain("peak flow (below the initial flow a)", q_p));
    }
    let end = (q_p - (TRAPEZOID_END_H - TRAPEZOID_PEAK_H) * trapezoid_beta(q_p)).max(0.0);
    PiecewiseLinearProfile::new(
        &[0.0, TRAPEZOID_PEAK_H, TRAPEZOID_END_H],
        &[TRAPEZOID_A, q_p, end],
    )
}

/// Closed-form `A(0, 5)` of the trapezoid profile.
pub fn trapezoid_total(q_p: f64) -> f64 {
    (TRAPEZOID_A + q_p) + 1.5 * (q_p + TRAPEZOID_B)
}

/// The two-piece stochastic profile exactly as given in the calibration
/// (breakpoint 1.5 h, horizon 3 h). Its pieces and endpoints do not agree
/// with the trapezoid used by the analysis; kept for regression only.
pub fn stoch_up_verbatim(q_p: f64) -> Result<PiecewiseLinearProfile> {
    let f1 = |x: f64| (q_p - 5795.46) / 1.5 * x + 5571.84;
    let f2 = |x: f64| (5227.33 - q_p) / 1.5 * x + (q_p - 2.0 * (5847.7 - q_p) / 1.5);
    let (l, r) = (f1(1.5), f2(1.5));
    let end = f2(3.0);
    PiecewiseLinearProfile::with_jumps(&[0.0, 1.5, 3.0], &[f1(0.0), l, end], &[f1(0.0), r, end])
}

/// Truncated normal distribution of the daily peak flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakDistribution {
    pub mean_vph: f64,
    pub std_vph: f64,
    pub lower_vph: f64,
    pub upper_vph: f64,
}

impl Default for PeakDistribution {
    fn default() -> Self {
        Self {
            mean_vph: 6620.0,
            std_vph: 191.0,
            lower_vph: TRAPEZOID_A,
            upper_vph: QUEUE_DISSIPATION_LIMIT,
        }
    }
}

impl PeakDistribution {
    pub fn validate(&self) -> Result<()> {
        if !(self.std_vph > 0.0) {
            return Err(domain("peak std", self.std_vph));
        }
        if !(self.lower_vph >= 0.0 && self.lower_vph <= self.upper_vph) {
            return Err(Error::Config(format!(
                "peak truncation bounds must satisfy 0 <= lower <= upper (got [{}, {}])",
                self.lower_vph, self.upper_vph
            )));
        }
        Ok(())
    }

    fn z(&self, q: f64) -> f64 {
        (q - self.mean_vph) / self.std_vph
    }

    /// Probability mass of the untruncated normal inside the bounds.
    pub fn kept_mass(&self) -> f64 {
        let (za, zb) = (self.z(self.lower_vph), self.z(self.upper_vph));
        if za > 0.0 {
            norm_sf(za) - norm_sf(zb)
        } else {
            norm_cdf(zb) - norm_cdf(za)
        }
    }

    pub fn pdf(&self, q: f64) -> f64 {
        if q < self.lower_vph || q > self.upper_vph {
            return 0.0;
        }
        norm_pdf(self.z(q)) / (self.std_vph * self.kept_mass())
    }

    pub fn cdf(&self, q: f64) -> f64 {
        if q <= self.lower_vph {
            return 0.0;
        }
        if q >= self.upper_vph {
            return 1.0;
        }
        let za = self.z(self.lower_vph);
        let num = if za > 0.0 {
            norm_sf(za) - norm_sf(self.z(q))
        } else {
            norm_cdf(self.z(q)) - norm_cdf(za)
        };
        (num / self.kept_mass()).clamp(0.0, 1.0)
    }

    pub fn mean(&self) -> f64 {
        let (za, zb) = (self.z(self.lower_vph), self.z(self.upper_vph));
        self.mean_vph + self.std_vph * (norm_pdf(za) - norm_pdf(zb)) / self.kept_mass()
    }

    pub fn quantile(&self, p: f64) -> f64 {
        if self.lower_vph == self.upper_vph {
            return self.lower_vph;
        }
        let lo = norm_cdf(self.z(self.lower_vph));
        let hi = norm_cdf(self.z(self.upper_vph));
        let u = lo + p * (hi - lo);
        let q = self.mean_vph + self.std_vph * norm_quantile(u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
        q.clamp(self.lower_vph, self.upper_vph)
    }
}

/// Draws a peak flow by inverse-CDF sampling of the truncated normal.
pub fn sample_peak<R: Rng + ?Sized>(dist: &PeakDistribution, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    dist.quantile(u)
}
