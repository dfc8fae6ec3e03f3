//! Queue-proportional metering with speed-limit actuation under a stochastic
//! bottleneck capacity, and grid search for the feedback gain.
//!
//! The cost rollout runs in one-minute steps against the expected capacity,
//! so `J(K)` is deterministic. Stochastic rollouts against sampled capacity
//! paths in the corridor simulator are provided for validation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget_mpc::{actuator_speed, MeterToSpeed};
use crate::corridor_sim::{simulate_with_capacity, travel_time, CorridorConfig, QueueObserver, SimOptions};
use crate::demand::PiecewiseLinearProfile;
use crate::error::{domain, Error, Result};
use crate::numerics::integrate_adaptive;
use crate::ou_capacity::{capped_mean, InverseGaussianDelay, OuParams, Transition, CappedOu, VarianceRate};

/// Largest speed not above `v_cand` that keeps first-in-first-out order:
/// `ℓ / v ≥ ℓ / v_prev − Δt`.
pub fn fifo_filter(v_prev: f64, v_cand: f64, dt_h: f64, length_km: f64) -> f64 {
    let slack = length_km / v_prev - dt_h;
    if slack <= 0.0 {
        v_cand
    } else {
        v_cand.min(length_km / slack)
    }
}

/// Metering flow `min{d, C − K S}` floored at `floor` (the flow of the
/// minimum speed). Returns the flow and whether the floor was applied.
pub fn metering_law(d: f64, capacity: f64, queue: f64, gain: f64, floor: f64) -> (f64, bool) {
    let raw = d.min(capacity - gain * queue.max(0.0));
    if raw < floor && raw < d {
        (floor.min(d), true)
    } else {
        (raw, false)
    }
}

/// Mean and standard deviation [min] of `max{τ_c, τ_q}` with `τ_q` the
/// inverse-Gaussian time to discharge `backlog` vehicles.
pub fn tt_moments(tau_c: f64, backlog: f64, ig: &InverseGaussianDelay) -> (f64, f64) {
    if backlog <= 0.0 {
        return (tau_c, 0.0);
    }
    let (mu, var) = ig.moments(backlog);
    if var <= 0.0 {
        return (tau_c.max(mu), 0.0);
    }
    let sd = var.sqrt();
    let hi = mu + 40.0 * sd;
    if tau_c >= hi {
        return (tau_c, 0.0);
    }
    let lo = tau_c.max(mu - 40.0 * sd).max(0.0);
    let below = if tau_c > 0.0 { ig.cdf(backlog, tau_c) } else { 0.0 };
    // Centered at μ to keep the variance free of cancellation.
    let mut cuts = vec![lo];
    if mu > lo && mu < hi {
        cuts.push(mu);
    }
    cuts.push(hi);
    let (mut a1, mut a2) = ((tau_c - mu) * below, (tau_c - mu).powi(2) * below);
    for w in cuts.windows(2) {
        a1 += integrate_adaptive(|t| (t - mu) * ig.pdf(backlog, t), w[0], w[1], 1e-13 * sd);
        a2 += integrate_adaptive(|t| (t - mu).powi(2) * ig.pdf(backlog, t), w[0], w[1], 1e-13 * var);
    }
    (mu + a1, (a2 - a1 * a1).max(0.0).sqrt())
}

/// Gain search and rollout settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSearchConfig {
    pub k_min_per_h: f64,
    pub k_max_per_h: f64,
    pub n_grid: usize,
    pub alpha: f64,
    pub horizon_min: usize,
    pub step_min: f64,
    pub length_km: f64,
    pub meter: MeterToSpeed,
    pub variance_rate: VarianceRate,
}

impl Default for GainSearchConfig {
    fn default() -> Self {
        Self {
            k_min_per_h: 0.0,
            k_max_per_h: 0.1,
            n_grid: 60,
            alpha: 0.5,
            horizon_min: 180,
            step_min: 1.0,
            length_km: 9.3,
            meter: MeterToSpeed::default(),
            variance_rate: VarianceRate::Kernel,
        }
    }
}

impl GainSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_min_per_h >= 0.0 && self.k_max_per_h > self.k_min_per_h) {
            return Err(Error::Config(format!(
                "gain grid needs 0 <= K_min < K_max (got {} and {})",
                self.k_min_per_h, self.k_max_per_h
            )));
        }
        if self.n_grid < 2 {
            return Err(Error::Config("gain grid needs at least two points".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(domain("alpha", self.alpha));
        }
        if self.horizon_min == 0 || !(self.step_min > 0.0) {
            return Err(Error::Config("rollout horizon and step must be positive".into()));
        }
        if !(self.length_km > 0.0) {
            return Err(domain("link length", self.length_km));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let n = self.n_grid;
        (0..n)
            .map(|i| self.k_min_per_h + (self.k_max_per_h - self.k_min_per_h) * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Demand and capacity model of a gain-search scenario.
#[derive(Debug, Clone)]
pub struct SmpcScenario {
    /// Upstream demand [veh/h] over time [h].
    pub demand: PiecewiseLinearProfile,
    pub ou: OuParams,
    /// Capacity at the start of the horizon [veh/h].
    pub c0_vph: f64,
}

impl SmpcScenario {
    pub fn calibrated() -> Self {
        Self { demand: crate::demand::det_profile(), ou: OuParams::default(), c0_vph: 6240.0 }
    }

    /// Mean demand over minute `k` [veh/h].
    fn demand_at(&self, k: usize, step_min: f64) -> f64 {
        let t0 = k as f64 * step_min / 60.0;
        let t1 = t0 + step_min / 60.0;
        let end = self.demand.end();
        if t0 >= end {
            return 0.0;
        }
        (self.demand.cumulative(t1.min(end)) - self.demand.cumulative(t0)) / (t1 - t0)
    }
}

/// Per-step record of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub t_min: f64,
    #[serde(rename = "C_expected_vph")]
    pub c_expected_vph: f64,
    pub q_m_vph: f64,
    pub v_posted_kmh: f64,
    #[serde(rename = "S_veh")]
    pub s_veh: f64,
    #[serde(rename = "E_T_min")]
    pub e_t_min: f64,
    #[serde(rename = "Std_T_min")]
    pub std_t_min: f64,
    #[serde(skip)]
    pub cost: f64,
    #[serde(skip)]
    pub floor_applied: bool,
}

/// Expectation-based closed-loop rollout for gain `k_per_h`; returns the
/// horizon cost [veh·min] and the trace.
pub fn horizon_cost(k_per_h: f64, cfg: &GainSearchConfig, sc: &SmpcScenario) -> Result<(f64, Vec<TraceRow>)> {
    cfg.validate()?;
    sc.ou.validate()?;
    if !(k_per_h >= 0.0) {
        return Err(domain("gain", k_per_h));
    }
    let ig = InverseGaussianDelay::new(&sc.ou, cfg.variance_rate);
    let n = cfg.horizon_min;
    let dt_min = cfg.step_min;
    let dt_h = dt_min / 60.0;
    let v_f = cfg.meter.fd.v_f();
    let alpha = cfg.alpha;

    // arrivals[j]: vehicles reaching the bottleneck during step j
    let mut arrivals = vec![0.0; n + 2];
    let (mut upstream, mut queue, mut in_system) = (0.0f64, 0.0f64, 0.0f64);
    let mut v_prev = v_f;
    let mut total = 0.0;
    let mut trace = Vec::with_capacity(n);

    for k in 0..n {
        let c = capped_mean(k as f64 * dt_min, sc.c0_vph, &sc.ou)?;
        let d = sc.demand_at(k, dt_min);
        let avail = d + upstream / dt_h;
        let floor = cfg.meter.floor_flow(avail);
        let (q, floored) = metering_law(avail, c, queue, k_per_h, floor);
        let cand = if q < avail { cfg.meter.speed(q, avail) } else { v_f };
        let v = fifo_filter(v_prev, cand, dt_h, cfg.length_km);
        let admitted = if v < v_f { (v * cfg.meter.density(avail)).min(avail) } else { avail };
        let tau_c = cfg.length_km / v * 60.0;

        let (e, s) = tt_moments(tau_c, in_system, &ig);
        let cost = d * dt_h * (alpha * e + (1.0 - alpha) * s);
        total += cost;
        trace.push(TraceRow {
            t_min: k as f64 * dt_min,
            c_expected_vph: c,
            q_m_vph: admitted,
            v_posted_kmh: v,
            s_veh: queue,
            e_t_min: e,
            std_t_min: s,
            cost,
            floor_applied: floored,
        });

        upstream = (upstream + (d - admitted) * dt_h).max(0.0);
        let entering = admitted * dt_h;
        in_system += entering;
        // Entries spread over the step arrive spread over [k + τ, k + 1 + τ).
        let pos = k as f64 + tau_c / dt_min;
        let first = pos.floor() as usize;
        let frac = pos - first as f64;
        if first < arrivals.len() {
            arrivals[first] += entering * (1.0 - frac);
        }
        if first + 1 < arrivals.len() {
            arrivals[first + 1] += entering * frac;
        }
        let offered = queue + arrivals[k];
        let served = offered.min(c * dt_h);
        queue = offered - served;
        in_system = (in_system - served).max(0.0);
        v_prev = v;
    }
    Ok((total, trace))
}

/// Result of the gain grid search.
#[derive(Debug, Clone)]
pub struct GainSearchResult {
    pub k_star: f64,
    pub j_star: f64,
    /// `(K, J(K))` over the grid.
    pub sweep: Vec<(f64, f64)>,
    pub trace: Vec<TraceRow>,
}

/// Exhaustive grid search; ties go to the smaller gain.
pub fn optimize_gain(cfg: &GainSearchConfig, sc: &SmpcScenario) -> Result<GainSearchResult> {
    cfg.validate()?;
    let sweep: Vec<(f64, f64)> = cfg
        .grid()
        .into_par_iter()
        .map(|k| horizon_cost(k, cfg, sc).map(|(j, _)| (k, j)))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &(_, j)) in sweep.iter().enumerate() {
        if j < sweep[best].1 - 1e-12 * sweep[best].1.abs() {
            best = i;
        }
    }
    let (k_star, j_star) = sweep[best];
    let (_, trace) = horizon_cost(k_star, cfg, sc)?;
    Ok(GainSearchResult { k_star, j_star, sweep, trace })
}

/// Duration with a posted speed below `v_f` [min] and the lowest posted
/// speed of a trace.
pub fn vsl_window(trace: &[TraceRow], v_f: f64, step_min: f64) -> (f64, f64) {
    let active = trace.iter().filter(|r| r.v_posted_kmh < v_f - 1e-9).count() as f64 * step_min;
    let floor = trace.iter().map(|r| r.v_posted_kmh).fold(v_f, f64::min);
    (active, floor)
}

/// Controller applied in the stochastic validation runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ValidationPolicy {
    /// Metering law with the given gain [1/h].
    Gain(f64),
    /// Free-flow speed throughout.
    Uncontrolled,
}

/// Travel-time statistics per departure minute over many capacity paths.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationStats {
    /// Demand-weighted mean of the per-departure mean travel time [min].
    pub mean_min: f64,
    /// Demand-weighted mean of the per-departure standard deviation [min].
    pub std_min: f64,
    pub per_departure: Vec<(f64, f64, f64)>,
}

/// Per-minute record of a run against one sampled capacity path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampledTraceRow {
    pub t_min: f64,
    #[serde(rename = "C_vph")]
    pub c_vph: f64,
    pub q_m_vph: f64,
    pub v_posted_kmh: f64,
    #[serde(rename = "S_veh")]
    pub s_veh: f64,
    /// Realised travel time of the vehicle arriving at `t_min` [min].
    #[serde(rename = "T_min")]
    pub travel_min: f64,
}

/// Corridor run with a sampled capacity path and the metering policy.
/// Returns per-departure travel times [min] at the start of each minute of
/// the horizon (from arrival at the entrance to exit).
pub fn simulate_policy(
    policy: ValidationPolicy,
    cfg: &GainSearchConfig,
    sc: &SmpcScenario,
    corridor: &CorridorConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(simulate_policy_trace(policy, cfg, sc, corridor, seed)?.into_iter().map(|r| r.travel_min).collect())
}

/// As [`simulate_policy`], with the capacity, metering flow, posted speed and
/// bottleneck queue at the start of each minute.
pub fn simulate_policy_trace(
    policy: ValidationPolicy,
    cfg: &GainSearchConfig,
    sc: &SmpcScenario,
    corridor: &CorridorConfig,
    seed: u64,
) -> Result<Vec<SampledTraceRow>> {
    let dt_min = corridor.dt_h * 60.0;
    let horizon_h = cfg.horizon_min as f64 * cfg.step_min / 60.0;
    let profile = sc.demand.clone();
    let drain_h = 3.0;
    let max_steps = ((horizon_h + drain_h) / corridor.dt_h).ceil() as usize + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tr = Transition::new(&sc.ou, dt_min);
    let mut proc = CappedOu::new(sc.ou, sc.c0_vph);
    let mut path = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        path.push(proc.value());
        proc.advance_with(&tr, &mut rng);
    }

    let step_h = cfg.step_min / 60.0;
    if corridor.dt_h > step_h {
        return Err(Error::Config("simulator step must not exceed the control step".into()));
    }
    let v_f = corridor.fd.v_f();
    let mut observer = QueueObserver::new(corridor);
    let mut current: Option<usize> = None;
    let mut v_posted = v_f;
    // (C, q_m, v, S) at the first simulator step of each minute
    let mut minutes: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(cfg.horizon_min);
    let opts = SimOptions { horizon_h: Some(horizon_h), max_drain_h: drain_h, keep_densities: false };
    let traj = simulate_with_capacity(
        corridor,
        &profile,
        &opts,
        |ctx| {
            let queue = observer.observe(ctx);
            let k = (ctx.t_h / step_h + 1e-9).floor() as usize;
            if current != Some(k) {
                current = Some(k);
                let avail = ctx.demand_vph + ctx.state.queue / step_h;
                let c = path[ctx.step.min(path.len() - 1)];
                let q = match policy {
                    ValidationPolicy::Gain(gain) => {
                        let floor = cfg.meter.floor_flow(avail);
                        let (q, _) = metering_law(avail, c, queue, gain, floor);
                        let cand = if q < avail || ctx.state.queue > 0.0 { actuator_speed(q, &cfg.meter) } else { v_f };
                        v_posted = fifo_filter(v_posted, cand, step_h, corridor.length_km);
                        q
                    }
                    ValidationPolicy::Uncontrolled => avail,
                };
                if k < cfg.horizon_min {
                    minutes.push((c, q, v_posted, queue));
                }
            }
            v_posted
        },
        |j, _| path[j.min(path.len() - 1)],
    )?;
    minutes
        .into_iter()
        .enumerate()
        .map(|(k, (c, q, v, s))| {
            let t = k as f64 * step_h;
            Ok(SampledTraceRow {
                t_min: k as f64 * cfg.step_min,
                c_vph: c,
                q_m_vph: q,
                v_posted_kmh: v,
                s_veh: s,
                travel_min: travel_time(&traj, t)? * 60.0,
            })
        })
        .collect()
}

/// Runs `policy` against `n_paths` capacity paths (path `i` uses seed
/// `seed ^ i`) and aggregates per-departure statistics.
pub fn validate_policy(
    policy: ValidationPolicy,
    cfg: &GainSearchConfig,
    sc: &SmpcScenario,
    corridor: &CorridorConfig,
    n_paths: usize,
    seed: u64,
) -> Result<ValidationStats> {
    if n_paths < 2 {
        return Err(Error::Config("validation needs at least two paths".into()));
    }
    let runs: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| simulate_policy(policy, cfg, sc, corridor, seed ^ i as u64))
        .collect::<Result<_>>()?;
    let n = n_paths as f64;
    let mut per_departure = Vec::with_capacity(cfg.horizon_min);
    let (mut wsum, mut msum, mut ssum) = (0.0, 0.0, 0.0);
    for k in 0..cfg.horizon_min {
        let mean = runs.iter().map(|r| r[k]).sum::<f64>() / n;
        let var = runs.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let w = sc.demand_at(k, cfg.step_min);
        wsum += w;
        msum += w * mean;
        ssum += w * var.sqrt();
        per_departure.push((k as f64 * cfg.step_min, mean, var.sqrt()));
    }
    Ok(ValidationStats { mean_min: msum / wsum, std_min: ssum / wsum, per_departure })
}
