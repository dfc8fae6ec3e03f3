//! Experiment runners behind the command-line tool. Each returns plain rows
//! that serialize to CSV with a fixed column order.

use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::budget_mpc::{run_controlled, run_uncontrolled};
use crate::corridor_sim::{average_travel_time, CorridorConfig};
use crate::demand::{sample_peak, trapezoid_profile};
use crate::error::Result;
use crate::ou_capacity::{first_passage_time, kernel_constant, queue_delay_moments, OuParams, VarianceRate};
use crate::reliability::{
    discrete_objective, discrete_solve, kkt_verify, uncontrolled_moments, MinTtDistribution, MinTtModel,
    MinTtVariant, FREE_FLOW_MIN,
};
use crate::scenario::Scenario;
use crate::smpc_gain::{
    optimize_gain, simulate_policy_trace, validate_policy, vsl_window, GainSearchConfig, SampledTraceRow, TraceRow,
    ValidationPolicy, ValidationStats,
};

/// Reference rows: α, τ*, q_p*, E, Std, J_min, ΔJ, relative improvement [%].
/// The first row is the critical-weight row with no binding peak flow.
pub const REFERENCE_TABLE1: [(f64, f64, Option<f64>, f64, f64, f64, f64, f64); 5] = [
    (0.57, 5.00, None, 5.69, 0.637, 3.67, -2.91, -44.2),
    (0.5, 5.44, Some(6525.0), 5.70, 0.632, 3.16, -2.62, -39.8),
    (0.4, 6.08, Some(6667.0), 5.81, 0.539, 2.65, -2.35, -35.7),
    (0.3, 6.77, Some(6788.0), 6.11, 0.380, 2.10, -2.10, -31.9),
    (0.2, 7.50, Some(6909.0), 6.60, 0.218, 1.49, -1.92, -29.2),
];

/// One row of the reliability table for one pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Table1Row {
    pub pipeline: MinTtVariant,
    pub alpha: f64,
    pub tau_star: f64,
    /// Empty when the floor is the free-flow time.
    pub q_p_star: Option<f64>,
    #[serde(rename = "E_tau")]
    pub e_tau: f64,
    #[serde(rename = "Std_tau")]
    pub std_tau: f64,
    #[serde(rename = "J_min")]
    pub j_min: f64,
    #[serde(rename = "delta_J")]
    pub delta_j: f64,
    /// `ΔJ / J_baseline` [%].
    pub rel_improvement: f64,
    pub reference_tau_star: f64,
    #[serde(rename = "reference_Std_tau")]
    pub reference_std_tau: f64,
}

/// Rows for the critical weight and each configured weight, for both
/// pipelines (corrected rows first). The baseline is the uncontrolled
/// corridor with capacity drop.
pub fn table1(sc: &Scenario) -> Result<Vec<Table1Row>> {
    let (e0, s0) = uncontrolled_moments(&sc.demand.peak, sc.corridor.q_bn_vph, sc.corridor.drop_fraction)?;
    let mut rows = Vec::new();
    for variant in [MinTtVariant::Corrected, MinTtVariant::Verbatim] {
        let dist = MinTtDistribution::new(MinTtModel::new(sc.corridor.q_bn_vph, variant), sc.demand.peak)?;
        let mut alphas = vec![dist.alpha_crit()];
        alphas.extend(&sc.demand.alphas);
        for (i, &alpha) in alphas.iter().enumerate() {
            let sol = dist.solve_threshold(alpha)?;
            let j0 = alpha * e0 + (1.0 - alpha) * s0;
            let reference = if i == 0 {
                Some(REFERENCE_TABLE1[0])
            } else {
                REFERENCE_TABLE1.iter().skip(1).find(|r| (r.0 - alpha).abs() < 1e-12).copied()
            };
            rows.push(Table1Row {
                pipeline: variant,
                alpha,
                tau_star: sol.r_star,
                q_p_star: sol.q_p_star,
                e_tau: sol.mean,
                std_tau: sol.std,
                j_min: sol.j,
                delta_j: sol.j - j0,
                rel_improvement: 100.0 * (sol.j - j0) / j0,
                reference_tau_star: reference.map_or(f64::NAN, |r| r.1),
                reference_std_tau: reference.map_or(f64::NAN, |r| r.4),
            });
        }
    }
    Ok(rows)
}

/// One simulated day of the demand Monte Carlo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DayRow {
    pub day: usize,
    pub q_p_vph: f64,
    pub t_min_analytic: f64,
    pub target_min: f64,
    pub controlled_min: f64,
    pub uncontrolled_min: f64,
}

/// Mean, standard deviation and `α E + (1-α) Std` of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub j: f64,
}

impl Summary {
    pub fn of(x: &[f64], alpha: f64) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = if x.len() > 1 { x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        let std = var.sqrt();
        Self { mean, std, j: alpha * mean + (1.0 - alpha) * std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemandMcReport {
    pub alpha: f64,
    pub r_star: f64,
    pub days: Vec<DayRow>,
    pub controlled: Summary,
    pub uncontrolled: Summary,
}

/// Closed-loop Monte Carlo over sampled peak flows: day `i` draws its peak
/// with seed `seed ^ i`, tracks `max{r*, T_min(q_p)}` with the delay-budget
/// controller and is compared with the uncontrolled corridor.
pub fn demand_mc(sc: &Scenario, n_days: usize, seed: u64) -> Result<DemandMcReport> {
    if n_days == 0 {
        return Err(crate::Error::Config("at least one day is required".into()));
    }
    let corridor = sc.corridor.build()?;
    let dist = sc.min_tt_distribution()?;
    let alpha = sc.demand.mc_alpha;
    let sol = dist.solve_threshold(alpha)?;
    let days: Vec<DayRow> = (0..n_days)
        .into_par_iter()
        .map(|day| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ day as u64);
            let q_p = sample_peak(&sc.demand.peak, &mut rng);
            simulate_day(day, q_p, &dist, sol.r_star, &corridor, sc)
        })
        .collect::<Result<_>>()?;
    let c: Vec<f64> = days.iter().map(|d| d.controlled_min).collect();
    let u: Vec<f64> = days.iter().map(|d| d.uncontrolled_min).collect();
    Ok(DemandMcReport {
        alpha,
        r_star: sol.r_star,
        controlled: Summary::of(&c, alpha),
        uncontrolled: Summary::of(&u, alpha),
        days,
    })
}

/// Controlled and uncontrolled runs for one peak flow.
pub fn simulate_day(
    day: usize,
    q_p: f64,
    dist: &MinTtDistribution,
    r_star: f64,
    corridor: &CorridorConfig,
    sc: &Scenario,
) -> Result<DayRow> {
    let profile = trapezoid_profile(q_p)?;
    let t_min = dist.t_of_q(q_p);
    let target = t_min.max(r_star).max(FREE_FLOW_MIN);
    let run = run_controlled(&profile, target, corridor, &sc.mpc)?;
    let free = run_uncontrolled(&profile, corridor)?;
    Ok(DayRow {
        day,
        q_p_vph: q_p,
        t_min_analytic: t_min,
        target_min: target,
        controlled_min: run.achieved_min,
        uncontrolled_min: average_travel_time(&free)? * 60.0,
    })
}

/// Gain search outcome for one weight.
#[derive(Debug, Clone)]
pub struct GainOutcome {
    pub alpha: f64,
    pub k_star: f64,
    pub j_star: f64,
    pub sweep: Vec<(f64, f64)>,
    /// Expectation rollout at `K*`.
    pub trace: Vec<TraceRow>,
    /// Run at `K*` against one sampled capacity path.
    pub sampled: Vec<SampledTraceRow>,
    pub vsl_window_min: f64,
    pub vsl_floor_kmh: f64,
}

#[derive(Debug, Clone)]
pub struct CapacityReport {
    pub outcomes: Vec<GainOutcome>,
    /// Stochastic validation at the gain-search weight: `K*`, `K = 0` and
    /// no control.
    pub validation_alpha: f64,
    pub validation_gain: f64,
    pub controlled: ValidationStats,
    pub zero_gain: ValidationStats,
    pub uncontrolled: ValidationStats,
}

pub fn gain_outcome(sc: &Scenario, alpha: f64, seed: u64) -> Result<GainOutcome> {
    let cfg = GainSearchConfig { alpha, ..sc.capacity.gain };
    let smpc = sc.smpc();
    let res = optimize_gain(&cfg, &smpc)?;
    let corridor = sc.capacity.corridor.build()?;
    let sampled = simulate_policy_trace(ValidationPolicy::Gain(res.k_star), &cfg, &smpc, &corridor, seed)?;
    let (vsl_window_min, vsl_floor_kmh) = vsl_window(&res.trace, cfg.meter.fd.v_f(), cfg.step_min);
    Ok(GainOutcome {
        alpha,
        k_star: res.k_star,
        j_star: res.j_star,
        sweep: res.sweep,
        trace: res.trace,
        sampled,
        vsl_window_min,
        vsl_floor_kmh,
    })
}

/// Gain searches for the trace weights plus the stochastic validation.
pub fn capacity(sc: &Scenario, seed: u64) -> Result<CapacityReport> {
    let outcomes =
        sc.capacity.trace_alphas.iter().map(|&a| gain_outcome(sc, a, seed)).collect::<Result<Vec<_>>>()?;
    let cfg = sc.capacity.gain;
    let smpc = sc.smpc();
    let k_star = optimize_gain(&cfg, &smpc)?.k_star;
    let corridor = sc.capacity.corridor.build()?;
    let n = sc.capacity.validation_paths;
    let run = |p| validate_policy(p, &cfg, &smpc, &corridor, n, seed);
    Ok(CapacityReport {
        outcomes,
        validation_alpha: cfg.alpha,
        validation_gain: k_star,
        controlled: run(ValidationPolicy::Gain(k_star))?,
        zero_gain: run(ValidationPolicy::Gain(0.0))?,
        uncontrolled: run(ValidationPolicy::Uncontrolled)?,
    })
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<W: Write, T: Serialize>(rows: &[T], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// `K, J` rows of a gain sweep.
pub fn write_sweep_csv<W: Write>(sweep: &[(f64, f64)], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["K", "J"])?;
    for (k, j) in sweep {
        wr.write_record([k.to_string(), j.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

/// Outcome of one self-check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Hard checks decide the exit status; soft ones compare against
    /// reference values and are informational.
    pub hard: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn hard_failures(&self) -> usize {
        self.checks.iter().filter(|c| c.hard && !c.passed).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = match (c.passed, c.hard) {
                (true, _) => "PASS",
                (false, true) => "FAIL",
                (false, false) => "WARN",
            };
            let kind = if c.hard { "hard" } else { "soft" };
            let _ = writeln!(out, "{status} [{kind}] {}: {}", c.name, c.detail);
        }
        let _ = writeln!(out, "{} checks, {} hard failures", self.checks.len(), self.hard_failures());
        out
    }
}

fn check(name: &'static str, hard: bool, passed: bool, detail: String) -> Check {
    Check { name, passed, hard, detail }
}

/// Invariant and oracle checks on the scenario. Deterministic for a given
/// scenario and seed.
pub fn validate(sc: &Scenario, seed: u64) -> Result<ValidationReport> {
    let mut checks = Vec::new();
    let corridor = sc.corridor.build()?;

    // conservation on congested runs with and without control
    let dist = sc.min_tt_distribution()?;
    let sol = dist.solve_threshold(sc.demand.mc_alpha)?;
    let mut worst = 0.0f64;
    let mut density = 0.0f64;
    for q_p in [6400.0, 6620.0, 7000.0] {
        let p = trapezoid_profile(q_p)?;
        let free = run_uncontrolled(&p, &corridor)?;
        let run = run_controlled(&p, dist.t_of_q(q_p).max(sol.r_star), &corridor, &sc.mpc)?;
        for t in [&free, &run.trajectory] {
            worst = worst.max(t.conservation_error / (p.total() + t.initial_on_link));
            density = density.max(t.density_violation);
        }
    }
    checks.push(check(
        "conservation",
        true,
        worst <= 1e-9 && density <= 1e-9,
        format!("max relative residual {worst:.3e}, density excursion {density:.3e}"),
    ));

    // simulator against the analytic minimum travel time (no drop, fine grid)
    let fine = CorridorConfig::cfl_tight(
        sc.corridor.length_km,
        2 * sc.corridor.n_cells,
        sc.corridor.q_bn_vph,
        0.0,
        sc.corridor.fd,
    )?;
    let analytic = MinTtModel::new(sc.corridor.q_bn_vph, MinTtVariant::Corrected);
    let mut worst = 0.0f64;
    for q_p in [6300.0, 6620.0, 7000.0] {
        let sim = average_travel_time(&run_uncontrolled(&trapezoid_profile(q_p)?, &fine)?)? * 60.0;
        let exact = analytic.minutes(q_p)?;
        worst = worst.max((sim - exact).abs() / exact);
    }
    checks.push(check(
        "simulator vs analytic travel time",
        true,
        worst < 0.02,
        format!("max relative gap {:.4}% (limit 2%)", 100.0 * worst),
    ));

    // threshold structure and optimality conditions on random instances
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kkt_fail = 0;
    let n_inst = 200;
    for _ in 0..n_inst {
        let n = rng.random_range(1..=8);
        let m: Vec<f64> = (0..n).map(|_| 5.0 + 5.0 * rng.random::<f64>()).collect();
        let w: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
        let total: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / total).collect();
        let alpha = 0.05 + 0.9 * rng.random::<f64>();
        let s = discrete_solve(&m, &p, alpha)?;
        let ok = kkt_verify(&s.targets, &m, &p, alpha).ok()
            && (discrete_objective(&s.targets, &p, alpha) - s.j).abs() < 1e-9;
        kkt_fail += usize::from(!ok);
    }
    checks.push(check(
        "threshold optimality conditions",
        true,
        kkt_fail == 0,
        format!("{} of {n_inst} random instances fail", kkt_fail),
    ));

    let k = kernel_constant();
    checks.push(check("kernel constant", true, (k - 0.292).abs() <= 0.005, format!("K = {k:.5} (0.292 +- 0.005)")));

    // inverse-Gaussian queue delay against simulated first passage
    let ou: OuParams = sc.capacity.ou;
    let backlog = 20_000.0;
    let (m_ig, v_ig) = queue_delay_moments(backlog, &ou, VarianceRate::Kernel)?;
    let n_paths = 2000;
    let times: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + i as u64));
            first_passage_time(&ou, backlog, 0.05, 10.0 * m_ig, &mut rng).unwrap_or(f64::NAN)
        })
        .collect();
    let fp = Summary::of(&times, 1.0);
    let mean_gap = (fp.mean - m_ig).abs() / m_ig;
    let std_gap = (fp.std - v_ig.sqrt()).abs() / v_ig.sqrt();
    checks.push(check(
        "queue delay moments",
        true,
        mean_gap < 0.05 && std_gap < 0.05,
        format!(
            "B = {backlog}: IG mean {m_ig:.3} sd {:.3}, simulated mean {:.3} sd {:.3} over {n_paths} paths",
            v_ig.sqrt(),
            fp.mean,
            fp.std
        ),
    ));

    // comparisons with reference values
    let a_crit = dist.alpha_crit();
    checks.push(check(
        "critical weight",
        false,
        (a_crit - 0.57).abs() <= 0.02,
        format!("alpha_crit = {a_crit:.4} (reference 0.57)"),
    ));
    for row in table1(sc)?.iter().filter(|r| r.reference_tau_star.is_finite()) {
        let dev = (row.tau_star - row.reference_tau_star) / row.reference_tau_star;
        let name = match row.pipeline {
            MinTtVariant::Corrected => "table row (corrected)",
            MinTtVariant::Verbatim => "table row (verbatim)",
        };
        checks.push(check(
            name,
            false,
            dev.abs() <= 0.05,
            format!(
                "alpha {:.3}: tau* {:.3} vs {:.2} ({:+.1}%), Std {:.3} vs {:.3}",
                row.alpha,
                row.tau_star,
                row.reference_tau_star,
                100.0 * dev,
                row.std_tau,
                row.reference_std_tau
            ),
        ));
    }
    Ok(ValidationReport { checks })
}
