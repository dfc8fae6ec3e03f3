//! Acceptance criteria 1–12. Prints one PASS/FAIL line per criterion.
//!
//! Exits with status 0 so that a red criterion does not hide the rest of the
//! workspace results; set `VSLR_STRICT_ACCEPTANCE=1` to exit with status 1
//! when any criterion fails.

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use vslr_core::budget_mpc::{run_controlled, run_uncontrolled, MpcParams};
use vslr_core::corridor_sim::{average_travel_time, simulate_with_capacity, CorridorConfig, SimOptions, Trajectory};
use vslr_core::demand::{det_profile, sample_peak, trapezoid_profile, PeakDistribution};
use vslr_core::experiments::{demand_mc, REFERENCE_TABLE1};
use vslr_core::numerics::{ks_critical_1pct, ks_statistic};
use vslr_core::ou_capacity::{
    capped_mean, discharge_mean, discharge_var, first_passage_time, kernel_constant, sample_path, CappedOu,
    InverseGaussianDelay, OuParams, Transition, VarianceRate,
};
use vslr_core::reliability::{
    discrete_objective, discrete_solve, kkt_verify, MinTtDistribution, MinTtModel, MinTtVariant,
};
use vslr_core::scenario::Scenario;
use vslr_core::smpc_gain::{optimize_gain, validate_policy, GainSearchConfig, SmpcScenario, ValidationPolicy};
use vslr_core::FundamentalDiagram;

const SEED: u64 = 20_240_601;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

fn corridor(n_cells: usize, drop: f64) -> CorridorConfig {
    CorridorConfig::cfl_tight(9.3, n_cells, 6240.0, drop, FundamentalDiagram::default()).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let a = MinTtDistribution::calibrated(MinTtVariant::Corrected).alpha_crit();
    let elapsed = start.elapsed();
    let verbatim = MinTtDistribution::calibrated(MinTtVariant::Verbatim).alpha_crit();
    Outcome {
        id: 1,
        name: "critical alpha",
        passed: (a - 0.57).abs() <= 0.02 && elapsed < Duration::from_secs(1),
        detail: format!("alpha_crit = {a:.4} (expected 0.57 +- 0.02; verbatim pipeline {verbatim:.4}), {}", secs(elapsed)),
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let std_ref = [0.632, 0.539, 0.380, 0.218];
    let mut detail = Vec::new();
    let mut matches = |variant: MinTtVariant| {
        let d = MinTtDistribution::calibrated(variant);
        let mut ok = true;
        let mut parts = Vec::new();
        for (row, s_ref) in REFERENCE_TABLE1[1..].iter().zip(std_ref) {
            let sol = d.solve_threshold(row.0).unwrap();
            let tau_dev = (sol.r_star - row.1) / row.1;
            let std_dev = (sol.std - s_ref) / s_ref;
            ok &= tau_dev.abs() <= 0.05 && std_dev.abs() <= 0.15;
            parts.push(format!("{}: tau* {:.3} ({:+.1}%) Std {:.3} ({:+.1}%)", row.0, sol.r_star, 100.0 * tau_dev, sol.std, 100.0 * std_dev));
        }
        detail.push(format!("{variant:?} [{}]", parts.join("; ")));
        ok
    };
    let corrected = matches(MinTtVariant::Corrected);
    let verbatim = matches(MinTtVariant::Verbatim);
    let elapsed = start.elapsed();
    let canonical = if corrected || !verbatim { "corrected" } else { "verbatim" };
    Outcome {
        id: 2,
        name: "reliability table",
        passed: (corrected || verbatim) && elapsed < Duration::from_secs(10),
        detail: format!("canonical {canonical}; {}; {}", detail.join(" | "), secs(elapsed)),
    }
}

fn criterion_3(trajectories: &mut Vec<Trajectory>) -> Outcome {
    let start = Instant::now();
    let cfg = corridor(62, 0.0);
    let model = MinTtModel::new(6240.0, MinTtVariant::Corrected);
    let runs: Vec<(f64, f64, f64, Trajectory)> = (0..20)
        .into_par_iter()
        .map(|i| {
            let q = 6240.0 + 960.0 * i as f64 / 19.0;
            let traj = run_uncontrolled(&trapezoid_profile(q).unwrap(), &cfg).unwrap();
            let sim = average_travel_time(&traj).unwrap() * 60.0;
            (q, sim, model.minutes(q).unwrap(), traj)
        })
        .collect();
    let elapsed = start.elapsed();
    let (mut worst, mut at) = (0.0f64, 0.0);
    for (q, sim, exact, traj) in runs {
        let gap = (sim - exact).abs() / exact;
        if gap > worst {
            worst = gap;
            at = q;
        }
        trajectories.push(traj);
    }
    Outcome {
        id: 3,
        name: "simulator vs analytic travel time",
        passed: worst < 0.02 && elapsed < Duration::from_secs(60),
        detail: format!("max relative gap {:.3}% at q_p {at:.0} (limit 2%), {}", 100.0 * worst, secs(elapsed)),
    }
}

fn criterion_4(mut trajectories: Vec<Trajectory>) -> Outcome {
    // controlled and uncontrolled days with capacity drop
    let cfg = corridor(31, 0.1);
    let dist = MinTtDistribution::calibrated(MinTtVariant::Corrected);
    let r_star = dist.solve_threshold(0.5).unwrap().r_star;
    let peak = PeakDistribution::default();
    let days: Vec<(Trajectory, Trajectory)> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ i);
            let q = sample_peak(&peak, &mut rng);
            let p = trapezoid_profile(q).unwrap();
            let c = run_controlled(&p, dist.t_of_q(q).max(r_star), &cfg, &MpcParams::default()).unwrap();
            (c.trajectory, run_uncontrolled(&p, &cfg).unwrap())
        })
        .collect();
    for (a, b) in days {
        trajectories.push(a);
        trajectories.push(b);
    }
    // runs against sampled capacity paths
    let ou = OuParams::default();
    let cfg0 = corridor(31, 0.0);
    let profile = det_profile();
    for i in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ (100 + i));
        let path = sample_path(&ou, 6240.0, cfg0.dt_h * 60.0, 4000, &mut rng).unwrap();
        let opts = SimOptions { horizon_h: Some(3.0), max_drain_h: 3.0, keep_densities: true };
        let traj = simulate_with_capacity(&cfg0, &profile, &opts, |_| 112.0, |j, _| path[j.min(path.len() - 1)])
            .unwrap();
        trajectories.push(traj);
    }
    let mut worst = 0.0f64;
    let mut excursion = 0.0f64;
    for t in &trajectories {
        let scale = t.offered.last().copied().unwrap_or(0.0) + t.initial_on_link;
        worst = worst.max(t.conservation_error / scale);
        excursion = excursion.max(t.density_violation);
        for k in t.densities.iter().flatten() {
            if !(0.0..=420.0).contains(k) {
                excursion = excursion.max(1.0);
            }
        }
    }
    Outcome {
        id: 4,
        name: "conservation",
        passed: worst <= 1e-9 && excursion == 0.0,
        detail: format!(
            "{} runs: max relative residual {worst:.2e}, density excursion {excursion:.2e}",
            trajectories.len()
        ),
    }
}

/// Minimises `f` on `[a, b]` by golden-section search.
fn golden<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if b - a < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    f(a).min(f(b)).min(fc).min(fd)
}

/// Brute force over which bounds bind. Non-binding targets share one value
/// (their stationarity conditions coincide), found by golden section.
fn brute_force(m: &[f64], p: &[f64], alpha: f64) -> f64 {
    let n = m.len();
    let hi = m.iter().copied().fold(f64::MIN, f64::max);
    let mut best = discrete_objective(m, p, alpha);
    for mask in 1u32..(1 << n) {
        let lo = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| m[i]).fold(f64::MIN, f64::max);
        let f = |c: f64| {
            let t: Vec<f64> = (0..n).map(|i| if mask & (1 << i) != 0 { c } else { m[i] }).collect();
            discrete_objective(&t, p, alpha)
        };
        best = best.min(golden(f, lo, hi.max(lo)));
    }
    best
}

fn criterion_5() -> Outcome {
    let instances: Vec<(Vec<f64>, Vec<f64>, f64)> = {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        (0..1000)
            .map(|_| {
                let n = rng.random_range(1..=10);
                let m: Vec<f64> = (0..n).map(|_| 5.0 + 5.0 * rng.random::<f64>()).collect();
                let w: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
                let s: f64 = w.iter().sum();
                (m, w.iter().map(|x| x / s).collect(), 0.05 + 0.9 * rng.random::<f64>())
            })
            .collect()
    };
    let results: Vec<(f64, bool, Option<f64>)> = instances
        .par_iter()
        .map(|(m, p, alpha)| {
            let sol = discrete_solve(m, p, *alpha).unwrap();
            let gap = sol.j - brute_force(m, p, *alpha);
            let kkt = kkt_verify(&sol.targets, m, p, *alpha).ok();
            // floor strictly inside a gap between bounds: stationary identity
            let interior = m.iter().all(|&b| (b - sol.r_star).abs() > 1e-9) && sol.std > 0.0;
            let identity = interior.then(|| (sol.r_star - (sol.mean - alpha / (1.0 - alpha) * sol.std)).abs());
            (gap, kkt, identity)
        })
        .collect();
    let worst_gap = results.iter().map(|r| r.0).fold(f64::MIN, f64::max);
    let kkt_fail = results.iter().filter(|r| !r.1).count();
    let ids: Vec<f64> = results.iter().filter_map(|r| r.2).collect();
    let worst_id = ids.iter().copied().fold(0.0, f64::max);
    Outcome {
        id: 5,
        name: "threshold and optimality conditions",
        passed: worst_gap <= 1e-6 && kkt_fail == 0 && worst_id <= 1e-6,
        detail: format!(
            "1000 instances: max J(solver) - J(brute force) {worst_gap:.2e}, {kkt_fail} KKT failures, \
             floor identity max residual {worst_id:.2e} over {} applicable",
            ids.len()
        ),
    }
}

fn criterion_6() -> Outcome {
    let d = MinTtDistribution::calibrated(MinTtVariant::Corrected);
    let sup = d.ess_sup();
    let mut worst = 0.0f64;
    for alpha in [0.2, 0.5] {
        for i in 0..50 {
            let r = 5.0 + 0.02 + (sup - 5.0 - 0.04) * i as f64 / 49.0;
            let h = 1e-4;
            let fd = (d.objective(r + h, alpha).j - d.objective(r - h, alpha).j) / (2.0 * h);
            let dj = d.objective(r, alpha).dj;
            worst = worst.max((dj - fd).abs() / fd.abs().max(1e-3));
        }
    }
    Outcome {
        id: 6,
        name: "scalar derivative",
        passed: worst < 1e-5,
        detail: format!("max relative error {worst:.2e} over 50 points for alpha 0.2 and 0.5 (floor 1e-3 on the scale)"),
    }
}

/// Mean, variance and the standard errors of both.
fn moments(x: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    (mean, var, (var / n).sqrt(), ((m4 - var * var) / n).sqrt())
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let p = OuParams::default();
    let dt = 0.05;
    let n_paths = 100_000;
    let marks = [5.0, 30.0, 60.0];
    let steps: Vec<usize> = marks.iter().map(|&s| (s / dt as f64).round() as usize).collect();
    let tr = Transition::new(&p, dt);
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for c0 in [6000.0, 6240.0] {
        // per path: (C(s), M(u)) at each mark
        let samples: Vec<[f64; 6]> = (0..n_paths)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ ((c0 as u64) << 32) ^ i as u64);
                let mut proc = CappedOu::new(p, c0);
                let mut out = [0.0; 6];
                let mut m = 0.0;
                let mut prev = c0;
                for step in 1..=steps[2] {
                    let c = proc.advance_with(&tr, &mut rng);
                    m += 0.5 * (prev + c) * dt / 60.0;
                    prev = c;
                    if let Some(j) = steps.iter().position(|&s| s == step) {
                        out[j] = c;
                        out[3 + j] = m;
                    }
                }
                out
            })
            .collect();
        for (j, &s) in marks.iter().enumerate() {
            let col: Vec<f64> = samples.iter().map(|r| r[j]).collect();
            let (mc, _, se, _) = moments(&col);
            let z_c = (capped_mean(s, c0, &p).unwrap() - mc) / se;
            let col: Vec<f64> = samples.iter().map(|r| r[3 + j]).collect();
            let (mm, mv, se_m, se_v) = moments(&col);
            let z_m = (discharge_mean(s, c0, &p).unwrap() - mm) / se_m;
            let z_v = (discharge_var(s, c0, &p).unwrap() - mv) / se_v;
            worst = worst.max(z_c.abs()).max(z_m.abs()).max(z_v.abs());
            lines.push(format!("c0 {c0} t {s}: z {z_c:+.2}/{z_m:+.2}/{z_v:+.2}"));
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 7,
        name: "capacity moment formulas",
        passed: worst <= 3.0 && elapsed < Duration::from_secs(300),
        detail: format!(
            "max |z| {worst:.2} (limit 3; mean C / mean M / var M) [{}], {}",
            lines.join("; "),
            secs(elapsed)
        ),
    }
}

fn criterion_8() -> Outcome {
    let k = kernel_constant();
    Outcome {
        id: 8,
        name: "kernel constant",
        passed: (k - 0.292).abs() <= 0.005,
        detail: format!("K = {k:.5} (expected 0.292 +- 0.005)"),
    }
}

fn criterion_9() -> Outcome {
    let p = OuParams::default();
    let ig = InverseGaussianDelay::new(&p, VarianceRate::Kernel);
    let mut ok = true;
    let mut parts = Vec::new();
    for backlog in [6000.0, 20_000.0] {
        let (mean, var) = ig.moments(backlog);
        let kappa_e = p.kappa_per_min * mean;
        let mut t: Vec<f64> = (0..10_000u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ (backlog as u64) << 20 ^ i);
                first_passage_time(&p, backlog, 0.05, 20.0 * mean, &mut rng).expect("hits within the window")
            })
            .collect();
        let (m, v, _, _) = moments(&t);
        let mean_gap = (m - mean).abs() / mean;
        let std_gap = (v.sqrt() - var.sqrt()).abs() / var.sqrt();
        let ks = ks_statistic(&mut t, |x| ig.cdf(backlog, x));
        let crit = ks_critical_1pct(10_000);
        ok &= kappa_e > 10.0 && mean_gap < 0.05 && std_gap < 0.05 && ks < crit;
        parts.push(format!(
            "B {backlog}: kappa E {kappa_e:.1}, mean {m:.3} vs {mean:.3} ({:.2}%), sd {:.3} vs {:.3} ({:.2}%), KS {ks:.4} (crit {crit:.4})",
            100.0 * mean_gap,
            v.sqrt(),
            var.sqrt(),
            100.0 * std_gap
        ));
    }
    Outcome { id: 9, name: "first passage", passed: ok, detail: parts.join("; ") }
}

fn criterion_10() -> Outcome {
    let sc = SmpcScenario::calibrated();
    let alphas = [0.9, 0.75, 0.5, 0.25];
    let k: Vec<f64> = alphas
        .iter()
        .map(|&alpha| optimize_gain(&GainSearchConfig { alpha, ..Default::default() }, &sc).unwrap().k_star)
        .collect();
    let monotone = k.windows(2).all(|w| w[1] >= w[0]);
    let bracket = |x: f64| (0.01..=0.08).contains(&x);
    let passed = monotone && bracket(k[1]) && bracket(k[2]);
    let list: Vec<String> = alphas.iter().zip(&k).map(|(a, k)| format!("K*({a}) = {k:.4}")).collect();
    Outcome {
        id: 10,
        name: "gain search",
        passed,
        detail: format!(
            "{} 1/h on grid [0, 0.1]; nonincreasing in alpha: {monotone}; K*(0.5), K*(0.75) in [0.01, 0.08]: {}",
            list.join(", "),
            bracket(k[1]) && bracket(k[2])
        ),
    }
}

fn criterion_11() -> Outcome {
    let start = Instant::now();
    let sc = Scenario::default();
    let mc = demand_mc(&sc, 2000, SEED).unwrap();
    let suite1 = mc.controlled.std < mc.uncontrolled.std;

    let smpc = sc.smpc();
    let cfg = sc.capacity.gain;
    let k_star = optimize_gain(&cfg, &smpc).unwrap().k_star;
    let road = sc.capacity.corridor.build().unwrap();
    let run = |policy| validate_policy(policy, &cfg, &smpc, &road, 500, SEED).unwrap();
    let ctl = run(ValidationPolicy::Gain(k_star));
    let zero = run(ValidationPolicy::Gain(0.0));
    let none = run(ValidationPolicy::Uncontrolled);
    // both readings of "no control": zero gain, and free-flow posting
    let degrade = (ctl.mean_min - zero.mean_min) / zero.mean_min;
    let degrade_none = (ctl.mean_min - none.mean_min) / none.mean_min;
    let suite2 = ctl.std_min < zero.std_min && ctl.std_min < none.std_min && degrade.max(degrade_none) < 0.05;
    let elapsed = start.elapsed();
    Outcome {
        id: 11,
        name: "reliability outcome",
        passed: suite1 && suite2 && elapsed < Duration::from_secs(900),
        detail: format!(
            "suite 1 (2000 days): Std {:.4} vs {:.4} uncontrolled, mean {:.3} vs {:.3}; \
             suite 2 (500 paths, K* {k_star:.4}): Std {:.5} vs {:.5} at K=0 ({:+.2}%), mean {:+.3}%; \
             free-flow posting: mean {:.4}, Std {:.5} (mean {:+.3}%); {}",
            mc.controlled.std,
            mc.uncontrolled.std,
            mc.controlled.mean,
            mc.uncontrolled.mean,
            ctl.std_min,
            zero.std_min,
            100.0 * (ctl.std_min - zero.std_min) / zero.std_min,
            100.0 * degrade,
            none.mean_min,
            none.std_min,
            100.0 * degrade_none,
            secs(elapsed)
        ),
    }
}

fn criterion_12() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_vslr");
    let base = std::env::temp_dir().join(format!("vslr-acceptance-{}", std::process::id()));
    let run = |tag: &str| {
        let dir = base.join(tag);
        let out = Command::new(exe)
            .args(["validate", "--seed", "7", "--out"])
            .arg(&dir)
            .output()
            .expect("vslr runs");
        let report = std::fs::read(dir.join("validation_report.txt")).unwrap_or_default();
        (out.status.code(), out.stdout, report)
    };
    let a = run("a");
    let b = run("b");
    let _ = std::fs::remove_dir_all(&base);
    let identical = a.1 == b.1 && a.2 == b.2 && !a.2.is_empty();
    Outcome {
        id: 12,
        name: "determinism",
        passed: identical && a.0 == Some(0),
        detail: format!("two validate runs: identical reports {identical} ({} bytes), exit status {:?}", a.2.len(), a.0),
    }
}

fn main() {
    let mut trajectories = Vec::new();
    let outcomes = vec![
        criterion_1(),
        criterion_2(),
        criterion_3(&mut trajectories),
        criterion_4(trajectories),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
        criterion_9(),
        criterion_10(),
        criterion_11(),
        criterion_12(),
    ];
    for o in &outcomes {
        println!("{} criterion {} ({}): {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 && std::env::var("VSLR_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
