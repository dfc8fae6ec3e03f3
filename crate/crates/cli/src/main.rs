use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use vslr_core::experiments::{self, Summary};
use vslr_core::scenario::Scenario;
use vslr_core::Result;

#[derive(Parser)]
#[command(name = "vslr", version, about = "Reliability-oriented variable speed limit experiments")]
struct Cli {
    /// Scenario file (TOML); the built-in calibrated scenario when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the scenario output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reliability table for the day-to-day demand model.
    Table1,
    /// Closed-loop Monte Carlo over sampled peak flows.
    DemandMc {
        /// Number of days; the scenario's `mc_days` when omitted.
        #[arg(long)]
        days: Option<usize>,
    },
    /// Gain search, traces and stochastic validation under capacity noise.
    Capacity,
    /// Invariant and oracle checks; exits with status 2 on a hard failure.
    Validate,
}

#[derive(Serialize)]
struct SummaryRow {
    policy: &'static str,
    mean_min: f64,
    std_min: f64,
    #[serde(rename = "J_min")]
    j_min: f64,
}

#[derive(Serialize)]
struct GainRow {
    alpha: f64,
    #[serde(rename = "K_star")]
    k_star: f64,
    #[serde(rename = "J_star")]
    j_star: f64,
    vsl_window_min: f64,
    vsl_floor_kmh: f64,
}

#[derive(Serialize)]
struct ValidationRow {
    policy: &'static str,
    gain_per_h: Option<f64>,
    mean_min: f64,
    std_min: f64,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn summary_rows(controlled: Summary, uncontrolled: Summary) -> [SummaryRow; 2] {
    let row = |policy, s: Summary| SummaryRow { policy, mean_min: s.mean, std_min: s.std, j_min: s.j };
    [row("controlled", controlled), row("uncontrolled", uncontrolled)]
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut sc = match &cli.config {
        Some(path) => Scenario::load(path)?,
        None => Scenario::default(),
    };
    if let Some(seed) = cli.seed {
        sc.seed = seed;
    }
    if let Some(out) = cli.out {
        sc.out_dir = out;
    }
    let dir = sc.out_dir.clone();
    fs::create_dir_all(&dir)?;

    match cli.command {
        Command::Table1 => {
            let rows = experiments::table1(&sc)?;
            experiments::write_csv(&rows, create(&dir, "table1.csv")?)?;
            for r in &rows {
                println!(
                    "{:?} alpha={:.3} tau*={:.3} E={:.3} Std={:.3} J={:.3} dJ={:.3} ({:.1}%)",
                    r.pipeline, r.alpha, r.tau_star, r.e_tau, r.std_tau, r.j_min, r.delta_j, r.rel_improvement
                );
            }
        }
        Command::DemandMc { days } => {
            let n = days.unwrap_or(sc.demand.mc_days);
            let rep = experiments::demand_mc(&sc, n, sc.seed)?;
            experiments::write_csv(&rep.days, create(&dir, "demand_mc_days.csv")?)?;
            experiments::write_csv(
                &summary_rows(rep.controlled, rep.uncontrolled),
                create(&dir, "demand_mc_summary.csv")?,
            )?;
            println!("alpha={} r*={:.3} days={n}", rep.alpha, rep.r_star);
            println!("controlled:   E={:.4} Std={:.4} J={:.4}", rep.controlled.mean, rep.controlled.std, rep.controlled.j);
            println!(
                "uncontrolled: E={:.4} Std={:.4} J={:.4}",
                rep.uncontrolled.mean, rep.uncontrolled.std, rep.uncontrolled.j
            );
        }
        Command::Capacity => {
            let rep = experiments::capacity(&sc, sc.seed)?;
            let mut gains = Vec::new();
            for o in &rep.outcomes {
                let tag = format!("alpha_{}", o.alpha);
                experiments::write_sweep_csv(&o.sweep, create(&dir, &format!("gain_sweep_{tag}.csv"))?)?;
                experiments::write_csv(&o.trace, create(&dir, &format!("trace_expected_{tag}.csv"))?)?;
                experiments::write_csv(&o.sampled, create(&dir, &format!("trace_sampled_{tag}.csv"))?)?;
                println!(
                    "alpha={} K*={:.4} 1/h J*={:.1} VSL window {} min, floor {:.1} km/h",
                    o.alpha, o.k_star, o.j_star, o.vsl_window_min, o.vsl_floor_kmh
                );
                gains.push(GainRow {
                    alpha: o.alpha,
                    k_star: o.k_star,
                    j_star: o.j_star,
                    vsl_window_min: o.vsl_window_min,
                    vsl_floor_kmh: o.vsl_floor_kmh,
                });
            }
            experiments::write_csv(&gains, create(&dir, "gain_report.csv")?)?;
            let val = [
                ("gain_star", Some(rep.validation_gain), &rep.controlled),
                ("gain_zero", Some(0.0), &rep.zero_gain),
                ("uncontrolled", None, &rep.uncontrolled),
            ];
            let rows: Vec<ValidationRow> = val
                .iter()
                .map(|(policy, gain, s)| ValidationRow {
                    policy,
                    gain_per_h: *gain,
                    mean_min: s.mean_min,
                    std_min: s.std_min,
                })
                .collect();
            experiments::write_csv(&rows, create(&dir, "capacity_validation.csv")?)?;
            for r in &rows {
                println!("{}: mean {:.4} min, std {:.4} min", r.policy, r.mean_min, r.std_min);
            }
        }
        Command::Validate => {
            let rep = experiments::validate(&sc, sc.seed)?;
            let text = rep.render();
            print!("{text}");
            let mut f = create(&dir, "validation_report.txt")?;
            f.write_all(text.as_bytes())?;
            f.flush()?;
            if rep.hard_failures() > 0 {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
