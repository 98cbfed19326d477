use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use espnet_sim::run::{run_scenario, RunOptions, RunOutput};
use espnet_sim::scenario::Scenario;
use espnet_sim::timing::measure_control_timings;

#[derive(Parser)]
#[command(
    name = "espnet",
    about = "Deterministic simulator for controller-managed ESP tunnels over a match-action data plane"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario and print a summary table.
    Run {
        scenario: PathBuf,
        /// Number of runs; seeds are seed, seed+1, ... Overrides the
        /// scenario's `runs` field.
        #[arg(long)]
        runs: Option<u32>,
        /// Base seed, overriding the scenario's `seed` field.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also measure wall-clock control-plane timings (makes the report
        /// non-reproducible byte-for-byte).
        #[arg(long)]
        timings: bool,
    },
    /// Check a scenario file and exit.
    Validate { scenario: PathBuf },
    /// Execute a scenario and dump the event trace as JSONL.
    Trace {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ESPNET_LOG")).init();
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { scenario } => {
            let s = Scenario::load(&scenario)?;
            println!("ok: {s}");
            Ok(())
        }
        Command::Run {
            scenario,
            runs,
            seed,
            report,
            timings,
        } => {
            let s = Scenario::load(&scenario)?;
            let base_seed = seed.unwrap_or(s.seed);
            let runs = runs.unwrap_or(s.runs).max(1);
            let outputs = run_many(&s, base_seed, runs)?;

            for out in &outputs {
                print_summary(&out.report);
            }
            aggregate_ok(&outputs)?;

            let mut reports: Vec<espnet_sim::RunReport> =
                outputs.into_iter().map(|o| o.report).collect();
            if timings {
                let table = measure_control_timings(&s, runs, base_seed)?;
                println!("\ncontrol-plane timings ({} runs):", table.runs);
                println!(
                    "  {:<16} {:>8} {:>12} {:>14}",
                    "operation", "samples", "mean [ms]", "95% CI ± [ms]"
                );
                for (name, st) in table.rows() {
                    println!(
                        "  {:<16} {:>8} {:>12.4} {:>14.4}",
                        name, st.samples, st.mean_ms, st.ci95_half_ms
                    );
                }
                if let Some(first) = reports.first_mut() {
                    first.timings = Some(table);
                }
            }

            if let Some(path) = report {
                let doc = serde_json::json!({
                    "scenario": s.name,
                    "base_seed": base_seed,
                    "runs": reports,
                });
                std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
                println!("report written to {}", path.display());
            }
            Ok(())
        }
        Command::Trace { scenario, out, seed } => {
            let s = Scenario::load(&scenario)?;
            let base_seed = seed.unwrap_or(s.seed);
            let output = run_scenario(&s, base_seed, RunOptions::default())?;
            let mut text = String::new();
            for ev in &output.trace {
                text.push_str(&serde_json::to_string(ev)?);
                text.push('\n');
            }
            std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "trace with {} events written to {}",
                output.trace.len(),
                out.display()
            );
            print_summary(&output.report);
            Ok(())
        }
    }
}

/// Run `runs` instances on threads (independent seeds), results in seed
/// order.
fn run_many(s: &Scenario, base_seed: u64, runs: u32) -> Result<Vec<RunOutput>> {
    if runs == 1 {
        return Ok(vec![run_scenario(s, base_seed, RunOptions::default())?]);
    }
    let outputs = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..runs)
            .map(|r| {
                let s = s.clone();
                scope.spawn(move || {
                    run_scenario(&s, base_seed.wrapping_add(u64::from(r)), RunOptions::default())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(outputs)
}

fn aggregate_ok(outputs: &[RunOutput]) -> Result<()> {
    for out in outputs {
        if out.report.payload_integrity != "ok" {
            bail!("payload corruption detected (seed {})", out.report.seed);
        }
        if !out.report.conservation.ok {
            bail!("conservation violated (seed {})", out.report.seed);
        }
    }
    Ok(())
}

fn print_summary(r: &espnet_sim::RunReport) {
    println!(
        "\nscenario {} — seed {} — {} virtual ticks",
        r.scenario, r.seed, r.final_time
    );
    println!(
        "  {:<6} {:<14} {:<18} {:>8} {:>10} {:>8}",
        "flow", "mode", "dst", "sent", "delivered", "lost"
    );
    for f in &r.flows {
        println!(
            "  {:<6} {:<14} {:<18} {:>8} {:>10} {:>8}",
            f.index,
            match f.suite {
                Some(s) => format!("{}/{s}", f.mode),
                None => f.mode.to_string(),
            },
            f.dst.to_string(),
            f.sent,
            f.delivered,
            f.lost
        );
    }
    let dropped: u64 = r.drops.values().sum();
    println!(
        "  drops: {dropped}{}, rekeys: {}, control msgs: {}, payload integrity: {}",
        if dropped == 0 {
            String::new()
        } else {
            format!(
                " ({})",
                r.drops
                    .iter()
                    .filter(|(_, n)| **n > 0)
                    .map(|(k, n)| format!("{k}={n}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            )
        },
        r.rekey_count,
        r.control_message_counts.values().sum::<u64>(),
        r.payload_integrity,
    );
    for t in &r.tunnels {
        println!(
            "  tunnel {}: {} (spi {:#010x}/{:#010x}, {}, {} rekeys)",
            t.profile_id, t.status, t.spi_i, t.spi_j, t.suite, t.rekey_count
        );
    }
    if let Some(g) = &r.goodput {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.1}"),
            None => "-".to_string(),
        };
        println!(
            "  goodput [pkts/ms of switch work]: bypass {} / null {} / aes {} — ordering {}",
            fmt(g.bypass_packets_per_ms),
            fmt(g.null_packets_per_ms),
            fmt(g.aes_packets_per_ms),
            if g.ordering_ok { "ok" } else { "VIOLATED" }
        );
    }
    for w in &r.warnings {
        println!("  warning: {w}");
    }
}
