use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bidomain_mr::sim::{self, Mode, RunMetrics};

#[derive(Parser)]
#[command(name = "bidomain", version, about = "Adaptive multiresolution bidomain solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write snapshots and metrics.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the mode from the config file.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Normalized errors of a run against a reference run.
    Compare {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Print the metrics file of a run.
    Metrics {
        #[arg(long)]
        run: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: bidomain_mr::Error| e.to_string())
}

fn fmt_norms(e: &sim::ErrorNorms) -> String {
    format!("{:.3e} {:.3e} {:.3e}", e.l1, e.l2, e.linf)
}

fn execute(cli: Cli) -> bidomain_mr::Result<()> {
    match cli.command {
        Command::Simulate { config, mode, out } => {
            let mut cfg = sim::load_config(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let res = sim::run(&cfg, Some(&out))?;
            let m = &res.metrics;
            println!("{} run at L={}: {} steps of {:e}, {:.2} s", m.mode, m.max_level, m.steps, m.dt, m.wall_clock);
            for r in &m.rows {
                println!("  t={} leaves={} eta={:.3}", r.time, r.leaf_count, r.eta);
            }
            println!("output in {}", out.display());
        }
        Command::Compare { run, reference } => {
            let rows = sim::compare_dirs(&run, &reference)?;
            println!("time,level,err_v_L1,err_v_L2,err_v_Linf,err_ue_L1,err_ue_L2,err_ue_Linf");
            for r in rows {
                println!(
                    "{},{},{},{},{},{},{},{}",
                    r.time_run, r.level, r.err_v.l1, r.err_v.l2, r.err_v.linf, r.err_ue.l1, r.err_ue.l2, r.err_ue.linf
                );
            }
        }
        Command::Metrics { run } => {
            let m = RunMetrics::read(&run.join(sim::run::METRICS_FILE))?;
            println!("mode {} L={} N={} errors vs {}", m.mode, m.max_level, m.fine_count, m.error_source);
            println!("{:>10} {:>8} {:>8}  {:<32} {:<32}", "time", "leaves", "eta", "v (L1 L2 Linf)", "u_e (L1 L2 Linf)");
            for r in &m.rows {
                println!(
                    "{:>10.5} {:>8} {:>8.3}  {:<32} {:<32}",
                    r.time,
                    r.leaf_count,
                    r.eta,
                    fmt_norms(&r.err_v),
                    fmt_norms(&r.err_ue)
                );
            }
            match m.nu() {
                Some(nu) => println!("nu = {nu:.3}, wall clock {:.3} s", m.wall_clock),
                None => println!("wall clock {:.3} s", m.wall_clock),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
