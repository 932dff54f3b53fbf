use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use tiersim::export::export_all;
use tiersim::sweep::{parse_sweep, run_sweep, sweep_csv};
use tiersim::telemetry::trace_cdf;
use tiersim::tiering::PolicyVariant;
use tiersim::workload::ingest_trace;
use tiersim::{ConfigError, Exec, Scenario, SimError};

#[derive(Parser)]
#[command(name = "tiersim", version, about = "Tiered-memory simulator with guest-side hot page consolidation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Memtierd,
    Tpp,
    Autonuma,
}

impl From<Policy> for PolicyVariant {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Memtierd => PolicyVariant::Memtierd,
            Policy::Tpp => PolicyVariant::Tpp,
            Policy::Autonuma => PolicyVariant::Autonuma,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its reports.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        policy: Option<Policy>,
        #[arg(long, value_enum)]
        gpac: Option<OnOff>,
        /// Consolidation limit for every guest; implies --gpac on.
        #[arg(long)]
        cl: Option<u32>,
    },
    /// Run a scenario once per value of one parameter, e.g. `cl=10:290:40`.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hot-page-per-region CDF of a trace file.
    Cdf {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Maps a failure to its exit status.
enum Failure {
    Config(anyhow::Error),
    Invariant(anyhow::Error),
    Io(anyhow::Error),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => Failure::Config(c.into()),
            e @ SimError::Invariant { .. } => Failure::Invariant(e.into()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

fn io(e: std::io::Error, what: &Path) -> Failure {
    Failure::Io(anyhow::Error::new(e).context(format!("writing {}", what.display())))
}

fn apply_overrides(
    s: &mut Scenario,
    seed: Option<u64>,
    policy: Option<Policy>,
    gpac: Option<OnOff>,
    cl: Option<u32>,
) -> Result<(), Failure> {
    if let Some(seed) = seed {
        s.rng_seed = seed;
    }
    if let Some(p) = policy {
        s.policy.variant = p.into();
    }
    match (gpac, cl) {
        (Some(OnOff::Off), Some(_)) => {
            return Err(Failure::Config(anyhow::anyhow!("--cl conflicts with --gpac off")));
        }
        (Some(OnOff::Off), None) => s.disable_gpac(),
        (_, Some(cl)) => s.set_cl(cl),
        (Some(OnOff::On), None) => {
            if let Some(i) = s.guests.iter().position(|g| g.cl.is_none()) {
                return Err(Failure::Config(anyhow::anyhow!(
                    "--gpac on needs --cl because guest {i} has no consolidation limit"
                )));
            }
        }
        (None, None) => {}
    }
    s.validate()?;
    Ok(())
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { scenario, out, seed, policy, gpac, cl } => {
            let mut s = Scenario::load(&scenario)?;
            apply_overrides(&mut s, seed, policy, gpac, cl)?;
            let report = tiersim::run(&s)?;
            export_all(&report, &out).map_err(|e| io(e, &out))?;
            let sm = &report.summary;
            println!(
                "near residency {:.2}% (final {:.2}%), throughput proxy {:.4}, promoted {} B, demoted {} B",
                sm.mean_near_residency_pct,
                sm.final_near_residency_pct,
                sm.mean_throughput_proxy,
                sm.total_promoted_bytes,
                sm.total_demoted_bytes
            );
        }
        Command::Sweep { scenario, param, out } => {
            let s = Scenario::load(&scenario)?;
            let spec = parse_sweep(&param)?;
            let results = run_sweep(&s, &spec, Exec::Parallel)?;
            std::fs::create_dir_all(&out).map_err(|e| io(e, &out))?;
            for (v, r) in &results {
                let dir = out.join(format!("{}_{v}", spec.param.name()));
                export_all(r, &dir).map_err(|e| io(e, &dir))?;
            }
            let path = out.join("sweep.csv");
            let text = sweep_csv(spec.param, &results);
            std::fs::write(&path, &text).map_err(|e| io(e, &path))?;
            print!("{text}");
        }
        Command::Cdf { trace, out } => {
            let traces = ingest_trace(&trace).map_err(|e| Failure::Config(e.into()))?;
            let cdf = trace_cdf(&traces)
                .with_context(|| format!("trace {} has no accesses", trace.display()))
                .map_err(Failure::Config)?;
            std::fs::write(&out, cdf.to_csv()).map_err(|e| io(e, &out))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, e) = match f {
                Failure::Config(e) => (2, e),
                Failure::Invariant(e) => (3, e),
                Failure::Io(e) => (1, e),
            };
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
