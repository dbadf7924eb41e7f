use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use edgescale::harness::{self, AgentSpec, RunSummary, Scenario};
use edgescale::registry::Registry;
use edgescale::simenv::{self, PatternKind};

#[derive(Parser)]
#[command(name = "edgescale", version, about = "Multi-dimensional autoscaling experiments on a simulated edge device")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Base seed; repetition i uses seed + i
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Output root directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Start every solve from the defaults
    #[arg(long)]
    no_cache: bool,
    /// Parameter families the agent may move
    #[arg(long)]
    dims: Option<usize>,
    /// Measured run length in seconds
    #[arg(long)]
    duration: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Compare summary.json files, grouped by label
    Compare {
        summaries: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.4)]
        band: f64,
    },
    /// Run a scenario once per dims value
    SweepDims {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        values: Vec<usize>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Run a scenario with replicated services
    SweepServices {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "3,6,9")]
        counts: Vec<usize>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Re-solve the sim_model coefficients of a registry from the anchors
    Calibrate {
        registry: PathBuf,
        /// Write the updated registry here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a relative-load trace CSV
    GenTrace {
        #[arg(long, value_enum)]
        kind: TraceKind,
        #[arg(long, default_value_t = 3600)]
        duration: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Source trace when kind is csv
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceKind {
    Diurnal,
    Bursty,
    Constant,
    Csv,
}

fn apply(mut s: Scenario, o: &Overrides) -> Result<Scenario> {
    if let Some(seed) = o.seed {
        s.base_seed = seed;
    }
    if let Some(r) = o.reps {
        s.repetitions = r;
    }
    if let Some(d) = o.duration {
        s.duration_s = d;
    }
    if let Some(d) = o.dims {
        s = harness::with_dims(&s, d)?;
    }
    if o.no_cache {
        match &mut s.agent {
            AgentSpec::Rask { caching, .. } => *caching = false,
            _ => bail!("--no-cache applies to rask agents only"),
        }
        s.name.push_str("-nocache");
    }
    Ok(s)
}

fn brief(s: &RunSummary) -> serde_json::Value {
    json!({
        "scenario": s.scenario,
        "label": s.label,
        "repetition": s.repetition,
        "seed": s.seed,
        "mean": s.mean,
        "median": s.median,
        "violations": s.violation_count,
        "runtime_p50_ms": s.runtime_ms.p50,
    })
}

fn run(path: &Path, o: &Overrides) -> Result<bool> {
    let s = apply(Scenario::load(path)?, o)?;
    let results = harness::run_scenario(&s, Some(&o.out))?;
    let mut ok = true;
    for (rep, r) in results.iter().enumerate() {
        match r {
            Ok(sum) => println!("{}", brief(sum)),
            Err(e) => {
                ok = false;
                eprintln!("{}", json!({"error": e, "repetition": rep}));
            }
        }
    }
    Ok(ok)
}

fn print_groups(groups: &[harness::SweepGroup], key: &str) {
    for g in groups {
        println!(
            "{}",
            json!({
                key: g.value,
                "repetitions": g.summaries.len(),
                "failures": g.failures,
                "median_fulfillment": g.median_fulfillment,
                "median_runtime_ms": g.median_runtime_ms,
                "parameter_count": g.parameter_count,
            })
        );
    }
}

fn compare(paths: &[PathBuf], band: f64) -> Result<()> {
    let mut groups: BTreeMap<String, Vec<RunSummary>> = BTreeMap::new();
    for p in paths {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let s: RunSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        groups.entry(s.label.clone()).or_default().push(s);
    }
    let groups: Vec<(String, Vec<RunSummary>)> = groups.into_iter().collect();
    let report = harness::compare(&groups, band)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn calibrate(path: &Path, out: Option<&Path>) -> Result<()> {
    let mut reg = Registry::from_path(path)?;
    for s in &mut reg.services {
        if let Some(m) = &mut s.sim_model {
            m.calibrate()?;
            eprintln!("{}", json!({"service": s.id.to_string(), "k": m.k}));
        }
    }
    let text = reg.to_json();
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn gen_trace(kind: TraceKind, duration: u64, seed: u64, input: Option<PathBuf>, out: Option<&Path>) -> Result<()> {
    let kind = match (kind, input) {
        (TraceKind::Diurnal, _) => PatternKind::Diurnal,
        (TraceKind::Bursty, _) => PatternKind::Bursty,
        (TraceKind::Constant, _) => PatternKind::Constant,
        (TraceKind::Csv, Some(path)) => PatternKind::Csv { path },
        (TraceKind::Csv, None) => bail!("--input is required for csv traces"),
    };
    let p = simenv::gen_pattern(kind, duration, 1.0, seed)?;
    match out {
        Some(path) => simenv::write_trace_csv(fs::File::create(path)?, &p.samples)?,
        None => simenv::write_trace_csv(std::io::stdout().lock(), &p.samples)?,
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { scenario, o } => run(&scenario, &o),
        Command::Compare { summaries, band } => compare(&summaries, band).map(|_| true),
        Command::SweepDims { scenario, values, o } => {
            let s = apply(Scenario::load(&scenario)?, &o)?;
            print_groups(&harness::sweep_dims(&s, &values, Some(&o.out))?, "dims");
            Ok(true)
        }
        Command::SweepServices { scenario, counts, o } => {
            let s = apply(Scenario::load(&scenario)?, &o)?;
            print_groups(&harness::sweep_services(&s, &counts, Some(&o.out))?, "services");
            Ok(true)
        }
        Command::Calibrate { registry, out } => calibrate(&registry, out.as_deref()).map(|_| true),
        Command::GenTrace {
            kind,
            duration,
            seed,
            input,
            out,
        } => gen_trace(kind, duration, seed, input, out.as_deref()).map(|_| true),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            let chain: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!("{}", json!({"error": e.to_string(), "causes": chain}));
            ExitCode::FAILURE
        }
    }
}
