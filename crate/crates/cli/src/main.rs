//! `mirror-gossip`: runs mirror-space gossip experiments and checks the
//! consensus and convergence bounds on them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod spec;
mod sweep;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mirror_gossip::analysis::{corollary_rates, StepSize};
use mirror_gossip::engine::{RunConfig, Strategy};
use mirror_gossip::topology::mixing_constants;

use spec::{ConfigFile, ExperimentSpec};
use sweep::TopologyFiles;
use verify::VerifySpec;

#[derive(Parser)]
#[command(name = "mirror-gossip", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration or the cross-product of its sweep axes.
    #[command(visible_alias = "sweep")]
    Run(RunArgs),
    /// Run the inequality suite and print a JSON report.
    Verify(VerifyArgs),
    /// Print the mixing constants and corollary rates.
    Bounds(BoundsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Aims,
    Pairwise,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Aims => Strategy::Aims,
            StrategyArg::Pairwise => Strategy::PairwiseGossip,
        }
    }
}

/// Flags shared by `run` and `verify`; they override config file values.
#[derive(Args)]
struct Overrides {
    /// TOML config with `[run]`, `[sweep]` and `[verify]` sections.
    config: Option<PathBuf>,
    /// Mirror exponent; repeat to sweep.
    #[arg(long)]
    p: Vec<f64>,
    /// Device count; repeat to sweep.
    #[arg(long)]
    m: Vec<usize>,
    /// Edge density per round; repeat to sweep.
    #[arg(long)]
    density: Vec<f64>,
    /// Dirichlet concentration; repeat to sweep.
    #[arg(long)]
    alpha: Vec<f64>,
    /// Step size; repeat to sweep.
    #[arg(long)]
    eta: Vec<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Run seed; repeat for replicates.
    #[arg(long)]
    seed: Vec<u64>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Rescale mirror images by their largest magnitude before mixing.
    #[arg(long)]
    rescale: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Loss level for iterations-to-threshold (default 1.05 × oracle F*).
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    save_topology: Option<PathBuf>,
    #[arg(long)]
    load_topology: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Replace the run-wide ζ in the bounds.
    #[arg(long)]
    zeta: Option<f64>,
    /// Recorded trace to check for integrity and the unrolled recursion.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the trace of the first run here.
    #[arg(long)]
    save_trace: Option<PathBuf>,
    /// Seeded draws per property suite.
    #[arg(long)]
    draws: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    m: usize,
    /// Iteration count `T`.
    #[arg(long)]
    iters: usize,
    /// Uniform-convexity order; defaults to `p + 1`.
    #[arg(long, conflicts_with = "p")]
    r: Option<f64>,
    #[arg(long)]
    p: Option<f64>,
    /// Smallest positive mixing weight.
    #[arg(long)]
    zeta: f64,
    /// Connectivity window `B`.
    #[arg(long, default_value_t = 1)]
    window: usize,
    /// Explicit step size; the optimal one is always reported.
    #[arg(long)]
    eta: Option<f64>,
}

impl Overrides {
    fn load(&self) -> Result<ConfigFile> {
        self.config
            .as_deref()
            .map(spec::load)
            .transpose()
            .map(Option::unwrap_or_default)
    }

    fn apply(&self, base: &mut RunConfig) {
        if let Some(iters) = self.iters {
            base.iters = iters;
        }
        if let Some(s) = self.strategy {
            base.strategy = s.into();
        }
        if self.rescale {
            base.rescale = true;
        }
    }
}

fn replace<T: Clone>(target: &mut Vec<T>, flags: &[T]) {
    if !flags.is_empty() {
        *target = flags.to_vec();
    }
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let o = &args.overrides;
    let file = o.load()?;
    let mut base = file.run.unwrap_or_default();
    o.apply(&mut base);
    let mut sweep = file.sweep;
    replace(&mut sweep.p, &o.p);
    replace(&mut sweep.m, &o.m);
    replace(&mut sweep.density, &o.density);
    replace(&mut sweep.alpha, &o.alpha);
    replace(&mut sweep.eta, &o.eta);
    replace(&mut sweep.seeds, &o.seed);
    if args.threshold.is_some() {
        sweep.threshold = args.threshold;
    }
    if args.out.is_some() {
        sweep.out = args.out.clone();
    }
    let spec = ExperimentSpec::new(base, &sweep);
    let topology = TopologyFiles {
        save: args.save_topology.clone(),
        load: args.load_topology.clone(),
    };
    let ok = sweep::run_experiment(&spec, &topology)?;
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn single<T: Copy>(flags: &[T], name: &str) -> Result<Option<T>> {
    match flags {
        [] => Ok(None),
        [v] => Ok(Some(*v)),
        _ => bail!("verify takes a single --{name}"),
    }
}

fn cmd_verify(args: &VerifyArgs) -> Result<ExitCode> {
    let o = &args.overrides;
    let file = o.load()?;
    let mut base = file.run.unwrap_or_else(verify::default_base);
    o.apply(&mut base);
    if let Some(m) = single(&o.m, "m")? {
        base.m = m;
    }
    if let Some(d) = single(&o.density, "density")? {
        base.density = d;
    }
    if let Some(a) = single(&o.alpha, "alpha")? {
        base.alpha = a;
    }
    if let Some(e) = single(&o.eta, "eta")? {
        base.eta = e;
    }
    if let Some(s) = single(&o.seed, "seed")? {
        base.seed = s;
    }
    let mut p = file.verify.p;
    replace(&mut p, &o.p);
    if p.is_empty() {
        p = vec![1.0, 3.0, 5.0];
    }
    let spec = VerifySpec {
        base,
        p,
        zeta: args.zeta.or(file.verify.zeta),
        trace: args.trace.clone().or(file.verify.trace),
        save_trace: args.save_trace.clone(),
        draws: args.draws.or(file.verify.draws).unwrap_or(10_000),
    };
    let report = verify::verify(&spec)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{json}"),
    }
    match report.first_failure() {
        None => Ok(ExitCode::SUCCESS),
        Some(check) => {
            eprintln!(
                "check {} failed: {}",
                check.name,
                check.witness.as_deref().unwrap_or("no witness recorded")
            );
            Ok(ExitCode::FAILURE)
        }
    }
}

fn cmd_bounds(args: &BoundsArgs) -> Result<ExitCode> {
    if args.m < 1 || args.window < 1 {
        bail!("m and window must be >= 1");
    }
    if !(args.zeta > 0.0 && args.zeta <= 1.0) {
        bail!("zeta must lie in (0, 1], got {}", args.zeta);
    }
    let r = args.r.unwrap_or(args.p.unwrap_or(1.0) + 1.0);
    let mc = mixing_constants(args.m, args.zeta, args.window);
    println!("vartheta = {}", mc.vartheta);
    println!("kappa = {}", mc.kappa);
    if let Some(eta) = args.eta {
        let c = corollary_rates(args.m, args.iters, r, StepSize::Explicit(eta))?;
        println!("rate(eta = {}) = {}", c.eta, c.rate);
    }
    let c = corollary_rates(args.m, args.iters, r, StepSize::Optimal)?;
    println!("optimal eta = {}", c.eta);
    println!("rate(optimal) = {}", c.rate);
    Ok(ExitCode::SUCCESS)
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("MIRROR_GOSSIP_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.parse().ok().filter(|&n| n > 0).with_context(|| {
        format!("MIRROR_GOSSIP_THREADS must be a positive integer, got `{value}`")
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bounds(a) => cmd_bounds(a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
