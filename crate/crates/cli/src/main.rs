//! `modalloc` — allocate delivery orders across transportation
//! modalities, price the result, and inspect it.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 infeasible
//! instance, 3 verification failure.

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use modalloc_core::equilibrium::{endpoint_inequality_check, is_equilibrium, UserGrid};
use modalloc_core::instance::{
    convert_csv, generate_instance, load_instance, load_result, save_instance, save_result,
    GeneratorSpec, OrderSource,
};
use modalloc_core::model::AllocationMatrix;
use modalloc_core::optimizer::{optimize_allocation, OptimizerError};
use modalloc_core::queueing::MMcSystem;
use modalloc_core::report::{emit, summarize, Format};
use modalloc_core::{Matrix, PriceMatrix, SolverConfig};
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_VALIDATION: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_VERIFICATION: u8 = 3;

#[derive(Parser)]
#[command(
    name = "modalloc",
    version,
    about = "Optimal multi-modal delivery allocation and stable pricing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the latency-optimal allocation and break-even prices.
    Solve(SolveArgs),
    /// Price a given allocation at a given base price.
    Price(PriceArgs),
    /// Check that a solve result is stable for every user.
    Verify(VerifyArgs),
    /// Generate a seeded synthetic instance.
    Gen(GenArgs),
    /// Build an instance from orders/couriers CSV exports.
    Convert(ConvertArgs),
    /// Waiting times for an M/M/c queue.
    Mmc(MmcArgs),
    /// Summarize a solve result.
    Report(ReportArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Instance file (JSON, schema 1).
    #[arg(long)]
    instance: PathBuf,
    /// Where to write the solve result (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Seed for the solver's random restarts.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of starts (best objective wins).
    #[arg(long)]
    multistart: Option<usize>,
}

#[derive(Args)]
struct PriceArgs {
    /// Instance file (JSON, schema 1).
    #[arg(long)]
    instance: PathBuf,
    /// Allocation matrix file (JSON array of rows).
    #[arg(long)]
    allocation: PathBuf,
    /// Base price in dollars (the price of each order's slowest mode).
    #[arg(long)]
    base: f64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Solve result file (JSON).
    #[arg(long)]
    result: PathBuf,
    /// Number of user sample points per order.
    #[arg(long, default_value_t = 10_000)]
    grid: usize,
    /// Largest tolerated cost saving from switching, dollars-per-hour
    /// scale (hours of user cost).
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

#[derive(Args)]
struct GenArgs {
    /// Number of synthetic orders.
    #[arg(long)]
    orders: usize,
    /// Car fleet size.
    #[arg(long, default_value_t = 0)]
    cars: u32,
    /// Drone fleet size.
    #[arg(long, default_value_t = 0)]
    drones: u32,
    /// Sidewalk-robot fleet size.
    #[arg(long, default_value_t = 0)]
    robots: u32,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the instance (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    /// orders.csv: id, pickup/dropoff coordinates (m), service times (s).
    #[arg(long)]
    orders: PathBuf,
    /// couriers.csv: modality, x_m, y_m — one row per idle courier.
    #[arg(long)]
    couriers: PathBuf,
    /// Where to write the instance (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MmcArgs {
    /// Number of servers c.
    #[arg(long)]
    servers: u32,
    /// Arrival rate lambda, jobs/hour.
    #[arg(long)]
    lambda: f64,
    /// Target utilization rho in (0, 1); infers mu = lambda / (c * rho).
    #[arg(long, conflicts_with = "mu")]
    rho: Option<f64>,
    /// Per-server service rate mu, jobs/hour.
    #[arg(long)]
    mu: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Solve result file (JSON).
    #[arg(long)]
    result: PathBuf,
    /// Output format: table, csv, or json.
    #[arg(long, default_value = "table")]
    format: String,
}

/// An error carrying its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        Failure {
            code: EXIT_VALIDATION,
            error: error.into(),
        }
    }
}

fn fail(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

fn check_shape(instance: &modalloc_core::Instance, x: &AllocationMatrix) -> Result<(), Failure> {
    if x.n_orders() != instance.n_orders() || x.n_modalities() != instance.n_modalities() {
        return Err(Failure::from(anyhow!(
            "allocation is {}x{} but the instance is {}x{}",
            x.n_orders(),
            x.n_modalities(),
            instance.n_orders(),
            instance.n_modalities()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    // Die quietly when a downstream pager or `head` closes the pipe,
    // like any other Unix filter, instead of panicking on write.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_VALIDATION,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Solve(args) => solve(args),
        Command::Price(args) => price(args),
        Command::Verify(args) => verify(args),
        Command::Gen(args) => gen(args),
        Command::Convert(args) => convert(args),
        Command::Mmc(args) => mmc(args),
        Command::Report(args) => report(args),
    }
}

fn solve(args: SolveArgs) -> Result<(), Failure> {
    let instance = load_instance(&args.instance)?;
    let mut config = SolverConfig::default();
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(multistart) = args.multistart {
        config.multistart = multistart;
    }
    let result = optimize_allocation(&instance, &config).map_err(|e| match e {
        OptimizerError::Infeasible { .. } => fail(EXIT_INFEASIBLE, e.into()),
        other => Failure::from(other),
    })?;
    save_result(&args.out, &result)?;
    if result.base_price.subsidy {
        eprintln!(
            "warning: break-even base price is negative (${:.4}): cost recovery requires a subsidy",
            result.base_price.value
        );
    }
    println!(
        "solved {}: expected latency {:.4} h, base price ${:.4}, {} iterations -> {}",
        args.instance.display(),
        result.objective,
        result.base_price.value,
        result.diagnostics.iterations,
        args.out.display()
    );
    Ok(())
}

fn price(args: PriceArgs) -> Result<(), Failure> {
    let instance = load_instance(&args.instance)?;
    let text = std::fs::read_to_string(&args.allocation)
        .with_context(|| format!("{}", args.allocation.display()))?;
    let matrix: Matrix = serde_json::from_str(&text)
        .with_context(|| format!("{}: not an allocation matrix", args.allocation.display()))?;
    let x = AllocationMatrix::new(matrix)?;
    check_shape(&instance, &x)?;
    if args.base < 0.0 {
        eprintln!(
            "warning: negative base price (${:.4}) prices the slowest mode as a subsidy",
            args.base
        );
    }
    let snapshot = instance.latency_snapshot(&x)?;
    let prices = PriceMatrix::for_allocation(&instance, &x, &snapshot, args.base)?;
    let mut text = serde_json::to_string_pretty(&prices).expect("prices serialize");
    text.push('\n');
    print!("{text}");
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let result = load_result(&args.result)?;
    let instance = &result.instance;
    instance.validate()?;
    check_shape(instance, &result.x)?;

    // The stored snapshot must describe the stored allocation.
    let fresh = instance.latency_snapshot(&result.x)?;
    let drift = fresh.ell.max_abs_diff(&result.snapshot.ell);
    if drift > 1e-9 {
        return Err(fail(
            EXIT_VALIDATION,
            anyhow!(
                "{}: stored latencies differ from recomputation by {drift:.3e}",
                args.result.display()
            ),
        ));
    }

    let grid = UserGrid::new(args.grid)?;
    let verdict = is_equilibrium(instance, &result.x, &fresh, &result.prices, &grid, args.tol)?;
    let mut endpoint_failures = 0usize;
    for i in 0..instance.n_orders() {
        let report = endpoint_inequality_check(
            fresh.ell.row(i),
            result.x.row(i),
            result.prices.row(i),
            instance.population.curve(i),
            args.tol.max(1e-12),
        )?;
        endpoint_failures += report.failures.len();
    }

    if verdict.is_equilibrium {
        println!(
            "stable: no user saves more than {:.3e} by switching (grid {}, {} endpoint checks clean)",
            verdict.worst_violation,
            args.grid,
            instance.n_orders()
        );
        if endpoint_failures > 0 {
            eprintln!("warning: {endpoint_failures} endpoint inequalities exceed tolerance");
        }
        Ok(())
    } else {
        let witness = verdict.witness.expect("failed verdict carries a witness");
        Err(fail(
            EXIT_VERIFICATION,
            anyhow!(
                "not an equilibrium: order {} user {:.6} saves {:.3e} h switching {} -> {} \
                 ({} endpoint failures)",
                witness.order,
                witness.user,
                verdict.worst_violation,
                instance.modalities[witness.assigned].id,
                instance.modalities[witness.better].id,
                endpoint_failures
            ),
        ))
    }
}

fn gen(args: GenArgs) -> Result<(), Failure> {
    let spec = GeneratorSpec::standard_mix(args.seed, args.cars, args.drones, args.robots);
    let instance = generate_instance(
        &spec,
        OrderSource::Synthetic {
            orders: args.orders,
        },
    )?;
    save_instance(&args.out, &instance)?;
    println!(
        "generated {} orders x {} modalities (seed {}) -> {}",
        instance.n_orders(),
        instance.n_modalities(),
        args.seed,
        args.out.display()
    );
    Ok(())
}

fn convert(args: ConvertArgs) -> Result<(), Failure> {
    // Counts come from the courier file; everything else from the
    // standard modality profiles.
    let spec = GeneratorSpec::standard_mix(0, 0, 0, 0);
    let instance = convert_csv(&spec, &args.orders, &args.couriers)?;
    save_instance(&args.out, &instance)?;
    println!(
        "converted {} orders x {} modalities -> {}",
        instance.n_orders(),
        instance.n_modalities(),
        args.out.display()
    );
    Ok(())
}

fn mmc(args: MmcArgs) -> Result<(), Failure> {
    let system = match (args.rho, args.mu) {
        (Some(rho), None) => MMcSystem::from_utilization(args.servers, args.lambda, rho),
        (None, Some(mu)) => MMcSystem::new(args.servers, args.lambda, mu),
        _ => {
            return Err(fail(
                EXIT_VALIDATION,
                anyhow!("exactly one of --rho or --mu is required"),
            ))
        }
    };
    let p_wait = system.erlang_c()?;
    let waits = system.mean_waits()?;
    println!("P_wait = {:.6}", p_wait);
    println!("W_q    = {:.3} min", waits.queue_h * 60.0);
    println!("W      = {:.3} min", waits.system_h * 60.0);
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let format: Format = args.format.parse()?;
    let result = load_result(&args.result)?;
    let summary = summarize(&result.instance, &result);
    print!("{}", emit(&summary, format));
    Ok(())
}
