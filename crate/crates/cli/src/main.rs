use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use evsched::admm::{AdmmConfig, NetworkCase, ResidualRule};
use evsched::fleet::{self, BaseLoadSeries, ChargingRequest, CostModel, LoadSample};
use evsched::fw::{self, FwConfig, StepRule};
use evsched::grid::{self, FeederModel, GridState};
use evsched::instances::{self, InstanceKind};
use evsched::oracle;
use evsched::pgd::{self, PgdConfig};

mod output;

use output::{num, write_csv_rows, write_json, write_trace, Format, Profile, ScheduleResult};

#[derive(Parser)]
#[command(
    name = "evsched",
    version,
    about = "EV charging schedulers: Frank-Wolfe, PGD and network ADMM"
)]
struct Cli {
    /// Seed for instance generation.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads for the solvers (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Format of the --out artifact.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic instance (instance.json, fleet.json, load.csv and
    /// feeder.json for network kinds) into a directory.
    Generate {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Network-free scheduling with the Frank-Wolfe protocol.
    ScheduleFw(FwArgs),
    /// Network-free scheduling with projected gradient descent.
    SchedulePgd(PgdArgs),
    /// Network-constrained scheduling with consensus ADMM.
    SolveNetwork(NetworkArgs),
    /// Parse and validate a feeder file, printing a summary.
    ValidateFeeder {
        #[arg(long)]
        feeder: PathBuf,
    },
    /// Run several solvers on one scenario and report their agreement.
    Compare(CompareArgs),
}

#[derive(Args)]
struct AggregateInput {
    #[arg(long)]
    fleet: PathBuf,
    /// CSV with columns t,p_kw (bus, phase and q_kvar are optional and summed over).
    #[arg(long)]
    base_load: PathBuf,
    /// `quadratic` (x^2/2), `quadratic:a,b,c`, `linear:b` or `file:PATH` with a JSON cost model.
    #[arg(long, default_value = "quadratic")]
    cost: String,
    /// Slot count; defaults to one past the last slot in the load file.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Keep every n-th trace row (the last row is always kept).
    #[arg(long, default_value_t = 1)]
    trace_every: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum StepArg {
    OpenLoop,
    LineSearch,
}

#[derive(Args)]
struct FwArgs {
    #[command(flatten)]
    input: AggregateInput,
    /// Relative cost change stopping tolerance.
    #[arg(long, default_value_t = 1e-7)]
    eps: f64,
    /// Absolute duality-gap stopping tolerance.
    #[arg(long)]
    gap_tol: Option<f64>,
    /// Duality-gap stopping tolerance relative to the cost.
    #[arg(long)]
    gap_rtol: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
    #[arg(long, value_enum, default_value_t = StepArg::OpenLoop)]
    step_rule: StepArg,
    #[command(flatten)]
    trace: TraceArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PgdArgs {
    #[command(flatten)]
    input: AggregateInput,
    #[arg(long, default_value_t = 1e-7)]
    eps: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
    /// Constant step size; defaults to the reciprocal Lipschitz constant.
    #[arg(long)]
    step: Option<f64>,
    #[command(flatten)]
    trace: TraceArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResidualArg {
    Paper,
    Standard,
}

#[derive(Args)]
struct NetworkInput {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    fleet: PathBuf,
    /// CSV with columns t,bus,phase,p_kw,q_kvar.
    #[arg(long)]
    load: PathBuf,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
struct NetworkArgs {
    #[command(flatten)]
    input: NetworkInput,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// Residual threshold factor; the test is `tol * T * sqrt(N)`.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 20_000)]
    max_iter: usize,
    /// Consecutive iterations the residual test must hold.
    #[arg(long, default_value_t = 50)]
    stop_window: usize,
    #[arg(long, value_enum, default_value_t = ResidualArg::Paper)]
    residual: ResidualArg,
    #[command(flatten)]
    trace: TraceArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Solver {
    Fw,
    Pgd,
    Oracle,
    Admm,
}

impl Solver {
    fn name(self) -> &'static str {
        match self {
            Solver::Fw => "fw",
            Solver::Pgd => "pgd",
            Solver::Oracle => "oracle",
            Solver::Admm => "admm",
        }
    }
}

#[derive(Args)]
struct CompareArgs {
    /// Directory written by `generate`; supplies any file not given explicitly.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    feeder: Option<PathBuf>,
    #[arg(long)]
    fleet: Option<PathBuf>,
    #[arg(long, alias = "load")]
    base_load: Option<PathBuf>,
    /// Cost of the network-free problem, as for schedule-fw.
    #[arg(long, default_value = "quadratic")]
    cost: String,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fw,pgd")]
    solvers: Vec<Solver>,
    /// Frank-Wolfe stops once its duality gap is below this fraction of the cost.
    #[arg(long, default_value_t = 1e-7)]
    gap_rtol: f64,
    /// Overrides every solver's iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Status {
    Done,
    MaxIter,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::MaxIter) => {
            eprintln!("warning: iteration limit reached before convergence");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Status> {
    if let Some(n) = cli.threads {
        init_threads(n)?;
    }
    match cli.command {
        Command::Generate { kind, out, horizon } => generate(&kind, cli.seed, horizon, &out),
        Command::ScheduleFw(args) => schedule_fw(args, cli.format),
        Command::SchedulePgd(args) => schedule_pgd(args, cli.format),
        Command::SolveNetwork(args) => solve_network(args, cli.format),
        Command::ValidateFeeder { feeder } => validate_feeder(&feeder, cli.format),
        Command::Compare(args) => compare(args, cli.format),
    }
}

#[cfg(feature = "parallel")]
fn init_threads(n: usize) -> Result<()> {
    if n == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

#[cfg(not(feature = "parallel"))]
fn init_threads(n: usize) -> Result<()> {
    if n == 0 {
        bail!("--threads must be at least 1");
    }
    log::warn!("built without the parallel feature; --threads ignored");
    Ok(())
}

// ---------------------------------------------------------------------------
// Input

fn read_loads(path: &Path) -> Result<Vec<LoadSample>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    fleet::parse_load_csv(file).with_context(|| format!("reading {}", path.display()))
}

fn horizon_of(samples: &[LoadSample], given: Option<usize>) -> Result<usize> {
    let horizon = given.unwrap_or_else(|| samples.iter().map(|s| s.t + 1).max().unwrap_or(0));
    if horizon == 0 {
        bail!("horizon must be at least one slot");
    }
    if let Some(s) = samples.iter().find(|s| s.t >= horizon) {
        bail!(
            "load sample at slot {} lies outside the horizon of {horizon} slots",
            s.t
        );
    }
    Ok(horizon)
}

fn numbers(list: &str, count: usize, spec: &str) -> Result<Vec<f64>> {
    let v = list
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("cost `{spec}`"))?;
    if v.len() != count {
        bail!("cost `{spec}` needs {count} coefficient(s), got {}", v.len());
    }
    Ok(v)
}

fn parse_cost(spec: &str, horizon: usize) -> Result<CostModel> {
    let cost = match spec.split_once(':') {
        None if spec == "quadratic" => CostModel::QuadraticValley,
        Some(("quadratic", rest)) => {
            let c = numbers(rest, 3, spec)?;
            CostModel::uniform_quadratic(horizon, c[0], c[1], c[2])
        }
        Some(("linear", rest)) => CostModel::Linear {
            b: vec![numbers(rest, 1, spec)?[0]; horizon],
        },
        Some(("file", path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing cost file {path}"))?
        }
        _ => bail!("unknown cost `{spec}`"),
    };
    cost.check(horizon)?;
    Ok(cost)
}

struct AggregateProblem {
    fleet: Vec<ChargingRequest>,
    d: BaseLoadSeries,
    cost: CostModel,
}

fn load_aggregate(fleet_path: &Path, load_path: &Path, cost: &str, horizon: Option<usize>) -> Result<AggregateProblem> {
    let samples = read_loads(load_path)?;
    let horizon = horizon_of(&samples, horizon)?;
    let mut d = vec![0.0; horizon];
    for s in &samples {
        d[s.t] += s.p_kw;
    }
    let entries =
        fleet::read_fleet(fleet_path, horizon).with_context(|| format!("reading {}", fleet_path.display()))?;
    Ok(AggregateProblem {
        fleet: entries.into_iter().map(|e| e.request).collect(),
        d: BaseLoadSeries::new(d)?,
        cost: parse_cost(cost, horizon)?,
    })
}

fn read_feeder(path: &Path) -> Result<FeederModel> {
    grid::parse_feeder(path).with_context(|| format!("reading {}", path.display()))
}

fn load_network(feeder: &Path, fleet_path: &Path, load: &Path, horizon: Option<usize>) -> Result<NetworkCase> {
    let feeder = read_feeder(feeder)?;
    let samples = read_loads(load)?;
    let horizon = horizon_of(&samples, horizon)?;
    let entries =
        fleet::read_fleet(fleet_path, horizon).with_context(|| format!("reading {}", fleet_path.display()))?;
    Ok(NetworkCase::new(feeder, &entries, &samples, horizon)?)
}

// ---------------------------------------------------------------------------
// Subcommands

fn generate(kind: &str, seed: u64, horizon: Option<usize>, out: &Path) -> Result<Status> {
    let kind: InstanceKind = kind.parse()?;
    let instance = instances::generate(kind, seed, horizon)?;
    for path in instance.write(out)? {
        println!("{}", path.display());
    }
    Ok(Status::Done)
}

fn profiles_of(fleet: &[ChargingRequest], values: &[fleet::ChargingProfile]) -> Vec<Profile> {
    fleet
        .iter()
        .zip(values)
        .map(|(r, p)| Profile {
            id: r.id.clone(),
            values: p.to_vec(),
        })
        .collect()
}

fn total_load(d: &BaseLoadSeries, aggregate: &[f64]) -> Vec<f64> {
    d.values().iter().zip(aggregate).map(|(a, b)| a + b).collect()
}

fn fw_config(args: &FwArgs) -> FwConfig {
    FwConfig {
        max_iter: args.max_iter,
        rel_tol: args.eps,
        gap_tol: args.gap_tol,
        gap_rtol: args.gap_rtol,
        step: match args.step_rule {
            StepArg::OpenLoop => StepRule::OpenLoop,
            StepArg::LineSearch => StepRule::LineSearch,
        },
        ..FwConfig::default()
    }
}

fn schedule_fw(args: FwArgs, format: Format) -> Result<Status> {
    let p = load_aggregate(
        &args.input.fleet,
        &args.input.base_load,
        &args.input.cost,
        args.input.horizon,
    )?;
    let out = fw::schedule(&p.fleet, &p.d, &p.cost, &fw_config(&args))?;
    if let Some(path) = &args.trace.trace {
        write_trace(
            path,
            &["iter", "cost", "gap", "eta"],
            &out.trace,
            args.trace.trace_every,
            |r| vec![r.k.to_string(), num(r.cost), num(r.duality_gap), num(r.eta)],
        )?;
    }
    let result = ScheduleResult {
        solver: "fw".into(),
        converged: out.converged(),
        iterations: out.iterations(),
        cost: out.cost,
        total_load: total_load(&p.d, &out.aggregate),
        profiles: profiles_of(&p.fleet, &out.profiles),
    };
    finish_schedule(&result, args.out.as_deref(), format)
}

fn schedule_pgd(args: PgdArgs, format: Format) -> Result<Status> {
    let p = load_aggregate(
        &args.input.fleet,
        &args.input.base_load,
        &args.input.cost,
        args.input.horizon,
    )?;
    let cfg = PgdConfig {
        step: args.step,
        max_iter: args.max_iter,
        rel_tol: args.eps,
        ..PgdConfig::default()
    };
    let out = pgd::pgd_schedule(&p.fleet, &p.d, &p.cost, &cfg)?;
    if let Some(path) = &args.trace.trace {
        write_trace(path, &["iter", "cost"], &out.trace, args.trace.trace_every, |r| {
            vec![r.k.to_string(), num(r.cost)]
        })?;
    }
    let result = ScheduleResult {
        solver: "pgd".into(),
        converged: out.converged,
        iterations: out.trace.len() - 1,
        cost: out.cost,
        total_load: total_load(&p.d, &out.aggregate),
        profiles: profiles_of(&p.fleet, &out.profiles),
    };
    finish_schedule(&result, args.out.as_deref(), format)
}

fn finish_schedule(result: &ScheduleResult, out: Option<&Path>, format: Format) -> Result<Status> {
    if let Some(path) = out {
        result.write(path, format)?;
    }
    println!(
        "{}: cost {} after {} iterations{}",
        result.solver,
        result.cost,
        result.iterations,
        if result.converged { "" } else { " (not converged)" }
    );
    Ok(if result.converged {
        Status::Done
    } else {
        Status::MaxIter
    })
}

fn admm_config(args: &NetworkArgs) -> AdmmConfig {
    AdmmConfig {
        rho: args.rho,
        max_iter: args.max_iter,
        tau_stop: args.tol,
        stop_window: args.stop_window,
        stop_on: match args.residual {
            ResidualArg::Paper => ResidualRule::Paper,
            ResidualArg::Standard => ResidualRule::Standard,
        },
        ..AdmmConfig::default()
    }
}

fn solve_network(args: NetworkArgs, format: Format) -> Result<Status> {
    let i = &args.input;
    let case = load_network(&i.feeder, &i.fleet, &i.load, i.horizon)?;
    let out = case.solve(&admm_config(&args))?;
    if let Some(path) = &args.trace.trace {
        write_trace(
            path,
            &["iter", "cost", "op", "od", "op_std"],
            &out.trace,
            args.trace.trace_every,
            |r| vec![r.iter.to_string(), num(r.cost), num(r.op), num(r.od), num(r.op_std)],
        )?;
    }
    let solution = case.solution(&out);
    if let Some(path) = &args.out {
        match format {
            Format::Json => write_json(path, &solution)?,
            Format::Csv => {
                let mut rows = Vec::new();
                for slot in &solution.slots {
                    for bus in &slot.buses {
                        for k in 0..3 {
                            rows.push(vec![
                                slot.t.to_string(),
                                bus.id.clone(),
                                grid::Phase::from_index(k).to_string(),
                                num(bus.v[k]),
                                num(bus.pg[k]),
                                num(bus.qg[k]),
                                num(bus.pd[k]),
                                num(bus.qd[k]),
                                num(bus.p_flow[k]),
                                num(bus.q_flow[k]),
                            ]);
                        }
                    }
                }
                write_csv_rows(
                    path,
                    &["t", "bus", "phase", "v", "pg", "qg", "pd", "qd", "p_flow", "q_flow"],
                    rows,
                )?;
            }
        }
    }
    println!(
        "admm: objective {} after {} iterations, max violation {:.3e}{}",
        out.objective,
        out.iterations,
        out.feasibility.max(),
        if out.converged { "" } else { " (not converged)" }
    );
    Ok(if out.converged { Status::Done } else { Status::MaxIter })
}

#[derive(Serialize)]
struct FeederSummary {
    buses: usize,
    lines: usize,
    /// Buses carrying one, two and three phases.
    phase_counts: [usize; 3],
    generators: usize,
    base_kva: f64,
}

fn validate_feeder(path: &Path, format: Format) -> Result<Status> {
    let feeder = read_feeder(path)?;
    let mut phase_counts = [0; 3];
    for b in &feeder.buses {
        phase_counts[b.phases.len() - 1] += 1;
    }
    let s = FeederSummary {
        buses: feeder.num_buses(),
        lines: feeder.num_lines(),
        phase_counts,
        generators: feeder.buses.iter().filter(|b| b.gen.is_some()).count(),
        base_kva: feeder.base_kva,
    };
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&s)?),
        Format::Csv => {
            println!("buses,lines,one_phase,two_phase,three_phase,generators,base_kva");
            println!(
                "{},{},{},{},{},{},{}",
                s.buses, s.lines, phase_counts[0], phase_counts[1], phase_counts[2], s.generators, s.base_kva
            );
        }
    }
    Ok(Status::Done)
}

// ---------------------------------------------------------------------------
// Compare

#[derive(Serialize)]
struct SolverReport {
    solver: Solver,
    cost: f64,
    iterations: usize,
    converged: bool,
    /// Total demand per slot in kW, charging included.
    total_load: Vec<f64>,
}

#[derive(Serialize)]
struct CompareReport {
    network: bool,
    horizon: usize,
    solvers: Vec<SolverReport>,
    /// Largest `|a - b| / max(|a|, |b|)` over solver pairs.
    max_relative_gap: f64,
}

fn pick(explicit: &Option<PathBuf>, dir: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    explicit
        .clone()
        .or_else(|| dir.as_ref().map(|d| d.join(name)).filter(|p| p.exists()))
}

fn network_total_load(feeder: &FeederModel, g: &GridState) -> Vec<f64> {
    (0..g.horizon)
        .map(|t| g.slot(t).iter().map(|b| b.pd.iter().sum::<f64>()).sum::<f64>() * feeder.base_kva)
        .collect()
}

fn compare(args: CompareArgs, format: Format) -> Result<Status> {
    let feeder = pick(&args.feeder, &args.instance, instances::FEEDER_FILE);
    let fleet_path =
        pick(&args.fleet, &args.instance, instances::FLEET_FILE).ok_or_else(|| anyhow!("no fleet file given"))?;
    let load_path =
        pick(&args.base_load, &args.instance, instances::LOAD_FILE).ok_or_else(|| anyhow!("no load file given"))?;
    let network = feeder.is_some();
    for s in &args.solvers {
        let applies = match s {
            Solver::Fw | Solver::Pgd => !network,
            Solver::Admm => network,
            Solver::Oracle => true,
        };
        if !applies {
            let kind = if network { "network" } else { "network-free" };
            bail!("solver {} does not apply to a {kind} scenario", s.name());
        }
    }

    let mut reports = Vec::new();
    let horizon;
    if let Some(feeder) = feeder {
        let case = load_network(&feeder, &fleet_path, &load_path, args.horizon)?;
        horizon = case.loads.horizon;
        for &s in &args.solvers {
            reports.push(match s {
                Solver::Admm => {
                    let mut cfg = AdmmConfig::default();
                    if let Some(m) = args.max_iter {
                        cfg.max_iter = m;
                    }
                    let out = case.solve(&cfg)?;
                    SolverReport {
                        solver: s,
                        cost: out.objective,
                        iterations: out.iterations,
                        converged: out.converged,
                        total_load: network_total_load(&case.feeder, &out.repaired),
                    }
                }
                _ => {
                    let rep = oracle::oracle_network_case(&case)?;
                    let g = rep
                        .grid
                        .as_ref()
                        .ok_or_else(|| anyhow!("network oracle returned no grid state"))?;
                    SolverReport {
                        solver: s,
                        cost: rep.value,
                        iterations: rep.iterations,
                        converged: rep.certified,
                        total_load: network_total_load(&case.feeder, g),
                    }
                }
            });
        }
    } else {
        let p = load_aggregate(&fleet_path, &load_path, &args.cost, args.horizon)?;
        horizon = p.d.horizon();
        for &s in &args.solvers {
            reports.push(match s {
                Solver::Fw => {
                    let mut cfg = FwConfig {
                        max_iter: 10_000_000,
                        rel_tol: 0.0,
                        gap_rtol: Some(args.gap_rtol),
                        ..FwConfig::default()
                    };
                    if let Some(m) = args.max_iter {
                        cfg.max_iter = m;
                    }
                    let out = fw::schedule(&p.fleet, &p.d, &p.cost, &cfg)?;
                    SolverReport {
                        solver: s,
                        cost: out.cost,
                        iterations: out.iterations(),
                        converged: out.converged(),
                        total_load: total_load(&p.d, &out.aggregate),
                    }
                }
                Solver::Pgd => {
                    let mut cfg = PgdConfig::default();
                    if let Some(m) = args.max_iter {
                        cfg.max_iter = m;
                    }
                    let out = pgd::pgd_schedule(&p.fleet, &p.d, &p.cost, &cfg)?;
                    SolverReport {
                        solver: s,
                        cost: out.cost,
                        iterations: out.trace.len() - 1,
                        converged: out.converged,
                        total_load: total_load(&p.d, &out.aggregate),
                    }
                }
                _ => {
                    let rep = oracle::oracle_unconstrained(&p.fleet, &p.d, &p.cost)?;
                    SolverReport {
                        solver: s,
                        cost: rep.value,
                        iterations: rep.iterations,
                        converged: rep.certified,
                        total_load: total_load(&p.d, &fleet::aggregate(&rep.profiles, horizon)),
                    }
                }
            });
        }
    }

    let mut max_relative_gap: f64 = 0.0;
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[i + 1..] {
            let scale = a.cost.abs().max(b.cost.abs());
            if scale > 0.0 {
                max_relative_gap = max_relative_gap.max((a.cost - b.cost).abs() / scale);
            }
        }
    }
    let all_converged = reports.iter().all(|r| r.converged);
    let report = CompareReport {
        network,
        horizon,
        solvers: reports,
        max_relative_gap,
    };
    match (format, &args.out) {
        (Format::Json, Some(path)) => write_json(path, &report)?,
        (Format::Json, None) => println!("{}", serde_json::to_string_pretty(&report)?),
        (Format::Csv, out) => {
            let mut header = vec!["t"];
            header.extend(report.solvers.iter().map(|r| r.solver.name()));
            let rows = (0..horizon).map(|t| {
                let mut row = vec![t.to_string()];
                row.extend(report.solvers.iter().map(|r| num(r.total_load[t])));
                row
            });
            match out {
                Some(path) => write_csv_rows(path, &header, rows)?,
                None => {
                    let mut w = csv::Writer::from_writer(std::io::stdout());
                    w.write_record(&header)?;
                    for r in rows {
                        w.write_record(r)?;
                    }
                    w.flush()?;
                }
            }
        }
    }
    if args.out.is_some() || format == Format::Csv {
        eprintln!("max relative cost gap {max_relative_gap:.3e}");
    }
    Ok(if all_converged { Status::Done } else { Status::MaxIter })
}
