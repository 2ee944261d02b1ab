mod output;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use edgent_core::kernels::Tensor;
use edgent_core::model::{load_model, BranchyModel};
use edgent_core::planner::{self, EvalOptions, PlanRequest};
use edgent_core::predictor::{load_predictors, save_predictors, PredictorSet, Side};
use edgent_core::profiler::{self, ProfileOptions, SuiteSize};
use edgent_core::simulator::{self, Jitter, ScenarioConfig, SweepAxis, SweepSpec};
use edgent_net::{DeviceConfig, EdgeConfig, EdgeServer, Mode, NetError};
use serde_json::json;

use output::{Format, Output};

#[derive(Parser)]
#[command(
    name = "edgent",
    version,
    about = "Device/edge co-inference planning for branchy DNNs"
)]
struct Cli {
    /// More logging; repeat for more detail.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[arg(long, value_enum, default_value_t = Format::Table, global = true)]
    format: Format,
    /// Seed for every randomized path.
    #[arg(long, env = "EDGENT_SEED", global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time the reference kernels and write measurements as CSV.
    Profile(ProfileArgs),
    /// Fit latency regressions from a measurement CSV.
    Fit(FitArgs),
    /// Choose the exit and partition point for one request.
    Plan(PlanArgs),
    /// Plan over a bandwidth or budget grid.
    Sweep(SweepArgs),
    /// Compare device-only, edge-only, partition-only and joint planning.
    Compare(CompareArgs),
    /// Simulated latency of a plan, or of edge-only offloading.
    Simulate(SimulateArgs),
    /// Run the edge server.
    Edge(EdgeArgs),
    /// Run one inference as the device.
    Device(DeviceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Default,
    Small,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SuiteArg::Default)]
    suite: SuiteArg,
    /// Multiply every measured latency, to stand in for a slower host.
    #[arg(long, default_value_t = 1.0)]
    slowdown: f64,
    /// Pin the profiling thread to one CPU.
    #[arg(long)]
    pin_cpu: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Device,
    Edge,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Side {
        match s {
            SideArg::Device => Side::Device,
            SideArg::Edge => Side::Edge,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    measurements: PathBuf,
    #[arg(long, value_enum)]
    side: SideArg,
    #[arg(long)]
    out: PathBuf,
    /// Replace only `--side` in this predictor file.
    #[arg(long)]
    merge: Option<PathBuf>,
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    predictors: PathBuf,
}

impl Inputs {
    fn load(&self) -> Result<(BranchyModel, PredictorSet)> {
        let model = load_model(&self.model).with_context(|| format!("loading model {}", self.model.display()))?;
        let predictors = load_predictors(&self.predictors)
            .with_context(|| format!("loading predictors {}", self.predictors.display()))?;
        Ok((model, predictors))
    }
}

#[derive(Args, Clone, Copy)]
struct EvalFlags {
    /// Charge sub-model loading time on both sides.
    #[arg(long)]
    include_loading: bool,
    /// Charge the return of the final output when the edge participates.
    #[arg(long)]
    count_result_transfer: bool,
    /// Override the model's input size.
    #[arg(long)]
    input_bytes: Option<u64>,
}

impl From<EvalFlags> for EvalOptions {
    fn from(f: EvalFlags) -> EvalOptions {
        EvalOptions {
            include_loading: f.include_loading,
            count_result_transfer: f.count_result_transfer,
            input_bytes: f.input_bytes,
        }
    }
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    bandwidth_kbps: f64,
    #[arg(long)]
    latency_ms: f64,
    #[command(flatten)]
    eval: EvalFlags,
    /// Same as `--format json`.
    #[arg(long, conflicts_with = "table")]
    json: bool,
    /// Same as `--format table`.
    #[arg(long)]
    table: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Bandwidth,
    Budget,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// First grid value (kbps or ms, per axis).
    #[arg(long)]
    from: f64,
    #[arg(long)]
    to: f64,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Fixed budget for a bandwidth sweep.
    #[arg(long, required_if_eq("axis", "bandwidth"))]
    budget_ms: Option<f64>,
    /// Fixed bandwidth for a budget sweep.
    #[arg(long, required_if_eq("axis", "budget"))]
    bandwidth_kbps: Option<f64>,
    #[command(flatten)]
    eval: EvalFlags,
    /// Also write the rows to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a gnuplot script that plots `--out`.
    #[arg(long, requires = "out")]
    gnuplot: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, default_value_t = 400.0)]
    bandwidth_kbps: f64,
    /// Budget grid start in ms.
    #[arg(long, default_value_t = 100.0)]
    from: f64,
    #[arg(long, default_value_t = 1000.0)]
    to: f64,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[command(flatten)]
    eval: EvalFlags,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, requires = "out")]
    gnuplot: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, requires = "predictors")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    predictors: Option<PathBuf>,
    #[arg(long)]
    bandwidth_kbps: f64,
    /// Plan under this budget and simulate the result.
    #[arg(long, conflicts_with_all = ["exit", "server_ms"])]
    latency_ms: Option<f64>,
    #[arg(long, requires = "partition")]
    exit: Option<usize>,
    #[arg(long, requires = "exit")]
    partition: Option<usize>,
    /// Edge-only scenario: fixed server compute time.
    #[arg(long, conflicts_with = "model", requires = "input_bytes")]
    server_ms: Option<f64>,
    /// Jitter fraction in [0, 1); seeded by `--seed`.
    #[arg(long)]
    jitter: Option<f64>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Kernels,
    Delay,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Kernels => Mode::Kernels,
            ModeArg::Delay => Mode::Delay,
        }
    }
}

#[derive(Args)]
struct EdgeArgs {
    #[arg(long)]
    listen: String,
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_enum, default_value_t = ModeArg::Kernels)]
    mode: ModeArg,
    #[arg(long)]
    shape_kbps: Option<f64>,
}

#[derive(Args)]
struct DeviceArgs {
    #[arg(long)]
    connect: Option<String>,
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    budget_ms: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Kernels)]
    mode: ModeArg,
    /// Measure uplink bandwidth with a probe before planning.
    #[arg(long)]
    probe: bool,
    /// Uplink bandwidth to plan with when not probing.
    #[arg(long)]
    bandwidth_kbps: Option<f64>,
    #[arg(long)]
    force_exit: Option<usize>,
    #[arg(long)]
    force_partition: Option<usize>,
    #[arg(long)]
    shape_kbps: Option<f64>,
    /// Raw little-endian f32 input; a seeded random input otherwise.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalFlags,
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        bail!("{name} must be a positive number, got {v}")
    }
}

fn kbps(name: &str, v: f64) -> Result<f64> {
    Ok(positive(name, v)? * 1000.0)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let mut out = Output::new(cli.format);
    match cli.command {
        Command::Profile(a) => {
            let suite = profiler::default_suite(match a.suite {
                SuiteArg::Default => SuiteSize::Default,
                SuiteArg::Small => SuiteSize::Small,
            });
            let rows = profiler::profile_suite(
                &suite,
                &a.out,
                &ProfileOptions {
                    seed,
                    slowdown: positive("--slowdown", a.slowdown)?,
                    pin_cpu: a.pin_cpu,
                },
            )?;
            out.profile(&rows)
        }
        Command::Fit(a) => {
            let existing = a
                .merge
                .as_ref()
                .map(|p| load_predictors(p).with_context(|| format!("loading {}", p.display())))
                .transpose()?;
            let set = profiler::fit_from_csv(&a.measurements, a.side.into(), existing.as_ref())?;
            save_predictors(&set, &a.out)?;
            out.predictors(&set)
        }
        Command::Plan(a) => {
            if a.json {
                out.format = Format::Json;
            } else if a.table {
                out.format = Format::Table;
            }
            let (model, predictors) = a.inputs.load()?;
            let request = PlanRequest::new(
                &model,
                &predictors,
                kbps("--bandwidth-kbps", a.bandwidth_kbps)?,
                positive("--latency-ms", a.latency_ms)?,
                a.eval.into(),
            )?;
            out.plan(&planner::plan(&request).report())
        }
        Command::Sweep(a) => {
            let (model, predictors) = a.inputs.load()?;
            let (axis, fixed) = match a.axis {
                AxisArg::Bandwidth => (SweepAxis::Bandwidth, a.budget_ms.expect("required by clap")),
                AxisArg::Budget => (SweepAxis::Budget, a.bandwidth_kbps.expect("required by clap")),
            };
            let spec = SweepSpec {
                axis,
                grid: simulator::linear_grid(a.from, a.to, a.steps)?,
                fixed,
                options: a.eval.into(),
            };
            let rows = simulator::sweep(&model, &predictors, &spec)?;
            if let Some(path) = &a.out {
                simulator::write_csv(path, &rows)?;
                if let Some(script) = &a.gnuplot {
                    write_file(script, &simulator::gnuplot_script(path, Some(axis)))?;
                }
            }
            out.rows(&rows)
        }
        Command::Compare(a) => {
            let (model, predictors) = a.inputs.load()?;
            let budgets = simulator::linear_grid(a.from, a.to, a.steps)?;
            let rows = simulator::compare_methods(
                &model,
                &predictors,
                &budgets,
                kbps("--bandwidth-kbps", a.bandwidth_kbps)?,
                &a.eval.into(),
            )?;
            if let Some(path) = &a.out {
                simulator::write_csv(path, &rows)?;
                if let Some(script) = &a.gnuplot {
                    write_file(script, &simulator::gnuplot_script(path, None))?;
                }
            }
            out.rows(&rows)
        }
        Command::Simulate(a) => simulate(a, seed, &mut out),
        Command::Edge(a) => {
            let (model, predictors) = a.inputs.load()?;
            let server = EdgeServer::bind(
                &a.listen,
                EdgeConfig {
                    model: Arc::new(model),
                    predictors: Arc::new(predictors),
                    mode: a.mode.into(),
                    shape_bps: a.shape_kbps.map(|k| kbps("--shape-kbps", k)).transpose()?,
                },
            )
            .with_context(|| format!("listening on {}", a.listen))?;
            out.listening(server.local_addr()?)?;
            server.serve()?;
            Ok(())
        }
        Command::Device(a) => device(a, seed, &mut out),
    }
}

fn simulate(a: SimulateArgs, seed: u64, out: &mut Output) -> Result<()> {
    let bandwidth_bps = kbps("--bandwidth-kbps", a.bandwidth_kbps)?;
    let jitter = a.jitter.map(|fraction| Jitter { fraction, seed });
    if let Some(server_ms) = a.server_ms {
        let input_bytes = a.eval.input_bytes.expect("required by clap");
        let latency = simulator::simulate_edge_only(&ScenarioConfig {
            server_compute_ms: server_ms,
            input_bytes,
            bandwidth_bps,
            jitter,
        })?;
        return out.simulation(json!({
            "scenario": "edge-only",
            "bandwidth_kbps": a.bandwidth_kbps,
            "input_bytes": input_bytes,
            "server_compute_ms": server_ms,
            "latency_ms": latency,
        }));
    }
    let (Some(model), Some(predictors)) = (a.model, a.predictors) else {
        bail!("simulate needs --model and --predictors, or --server-ms and --input-bytes");
    };
    let (model, predictors) = Inputs { model, predictors }.load()?;
    let options: EvalOptions = a.eval.into();
    let (plan, feasible) = match (a.exit, a.partition, a.latency_ms) {
        (Some(e), Some(p), _) => (
            planner::evaluate(&model, &predictors, e, p, bandwidth_bps, &options)?,
            None,
        ),
        (_, _, Some(budget)) => {
            let outcome = planner::plan(&PlanRequest::new(
                &model,
                &predictors,
                bandwidth_bps,
                positive("--latency-ms", budget)?,
                options,
            )?);
            (outcome.plan().clone(), Some(outcome.is_feasible()))
        }
        _ => bail!("give --exit and --partition, or --latency-ms"),
    };
    let latency = simulator::simulate_plan(&model, &predictors, &plan, bandwidth_bps, &options, jitter)?;
    out.simulation(json!({
        "scenario": "plan",
        "bandwidth_kbps": a.bandwidth_kbps,
        "exit": plan.exit,
        "partition": plan.partition,
        "feasible": feasible,
        "predicted_latency_ms": plan.predicted_latency_ms,
        "latency_ms": latency,
    }))
}

fn read_input(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.is_empty() || bytes.len() % 4 != 0 {
        bail!("{} is not a whole number of f32 values", path.display());
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(vec![data.len()], data)?)
}

fn device(a: DeviceArgs, seed: u64, out: &mut Output) -> Result<()> {
    let (model, predictors) = a.inputs.load()?;
    let mut config = DeviceConfig::new(
        Arc::new(model),
        Arc::new(predictors),
        a.mode.into(),
        positive("--budget-ms", a.budget_ms)?,
    );
    config.connect = a.connect;
    config.probe = a.probe;
    config.bandwidth_bps = a.bandwidth_kbps.map(|k| kbps("--bandwidth-kbps", k)).transpose()?;
    config.shape_bps = a.shape_kbps.map(|k| kbps("--shape-kbps", k)).transpose()?;
    config.force_exit = a.force_exit;
    config.force_partition = a.force_partition;
    config.options = a.eval.into();
    config.seed = seed;
    let input = a.input.as_deref().map(read_input).transpose()?;
    match edgent_net::run_device(config, input) {
        Ok(report) => out.device(&report),
        // an unmet budget is an answer, like `plan`
        Err(NetError::Infeasible { best, .. }) => out.plan(&best),
        Err(e) => Err(e.into()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("EDGENT_LOG")
        .format_timestamp_millis()
        .init();
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
