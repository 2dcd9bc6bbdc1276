//! `remat`: profile validation, recomputation scheduling, partition search
//! and pipeline simulation.
//!
//! Exit codes: 0 success, 1 invalid profile or failed run, 2 unreadable
//! input, 3 search budget exhausted, 4 infeasible, 5 no valid partition.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use remat_core::heusched::{build_heu_model, full_recompute_stage, plan_stage, HeuError, StageRole};
use remat_core::ilp::write_lp;
use remat_core::optsched::{build_opt_model, solve_opt, stage_phase_graph, OptError, ScheduleStatus};
use remat_core::partition::{initial_partition, search_partition, Mode, PartitionError, PartitionOptions, Planner};
use remat_core::pipesim::{emit_trace, report_json, simulate, SimOptions, SimReport, StageProgram, TraceFormat};
use remat_core::profile::{expand_stage_graph, load_profile, Profile, ProfileError};
use remat_core::rational::{fixed3, parse as parse_rational, Rational};

#[derive(Parser)]
#[command(name = "remat", version, about = "Recomputation scheduling for pipeline-parallel training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a profile document.
    Validate(Common),
    /// Solve one stage and print its schedule or plan.
    Schedule(ScheduleArgs),
    /// Search a layer-to-stage assignment.
    Partition(PartitionArgs),
    /// Simulate one training iteration.
    Simulate(SimulateArgs),
    /// Per-stage time and recomputation breakdown table.
    Report(SimulateArgs),
}

#[derive(Args)]
struct Common {
    /// Profile JSON.
    input: PathBuf,
    /// Accept keys the profile format does not define.
    #[arg(long)]
    lenient: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Opt,
    Heu,
    /// Checkpoint-only plans with every recomputation on demand
    /// (simulate and report only).
    Full,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    ChromeTrace,
    Lp,
}

#[derive(Args)]
struct Solver {
    #[arg(long, value_enum, default_value = "heu")]
    mode: ModeArg,
    /// Search budget; converted to a fixed amount of solver work, so results
    /// do not depend on machine speed.
    #[arg(long, default_value_t = 10_000)]
    time_limit_ms: u64,
    /// Worker threads for partition candidates.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    solver: Solver,
    #[arg(long, default_value_t = 0)]
    stage: usize,
    /// Partition JSON fixing the stage's layer count; the initial split is
    /// used otherwise.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Write the model in LP format instead of solving it.
    #[arg(long)]
    emit_lp: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct PartitionArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    solver: Solver,
    /// Try every target stage before moving a layer.
    #[arg(long)]
    full_scan: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    solver: Solver,
    /// Partition JSON; the initial split is used otherwise.
    #[arg(long)]
    partition: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Latency of every inter-stage hand-off, in microseconds.
    #[arg(long, default_value = "0")]
    p2p_us: String,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
    /// Output that is still written, e.g. the best schedule found.
    partial: Option<String>,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Failure {
        Failure { code, message: message.into(), partial: None }
    }
}

impl From<ProfileError> for Failure {
    fn from(e: ProfileError) -> Failure {
        match e {
            ProfileError::Parse(_) => Failure::new(2, e.to_string()),
            ProfileError::Validation(_) => Failure::new(1, e.to_string()),
        }
    }
}

impl From<OptError> for Failure {
    fn from(e: OptError) -> Failure {
        let code = match e {
            OptError::TimedOut => 3,
            OptError::Infeasible | OptError::BudgetTooSmall { .. } => 4,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<HeuError> for Failure {
    fn from(e: HeuError) -> Failure {
        let code = match e {
            HeuError::TimedOut => 3,
            HeuError::BudgetInfeasible { .. } => 4,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<PartitionError> for Failure {
    fn from(e: PartitionError) -> Failure {
        match e {
            PartitionError::NoValidPartition(_) => Failure::new(5, e.to_string()),
            PartitionError::Heu(e) => e.into(),
            PartitionError::Opt(e) => e.into(),
            PartitionError::Sim(e) => Failure::new(1, e.to_string()),
        }
    }
}

type Outcome = Result<String, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LYNX_LOG", "warn")).init();
    let cli = Cli::parse();
    let (out, result) = match &cli.command {
        Command::Validate(c) => (None, validate(c)),
        Command::Schedule(a) => (a.solver.out.clone(), schedule(a)),
        Command::Partition(a) => (a.solver.out.clone(), partition(a)),
        Command::Simulate(a) => (a.solver.out.clone(), run_simulate(a)),
        Command::Report(a) => (a.solver.out.clone(), report(a)),
    };
    let (text, code) = match result {
        Ok(text) => (Some(text), 0),
        Err(f) => {
            eprintln!("error: {}", f.message);
            (f.partial, f.code)
        }
    };
    if let Some(text) = text {
        if let Err(e) = write_output(out.as_deref(), &text) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                return ExitCode::from(code);
            }
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    ExitCode::from(code)
}

fn write_output(path: Option<&Path>, text: &str) -> std::io::Result<()> {
    let mut text = text.to_owned();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    match path {
        Some(p) => std::fs::write(p, text),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(text.as_bytes())
        }
    }
}

fn load(c: &Common) -> Result<Profile, Failure> {
    let bytes = std::fs::read(&c.input).map_err(|e| Failure::new(2, format!("{}: {e}", c.input.display())))?;
    Ok(load_profile(&bytes, !c.lenient)?)
}

fn validate(c: &Common) -> Outcome {
    let p = load(c)?;
    let m = &p.model;
    Ok(format!(
        "{}: valid, {} layers of {} operators ({} forward), {} stages, {} microbatches",
        m.name,
        m.n_layers,
        m.layer.ops.len(),
        m.layer.n_forward(),
        p.pipeline.n_stages,
        p.pipeline.n_microbatches
    ))
}

fn options(s: &Solver) -> Result<PartitionOptions, Failure> {
    let mode = match s.mode {
        ModeArg::Opt => Mode::Opt,
        ModeArg::Heu => Mode::Heu,
        ModeArg::Full => return Err(Failure::new(2, "--mode full is only available to simulate and report")),
    };
    Ok(PartitionOptions { mode, time_limit_ms: s.time_limit_ms, jobs: s.jobs, ..PartitionOptions::default() })
}

#[derive(Deserialize)]
struct PartitionDoc {
    layers_per_stage: Vec<u32>,
}

fn stage_layers(p: &Profile, partition: Option<&Path>) -> Result<Vec<u32>, Failure> {
    let Some(path) = partition else {
        return Ok(initial_partition(&p.model, &p.pipeline, &p.hardware)?);
    };
    let bytes = std::fs::read(path).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))?;
    let doc: PartitionDoc =
        serde_json::from_slice(&bytes).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))?;
    let n = doc.layers_per_stage.len();
    let total: u32 = doc.layers_per_stage.iter().sum();
    if n != p.pipeline.n_stages as usize || total != p.model.n_layers || doc.layers_per_stage.contains(&0) {
        return Err(Failure::new(
            1,
            format!(
                "partition {:?} does not fit {} layers on {} stages",
                doc.layers_per_stage, p.model.n_layers, p.pipeline.n_stages
            ),
        ));
    }
    Ok(doc.layers_per_stage)
}

fn schedule(a: &ScheduleArgs) -> Outcome {
    let p = load(&a.common)?;
    let opts = options(&a.solver)?;
    let layers = stage_layers(&p, a.partition.as_deref())?;
    let stage = a.stage;
    let Some(&l) = layers.get(stage) else {
        return Err(Failure::new(2, format!("stage {stage} out of range, the pipeline has {}", layers.len())));
    };
    let emit_lp = a.emit_lp || a.format == Format::Lp;
    match opts.mode {
        Mode::Heu => {
            let planned = plan_stage(&p.model, &p.hardware, &p.pipeline, stage, l, opts.time_limit_ms, opts.expand)?;
            if emit_lp {
                return Ok(write_lp(&build_heu_model(&p.model.layer, &p.hardware, &planned.ctx)?.model));
            }
            let json = planned.plan.to_json(&p.model.layer, stage);
            if planned.plan.optimal {
                Ok(json)
            } else {
                Err(Failure {
                    code: 3,
                    message: "search budget exhausted, best plan written".into(),
                    partial: Some(json),
                })
            }
        }
        Mode::Opt => {
            let sg = expand_stage_graph(&p.model, l, stage == 0, p.pipeline.is_last(stage));
            let phase = stage_phase_graph(&sg, p.pipeline.n_stages as usize, stage, p.pipeline.n_microbatches as usize);
            let inst = build_opt_model(&phase.graph, &p.hardware, p.model.static_bytes * l as u64)?;
            if emit_lp {
                return Ok(write_lp(&inst.model));
            }
            let sched = solve_opt(&inst, a.solver.time_limit_ms, stage)?;
            let json = sched.to_json();
            match sched.status {
                ScheduleStatus::Optimal => Ok(json),
                ScheduleStatus::Feasible { .. } => Err(Failure {
                    code: 3,
                    message: "search budget exhausted, best schedule written".into(),
                    partial: Some(json),
                }),
            }
        }
    }
}

fn partition(a: &PartitionArgs) -> Outcome {
    let p = load(&a.common)?;
    let mut opts = options(&a.solver)?;
    opts.full_scan = a.full_scan;
    let r = search_partition(&p.model, &p.pipeline, &p.hardware, &opts)?;
    Ok(r.to_json())
}

fn programs(p: &Profile, a: &SimulateArgs) -> Result<(Vec<u32>, Vec<StageProgram>), Failure> {
    let layers = stage_layers(p, a.partition.as_deref())?;
    let programs = if a.solver.mode == ModeArg::Full {
        layers
            .iter()
            .enumerate()
            .map(|(s, &l)| full_recompute_stage(&p.model, &p.hardware, &p.pipeline, s, l))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        let planner = Planner::new(&p.model, &p.hardware, &p.pipeline, options(&a.solver)?);
        planner.plan_all(&layers)?.into_iter().map(|s| s.program).collect()
    };
    Ok((layers, programs))
}

fn sim(a: &SimulateArgs) -> Result<(Profile, Vec<u32>, SimReport), Failure> {
    let p = load(&a.common)?;
    let p2p_us: Rational = parse_rational(&a.p2p_us)
        .filter(|r| *r >= Rational::default())
        .ok_or_else(|| Failure::new(2, format!("bad --p2p-us value {:?}", a.p2p_us)))?;
    let (layers, progs) = programs(&p, a)?;
    let report = simulate(&progs, &SimOptions { p2p_us }).map_err(|e| Failure::new(1, e.to_string()))?;
    Ok((p, layers, report))
}

fn run_simulate(a: &SimulateArgs) -> Outcome {
    let (_, _, report) = sim(a)?;
    Ok(match a.format {
        Format::Json => report_json(&report),
        Format::Csv => emit_trace(&report, TraceFormat::Csv),
        Format::ChromeTrace => emit_trace(&report, TraceFormat::ChromeTrace),
        Format::Lp => return Err(Failure::new(2, "simulate writes json, csv or chrome-trace")),
    })
}

fn report(a: &SimulateArgs) -> Outcome {
    let (p, layers, r) = sim(a)?;
    let mut out = String::new();
    let _ = writeln!(out, "iteration_us {}", fixed3(&r.iteration_us));
    let _ = writeln!(
        out,
        "{:>5} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10} {:>9} {:>9} {:>9}",
        "stage",
        "layers",
        "busy_us",
        "comm_us",
        "stall_us",
        "ondemand_us",
        "overlap_us",
        "peak_B",
        "retained",
        "overlap",
        "ondemand"
    );
    for (s, st) in r.per_stage.iter().enumerate() {
        let (n, o, d) = r.breakdown[s].fractions();
        let role = if StageRole::of(&p.pipeline, s) == StageRole::Last { "*" } else { "" };
        let _ = writeln!(
            out,
            "{:>5} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10} {:>9} {:>9} {:>9}",
            format!("{s}{role}"),
            layers[s],
            fixed3(&st.busy_us),
            fixed3(&st.comm_us),
            fixed3(&st.stall_us),
            fixed3(&st.recompute_on_demand_us),
            fixed3(&st.recompute_overlapped_us),
            r.memory_peaks[s],
            fixed3(&n),
            fixed3(&o),
            fixed3(&d)
        );
    }
    Ok(out)
}
