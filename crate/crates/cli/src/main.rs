//! `ttdeploy`: compile a quantized CNN into a time-triggered multi-core
//! schedule, replay it, and check it.
//!
//! Exit codes: 0 success, 2 invalid input or malformed artifact, 3 tile budget
//! or scratchpad exhausted, 4 a check or simulation failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ttdeploy::mapping::cross_core_bytes;
use ttdeploy::model::load_model;
use ttdeploy::pipeline::{compile, CompileOptions, MappingReport};
use ttdeploy::schedule::check::{run_checks, validate_structure};
use ttdeploy::schedule::{emit_schedule, load_schedule, Schedule, TransferKind};
use ttdeploy::sim::{simulate, verify_against_prediction, ExecutionProfile};
use ttdeploy::timing::{HardwareConfig, WcetOverrides};
use ttdeploy::Error;

#[derive(Parser)]
#[command(
    name = "ttdeploy",
    version,
    about = "Time-triggered CNN deployment for multi-core vector processors"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Partition, map and schedule a model; writes schedule.json and mapping_report.json.
    Compile(CompileArgs),
    /// Replay a schedule under an execution profile; writes trace.json and gantt.csv.
    Simulate(SimulateArgs),
    /// Re-verify every schedule invariant offline.
    Check(ScheduleArg),
    /// Summarize resource usage of a schedule.
    Report(ScheduleArg),
}

#[derive(Args)]
struct CompileArgs {
    #[arg(long)]
    model: PathBuf,
    /// Hardware config JSON; omitted fields take defaults.
    #[arg(long)]
    hw: Option<PathBuf>,
    /// JSON object mapping subtask id to WCET cycles.
    #[arg(long)]
    wcet_overrides: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    include_program_load: bool,
    #[arg(long)]
    tile_budget_bytes: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "out/schedule.json")]
    schedule: PathBuf,
    /// worst-case | scaled:F | random:SEED:MIN | fault:ID=F,...
    #[arg(long, default_value = "worst-case")]
    profile: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ScheduleArg {
    #[arg(long, default_value = "out/schedule.json")]
    schedule: PathBuf,
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.exit_code() as u8,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: String) -> Failure {
    Failure { code: 2, msg }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| usage(format!("cli: writing {}: {e}", path.display())))
}

fn load_checked(path: &Path) -> Result<Schedule, Failure> {
    let s = load_schedule(path).map_err(Error::from)?;
    validate_structure(&s).map_err(|e| usage(format!("scheduler: malformed schedule: {e}")))?;
    Ok(s)
}

fn cmd_compile(a: CompileArgs) -> Result<u8, Failure> {
    let g = load_model(&a.model).map_err(Error::from)?;
    let mut hw = match &a.hw {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cli: reading {}: {e}", p.display())))?;
            HardwareConfig::from_json(&text).map_err(Error::from)?
        }
        None => HardwareConfig::default(),
    };
    if a.include_program_load {
        hw.include_program_load = true;
    }
    let overrides = match &a.wcet_overrides {
        Some(p) => WcetOverrides::load(p).map_err(Error::from)?,
        None => WcetOverrides::default(),
    };
    let opts = CompileOptions {
        tile_budget_bytes: a.tile_budget_bytes,
        overrides,
    };
    let c = compile(&g, &hw, &opts)?;

    std::fs::create_dir_all(&a.out)
        .map_err(|e| usage(format!("cli: creating {}: {e}", a.out.display())))?;
    let sched_path = a.out.join("schedule.json");
    emit_schedule(&c.schedule, &sched_path).map_err(Error::from)?;
    write(
        &a.out.join("mapping_report.json"),
        &MappingReport::new(&c).to_json(),
    )?;

    println!("subtasks: {}", c.subtasks.subtasks.len());
    println!(
        "cross-core bytes: {}",
        cross_core_bytes(&c.subtasks, &c.mapping)
    );
    println!("makespan: {} cycles", c.schedule.makespan);
    println!("wrote {}", sched_path.display());
    Ok(0)
}

fn cmd_simulate(a: SimulateArgs) -> Result<u8, Failure> {
    let profile: ExecutionProfile = a.profile.parse().map_err(Error::from)?;
    let s = load_checked(&a.schedule)?;
    let trace = simulate(&s, &profile).map_err(Error::from)?;
    let report = verify_against_prediction(&trace, &s, &profile);

    std::fs::create_dir_all(&a.out)
        .map_err(|e| usage(format!("cli: creating {}: {e}", a.out.display())))?;
    trace
        .write_json(a.out.join("trace.json"))
        .map_err(Error::from)?;
    trace
        .write_gantt(a.out.join("gantt.csv"))
        .map_err(Error::from)?;

    for v in &trace.violations {
        let kind = serde_json::to_value(v.kind).expect("kind serializes");
        println!(
            "violation {} {} at cycle {}: {}",
            kind.as_str().unwrap_or_default(),
            v.event,
            v.cycle,
            v.detail
        );
    }
    println!("{report}");
    Ok(if report.pass { 0 } else { 4 })
}

fn cmd_check(a: ScheduleArg) -> Result<u8, Failure> {
    let s = load_checked(&a.schedule)?;
    let results = run_checks(&s);
    for r in &results {
        if r.ok {
            println!("PASS {}", r.name);
        } else {
            for d in &r.details {
                println!("FAIL {}: {d}", r.name);
            }
        }
    }
    Ok(if results.iter().all(|r| r.ok) { 0 } else { 4 })
}

fn cmd_report(a: ScheduleArg) -> Result<u8, Failure> {
    let s = load_checked(&a.schedule)?;
    let span = s.makespan.max(1) as f64;
    println!("makespan: {} cycles", s.makespan);
    println!("subtasks: {}", s.graph.subtasks.len());
    for (core, subs) in s.mapping.per_core().iter().enumerate() {
        let busy: u64 = s
            .computes
            .iter()
            .filter(|c| c.core == core as u32)
            .map(|c| c.wcet)
            .sum();
        let peak = s.spm_regions[core]
            .iter()
            .map(|r| r.offset + r.len)
            .max()
            .unwrap_or(0);
        println!(
            "core {core:>2}: {:>3} subtasks, {busy:>9} busy cycles ({:5.1}%), spm high-water {peak} B",
            subs.len(),
            100.0 * busy as f64 / span
        );
    }
    let dma: u64 = s.transfers.iter().map(|t| t.dur).sum();
    println!(
        "dma: {} transfers, {dma} busy cycles ({:.1}%)",
        s.transfers.len(),
        100.0 * dma as f64 / span
    );
    for kind in [
        TransferKind::LoadDram,
        TransferKind::CopySpm,
        TransferKind::StoreDram,
    ] {
        let (n, bytes) = s
            .transfers
            .iter()
            .filter(|t| t.kind == kind)
            .fold((0, 0), |(n, b), t| (n + 1, b + t.bytes));
        let name = serde_json::to_value(kind).expect("kind serializes");
        println!(
            "  {:<10} {n:>4} transfers {bytes:>9} B",
            name.as_str().unwrap_or_default()
        );
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Compile(a) => cmd_compile(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Check(a) => cmd_check(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
