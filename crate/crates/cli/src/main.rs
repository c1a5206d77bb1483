mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hetsched::hwmodel::SyncKind;
use hetsched::planner::{enumerate_candidates, evaluate_candidate, solve_model, CostContext};
use hetsched::profiler::{build_profile, ProfileTable, DEFAULT_STANDARD_LENGTHS};
use hetsched::simengine::{compare_modes, export_timeline, simulate, sync_ablation, Scenario, SimResult};
use hetsched::{HardwareConfig, Mode, ModelSpec, OpKind, Phase, SolverConfig};

use output::{us, Format, Table};

/// Plan and simulate LLM inference across a mobile GPU and NPU.
#[derive(Parser)]
#[command(name = "hetsched", version)]
struct Cli {
    /// Hardware configuration JSON (built-in default when absent).
    #[arg(long, global = true)]
    hardware: Option<PathBuf>,
    /// Model description JSON (built-in Llama-8B-class model when absent).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Profile table CSV (built from the cost models when absent).
    #[arg(long, global = true)]
    profile: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the operator latency table.
    Profile {
        /// NPU standard sequence lengths.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_STANDARD_LENGTHS)]
        lengths: Vec<u64>,
    },
    /// Solve an execution plan.
    Solve(RunArgs),
    /// Simulate a plan end to end.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Write the event timeline as NDJSON.
        #[arg(long)]
        timeline: Option<PathBuf>,
    },
    /// Simulate several modes on identical inputs.
    Compare {
        #[arg(long, value_enum, default_value_t = PhaseArg::Prefill)]
        phase: PhaseArg,
        #[arg(long, default_value_t = 256)]
        seq_len: u64,
        #[arg(long, default_value_t = 16)]
        tokens: u64,
        #[arg(long, value_delimiter = ',', value_parser = parse_mode,
              default_values = ["gpu-only", "npu-only", "hetero-layer", "hetero-tensor"])]
        modes: Vec<Mode>,
        /// Compare fast and naive synchronization for each mode instead.
        #[arg(long)]
        sync_ablation: bool,
    },
    /// Show every candidate the solver priced for one operator.
    Explain {
        #[arg(long, value_enum, default_value_t = PhaseArg::Prefill)]
        phase: PhaseArg,
        #[arg(long, default_value_t = 256)]
        seq_len: u64,
        #[arg(long, default_value_t = 0)]
        layer: u64,
        /// Operator kind, e.g. FfnDown.
        #[arg(long, value_enum, default_value_t = OpArg::FfnDown)]
        op: OpArg,
        #[arg(long, value_enum, default_value_t = SyncArg::Fast)]
        sync: SyncArg,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum, default_value_t = PhaseArg::Prefill)]
    phase: PhaseArg,
    #[arg(long, default_value_t = 256)]
    seq_len: u64,
    #[arg(long, value_parser = parse_mode, default_value = "hetero-tensor")]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = SyncArg::Fast)]
    sync: SyncArg,
    /// Decoding tokens to simulate.
    #[arg(long, default_value_t = 16)]
    tokens: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Prefill,
    Decoding,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Prefill => Phase::Prefill,
            PhaseArg::Decoding => Phase::Decoding,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SyncArg {
    Fast,
    Naive,
}

impl From<SyncArg> for SyncKind {
    fn from(s: SyncArg) -> Self {
        match s {
            SyncArg::Fast => SyncKind::Fast,
            SyncArg::Naive => SyncKind::Naive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "PascalCase")]
enum OpArg {
    QkvProj,
    OProj,
    FfnUp,
    FfnGate,
    FfnDown,
}

impl From<OpArg> for OpKind {
    fn from(o: OpArg) -> Self {
        match o {
            OpArg::QkvProj => OpKind::QkvProj,
            OpArg::OProj => OpKind::OProj,
            OpArg::FfnUp => OpKind::FfnUp,
            OpArg::FfnGate => OpKind::FfnGate,
            OpArg::FfnDown => OpKind::FfnDown,
        }
    }
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: hetsched::Error| e.to_string())
}

struct Inputs {
    hw: HardwareConfig,
    model: ModelSpec,
    table: ProfileTable,
}

fn read(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load(cli: &Cli, lengths: &[u64]) -> Result<Inputs> {
    let hw = match &cli.hardware {
        Some(p) => HardwareConfig::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => HardwareConfig::default(),
    };
    let model = match &cli.model {
        Some(p) => ModelSpec::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => ModelSpec::llama8b(),
    };
    let table = match &cli.profile {
        Some(p) => ProfileTable::from_csv(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => build_profile(&hw, &model.profile_shapes(), lengths, model.weight_precision)?,
    };
    Ok(Inputs { hw, model, table })
}

fn solver(sync: SyncArg) -> SolverConfig {
    SolverConfig { sync_kind: sync.into(), ..SolverConfig::default() }
}

fn result_row(r: &SimResult) -> Vec<String> {
    vec![
        r.mode.to_string(),
        format!("{:?}", r.sync_mode),
        us(r.latency()),
        format!("{:.3}", r.tokens_per_second),
        format!("{:.4}", r.achieved_bandwidth / 1e9),
        us(r.sync_overhead_total),
        us(r.graph_gen_total),
        us(r.busy_time.get(&hetsched::Device::Gpu).copied().unwrap_or(0.0)),
        us(r.busy_time.get(&hetsched::Device::Npu).copied().unwrap_or(0.0)),
    ]
}

const RESULT_HEADERS: [&str; 9] = [
    "mode",
    "sync",
    "latency_us",
    "tokens_per_s",
    "bandwidth_gb_s",
    "sync_overhead_us",
    "graph_gen_us",
    "gpu_busy_us",
    "npu_busy_us",
];

fn run(cli: &Cli) -> Result<String> {
    let fmt = cli.format;
    match &cli.command {
        Command::Profile { lengths } => {
            let inputs = load(cli, lengths)?;
            let t = &inputs.table;
            if fmt == Format::Csv {
                return Ok(t.to_csv());
            }
            let mut table = Table::new(vec!["device", "weight_rows", "weight_cols", "activation_len", "latency_us", "source"]);
            for e in t.entries() {
                table.push(vec![
                    e.key.device.to_string(),
                    e.key.weight_shape.rows.to_string(),
                    e.key.weight_shape.cols.to_string(),
                    e.key.activation_len.to_string(),
                    us(e.latency_us),
                    format!("{:?}", e.source),
                ]);
            }
            Ok(table.render(fmt))
        }
        Command::Solve(a) => {
            let inputs = load(cli, &DEFAULT_STANDARD_LENGTHS)?;
            let plan = solve_model(
                &inputs.model,
                a.phase.into(),
                a.seq_len,
                &inputs.table,
                &inputs.hw,
                a.mode,
                &solver(a.sync),
            )?;
            if fmt == Format::Json {
                let mut s = plan.to_json();
                s.push('\n');
                return Ok(s);
            }
            let mut table = Table::new(vec![
                "layer", "index", "op", "strategy", "gpu_fraction", "t_gpu_us", "t_npu_us", "t_sync_us", "t_copy_us",
                "t_total_us",
            ]);
            for p in plan.ops() {
                let c = &p.chosen;
                table.push(vec![
                    p.op.layer.to_string(),
                    p.op.index.to_string(),
                    format!("{:?}", p.op.kind),
                    c.strategy.to_string().replace(',', ";"),
                    c.strategy.gpu_fraction().map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into()),
                    us(c.t_gpu),
                    us(c.t_npu),
                    us(c.t_sync),
                    us(c.t_copy),
                    us(c.t_total),
                ]);
            }
            Ok(table.render(fmt))
        }
        Command::Simulate { run, timeline } => {
            let inputs = load(cli, &DEFAULT_STANDARD_LENGTHS)?;
            let plan = solve_model(
                &inputs.model,
                run.phase.into(),
                run.seq_len,
                &inputs.table,
                &inputs.hw,
                run.mode,
                &solver(run.sync),
            )?;
            let r = simulate(&plan, &inputs.model, &inputs.hw, run.tokens)?;
            if let Some(path) = timeline {
                std::fs::write(path, export_timeline(&r)).with_context(|| format!("writing {}", path.display()))?;
            }
            if fmt == Format::Json {
                let mut s = r.summary_json();
                s.push('\n');
                return Ok(s);
            }
            let mut table = Table::new(RESULT_HEADERS.to_vec());
            table.push(result_row(&r));
            Ok(table.render(fmt))
        }
        Command::Compare { phase, seq_len, tokens, modes, sync_ablation: ablate } => {
            let inputs = load(cli, &DEFAULT_STANDARD_LENGTHS)?;
            let scenario = Scenario {
                model: &inputs.model,
                hw: &inputs.hw,
                table: &inputs.table,
                phase: (*phase).into(),
                seq_len: *seq_len,
                n_decode_tokens: *tokens,
                solver: SolverConfig::default(),
            };
            if modes.is_empty() {
                bail!("no modes given");
            }
            let mut table = Table::new(RESULT_HEADERS.to_vec());
            if *ablate {
                let mut t = Table::new(vec!["mode", "fast_latency_us", "naive_latency_us", "speedup"]);
                for &m in modes {
                    let a = sync_ablation(&scenario, m)?;
                    t.push(vec![m.to_string(), us(a.fast.latency()), us(a.naive.latency()), format!("{:.4}", a.speedup)]);
                }
                return Ok(t.render(fmt));
            }
            for r in compare_modes(&scenario, modes)? {
                table.push(result_row(&r));
            }
            Ok(table.render(fmt))
        }
        Command::Explain { phase, seq_len, layer, op, sync } => {
            let inputs = load(cli, &DEFAULT_STANDARD_LENGTHS)?;
            let phase: Phase = (*phase).into();
            if *layer >= inputs.model.n_layers {
                bail!("layer {layer} out of range (model has {})", inputs.model.n_layers);
            }
            let kind: OpKind = (*op).into();
            let ops = hetsched::modelspec::ops_for_layer(&inputs.model, *layer, phase, *seq_len)?;
            let target = ops.iter().find(|o| o.kind == kind).context("operator not in layer")?;
            let cfg = solver(*sync);
            let ctx = CostContext::new(&inputs.hw, phase, cfg.sync_kind);
            let plan = hetsched::planner::solve_op(target, &inputs.table, &ctx, &cfg)?;
            let mut table = Table::new(vec![
                "chosen", "strategy", "gpu_fraction", "t_gpu_us", "t_npu_us", "t_sync_us", "t_copy_us", "t_total_us",
            ]);
            for s in enumerate_candidates(target, &inputs.table, &cfg) {
                let row = match evaluate_candidate(&s, target, &inputs.table, &ctx) {
                    Ok(e) => vec![
                        if e == plan.chosen { "*".into() } else { String::new() },
                        s.to_string().replace(',', ";"),
                        s.gpu_fraction().map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into()),
                        us(e.t_gpu),
                        us(e.t_npu),
                        us(e.t_sync),
                        us(e.t_copy),
                        us(e.t_total),
                    ],
                    Err(err) => {
                        let mut r = vec![String::new(), s.to_string().replace(',', ";"), "-".into()];
                        r.extend(std::iter::repeat_n("-".to_string(), 4));
                        r.push(format!("unavailable: {err}").replace(',', ";"));
                        r
                    }
                };
                table.push(row);
            }
            Ok(table.render(fmt))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    let text = match run(&cli) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let written = match &cli.out {
        Some(path) => std::fs::write(path, &text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    };
    match written {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
