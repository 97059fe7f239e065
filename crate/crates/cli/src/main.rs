use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kvlab_core::drafter::{DrafterMode, Injection};
use kvlab_core::harness::{self, builtin_plan, compare_report, format_deltas, DrafterSpec, ExperimentConfig, Stages};
use kvlab_core::specdec::TreeConfig;
use kvlab_core::{Error, Result};

#[derive(Parser)]
#[command(name = "kvlab", version, about = "Train and compare speculative-decoding drafters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or reuse) the target model of a plan.
    TrainTarget(Common),
    /// Train drafters: the one described by --mode, or every drafter in the plan.
    TrainDrafter(Common),
    /// Evaluate already trained drafters and write metrics.csv.
    Eval(Common),
    /// Train what is missing, evaluate everything, write metrics.csv.
    RunPlan(Common),
    /// Compare metrics reports.
    Report(ReportArgs),
    /// Print the resolved plan as TOML.
    ShowPlan(Common),
}

#[derive(Args)]
struct Common {
    /// Plan file (TOML).
    #[arg(long, conflicts_with = "plan")]
    config: Option<PathBuf>,
    /// Built-in plan: injection, depth, fusion, ablations, findings.
    #[arg(long)]
    plan: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the plan's).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the plan's drafters with a single one of this mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<DrafterMode>,
    #[arg(long, value_parser = parse_injection, requires = "mode")]
    injection: Option<Injection>,
    #[arg(long, requires = "mode")]
    depth: Option<usize>,
    /// Condition unrolls on target-derived state instead of the drafter's own.
    #[arg(long, requires = "mode")]
    offline: bool,
    #[arg(long, requires = "mode")]
    kv_grad_scale: Option<f64>,
    /// Evaluation tree as D,K,B.
    #[arg(long, value_parser = parse_tree)]
    tree: Option<TreeConfig>,
    /// Drafter training steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// One or two metrics CSV files.
    #[arg(required = true, num_args = 1..=2)]
    csv: Vec<PathBuf>,
    #[arg(long, requires = "method")]
    baseline: Option<String>,
    #[arg(long, requires = "baseline")]
    method: Option<String>,
}

fn parse_mode(s: &str) -> std::result::Result<DrafterMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_injection(s: &str) -> std::result::Result<Injection, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_tree(s: &str) -> std::result::Result<TreeConfig, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_plan(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match (&c.config, &c.plan) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => builtin_plan(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(tree) = c.tree {
        cfg.eval.tree = tree;
    }
    if let Some(steps) = c.steps {
        cfg.ttt.steps = steps;
    }
    if let Some(mode) = c.mode {
        let injection = c.injection.unwrap_or(Injection::LinearProjRope);
        let depth = c.depth.unwrap_or(1);
        let mut name = format!("{mode}-d{depth}");
        if mode.uses_cross() {
            name = format!("{name}-{}", injection.name());
        }
        if c.offline {
            name.push_str("-offline");
        }
        if let Some(s) = c.kv_grad_scale {
            name.push_str(&format!("-x{s}"));
        }
        cfg.drafters = vec![DrafterSpec {
            depth,
            injection,
            online: c.offline.then_some(false),
            kv_grad_scale: c.kv_grad_scale,
            ..DrafterSpec::new(&name, mode)
        }];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTarget(c) => {
            let cfg = load_plan(&c)?;
            let corpus = kvlab_core::corpus::make_corpus(&cfg.corpus)?;
            harness::prepare_target(&cfg, &corpus, Stages::TrainOnly, &mut log)?;
            println!("{}", cfg.out_dir.join("target.ckpt").display());
        }
        Command::TrainDrafter(c) => {
            let cfg = load_plan(&c)?;
            if cfg.drafters.is_empty() {
                return Err(Error::Config("no drafter to train: pass --mode or a plan with drafters".into()));
            }
            harness::run_stages(&cfg, Stages::TrainOnly, &mut log)?;
        }
        Command::Eval(c) => {
            let cfg = load_plan(&c)?;
            let s = harness::run_stages(&cfg, Stages::EvalOnly, &mut log)?;
            println!("{}", s.csv.display());
        }
        Command::RunPlan(c) => {
            let cfg = load_plan(&c)?;
            let s = harness::run_experiment(&cfg, &mut log)?;
            println!("{}", s.csv.display());
        }
        Command::Report(r) => {
            let names = r.baseline.as_deref().zip(r.method.as_deref());
            let deltas = compare_report(&r.csv, names)?;
            print!("{}", format_deltas(&deltas));
        }
        Command::ShowPlan(c) => print!("{}", load_plan(&c)?.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
