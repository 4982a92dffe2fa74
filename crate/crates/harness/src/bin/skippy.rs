use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use skippy_core::io::{to_json, write_dataset, FeatureFile, MdpFile, PolicyFile};
use skippy_core::learners::FamilySpec;
use skippy_core::mdp::sample_dataset;
use skippy_core::regression::Objective;
use skippy_core::Error;
use skippy_harness::config::RunConfig;
use skippy_harness::instances::generate;
use skippy_harness::runner::{prepare, run_once};
use skippy_harness::sweep::{run_sweep, write_csv};
use skippy_harness::verify::{verify, Fault, Suite};

const EXIT_INVALID: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_EMPTY_FILTER: u8 = 3;

#[derive(Parser)]
#[command(
    name = "skippy",
    version,
    about = "Offline evaluation and optimization with skippy Bellman operators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Candidate family, e.g. `oracle,perturbed:3,random:3,noskip`.
    #[arg(long)]
    family: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the instance (mdp, features, behavior policy) and optionally a dataset.
    Generate(Common),
    /// Estimate the value of the evaluation policy.
    Evaluate(Common),
    /// Learn a near-optimal policy.
    Optimize(Common),
    /// Run the fixed-seed oracle checks.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultFlag>,
    },
    /// Run the learner over an (n, seed) grid and write a CSV plus manifest.
    Sweep(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultFlag {
    DropStopFactor,
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.sweep.first_seed = seed;
    }
    if let Some(n) = common.n {
        cfg.n = n;
    }
    if let Some(alpha) = common.alpha {
        cfg.learner.alpha = Some(alpha);
    }
    if let Some(family) = &common.family {
        cfg.learner.family = family.parse::<FamilySpec>()?;
    }
    cfg.instance.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_generate(common: &Common) -> anyhow::Result<u8> {
    let cfg = load(common)?;
    let inst = generate(&cfg.instance)?;
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("instance"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(
        dir.join("mdp.json"),
        to_json(&MdpFile::from_mdp(&inst.mdp))?,
    )?;
    fs::write(
        dir.join("features.json"),
        to_json(&FeatureFile::from_features(&inst.mdp, &inst.features))?,
    )?;
    fs::write(
        dir.join("behavior.json"),
        to_json(&PolicyFile::from_policy(&inst.mdp, &inst.behavior))?,
    )?;
    let mut manifest = json!({
        "instance": inst.spec,
        "seed": cfg.seed,
        "audit_residual": inst.audit.max_residual,
        "l2": inst.l2,
    });
    if common.n.is_some() {
        let data = sample_dataset(&inst.mdp, &inst.behavior, cfg.n, cfg.seed)?;
        let file = fs::File::create(dir.join("dataset.jsonl"))?;
        let mut w = BufWriter::new(file);
        write_dataset(&inst.mdp, &data, &mut w)?;
        w.flush()?;
        manifest["n"] = json!(cfg.n);
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    eprintln!("wrote {} (seed {})", dir.display(), cfg.seed);
    Ok(0)
}

fn cmd_learn(common: &Common, mode: Objective) -> anyhow::Result<u8> {
    let mut cfg = load(common)?;
    cfg.learner.mode = mode;
    let prep = prepare(&cfg.instance, &cfg.learner)?;
    let result = run_once(&prep, &cfg.learner, cfg.n, cfg.seed)?;
    eprintln!(
        "n {} seed {} estimate {:.6} oracle {:.6} error {:.3e} chosen {} ({:?})",
        result.n,
        result.seed,
        result.estimate,
        result.oracle,
        result.error,
        result.chosen,
        result.chosen_provenance
    );
    emit(
        common.out.as_deref(),
        &serde_json::to_string_pretty(&result)?,
    )?;
    Ok(0)
}

fn cmd_verify(suite: &str, out: Option<&Path>, fault: Option<FaultFlag>) -> anyhow::Result<u8> {
    let suite: Suite = suite.parse()?;
    let fault = match fault {
        Some(FaultFlag::DropStopFactor) => Fault::DropStopFactor,
        None => Fault::None,
    };
    let report = verify(suite, fault)?;
    for check in &report.checks {
        eprintln!("{check}");
    }
    if let Some(path) = out {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(if report.passed() { 0 } else { EXIT_VERIFY })
}

fn cmd_sweep(common: &Common) -> anyhow::Result<u8> {
    let cfg = load(common)?;
    let started = Instant::now();
    let prep = prepare(&cfg.instance, &cfg.learner)?;
    let rows = run_sweep(&prep, &cfg.learner, &cfg.sweep)?;
    let manifest = json!({
        "config": cfg,
        "rows": rows.len(),
        "failed_rows": rows.iter().filter(|r| r.status != "ok").count(),
        "threads": rayon::current_num_threads(),
        "wall_seconds": started.elapsed().as_secs_f64(),
        "canonical_chain": true,
    });
    match &common.out {
        Some(path) => {
            let file =
                fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
            write_csv(&rows, BufWriter::new(file))?;
            let mut manifest_path = path.clone().into_os_string();
            manifest_path.push(".manifest.json");
            fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        }
        None => {
            write_csv(&rows, io::stdout().lock())?;
            eprintln!("{}", serde_json::to_string(&manifest)?);
        }
    }
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::EmptyFilter { .. }) => EXIT_EMPTY_FILTER,
        _ => EXIT_INVALID,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID } else { 0 });
        }
    };
    if let Some(threads) = std::env::var("SKIPPY_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    let outcome = match &cli.command {
        Command::Generate(c) => cmd_generate(c),
        Command::Evaluate(c) => cmd_learn(c, Objective::Eval),
        Command::Optimize(c) => cmd_learn(c, Objective::Opt),
        Command::Verify {
            suite,
            out,
            inject_fault,
        } => cmd_verify(suite, out.as_deref(), *inject_fault),
        Command::Sweep(c) => cmd_sweep(c),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
