use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pisa::elementary::Elementary;
use pisa::pipeline::{self, ArchiveDocument, PipelineConfig};
use pisa::{stratify, Error};

#[derive(Parser)]
#[command(name = "pisa", version, about = "Interpretable survival analysis via symbolic feature engineering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: search, selection, stratification and export.
    Run(RunArgs),
    /// Fit given expressions on the internal set and report C-indices.
    Fixture(ExprArgs),
    /// Stratify patients with given expressions and write flowchart and curves.
    Stratify(StratifyArgs),
    /// Summarise an archive written by `run`.
    Report {
        /// Archive JSON file or the output directory containing it.
        path: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "pisa-out")]
    out: PathBuf,
    #[arg(long)]
    elementary: Option<Elementary>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    min_cindex: Option<f64>,
    /// Keep only models referencing this covariate (repeatable).
    #[arg(long = "require")]
    require: Vec<String>,
    /// Drop models referencing this covariate (repeatable).
    #[arg(long = "forbid")]
    forbid: Vec<String>,
}

#[derive(Args)]
struct ExprArgs {
    #[command(flatten)]
    common: Common,
    /// Engineered feature in infix notation (repeat for up to three).
    #[arg(long = "expr", required = true)]
    exprs: Vec<String>,
}

#[derive(Args)]
struct StratifyArgs {
    #[command(flatten)]
    inner: ExprArgs,
    /// Use value-range groups instead of the elementary model.
    #[arg(long)]
    agnostic: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Syntax { .. } | Error::UnknownIdentifier(_) | Error::Json(_) => 1,
        Error::Schema(_)
        | Error::Parse { .. }
        | Error::Validation(_)
        | Error::Io { .. }
        | Error::Csv(_)
        | Error::Dimension { .. } => 2,
        _ => 3,
    }
}

fn load_config(common: &Common) -> pisa::Result<PipelineConfig> {
    let mut config = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if common.workers.is_some() {
        config.workers = common.workers;
    }
    if let Some(e) = common.elementary {
        config.elementary = e;
    }
    config.validate()?;
    Ok(config)
}

fn run(args: RunArgs) -> pisa::Result<()> {
    let mut config = load_config(&args.common)?;
    if let Some(r) = args.reps {
        config.reps = r;
    }
    if args.min_cindex.is_some() {
        config.constraints.min_cindex = args.min_cindex;
    }
    config.constraints.required_covariates.extend(args.require);
    config.constraints.forbidden_covariates.extend(args.forbid);
    config.validate()?;
    let summary = pipeline::run_pipeline(&config, &args.common.out)?;
    print_summary(&summary.archive);
    println!("artifacts written to {}", summary.out_dir.display());
    Ok(())
}

fn fixture(args: ExprArgs, agnostic: bool, write: bool) -> pisa::Result<()> {
    let config = load_config(&args.common)?;
    let data = pipeline::load_datasets(&config)?;
    let (mut report, mut strat) = config.install(|| {
        pipeline::evaluate_fixture(
            &args.exprs,
            config.elementary,
            &config.params(),
            &data.internal,
            data.external.as_ref(),
            config.bootstrap_n,
            config.seed,
        )
    })??;
    if agnostic {
        let fs = pisa::FeatureSet::parse(&args.exprs, &config.schema)?;
        strat = stratify::stratify_agnostic(&fs, &data.internal, &Default::default())?;
        report.stratification = config.install(|| {
            pipeline::stratification_record(&strat, &data.internal, data.external.as_ref(), config.bootstrap_n, config.seed)
        })??;
    }
    for w in &report.stratification.warnings {
        eprintln!("warning: {w}");
    }
    if write {
        report.stratification = pipeline::export_stratification(
            &args.common.out,
            "fixture",
            &strat,
            report.stratification.clone(),
            &data.internal,
            data.external.as_ref(),
        )?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn print_summary(archive: &ArchiveDocument) {
    println!(
        "{} repetitions, {} selected models ({} elementary, seed {})",
        archive.repetitions.len(),
        archive.selected.len(),
        archive.elementary,
        archive.seed
    );
    for rep in &archive.repetitions {
        let b = &rep.baseline;
        println!(
            "repetition {}: {} archived, baseline internal C {:.3} [{:.3}, {:.3}]",
            rep.repetition_id,
            rep.models.len(),
            b.internal_ci.mean,
            b.internal_ci.lower,
            b.internal_ci.upper
        );
        for m in rep.models.iter().filter(|m| archive.selected.contains(&m.id)) {
            let ext = m
                .external_ci
                .map(|c| format!(", external {:.3} [{:.3}, {:.3}]", c.mean, c.lower, c.upper))
                .unwrap_or_default();
            println!(
                "  {} cx {} internal {:.3} [{:.3}, {:.3}]{ext}: {}",
                m.id,
                m.objectives.complexity,
                m.internal_ci.mean,
                m.internal_ci.lower,
                m.internal_ci.upper,
                m.expressions.join(" ; ")
            );
        }
    }
    for s in &archive.stratifications {
        let ext = s.external_ci.map(|c| format!(", external C {:.3}", c.mean)).unwrap_or_default();
        println!("{}: {} groups, internal C {:.3}{ext}", s.model_id, s.n_groups, s.internal_cindex);
    }
}

fn report(path: &Path) -> pisa::Result<()> {
    let file = if path.is_dir() { path.join("archive.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::Io { path: file.clone(), source: e })?;
    let archive: ArchiveDocument = serde_json::from_str(&text)?;
    print_summary(&archive);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Fixture(args) => fixture(args, false, false),
        Command::Stratify(args) => fixture(args.inner, args.agnostic, true),
        Command::Report { path } => report(&path),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
