use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use forgetedit::{Error, Result};
use forgetedit_cli::pipeline::RunManifest;
use forgetedit_cli::{emit_report, run_pipeline, ExperimentConfig, Goal, RunOptions};

#[derive(Parser, Debug)]
#[command(name = "forgetedit", version, about = "Model editing as unlearning on a tiny transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment configuration; omitted sections use defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// `all`, a method such as `ike:incorrect` or `ga`, or a comma list.
    #[arg(long, global = true, value_name = "NAME|all")]
    method: Option<String>,

    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[arg(long, global = true, value_name = "DIR", env = "FORGETEDIT_OUT")]
    out: Option<PathBuf>,

    /// Reuse stages produced from identical inputs (the default).
    #[arg(long, global = true, conflicts_with = "force")]
    resume: bool,

    /// Rebuild stages whose inputs changed instead of refusing to resume.
    #[arg(long, global = true)]
    force: bool,

    /// Generate with main memory only; scoring still routes.
    #[arg(long, global = true)]
    wise_no_gen_routing: bool,

    #[arg(long, global = true, value_name = "N", env = "FORGETEDIT_THREADS")]
    threads: Option<usize>,

    /// Log progress to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the question-answer corpus.
    Corpus,
    /// Train the full model and the retain-only reference model.
    Train,
    /// Apply the selected editing methods.
    Edit,
    /// Run the selected unlearning methods.
    Unlearn,
    /// Evaluate the selected methods, producing them first if needed.
    Eval,
    /// Assemble matrix.csv and report.json from finished evaluations.
    Matrix,
    /// Every stage, then the report.
    All,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &cli.method {
        cfg.method = m.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.wise_no_gen_routing {
        cfg.wise_generation_routing = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("threads", e.to_string()))?;
    }
    let cfg = load_config(cli)?;
    let goal = match cli.command {
        Command::Corpus => Goal::Corpus,
        Command::Train => Goal::Train,
        Command::Edit => Goal::Edit,
        Command::Unlearn => Goal::Unlearn,
        Command::Eval => Goal::Eval,
        Command::All => Goal::All,
        Command::Matrix => {
            let mut manifest = RunManifest::read(&cfg.out)?;
            manifest.report = Some(emit_report(&cfg.out, &manifest)?);
            manifest.write(&cfg.out)?;
            println!("{}", cfg.out.join(forgetedit_cli::report::MATRIX_FILE).display());
            return Ok(());
        }
    };
    let manifest = run_pipeline(
        &cfg,
        RunOptions {
            goal,
            force: cli.force,
        },
    )?;
    for s in &manifest.stages {
        let how = if s.resumed { "resumed" } else { "ran" };
        eprintln!("{:<28} {how:<8} {:>8.1}s", s.name, s.seconds);
    }
    match &manifest.report {
        Some(r) => println!("{}", cfg.out.join(&r.matrix).display()),
        None => println!("{}", cfg.out.join(forgetedit_cli::pipeline::MANIFEST_FILE).display()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
