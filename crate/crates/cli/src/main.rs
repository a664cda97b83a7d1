use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use markovgp::harness::{emit_plot_data, run_experiment, ExperimentConfig, ResultRecord};
use markovgp::{CubatureSpec, Rule, RuleConfig};

#[derive(Parser)]
#[command(name = "markovgp", version, about = "State-space GP inference and benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validate one method on one dataset.
    Run(RunArgs),
    /// Write plot-ready CSVs for a saved result record.
    Plot {
        #[arg(long)]
        record: PathBuf,
        /// Output directory (defaults to the record's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the built-in config of a dataset as JSON.
    Preset { dataset: String },
    /// Run the built-in oracle and equivalence checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; other flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in dataset id or CSV path.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, value_parser = parse_rule)]
    rule: Option<Rule>,
    #[arg(long)]
    alpha: Option<f64>,
    /// `ghN` or `ut5`.
    #[arg(long)]
    cubature: Option<CubatureSpec>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write plot CSVs next to the record.
    #[arg(long)]
    plot: bool,
}

fn parse_rule(s: &str) -> std::result::Result<Rule, String> {
    match s.to_ascii_lowercase().as_str() {
        "pep" | "ep" => Ok(Rule::Pep),
        "eep" => Ok(Rule::Eep),
        "slep" => Ok(Rule::Slep),
        "cvi" | "vi" => Ok(Rule::Cvi),
        other => Err(format!("unknown rule {other:?} (pep | eep | slep | cvi)")),
    }
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.dataset) {
        (Some(path), _) => ExperimentConfig::from_file(path)?,
        (None, Some(id)) => ExperimentConfig::preset(id).with_context(|| format!("no preset for dataset {id:?}"))?,
        (None, None) => bail!("either --config or --dataset is required"),
    };
    if args.config.is_some() {
        if let Some(d) = &args.dataset {
            cfg.dataset = d.clone();
        }
    }
    if let Some(rule) = args.rule {
        let cubature = args.cubature.or(cfg.rule.cubature).or(match rule {
            Rule::Eep => None,
            _ => Some(CubatureSpec::GaussHermite(20)),
        });
        cfg.rule = RuleConfig {
            rule,
            cubature: if rule == Rule::Eep { None } else { cubature },
            alpha: args.alpha.unwrap_or(1.0),
            damping: cfg.rule.damping,
        };
    } else {
        if let Some(a) = args.alpha {
            cfg.rule.alpha = a;
        }
        if let Some(c) = args.cubature {
            cfg.rule.cubature = Some(c);
        }
    }
    if let Some(d) = args.damping {
        cfg.rule.damping = d;
    }
    if let Some(f) = args.folds {
        cfg.folds = f;
    }
    if let Some(i) = args.iters {
        cfg.optimizer.iterations = i;
    }
    if let Some(s) = args.step_size {
        cfg.optimizer.step_size = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = build_config(&args)?;
    log::info!("running {} on {} ({} folds)", cfg.rule.label(), cfg.dataset, cfg.folds);
    let record = run_experiment(&cfg)?;
    let path = record.write(&cfg.output_dir)?;
    for f in &record.folds {
        if let Some(e) = &f.error {
            eprintln!("warning: {e}");
        }
    }
    match (record.mean_nlpd, record.std_nlpd) {
        (Some(m), Some(s)) => println!(
            "{} {}: NLPD {m:.4} ± {s:.4} over {} folds ({:.1}s)",
            cfg.dataset,
            record.method,
            record.fold_nlpd.iter().flatten().count(),
            record.wall_clock_secs
        ),
        _ => println!("{} {}: every fold failed", cfg.dataset, record.method),
    }
    println!("record: {}", path.display());
    if args.plot {
        for p in emit_plot_data(&record, &cfg.output_dir)? {
            println!("plot data: {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Plot { record, out } => (|| {
            let rec = ResultRecord::read(&record).with_context(|| format!("reading {}", record.display()))?;
            let dir = out.unwrap_or_else(|| record.parent().map(PathBuf::from).unwrap_or_default());
            for p in emit_plot_data(&rec, &dir)? {
                println!("{}", p.display());
            }
            Ok(())
        })(),
        Command::Preset { dataset } => ExperimentConfig::preset(&dataset)
            .with_context(|| format!("no preset for dataset {dataset:?}"))
            .map(|cfg| println!("{}", cfg.to_json_pretty())),
        Command::Selftest => {
            let checks = markovgp::selftest::run_selftest();
            let mut failed = 0;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                Err(anyhow::anyhow!("{failed} check(s) failed"))
            } else {
                Ok(())
            }
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
