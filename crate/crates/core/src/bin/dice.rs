use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dice_ood::experiment::{ContributionSource, ExperimentOptions};
use dice_ood::report::{
    load_bench_config, run_analyze, run_eval, run_sweep, run_synth, write_file, write_json,
    AnalyzeOptions, EvalOptions, SweepOptions, Validation,
};
use dice_ood::scoring::DEFAULT_SHRINKAGE;
use dice_ood::synth::{BenchConfig, DEFAULT_P_GRID};
use dice_ood::{DiceError, Result, ScoreKind, SparsifierKind};

/// Post-hoc OOD detection by sparsifying the final layer.
#[derive(Parser)]
#[command(name = "dice", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy classifier and write a synthetic bundle.
    Synth {
        /// JSON benchmark config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every OOD set in a bundle with one method.
    Eval {
        bundle: PathBuf,
        #[arg(long, default_value = "dice")]
        method: SparsifierKind,
        #[arg(long, default_value_t = 0.9)]
        p: f64,
        #[command(flatten)]
        common: Common,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a grid of methods and p values.
    Sweep {
        bundle: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "dice")]
        methods: Vec<SparsifierKind>,
        #[arg(long = "p-grid", value_delimiter = ',')]
        p_grid: Option<Vec<f64>>,
        /// Pick p by FPR95 against `noise` or a named OOD set.
        #[arg(long)]
        validate: Option<String>,
        #[command(flatten)]
        common: Common,
        /// Directory for sweep.json and sweep.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Unit-contribution profiles, covariance and variance decomposition.
    Analyze {
        bundle: PathBuf,
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long, default_value_t = 0.9)]
        p: f64,
        /// OOD set to profile (default: first by name).
        #[arg(long)]
        ood: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value = "energy")]
    score: ScoreKind,
    /// Seed for the stochastic sparsifiers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clip percentile for activation clipping, or `off`.
    #[arg(long, default_value = "off")]
    react: String,
    /// Estimate contributions on clipped or raw training features.
    #[arg(long = "contribution-source", default_value = "clipped", value_parser = parse_source)]
    contribution_source: ContributionSource,
    #[arg(long, default_value_t = DEFAULT_SHRINKAGE)]
    shrinkage: f64,
}

fn parse_source(s: &str) -> std::result::Result<ContributionSource, String> {
    match s {
        "clipped" => Ok(ContributionSource::Clipped),
        "raw" => Ok(ContributionSource::Raw),
        _ => Err(format!("expected clipped or raw, got {s:?}")),
    }
}

impl Common {
    fn experiment(&self) -> Result<ExperimentOptions> {
        let react_percentile = match self.react.as_str() {
            "off" => None,
            v => Some(v.parse::<f64>().map_err(|_| {
                DiceError::Config(format!("--react expects a percentile or off, got {v:?}"))
            })?),
        };
        Ok(ExperimentOptions {
            score: self.score,
            react_percentile,
            contribution_source: self.contribution_source,
            shrinkage: self.shrinkage,
        })
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DICE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        DiceError::Config(format!(
            "DICE_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| DiceError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth { config, seed, out } => {
            let mut cfg = match config {
                Some(path) => load_bench_config(&path)?,
                None => BenchConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let r = run_synth(&cfg, &out)?;
            println!(
                "wrote {} (m={}, C={}, id accuracy {:.4}, loss {:.4} -> {:.4})",
                out.display(),
                r.bundle.layer.units(),
                r.bundle.layer.classes(),
                r.id_accuracy,
                r.training.initial_loss,
                r.training.final_loss
            );
        }
        Command::Eval {
            bundle,
            method,
            p,
            common,
            out,
        } => {
            let opts = EvalOptions {
                method,
                p,
                seed: common.seed,
                experiment: common.experiment()?,
            };
            let report = run_eval(&bundle, &opts)?;
            print!("{}", report.table());
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
        }
        Command::Sweep {
            bundle,
            methods,
            p_grid,
            validate,
            common,
            out,
        } => {
            let opts = SweepOptions {
                methods,
                p_grid: p_grid.unwrap_or_else(|| DEFAULT_P_GRID.to_vec()),
                seed: common.seed,
                validate: validate.as_deref().map(Validation::parse),
                experiment: common.experiment()?,
            };
            let report = run_sweep(&bundle, &opts)?;
            create_dir(&out)?;
            write_json(&out.join("sweep.json"), &report)?;
            write_file(&out.join("sweep.csv"), report.body.to_csv().as_bytes())?;
            print!("{}", report.body.to_csv());
            for (method, sel) in &report.body.selection {
                println!("best p for {method}: {}", sel.best_p);
            }
        }
        Command::Analyze {
            bundle,
            class,
            p,
            ood,
            out,
        } => {
            let r = run_analyze(
                &bundle,
                &AnalyzeOptions {
                    class,
                    p,
                    ood_set: ood,
                },
                &out,
            )?;
            let v = &r.variance;
            println!(
                "class {class}, p={p}, kept units {:?}\n{:<6} {:>12} {:>12} {:>12} {:>12}",
                v.kept_units, "set", "var_full", "var_dice", "pruned_var", "residual"
            );
            for (name, rep) in [("id", &v.id), (v.ood_set.as_str(), &v.ood)] {
                println!(
                    "{:<6} {:>12.6} {:>12.6} {:>12.6} {:>12.3e}",
                    name, rep.var_full, rep.var_dice, rep.sum_sigma_pruned, rep.identity_residual
                );
            }
        }
    }
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| DiceError::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dice: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
