use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmtta::adapt::Method;
use mmtta::gradcheck::{run_suite, GradCheckConfig};
use mmtta::harness::{
    persist, read_summary, report_rows, run_analysis, run_experiment, run_sweep, write_analysis, write_report,
    write_sweep, ExperimentConfig, Overrides, SweepGrid,
};
use mmtta::metrics::ScoreFunction;
use mmtta::Result;

#[derive(Parser)]
#[command(
    name = "mmtta",
    version,
    about = "Multimodal open-set test-time adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write its output files.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        loss: LossArgs,
    },
    /// Grid over alpha, beta, gamma1, gamma2 and unknown ratio (comma lists).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        beta: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        gamma1: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        gamma2: Vec<f64>,
        #[arg(long = "unknown-ratio", value_delimiter = ',')]
        unknown_ratio: Vec<f64>,
    },
    /// Entropy gap against FPR95 across shift strengths.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        loss: LossArgs,
        /// Multipliers applied to every domain severity.
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1,1.25")]
        scales: Vec<f64>,
    },
    /// Finite-difference check of every loss and the model gradients.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Seed-averaged table (Acc, FPR95, AUROC, H-score) from a summary.csv.
    Report {
        /// A summary.csv or a directory containing one.
        input: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long = "score-fn")]
    score_fn: Option<ScoreFunction>,
    /// single, long_term, continual or mixed.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long = "unknown-ratio")]
    unknown_ratio: Option<f64>,
}

impl Common {
    fn resolve(&self, loss: Option<&LossArgs>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut o = Overrides {
            method: self.method,
            score: self.score_fn,
            protocol: self.protocol.clone(),
            rounds: self.rounds,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            out: self.out.clone(),
            ..Overrides::default()
        };
        if let Some(l) = loss {
            o.alpha = l.alpha;
            o.beta = l.beta;
            o.gamma1 = l.gamma1;
            o.gamma2 = l.gamma2;
            o.unknown_ratio = l.unknown_ratio;
        }
        o.apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { common, loss } => {
            let cfg = common.resolve(Some(&loss))?;
            let runs = run_experiment(&cfg, common.jobs)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(cfg.output_dir.join("config.json"), cfg.to_json()?)?;
            persist(&runs, cfg.scenario.num_known, &cfg.output_dir)?;
            for r in &runs {
                let m = r.report.overall;
                println!(
                    "{} seed {}: acc {:.4} fpr95 {:.4} auroc {:.4} h {:.4}",
                    r.method, r.seed, m.acc, m.fpr95, m.auroc, m.h_score
                );
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Sweep {
            common,
            alpha,
            beta,
            gamma1,
            gamma2,
            unknown_ratio,
        } => {
            let cfg = common.resolve(None)?;
            let grid = SweepGrid {
                alpha,
                beta,
                gamma1,
                gamma2,
                unknown_ratio,
            };
            let rows = run_sweep(&cfg, &grid, common.jobs)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("sweep.csv");
            write_sweep(&rows, File::create(&path)?)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        Command::Analyze { common, loss, scales } => {
            let cfg = common.resolve(Some(&loss))?;
            let (points, r) = run_analysis(&cfg, &scales, common.jobs)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("analysis.csv");
            write_analysis(&points, File::create(&path)?)?;
            match r {
                Some(r) => println!("pearson(entropy gap, 1 - fpr95) = {r:.4} over {} runs", points.len()),
                None => println!("correlation undefined over {} runs", points.len()),
            }
            println!("wrote {}", path.display());
        }
        Command::Gradcheck { trials, seed } => {
            let cfg = GradCheckConfig {
                trials,
                seed,
                ..GradCheckConfig::default()
            };
            let mut ok = true;
            for c in run_suite(&cfg)? {
                let mode = if c.detach { "detached" } else { "attached" };
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!(
                    "{tag} {} ({mode}): max rel err {:.3e} over {} trials",
                    c.name, c.max_rel_err, c.trials
                );
                ok &= c.passed;
            }
            return Ok(ok);
        }
        Command::Report { input, out } => {
            let path = if input.is_dir() {
                input.join("summary.csv")
            } else {
                input
            };
            let rows = report_rows(&read_summary(&path)?);
            match out {
                Some(p) => write_report(&rows, File::create(p)?)?,
                None => write_report(&rows, std::io::stdout().lock())?,
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
