use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gpc::experiment::{self, Data, RunConfig};
use gpc::verify::{self, Suite};
use gpc::{checkpoint, latent, Error, Tensor};

mod grid;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "gpc", version, about = "Predictive coding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a config file.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `experiment.out` or `runs/<name>-<trainer>-s<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress per-evaluation progress lines.
        #[arg(long)]
        quiet: bool,
        /// Validate the config and exit without training.
        #[arg(long)]
        check: bool,
    },
    /// Test-set metrics of a checkpoint.
    Evaluate {
        checkpoint: PathBuf,
        /// Use this config's data section instead of the stored one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for `evaluation.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numerical self-checks.
    Verify {
        /// Suites to run; all when omitted.
        #[arg(value_enum)]
        suites: Vec<SuiteArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for `verify.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Posterior samples and latent traversals of a VAE checkpoint.
    Latent {
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: LatentMode,
        /// Test-set index of the first image.
        #[arg(long, default_value_t = 0)]
        d1: usize,
        /// Test-set index of the second image (traverse).
        #[arg(long, default_value_t = 1)]
        d2: usize,
        /// Images in the grid.
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output image; `.pgm` or `.png`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Gradients,
    Equivalence,
    Oracles,
    Locality,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::Equivalence => Suite::Equivalence,
            SuiteArg::Oracles => Suite::Oracles,
            SuiteArg::Locality => Suite::Locality,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LatentMode {
    SamplePosterior,
    Traverse,
}

/// Failure with the exit code it maps to.
struct Fail(u8, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Invalid(_) | Error::Format(_) => EXIT_CONFIG,
            Error::Divergence(_) | Error::NonFinite(_) => EXIT_DIVERGENCE,
            _ => EXIT_FAILURE,
        };
        Fail(code, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            quiet,
            check,
        } => cmd_run(&config, seed, out, quiet, check),
        Command::Evaluate {
            checkpoint,
            config,
            seed,
            out,
        } => cmd_evaluate(&checkpoint, config.as_deref(), seed, out.as_deref()),
        Command::Verify { suites, seed, out } => cmd_verify(&suites, seed, out.as_deref()),
        Command::Latent {
            checkpoint,
            mode,
            d1,
            d2,
            steps,
            config,
            seed,
            out,
        } => cmd_latent(&checkpoint, mode, d1, d2, steps, config.as_deref(), seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn read_config(path: &Path) -> Result<RunConfig, Fail> {
    let text = std::fs::read_to_string(path).map_err(|e| Fail(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    let cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Fail(EXIT_CONFIG, format!("{}: {}", path.display(), e.to_string().trim_end())))?;
    cfg.validate().map_err(|e| Fail(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<(), Fail> {
    std::fs::create_dir_all(dir).map_err(|e| Fail(EXIT_FAILURE, format!("{}: {e}", dir.display())))?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Fail(EXIT_FAILURE, e.to_string()))?;
    std::fs::write(dir.join(name), text + "\n").map_err(|e| Fail(EXIT_FAILURE, e.to_string()))
}

fn cmd_run(path: &Path, seed: Option<u64>, out: Option<PathBuf>, quiet: bool, check: bool) -> Result<(), Fail> {
    let mut cfg = read_config(path)?;
    if check {
        println!("{}: ok", path.display());
        return Ok(());
    }
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    let out = out.or_else(|| cfg.experiment.out.clone()).unwrap_or_else(|| {
        let name = serde_json::to_value(cfg.experiment.name).ok().and_then(|v| v.as_str().map(String::from));
        PathBuf::from("runs").join(format!(
            "{}-{}-s{}",
            name.unwrap_or_default(),
            cfg.experiment.trainer.name(),
            cfg.experiment.seed
        ))
    });
    cfg.experiment.out = Some(out.clone());
    let mut progress = |r: &gpc::metrics::MetricsRecord| {
        if quiet {
            return;
        }
        let mut line = format!(
            "epoch {} step {} train_loss {:.5} test_loss {:.5}",
            r.epoch, r.step, r.train_loss, r.test_loss
        );
        if let Some(e) = r.energy {
            line += &format!(" energy {e:.4}");
        }
        if let Some(a) = r.accuracy {
            line += &format!(" accuracy {a:.4}");
        }
        if let Some(p) = r.perplexity {
            line += &format!(" perplexity {p:.2}");
        }
        eprintln!("{line} ({:.1}s)", r.wall_clock_s);
    };
    experiment::run(&cfg, Some(&out), &mut progress)?;
    println!("{}", out.display());
    Ok(())
}

fn load_with_config(ckpt: &Path, config: Option<&Path>) -> Result<(gpc::model::Network, RunConfig, Option<gpc::data::Tokenizer>), Fail> {
    let (net, meta) = checkpoint::load(ckpt)?;
    let (mut cfg, tok) = experiment::config_from_meta(&meta)?;
    if let Some(p) = config {
        cfg.data = read_config(p)?.data;
    }
    Ok((net, cfg, tok))
}

fn cmd_evaluate(ckpt: &Path, config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<(), Fail> {
    let (net, mut cfg, tok) = load_with_config(ckpt, config)?;
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    let record = experiment::evaluate_checkpoint(&net, &cfg, tok)?;
    let json = serde_json::json!({
        "checkpoint": ckpt,
        "test_loss": record.test_loss,
        "accuracy": record.accuracy,
        "perplexity": record.perplexity,
    });
    println!("{}", serde_json::to_string_pretty(&json).map_err(|e| Fail(EXIT_FAILURE, e.to_string()))?);
    if let Some(dir) = out {
        write_json(dir, "evaluation.json", &json)?;
    }
    Ok(())
}

fn cmd_verify(suites: &[SuiteArg], seed: Option<u64>, out: Option<&Path>) -> Result<(), Fail> {
    let suites: Vec<Suite> = if suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        suites.iter().map(|&s| s.into()).collect()
    };
    let mut all = Vec::new();
    for s in suites {
        let checks = verify::run(s, seed.unwrap_or(0))?;
        for c in &checks {
            println!(
                "{} [{}] {}: observed {:.3e}, tolerance {:.1e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.name,
                c.observed,
                c.tolerance
            );
        }
        all.extend(checks);
    }
    let failed = all.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", all.len());
    if let Some(dir) = out {
        write_json(dir, "verify.json", &all)?;
    }
    if failed > 0 {
        return Err(Fail(EXIT_VERIFY, format!("{failed} verification checks failed")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_latent(
    ckpt: &Path,
    mode: LatentMode,
    d1: usize,
    d2: usize,
    steps: usize,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<(), Fail> {
    let (net, cfg, tok) = load_with_config(ckpt, config)?;
    if net.bottleneck().is_none() {
        return Err(Fail(EXIT_CONFIG, format!("{} is not a VAE checkpoint", ckpt.display())));
    }
    let test = match experiment::load_data(&cfg, tok)? {
        Data::Images { test, .. } => test,
        Data::Text { .. } => return Err(Fail(EXIT_CONFIG, "latent tools need an image dataset".into())),
    };
    let pick = |i: usize| {
        if i < test.len() {
            Ok(test.item(i).to_vec())
        } else {
            Err(Fail(EXIT_CONFIG, format!("image index {i} out of range (test split has {})", test.len())))
        }
    };
    let a = pick(d1)?;
    let images: Tensor = match mode {
        LatentMode::SamplePosterior => latent::sample_posterior(&net, &a, steps, seed)?,
        LatentMode::Traverse => latent::traverse(&net, &a, &pick(d2)?, steps)?,
    };
    grid::write(out, &images, test.features).map_err(|e| Fail(EXIT_FAILURE, e))?;
    println!("{}", out.display());
    Ok(())
}
