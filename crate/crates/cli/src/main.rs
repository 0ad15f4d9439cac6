use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nnv_core::dct::{export_heatmap, spectrum_sd};
use nnv_core::experiment::{application_frequency_gradient, Experiment, ExperimentConfig, NoiseConfig};
use nnv_core::networks::load_checkpoint;
use nnv_core::schemes::{denoise, SchemeKind};
use nnv_core::{Result, Tensor};

/// Denoising-scheme comparison experiments on synthetic phantoms.
#[derive(Parser)]
#[command(name = "nnv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write every replicate's dataset.
    Generate(Common),
    /// Train one scheme (and a missing NNV teacher) for every replicate.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: SchemeKind,
    },
    /// Evaluate a trained scheme at one Gaussian level or at every configured level.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: SchemeKind,
        #[arg(long, allow_negative_numbers = true)]
        test_sigma: Option<f64>,
    },
    /// Train whatever is missing, evaluate all schemes and write compare.csv.
    Compare(Common),
    /// DCT spectrum of an image, of its denoised version, or an application's frequency gradient.
    Dct {
        /// TSR1 image in [0, 255].
        #[arg(long)]
        image: PathBuf,
        /// Denoiser or application checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory; defaults to the config's `dct/` or the image's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn experiment(c: &Common) -> Result<Experiment> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Experiment::new(cfg)
}

fn replicates(exp: &Experiment) -> std::ops::Range<usize> {
    0..exp.config.replicates
}

fn dct(image: &Path, checkpoint: Option<&Path>, out: Option<&Path>, config: Option<&Path>) -> Result<PathBuf> {
    let img = Tensor::load_tsr1(image)?;
    let (spectrum, what) = match checkpoint {
        None => (spectrum_sd(&img)?, "sd"),
        Some(dir) => {
            let (model, _) = load_checkpoint(dir)?;
            if model.spec.kind.is_denoiser() {
                (spectrum_sd(&denoise(&model, &img)?)?, "denoised_sd")
            } else {
                (application_frequency_gradient(&model, &img)?, "gradient")
            }
        }
    };
    let dir = match (out, config) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(c)) => ExperimentConfig::load(c)?.output_dir.join("dct"),
        (None, None) => image.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let stem = image
        .file_name()
        .and_then(|s| s.to_str())
        .map_or("image", |s| s.split('.').next().unwrap_or(s));
    let path = dir.join(format!("{stem}_{what}"));
    export_heatmap(&spectrum, &path)?;
    Ok(path.with_extension("csv"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let exp = experiment(&c)?;
            exp.generate()?;
            exp.save_config()?;
            for r in replicates(&exp) {
                println!("{}", exp.replicate_dir(r).join("dataset").display());
            }
        }
        Command::Train { common, scheme } => {
            let exp = experiment(&common)?;
            exp.save_config()?;
            for r in replicates(&exp) {
                exp.train(r, scheme)?;
                println!("{}", exp.replicate_dir(r).join(scheme.name()).display());
            }
        }
        Command::Eval {
            common,
            scheme,
            test_sigma,
        } => {
            let exp = experiment(&common)?;
            let levels = match test_sigma {
                Some(s) => vec![NoiseConfig::gaussian(s)],
                None => exp.config.test_noise.clone(),
            };
            for noise in &levels {
                noise.spec(0).validate()?;
            }
            for r in replicates(&exp) {
                for noise in &levels {
                    let report = exp.evaluate(r, scheme, noise)?;
                    let path = exp.replicate_dir(r).join("metrics").join(format!("{}_summary.csv", report.label));
                    println!("{}", path.display());
                }
            }
        }
        Command::Compare(c) => {
            let exp = experiment(&c)?;
            exp.save_config()?;
            exp.resume()?;
            println!("{}", exp.config.output_dir.join("compare.csv").display());
        }
        Command::Dct {
            image,
            checkpoint,
            out,
            config,
        } => {
            let path = dct(&image, checkpoint.as_deref(), out.as_deref(), config.as_deref())?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn fail(class: &str, message: &str) -> ExitCode {
    let line = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    eprintln!("error class={class} message={line:?}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail("usage", first);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.class(), &e.to_string()),
    }
}
