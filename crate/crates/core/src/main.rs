use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use amortize::autodiff::AdamConfig;
use amortize::gauss::GaussTrainConfig;
use amortize::inference::AbcConfig;
use amortize::pipeline::{self, GaussLabConfig, Perturbation};
use amortize::proposal::{checkpoint, ArchConfig, TrainConfig};
use amortize::{Error, Result};

#[derive(Parser)]
#[command(name = "amortize", version, about = "Amortized inference for synthetic Captchas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labelled dataset of PGM images with a JSON-lines manifest.
    Generate(GenerateArgs),
    /// Train a proposal network on freshly generated data.
    Train(TrainArgs),
    /// Decode images with a trained network.
    Break(BreakArgs),
    /// Recognition rate on fresh test images under distribution shifts.
    PerturbEval(PerturbArgs),
    /// Proposal/model mismatch sweep in the two-dimensional Gaussian model.
    GaussLab(GaussArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Style preset (desk, tiny, confusable) or JSON file.
    #[arg(long, default_value = "desk")]
    style: String,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "desk")]
    style: String,
    /// Architecture preset (desk, large, tiny) or JSON file.
    #[arg(long, default_value = "desk")]
    arch: String,
    #[arg(long, default_value_t = 20_000)]
    steps: u64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics CSV (defaults to the checkpoint path with a .csv extension).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    log_every: u64,
    /// Held-out images for the logged recognition rate.
    #[arg(long, default_value_t = 200)]
    heldout: usize,
    /// Train on a finite generated dataset instead of fresh samples.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Enable elastic broadening of the training data with this maximum displacement.
    #[arg(long)]
    alpha: Option<f64>,
    /// Record elapsed time in the metrics (makes the log non-reproducible).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Posterior,
}

#[derive(Args)]
struct BreakArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PGM image or a dataset directory.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "desk")]
    style: String,
    #[arg(long, value_enum, default_value = "greedy")]
    mode: Mode,
    #[arg(long, default_value_t = 100)]
    particles: usize,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// ABC kernel bandwidth (defaults to 0.05·sqrt(pixels)).
    #[arg(long)]
    abc_epsilon: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write results as CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "desk")]
    style: String,
    /// Additive noise standard deviation on the 0–255 scale.
    #[arg(long)]
    sigma: Vec<f64>,
    #[arg(long, allow_negative_numbers = true)]
    kerning_delta: Vec<i64>,
    /// Elastic warp maximum displacement in pixels.
    #[arg(long)]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GaussArgs {
    /// True prior means as "x,y"; repeat for several scenarios.
    #[arg(long = "mu-pi", allow_negative_numbers = true)]
    mu_pi: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    particles: usize,
    /// Number of evaluation seeds per scenario.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8000)]
    steps: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-run means and covariances for plotting.
    #[arg(long)]
    plot: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn generate(a: GenerateArgs) -> Result<()> {
    let style = pipeline::resolve_style(&a.style)?;
    let header = pipeline::generate(&style, a.count, &a.out, a.seed)?;
    eprintln!("wrote {} images to {}", header.count, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut style = pipeline::resolve_style(&a.style)?;
    if let Some(alpha) = a.alpha {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("--alpha must be non-negative, got {alpha}")));
        }
        style.elastic.enabled = true;
        style.elastic.alpha = alpha;
    }
    let arch = ArchConfig::resolve(&a.arch, &style)?;
    let cfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        log_every: a.log_every,
        heldout: a.heldout,
        seed: a.seed,
        wall_clock: a.wall_clock,
    };
    let dataset = match &a.dataset {
        Some(dir) => {
            let ds = pipeline::load_dataset(dir)?;
            if ds.header.style.canvas != style.canvas {
                return Err(Error::Config("dataset canvas differs from the training style".into()));
            }
            Some(ds.pairs())
        }
        None => None,
    };
    let metrics = a.metrics.clone().unwrap_or_else(|| pipeline::default_metrics_path(&a.checkpoint));
    pipeline::train_command(&style, arch, &cfg, dataset.as_deref(), &a.checkpoint, &metrics, |row| {
        eprintln!("step {:>6}  loss {:.4}  heldout_rr {:.3}", row.step, row.loss, row.heldout_rr);
    })?;
    eprintln!("checkpoint written to {}", a.checkpoint.display());
    Ok(())
}

fn break_images(a: BreakArgs) -> Result<()> {
    let style = pipeline::resolve_style(&a.style)?;
    let net = checkpoint::load(&a.checkpoint)?;
    let target = pipeline::load_break_target(&a.input)?;
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    match a.mode {
        Mode::Greedy => {
            let rows = pipeline::break_greedy(&net, &style, &target)?;
            for r in &rows {
                w.serialize(r)?;
            }
            let mean = rows.iter().map(|r| r.ms).sum::<f64>() / rows.len().max(1) as f64;
            eprintln!("decoded {} images, mean {mean:.2} ms per image", rows.len());
            if let Some(truth) = &target.truth {
                let hits = rows.iter().zip(truth).filter(|(r, t)| &r.decoded == *t).count();
                eprintln!("recognition rate {:.4}", hits as f64 / rows.len().max(1) as f64);
            }
        }
        Mode::Posterior => {
            let abc = match a.abc_epsilon {
                Some(e) => AbcConfig::new(e)?,
                None => AbcConfig::default_for(&style),
            };
            let summaries = pipeline::break_posterior(&net, &style, &target, a.particles, &abc, a.top_k, a.seed)?;
            let many = summaries.len() > 1;
            if many {
                w.write_record(["image", "rank", "string", "probability"])?;
            } else {
                w.write_record(["rank", "string", "probability"])?;
            }
            for s in &summaries {
                for (rank, e) in s.posterior.iter().enumerate() {
                    let mut rec = vec![(rank + 1).to_string(), e.string.clone(), e.probability.to_string()];
                    if many {
                        rec.insert(0, s.image.clone());
                    }
                    w.write_record(&rec)?;
                }
                let summary = serde_json::json!({
                    "image": s.image, "particles": s.particles, "ess": s.ess,
                    "abc_epsilon": abc.epsilon, "ms": s.ms,
                    "map": s.posterior.first().map(|e| e.string.clone()),
                });
                eprintln!("{summary}");
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn perturb_eval(a: PerturbArgs) -> Result<()> {
    let style = pipeline::resolve_style(&a.style)?;
    let net = checkpoint::load(&a.checkpoint)?;
    let mut ps: Vec<Perturbation> = a.sigma.iter().map(|&s| Perturbation::Noise(s)).collect();
    ps.extend(a.kerning_delta.iter().map(|&d| Perturbation::Kerning(d)));
    ps.extend(a.alpha.iter().map(|&x| Perturbation::Elastic(x)));
    let reports = pipeline::perturb_eval(&net, &style, &ps, a.count, a.seed)?;
    pipeline::write_eval_csv(output(a.out.as_deref())?, &reports)
}

fn gauss_lab(a: GaussArgs) -> Result<()> {
    let mut cfg = GaussLabConfig {
        particles: a.particles,
        seeds: (0..a.seeds).collect(),
        seed: a.seed,
        train: GaussTrainConfig { steps: a.steps, ..GaussTrainConfig::default() },
        ..GaussLabConfig::default()
    };
    if !a.mu_pi.is_empty() {
        cfg.mu_pi = a.mu_pi.iter().map(|s| pipeline::parse_mu(s)).collect::<Result<_>>()?;
    }
    let report = pipeline::gauss_lab(&cfg)?;
    if let Some(p) = &a.plot {
        report.write_plot_csv(BufWriter::new(File::create(p)?))?;
    }
    report.write_csv(output(a.out.as_deref())?)?;
    for (i, mu) in cfg.mu_pi.iter().enumerate() {
        eprintln!(
            "mu_pi={mu:?}  median mu_err {:.4}  median ess {:.1}",
            report.median(i, |r| r.mu_err),
            report.median(i, |r| r.ess)
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Break(a) => break_images(a),
        Command::PerturbEval(a) => perturb_eval(a),
        Command::GaussLab(a) => gauss_lab(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
