//! Command implementations behind the `amortize` binary: dataset generation,
//! training, breaking, perturbation evaluation and the Gaussian sweep.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::captcha::{elastic_deform, perturb_kerning, perturb_noise, render, sample_prior, Image, Latent, StyleSpec};
use crate::error::{config_err, Error, Result};
use crate::gauss::{mismatch_sweep, train_gaussian_proposal, GaussTrainConfig, GaussianWorld, SweepReport};
use crate::inference::{effective_sample_size, importance_sample, string_posterior, AbcConfig};
use crate::proposal::{checkpoint, recognized, train, ArchConfig, BatchSource, MetricsRow, ProposalNet, TrainConfig, TrainReport};
use crate::seed;

pub const MANIFEST_FORMAT: &str = "amortize-dataset";
pub const MANIFEST_VERSION: &str = "1.0";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// A preset name (`desk`, `tiny`, `confusable`) or a path to a JSON style file.
pub fn resolve_style(spec: &str) -> Result<StyleSpec> {
    let style = match spec {
        "desk" => StyleSpec::desk_default(),
        "tiny" => StyleSpec::tiny(),
        "confusable" => StyleSpec::confusable(),
        path if Path::new(path).is_file() => StyleSpec::load(Path::new(path))?,
        other => return Err(config_err!("unknown style {other:?}: not a preset (desk, tiny, confusable) or a file")),
    };
    style.validate()?;
    Ok(style)
}

/// First line of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: String,
    pub style: StyleSpec,
    pub count: usize,
}

/// One generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub latent: Latent,
    pub text: String,
    /// Seed of the record's own stream; `render_record` rebuilds the pair from it.
    pub seed: u64,
}

/// Samples and renders the pair stored under `record_seed`.
pub fn render_record(style: &StyleSpec, record_seed: u64) -> Result<(Latent, Image)> {
    let mut rng = seed::rng(record_seed, &[]);
    let x = sample_prior(style, &mut rng);
    let y = render(&x, style, &mut rng)?;
    Ok((x, y))
}

/// Writes `count` PGM images plus `manifest.jsonl` into `out`.
pub fn generate(style: &StyleSpec, count: usize, out: &Path, seed: u64) -> Result<ManifestHeader> {
    style.validate()?;
    std::fs::create_dir_all(out)?;
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION.into(),
        style: style.clone(),
        count,
    };
    let mut manifest = BufWriter::new(File::create(out.join(MANIFEST_FILE))?);
    serde_json::to_writer(&mut manifest, &header)?;
    manifest.write_all(b"\n")?;
    for i in 0..count {
        let record_seed = seed::derive(seed, &[seed::tag::GENERATE, i as u64]);
        let (latent, image) = render_record(style, record_seed)?;
        let file = format!("img_{i:06}.pgm");
        image.write_pgm(&out.join(&file))?;
        let text = latent.text(style);
        serde_json::to_writer(&mut manifest, &ManifestRecord { file, latent, text, seed: record_seed })?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(header)
}

/// A dataset read back from disk, with every record validated.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn pairs(&self) -> Vec<(Latent, Image)> {
        self.records.iter().map(|r| r.latent.clone()).zip(self.images.iter().cloned()).collect()
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let reader = BufReader::new(File::open(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| Error::Format(format!("{} is empty", path.display())))??;
    let header: ManifestHeader = serde_json::from_str(&first)?;
    if header.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!("not a dataset manifest (format {:?})", header.format)));
    }
    let major = header.version.split('.').next().unwrap_or("");
    if major != MANIFEST_VERSION.split('.').next().unwrap_or("") {
        return Err(Error::Format(format!(
            "manifest version {} is not supported (this build reads {MANIFEST_VERSION})",
            header.version
        )));
    }
    header.style.validate()?;
    let (h, w) = (header.style.canvas.height, header.style.canvas.width);
    let mut records = Vec::with_capacity(header.count);
    let mut images = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)?;
        rec.latent
            .check_prior(&header.style)
            .map_err(|e| Error::Data(format!("record {}: {e}", rec.file)))?;
        let img = Image::read_pgm(&dir.join(&rec.file)).map_err(|e| Error::Data(format!("record {}: {e}", rec.file)))?;
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Data(format!(
                "record {}: image is {}×{}, canvas is {h}×{w}",
                rec.file,
                img.height(),
                img.width()
            )));
        }
        records.push(rec);
        images.push(img);
    }
    if records.len() != header.count {
        return Err(Error::Data(format!("manifest declares {} records, found {}", header.count, records.len())));
    }
    Ok(Dataset { header, records, images })
}

/// Trains a fresh network and writes the checkpoint and metrics CSV.
///
/// Metrics rows are flushed as they are produced. If training fails the
/// checkpoint still holds the last good parameters.
pub fn train_command(
    style: &StyleSpec,
    arch: ArchConfig,
    cfg: &TrainConfig,
    dataset: Option<&[(Latent, Image)]>,
    checkpoint_path: &Path,
    metrics_path: &Path,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<(ProposalNet, TrainReport)> {
    let mut net = ProposalNet::new(arch, cfg.seed)?;
    let source = match dataset {
        Some(d) => BatchSource::Dataset(d),
        None => BatchSource::Fresh,
    };
    let mut metrics = csv::Writer::from_writer(BufWriter::new(File::create(metrics_path)?));
    metrics.write_record(["step", "loss", "heldout_rr", "wall_ms"])?;
    let mut write_err = None;
    let mut report = TrainReport::default();
    let result = train(&mut net, style, cfg, source, &mut report, |row| {
        let r = metrics
            .serialize((row.step, row.loss, row.heldout_rr, row.wall_ms))
            .and_then(|_| metrics.flush().map_err(csv::Error::from));
        if let Err(e) = r {
            write_err.get_or_insert(e);
        }
        progress(row);
    });
    metrics.flush()?;
    checkpoint::save(&net, checkpoint_path)?;
    result?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    Ok((net, report))
}

fn check_dims(net: &ProposalNet, img: &Image, name: &str) -> Result<()> {
    let a = net.arch();
    if (img.height(), img.width()) != (a.input_height, a.input_width) {
        return Err(config_err!(
            "{name} is {}×{} but the checkpoint expects {}×{}",
            img.height(),
            img.width(),
            a.input_height,
            a.input_width
        ));
    }
    Ok(())
}

/// Images named by a break target: one PGM file, or every record of a dataset directory.
pub struct BreakTarget {
    pub names: Vec<String>,
    pub images: Vec<Image>,
    /// Ground truth strings when the target is a dataset.
    pub truth: Option<Vec<String>>,
}

pub fn load_break_target(path: &Path) -> Result<BreakTarget> {
    if path.is_dir() {
        let ds = load_dataset(path)?;
        Ok(BreakTarget {
            names: ds.records.iter().map(|r| r.file.clone()).collect(),
            truth: Some(ds.records.iter().map(|r| r.text.clone()).collect()),
            images: ds.images,
        })
    } else {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(BreakTarget { names: vec![name], images: vec![Image::read_pgm(path)?], truth: None })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GreedyRow {
    pub image: String,
    pub decoded: String,
    pub ms: f64,
}

/// Greedy decode of each image, timed individually.
pub fn break_greedy(net: &ProposalNet, style: &StyleSpec, target: &BreakTarget) -> Result<Vec<GreedyRow>> {
    net.arch().check_style(style)?;
    let mut rows = Vec::with_capacity(target.images.len());
    for (name, img) in target.names.iter().zip(&target.images) {
        check_dims(net, img, name)?;
        let start = Instant::now();
        let x = net.decode_map(style, img)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        rows.push(GreedyRow { image: name.clone(), decoded: x.text(style), ms });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct PosteriorEntry {
    pub string: String,
    pub probability: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PosteriorSummary {
    pub image: String,
    pub particles: usize,
    pub ess: f64,
    pub ms: f64,
    pub posterior: Vec<PosteriorEntry>,
}

/// Importance-sampled string posterior for each image.
pub fn break_posterior(
    net: &ProposalNet,
    style: &StyleSpec,
    target: &BreakTarget,
    particles: usize,
    abc: &AbcConfig,
    top_k: usize,
    seed: u64,
) -> Result<Vec<PosteriorSummary>> {
    net.arch().check_style(style)?;
    let mut out = Vec::with_capacity(target.images.len());
    for (i, (name, img)) in target.names.iter().zip(&target.images).enumerate() {
        check_dims(net, img, name)?;
        let start = Instant::now();
        let ps = importance_sample(img, net, style, particles, abc, seed::derive(seed, &[seed::tag::EVAL, i as u64]))?;
        let posterior = string_posterior(&ps, top_k)
            .into_iter()
            .map(|(string, probability)| PosteriorEntry { string, probability })
            .collect();
        out.push(PosteriorSummary {
            image: name.clone(),
            particles,
            ess: effective_sample_size(&ps),
            ms: start.elapsed().as_secs_f64() * 1e3,
            posterior,
        });
    }
    Ok(out)
}

/// A test-time distribution shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Perturbation {
    /// Additive Gaussian pixel noise, σ on the 0–255 scale.
    Noise(f64),
    /// Kerning shifted by δ pixels before rendering.
    Kerning(i64),
    /// Elastic warp with maximum displacement α pixels.
    Elastic(f64),
}

impl std::fmt::Display for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Perturbation::Noise(s) => write!(f, "noise sigma={s}"),
            Perturbation::Kerning(d) => write!(f, "kerning delta={d}"),
            Perturbation::Elastic(a) => write!(f, "elastic alpha={a}"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub perturbation: String,
    pub n: usize,
    pub clean_rr: f64,
    pub rr: f64,
    pub mean_ms: f64,
    pub median_ms: f64,
}

fn timed_rr(net: &ProposalNet, style: &StyleSpec, truth: &[Latent], images: &[Image]) -> Result<(f64, Vec<f64>)> {
    let mut hits = 0;
    let mut times = Vec::with_capacity(images.len());
    for (x, y) in truth.iter().zip(images) {
        let start = Instant::now();
        let d = net.decode_map(style, y)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        hits += recognized(&d, x) as usize;
    }
    Ok((hits as f64 / truth.len() as f64, times))
}

/// Recognition rate on `n` fresh test images, clean and under each perturbation.
///
/// Every perturbation is applied to the same test latents. Kerning shifts
/// re-render with the image's own noise stream, so only the shift differs.
pub fn perturb_eval(
    net: &ProposalNet,
    style: &StyleSpec,
    perturbations: &[Perturbation],
    n: usize,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if n == 0 {
        return Err(config_err!("perturbation evaluation needs at least one image"));
    }
    net.arch().check_style(style)?;
    let mut latent_rng = seed::rng(seed, &[seed::tag::EVAL]);
    let truth: Vec<Latent> = (0..n).map(|_| sample_prior(style, &mut latent_rng)).collect();
    let render_i = |i: usize, x: &Latent| render(x, style, &mut seed::rng(seed, &[seed::tag::EVAL, i as u64]));
    let clean: Vec<Image> = truth.iter().enumerate().map(|(i, x)| render_i(i, x)).collect::<Result<_>>()?;
    let (clean_rr, clean_ms) = timed_rr(net, style, &truth, &clean)?;
    let mut reports = vec![report("none".into(), clean_rr, clean_rr, clean_ms)];
    for (p_idx, p) in perturbations.iter().enumerate() {
        let images: Vec<Image> = truth
            .iter()
            .zip(&clean)
            .enumerate()
            .map(|(i, (x, y))| {
                let mut rng = seed::rng(seed, &[seed::tag::PERTURB, p_idx as u64, i as u64]);
                match *p {
                    Perturbation::Noise(s) => Ok(perturb_noise(y, s, &mut rng)),
                    Perturbation::Kerning(d) => render_i(i, &perturb_kerning(x, d, style)?),
                    Perturbation::Elastic(a) => Ok(elastic_deform(y, a, style.elastic.sigma_field, &mut rng)),
                }
            })
            .collect::<Result<_>>()?;
        let (rr, ms) = timed_rr(net, style, &truth, &images)?;
        reports.push(report(p.to_string(), clean_rr, rr, ms));
    }
    Ok(reports)
}

fn report(perturbation: String, clean_rr: f64, rr: f64, mut ms: Vec<f64>) -> EvalReport {
    let n = ms.len();
    let mean_ms = ms.iter().sum::<f64>() / n as f64;
    EvalReport { perturbation, n, clean_rr, rr, mean_ms, median_ms: crate::gauss::median(&mut ms) }
}

pub fn write_eval_csv<W: Write>(out: W, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GaussLabConfig {
    pub mu_pi: Vec<[f64; 2]>,
    pub particles: usize,
    pub seeds: Vec<u64>,
    pub train: GaussTrainConfig,
    pub seed: u64,
}

impl Default for GaussLabConfig {
    fn default() -> Self {
        GaussLabConfig {
            mu_pi: vec![[0.0, 0.0], [5.0, 0.0], [8.0, 0.0]],
            particles: 1000,
            seeds: (0..10).collect(),
            train: GaussTrainConfig::default(),
            seed: 0,
        }
    }
}

/// Trains one regressor on the model joint and sweeps the true prior mean.
///
/// The model side (`μ_p`, `Σ_p`, `Σ`) is shared by every scenario, so one
/// regressor serves them all.
pub fn gauss_lab(cfg: &GaussLabConfig) -> Result<SweepReport> {
    if cfg.mu_pi.is_empty() || cfg.seeds.is_empty() {
        return Err(config_err!("gauss-lab needs at least one scenario and one seed"));
    }
    let worlds: Vec<GaussianWorld> = cfg.mu_pi.iter().map(|&m| GaussianWorld::standard(m)).collect();
    let train_cfg = GaussTrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let (regressor, _) = train_gaussian_proposal(&worlds[0], &train_cfg)?;
    mismatch_sweep(&worlds, &regressor, cfg.particles, &cfg.seeds, cfg.seed)
}

/// Parses `"x,y"` into a mean vector.
pub fn parse_mu(s: &str) -> Result<[f64; 2]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::Usage(format!("expected a mean as \"x,y\", got {s:?}"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let x = parts[0].parse().map_err(|_| bad())?;
    let y = parts[1].parse().map_err(|_| bad())?;
    Ok([x, y])
}

/// Default metrics path for a checkpoint: same name with a `.csv` extension.
pub fn default_metrics_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("csv")
}
