use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use super::net::{latent_classes, ProposalNet};
use crate::autodiff::{Adam, AdamConfig};
use crate::captcha::{render, sample_prior, Image, Latent, StyleSpec};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Steps between metrics rows (a row is also written after the last step).
    pub log_every: u64,
    /// Held-out images used for the periodic recognition rate; 0 disables it.
    pub heldout: usize,
    pub seed: u64,
    /// Record elapsed milliseconds in the metrics log. Off by default so the
    /// log is a pure function of the seed.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 128,
            adam: AdamConfig::default(),
            log_every: 500,
            heldout: 200,
            seed: 0,
            wall_clock: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    /// Mean training loss over the steps since the previous row.
    pub loss: f64,
    pub heldout_rr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Loss of every completed step, in order.
    pub losses: Vec<f64>,
    pub metrics: Vec<MetricsRow>,
}

impl TrainReport {
    /// Metrics log as CSV with header `step,loss,heldout_rr,wall_ms`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.metrics {
            w.serialize(row)?;
        }
        if self.metrics.is_empty() {
            w.write_record(["step", "loss", "heldout_rr", "wall_ms"])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Where minibatches come from.
#[derive(Clone, Copy, Debug)]
pub enum BatchSource<'a> {
    /// Fresh prior samples rendered on the fly for every step.
    Fresh,
    /// Uniform draws with replacement from a finite dataset.
    Dataset(&'a [(Latent, Image)]),
}

/// Minibatch for 0-based step `step`, drawn from its own derived stream.
pub fn training_batch(style: &StyleSpec, source: BatchSource<'_>, seed: u64, step: u64, size: usize) -> Result<Vec<(Latent, Image)>> {
    let mut rng = seed::rng(seed, &[seed::tag::TRAIN_BATCH, step]);
    match source {
        BatchSource::Fresh => (0..size)
            .map(|_| {
                let x = sample_prior(style, &mut rng);
                let y = render(&x, style, &mut rng)?;
                Ok((x, y))
            })
            .collect(),
        BatchSource::Dataset(data) => {
            if data.is_empty() {
                return Err(Error::Data("empty training dataset".into()));
            }
            use rand::Rng;
            Ok((0..size).map(|_| data[rng.random_range(0..data.len())].clone()).collect())
        }
    }
}

/// `n` held-out pairs from the style, independent of every training batch.
pub fn heldout_set(style: &StyleSpec, seed: u64, n: usize) -> Result<Vec<(Latent, Image)>> {
    let mut rng = seed::rng(seed, &[seed::tag::HELDOUT]);
    (0..n)
        .map(|_| {
            let x = sample_prior(style, &mut rng);
            let y = render(&x, style, &mut rng)?;
            Ok((x, y))
        })
        .collect()
}

/// Whether a decode reproduces the full letter sequence (including its length).
pub fn recognized(decoded: &Latent, truth: &Latent) -> bool {
    decoded.letters == truth.letters
}

/// Greedy decodes of `images`, in chunks to bound graph size.
pub fn decode_all(net: &ProposalNet, style: &StyleSpec, images: &[&Image]) -> Result<Vec<Latent>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        out.extend(net.decode_batch(style, chunk)?);
    }
    Ok(out)
}

/// Fraction of pairs whose greedy decode recovers the letter sequence.
pub fn recognition_rate(net: &ProposalNet, style: &StyleSpec, pairs: &[(Latent, Image)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let images: Vec<&Image> = pairs.iter().map(|(_, y)| y).collect();
    let decoded = decode_all(net, style, &images)?;
    let hits = decoded.iter().zip(pairs).filter(|(d, (x, _))| recognized(d, x)).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Minimizes the teacher-forced loss with Adam.
///
/// Progress is appended to `report` as it happens; `on_row` sees each metrics
/// row when it is written. On a non-finite loss or gradient the parameters of
/// the last good step are kept and a training error is returned.
pub fn train(
    net: &mut ProposalNet,
    style: &StyleSpec,
    cfg: &TrainConfig,
    source: BatchSource<'_>,
    report: &mut TrainReport,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<()> {
    style.validate()?;
    net.arch().check_style(style)?;
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let heldout = heldout_set(style, cfg.seed, cfg.heldout)?;
    let mut adam = Adam::new(cfg.adam, net.params());
    let start = Instant::now();
    let log_every = cfg.log_every.max(1);
    let mut since_log = Vec::new();
    for step in 0..cfg.steps {
        let batch = training_batch(style, source, cfg.seed, step, cfg.batch)?;
        let classes = batch.iter().map(|(x, _)| latent_classes(x, style)).collect::<Result<Vec<_>>>()?;
        let images: Vec<&Image> = batch.iter().map(|(_, y)| y).collect();
        let (loss, grads) = net.loss_and_grad_classes(&images, &classes)?;
        if !loss.is_finite() {
            return Err(Error::Training { step: step + 1, message: format!("loss is {loss}") });
        }
        adam.step(net.params_mut(), &grads)?;
        report.losses.push(loss);
        since_log.push(loss);
        let done = step + 1;
        if done % log_every == 0 || done == cfg.steps {
            let heldout_rr = recognition_rate(net, style, &heldout)?;
            let row = MetricsRow {
                step: done,
                loss: since_log.iter().sum::<f64>() / since_log.len() as f64,
                heldout_rr,
                wall_ms: if cfg.wall_clock { start.elapsed().as_millis() as u64 } else { 0 },
            };
            since_log.clear();
            on_row(&row);
            report.metrics.push(row);
        }
    }
    Ok(())
}
