//! Two-dimensional linear-Gaussian laboratory for proposal/model mismatch.
//!
//! The true data process draws `x ~ N(μ_π, Σ_π)`, the model assumes
//! `x ~ N(μ_p, Σ_p)`, and both share `y | x ~ N(x, Σ)`. A regressor trained on
//! model draws maps `y` to a Gaussian proposal; importance sampling against
//! the model posterior degrades as `μ_π` moves away from `μ_p`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Cholesky, Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::error::{config_err, Error, Result};
use crate::seed;

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianWorld {
    pub mu_pi: Vec2,
    pub sigma_pi: Mat2,
    pub mu_p: Vec2,
    pub sigma_p: Mat2,
    /// Likelihood covariance shared by the true process and the model.
    pub sigma: Mat2,
}

impl GaussianWorld {
    /// `Σ_π = Σ = I`, `Σ_p = 2I`, `μ_p = 0`, with the given true prior mean.
    pub fn standard(mu_pi: [f64; 2]) -> Self {
        GaussianWorld {
            mu_pi: Vec2::new(mu_pi[0], mu_pi[1]),
            sigma_pi: Mat2::identity(),
            mu_p: Vec2::zeros(),
            sigma_p: Mat2::identity() * 2.0,
            sigma: Mat2::identity(),
        }
    }

    /// The three sweep scenarios: `μ_π` at `[0,0]`, `[5,0]` and `[8,0]`.
    pub fn scenarios() -> Vec<GaussianWorld> {
        [[0.0, 0.0], [5.0, 0.0], [8.0, 0.0]].into_iter().map(Self::standard).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("Σ_π", &self.sigma_pi), ("Σ_p", &self.sigma_p), ("Σ", &self.sigma)] {
            check_spd(name, m)?;
        }
        Ok(())
    }
}

fn check_spd(name: &str, m: &Mat2) -> Result<Cholesky<f64, nalgebra::U2>> {
    if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-12 * m.norm().max(1.0) || !m.iter().all(|v| v.is_finite()) {
        return Err(config_err!("{name} must be finite and symmetric, got {m:?}"));
    }
    Cholesky::new(*m).ok_or_else(|| config_err!("{name} is not positive definite: {m:?}"))
}

/// Gaussian over the 2-D latent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian2 {
    pub mean: Vec2,
    pub cov: Mat2,
}

impl Gaussian2 {
    /// From the regressor head `(μ₁, μ₂, a, l₂₁, c)`: `Σ = LLᵀ`, `L = [[eᵃ, 0], [l₂₁, eᶜ]]`.
    pub fn from_head(p: &[f64]) -> Self {
        let l = Mat2::new(p[2].exp(), 0.0, p[3], p[4].exp());
        Gaussian2 { mean: Vec2::new(p[0], p[1]), cov: l * l.transpose() }
    }

    pub fn log_density(&self, x: &Vec2) -> f64 {
        gaussian_log_density(x, &self.mean, &self.cov)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        sample_gaussian(&self.mean, &self.cov, rng)
    }
}

pub fn gaussian_log_density(x: &Vec2, mean: &Vec2, cov: &Mat2) -> f64 {
    let chol = Cholesky::new(*cov).expect("covariance validated as SPD");
    let l = chol.l();
    let d = x - mean;
    let z1 = d[0] / l[(0, 0)];
    let z2 = (d[1] - l[(1, 0)] * z1) / l[(1, 1)];
    -(2.0 * PI).ln() - l[(0, 0)].ln() - l[(1, 1)].ln() - 0.5 * (z1 * z1 + z2 * z2)
}

fn sample_gaussian<R: Rng + ?Sized>(mean: &Vec2, cov: &Mat2, rng: &mut R) -> Vec2 {
    let l = Cholesky::new(*cov).expect("covariance validated as SPD").l();
    let z = Vec2::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
    mean + l * z
}

/// Closed-form model posterior `p(x | y)`.
pub fn analytic_posterior(y: &Vec2, world: &GaussianWorld) -> Result<Gaussian2> {
    let inv = |name: &str, m: &Mat2| check_spd(name, m).map(|c| c.inverse());
    let prior_prec = inv("Σ_p", &world.sigma_p)?;
    let lik_prec = inv("Σ", &world.sigma)?;
    let cov = inv("posterior precision", &(prior_prec + lik_prec))?;
    let cov = (cov + cov.transpose()) * 0.5;
    let mean = cov * (prior_prec * world.mu_p + lik_prec * y);
    Ok(Gaussian2 { mean, cov })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// The true process `π`.
    True,
    /// The model `p`.
    Model,
}

/// Ancestral draw `(x, y)` from the chosen joint.
pub fn simulate_data<R: Rng + ?Sized>(world: &GaussianWorld, source: Source, rng: &mut R) -> (Vec2, Vec2) {
    let (mu, cov) = match source {
        Source::True => (&world.mu_pi, &world.sigma_pi),
        Source::Model => (&world.mu_p, &world.sigma_p),
    };
    let x = sample_gaussian(mu, cov, rng);
    let y = sample_gaussian(&x, &world.sigma, rng);
    (x, y)
}

/// Feed-forward regressor `y → (μ_q, Σ_q)`: two tanh hidden layers and a
/// five-output Cholesky head.
#[derive(Clone, Debug)]
pub struct GaussRegressor {
    params: Vec<Tensor>,
}

impl GaussRegressor {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[seed::tag::GAUSS, seed::tag::INIT]);
        let params = vec![
            Tensor::fan_in_uniform(vec![hidden, 2], 2, &mut rng),
            Tensor::zeros(vec![hidden]),
            Tensor::fan_in_uniform(vec![hidden, hidden], hidden, &mut rng),
            Tensor::zeros(vec![hidden]),
            Tensor::fan_in_uniform(vec![5, hidden], hidden, &mut rng),
            Tensor::zeros(vec![5]),
        ];
        GaussRegressor { params }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], ys: &[Vec2]) -> Result<Var> {
        let data = ys.iter().flat_map(|y| [y[0], y[1]]).collect();
        let x = g.input(Tensor::new(vec![ys.len(), 2], data)?);
        let h = g.linear(x, vars[0], Some(vars[1]))?;
        let h = g.tanh(h);
        let h = g.linear(h, vars[2], Some(vars[3]))?;
        let h = g.tanh(h);
        g.linear(h, vars[4], Some(vars[5]))
    }

    /// Head outputs `(μ₁, μ₂, a, l₂₁, c)` per input.
    pub fn heads(&self, ys: &[Vec2]) -> Result<Vec<[f64; 5]>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.input(p.clone())).collect();
        let out = self.forward(&mut g, &vars, ys)?;
        Ok(g.value(out).data().chunks_exact(5).map(|c| [c[0], c[1], c[2], c[3], c[4]]).collect())
    }

    pub fn proposal(&self, y: &Vec2) -> Result<Gaussian2> {
        Ok(Gaussian2::from_head(&self.heads(std::slice::from_ref(y))?[0]))
    }

    /// Mean Gaussian negative log-likelihood of `xs` under the proposals for `ys`.
    pub fn loss_and_grad(&self, ys: &[Vec2], xs: &[Vec2]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let head = self.forward(&mut g, &vars, ys)?;
        let targets: Vec<[f64; 2]> = xs.iter().map(|x| [x[0], x[1]]).collect();
        let nll = g.gaussian_nll2(head, &targets)?;
        let total = g.sum(nll);
        let loss = g.scale(total, 1.0 / ys.len() as f64);
        let mut grads = g.backward(loss)?;
        Ok((g.value(loss).item(), vars.iter().map(|&v| grads.take(v)).collect()))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GaussTrainConfig {
    pub hidden: usize,
    pub steps: u64,
    pub batch: usize,
    /// Adam step size at the start; decays geometrically to `final_lr`.
    pub lr: f64,
    pub final_lr: f64,
    pub seed: u64,
}

impl Default for GaussTrainConfig {
    fn default() -> Self {
        GaussTrainConfig { hidden: 32, steps: 8_000, batch: 256, lr: 3e-3, final_lr: 1e-4, seed: 0 }
    }
}

/// Trains on fresh draws from the model joint only; returns the regressor and per-step losses.
pub fn train_gaussian_proposal(world: &GaussianWorld, cfg: &GaussTrainConfig) -> Result<(GaussRegressor, Vec<f64>)> {
    world.validate()?;
    if cfg.batch == 0 || cfg.hidden == 0 {
        return Err(config_err!("gauss training needs positive batch and hidden sizes"));
    }
    let mut net = GaussRegressor::new(cfg.hidden, cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &net.params);
    let decay = if cfg.steps > 1 { (cfg.final_lr / cfg.lr).powf(1.0 / (cfg.steps - 1) as f64) } else { 1.0 };
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = seed::rng(cfg.seed, &[seed::tag::GAUSS, seed::tag::TRAIN_BATCH, step]);
        let (xs, ys): (Vec<Vec2>, Vec<Vec2>) = (0..cfg.batch).map(|_| simulate_data(world, Source::Model, &mut rng)).unzip();
        let (loss, grads) = net.loss_and_grad(&ys, &xs)?;
        if !loss.is_finite() {
            return Err(Error::Training { step: step + 1, message: format!("gaussian NLL is {loss}") });
        }
        adam.config.lr = cfg.lr * decay.powf(step as f64);
        adam.step(&mut net.params, &grads)?;
        losses.push(loss);
    }
    Ok((net, losses))
}

/// Self-normalized importance-sampling estimate of the model posterior moments.
#[derive(Clone, Copy, Debug)]
pub struct IsEstimate {
    pub mean: Vec2,
    pub cov: Mat2,
    pub ess: f64,
}

/// Draws `m` points from `proposal` and weights them by `p(x)·p(y|x) / q(x)` with exact densities.
pub fn is_posterior_estimate<R: Rng + ?Sized>(
    y: &Vec2,
    proposal: &Gaussian2,
    world: &GaussianWorld,
    m: usize,
    rng: &mut R,
) -> Result<IsEstimate> {
    if m == 0 {
        return Err(config_err!("importance sampling needs at least one sample"));
    }
    world.validate()?;
    check_spd("Σ_q", &proposal.cov)?;
    let xs: Vec<Vec2> = (0..m).map(|_| proposal.sample(rng)).collect();
    let logw: Vec<f64> = xs
        .iter()
        .map(|x| {
            gaussian_log_density(x, &world.mu_p, &world.sigma_p) + gaussian_log_density(y, x, &world.sigma)
                - proposal.log_density(x)
        })
        .collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|r| r / z).collect();
    let mean = xs.iter().zip(&w).fold(Vec2::zeros(), |acc, (x, wi)| acc + x * *wi);
    let cov = xs.iter().zip(&w).fold(Mat2::zeros(), |acc, (x, wi)| {
        let d = x - mean;
        acc + d * d.transpose() * *wi
    });
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    Ok(IsEstimate { mean, cov, ess })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub scenario: usize,
    pub seed: u64,
    pub mu_err: f64,
    pub sigma_err: f64,
    pub ess: f64,
}

/// Everything needed to draw one panel's ellipses.
#[derive(Clone, Debug, Serialize)]
pub struct PlotRow {
    pub scenario: usize,
    pub seed: u64,
    pub y1: f64,
    pub y2: f64,
    pub post_mu1: f64,
    pub post_mu2: f64,
    pub post_s11: f64,
    pub post_s12: f64,
    pub post_s22: f64,
    pub q_mu1: f64,
    pub q_mu2: f64,
    pub q_s11: f64,
    pub q_s12: f64,
    pub q_s22: f64,
    pub is_mu1: f64,
    pub is_mu2: f64,
    pub is_s11: f64,
    pub is_s12: f64,
    pub is_s22: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub plot: Vec<PlotRow>,
}

impl SweepReport {
    /// CSV with header `scenario,seed,mu_err,sigma_err,ess`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.rows, &["scenario", "seed", "mu_err", "sigma_err", "ess"])
    }

    pub fn write_plot_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.plot, &["scenario"])
    }

    /// Median of `f` over the rows of one scenario.
    pub fn median(&self, scenario: usize, f: impl Fn(&SweepRow) -> f64) -> f64 {
        let mut v: Vec<f64> = self.rows.iter().filter(|r| r.scenario == scenario).map(f).collect();
        median(&mut v)
    }
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T], empty_header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(empty_header)?;
    }
    w.flush()?;
    Ok(())
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// For every world and seed: draw `y` from the true process, estimate the model
/// posterior with `m` importance samples from the regressor's proposal, and
/// compare with the closed form.
pub fn mismatch_sweep(worlds: &[GaussianWorld], regressor: &GaussRegressor, m: usize, seeds: &[u64], master_seed: u64) -> Result<SweepReport> {
    let mut report = SweepReport::default();
    for (scenario, world) in worlds.iter().enumerate() {
        for &s in seeds {
            let mut rng = seed::rng(master_seed, &[seed::tag::GAUSS, seed::tag::EVAL, scenario as u64, s]);
            let (_, y) = simulate_data(world, Source::True, &mut rng);
            let q = regressor.proposal(&y)?;
            let est = is_posterior_estimate(&y, &q, world, m, &mut rng)?;
            let post = analytic_posterior(&y, world)?;
            report.rows.push(SweepRow {
                scenario,
                seed: s,
                mu_err: (est.mean - post.mean).norm(),
                sigma_err: (est.cov - post.cov).norm(),
                ess: est.ess,
            });
            report.plot.push(PlotRow {
                scenario,
                seed: s,
                y1: y[0],
                y2: y[1],
                post_mu1: post.mean[0],
                post_mu2: post.mean[1],
                post_s11: post.cov[(0, 0)],
                post_s12: post.cov[(0, 1)],
                post_s22: post.cov[(1, 1)],
                q_mu1: q.mean[0],
                q_mu2: q.mean[1],
                q_s11: q.cov[(0, 0)],
                q_s12: q.cov[(0, 1)],
                q_s22: q.cov[(1, 1)],
                is_mu1: est.mean[0],
                is_mu2: est.mean[1],
                is_s11: est.cov[(0, 0)],
                is_s12: est.cov[(0, 1)],
                is_s22: est.cov[(1, 1)],
            });
        }
    }
    Ok(report)
}
