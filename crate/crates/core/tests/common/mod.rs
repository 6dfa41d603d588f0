//! Shared oracles for the integration tests.
#![allow(dead_code)]

use amortize::gauss::{analytic_posterior, GaussianWorld, Mat2, Vec2};
use amortize::autodiff::{lstm_cell, Graph, LstmVars, Tensor, Var};
use amortize::captcha::{render, sample_prior, Image, Latent, StyleSpec};
use amortize::proposal::{latent_classes, ArchConfig, ProposalNet, StepInput};
use amortize::seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const RECURRENT_TOL: f64 = 1e-3;

/// Relative error with a small floor so that gradients that are zero up to
/// rounding compare on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = random_tensor(shape, r);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

/// `Σ y ⊙ R` for a fixed pseudo-random `R`, turning any output into a scalar
/// whose gradient exercises every output element.
pub fn project(g: &mut Graph, y: Var) -> Var {
    let shape = g.value(y).shape().to_vec();
    let mut r = rng(0xA11CE ^ shape.iter().product::<usize>() as u64);
    let w = g.input(random_tensor(&shape, &mut r));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

/// Largest relative error between reverse-mode gradients of `f` and central
/// differences, over every element of every parameter.
pub fn max_grad_err(params: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let eval = |ps: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut worst = 0.0f64;
    let mut ps = params.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for j in 0..params[i].len() {
            let orig = ps[i].data()[j];
            ps[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&ps);
            ps[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&ps);
            ps[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

pub struct OpCase {
    pub name: &'static str,
    pub tol: f64,
    pub run: fn(u64) -> f64,
}

fn case_linear(s: u64) -> f64 {
    let mut r = rng(s);
    let ps = [random_tensor(&[3, 4], &mut r), random_tensor(&[5, 4], &mut r), random_tensor(&[5], &mut r)];
    let batched = max_grad_err(&ps, &|g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        project(g, y)
    });
    let single = max_grad_err(&[random_tensor(&[4], &mut r), ps[1].clone()], &|g, v| {
        let y = g.linear(v[0], v[1], None).unwrap();
        project(g, y)
    });
    batched.max(single)
}

fn case_conv2d(s: u64) -> f64 {
    let mut r = rng(s);
    let ps = [random_tensor(&[2, 4, 5], &mut r), random_tensor(&[3, 2, 3, 3], &mut r), random_tensor(&[3], &mut r)];
    let single = max_grad_err(&ps, &|g, v| {
        let y = g.conv2d(v[0], v[1], v[2]).unwrap();
        project(g, y)
    });
    let ps = [random_tensor(&[2, 1, 4, 4], &mut r), random_tensor(&[2, 1, 3, 3], &mut r), random_tensor(&[2], &mut r)];
    let batched = max_grad_err(&ps, &|g, v| {
        let y = g.conv2d(v[0], v[1], v[2]).unwrap();
        project(g, y)
    });
    single.max(batched)
}

fn case_maxpool(s: u64) -> f64 {
    let mut r = rng(s);
    let odd = max_grad_err(&[random_tensor(&[2, 5, 5], &mut r)], &|g, v| {
        let y = g.maxpool2d(v[0]).unwrap();
        project(g, y)
    });
    let batched = max_grad_err(&[random_tensor(&[2, 2, 4, 6], &mut r)], &|g, v| {
        let y = g.maxpool2d(v[0]).unwrap();
        project(g, y)
    });
    odd.max(batched)
}

fn unary(s: u64, op: fn(&mut Graph, Var) -> Var) -> f64 {
    let mut r = rng(s);
    max_grad_err(&[away_from_zero(&[3, 4], &mut r)], &|g, v| {
        let y = op(g, v[0]);
        project(g, y)
    })
}

fn case_relu(s: u64) -> f64 {
    unary(s, |g, x| g.relu(x))
}

fn case_sigmoid(s: u64) -> f64 {
    unary(s, |g, x| g.sigmoid(x))
}

fn case_tanh(s: u64) -> f64 {
    unary(s, |g, x| g.tanh(x))
}

fn case_scale(s: u64) -> f64 {
    unary(s, |g, x| g.scale(x, -1.7))
}

fn binary(s: u64, op: fn(&mut Graph, Var, Var) -> Var) -> f64 {
    let mut r = rng(s);
    max_grad_err(&[random_tensor(&[3, 4], &mut r), random_tensor(&[3, 4], &mut r)], &|g, v| {
        let y = op(g, v[0], v[1]);
        project(g, y)
    })
}

fn case_add(s: u64) -> f64 {
    binary(s, |g, a, b| g.add(a, b).unwrap())
}

fn case_mul(s: u64) -> f64 {
    binary(s, |g, a, b| g.mul(a, b).unwrap())
}

fn case_concat_slice(s: u64) -> f64 {
    let mut r = rng(s);
    let ps = [random_tensor(&[3, 2], &mut r), random_tensor(&[3, 4], &mut r)];
    max_grad_err(&ps, &|g, v| {
        let c = g.concat(&[v[0], v[1], v[0]]).unwrap();
        let sl = g.slice_cols(c, 1, 4).unwrap();
        let t = g.tanh(sl);
        project(g, t)
    })
}

fn case_reshape(s: u64) -> f64 {
    let mut r = rng(s);
    max_grad_err(&[random_tensor(&[2, 6], &mut r)], &|g, v| {
        let y = g.reshape(v[0], &[3, 4]).unwrap();
        let y = g.sigmoid(y);
        project(g, y)
    })
}

fn case_softmax(s: u64) -> f64 {
    let mut r = rng(s);
    max_grad_err(&[random_tensor(&[3, 5], &mut r)], &|g, v| {
        let y = g.softmax(v[0]).unwrap();
        project(g, y)
    })
}

fn case_log_softmax_pick(s: u64) -> f64 {
    let mut r = rng(s);
    let x = random_tensor(&[3, 5], &mut r);
    let ls = max_grad_err(std::slice::from_ref(&x), &|g, v| {
        let y = g.log_softmax(v[0]).unwrap();
        project(g, y)
    });
    let pick = max_grad_err(&[x], &|g, v| {
        let y = g.log_softmax(v[0]).unwrap();
        let p = g.pick(y, &[Some(1), None, Some(4)]).unwrap();
        g.sum(p)
    });
    ls.max(pick)
}

fn case_gaussian_nll(s: u64) -> f64 {
    let mut r = rng(s);
    let targets: Vec<[f64; 2]> = (0..4).map(|_| [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect();
    max_grad_err(&[random_tensor(&[4, 5], &mut r)], &|g, v| {
        let y = g.gaussian_nll2(v[0], &targets).unwrap();
        g.sum(y)
    })
}

fn lstm_params(r: &mut ChaCha8Rng, steps: usize) -> Vec<Tensor> {
    let mut ps = vec![
        random_tensor(&[16, 3], r),
        random_tensor(&[16, 4], r),
        random_tensor(&[16], r),
        random_tensor(&[2, 4], r),
        random_tensor(&[2, 4], r),
    ];
    ps.extend((0..steps).map(|_| random_tensor(&[2, 3], r)));
    ps
}

fn lstm_unroll(g: &mut Graph, v: &[Var], steps: usize) -> Var {
    let p = LstmVars { w_ih: v[0], w_hh: v[1], bias: v[2] };
    let (mut h, mut c) = (v[3], v[4]);
    for t in 0..steps {
        (h, c) = lstm_cell(g, v[5 + t], h, c, p).unwrap();
    }
    let both = g.concat(&[h, c]).unwrap();
    project(g, both)
}

fn case_lstm_step(s: u64) -> f64 {
    let ps = lstm_params(&mut rng(s), 1);
    max_grad_err(&ps, &|g, v| lstm_unroll(g, v, 1))
}

fn case_lstm_three_steps(s: u64) -> f64 {
    let ps = lstm_params(&mut rng(s), 3);
    max_grad_err(&ps, &|g, v| lstm_unroll(g, v, 3))
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "linear", tol: OP_TOL, run: case_linear },
        OpCase { name: "conv2d", tol: OP_TOL, run: case_conv2d },
        OpCase { name: "maxpool2d", tol: OP_TOL, run: case_maxpool },
        OpCase { name: "relu", tol: OP_TOL, run: case_relu },
        OpCase { name: "sigmoid", tol: OP_TOL, run: case_sigmoid },
        OpCase { name: "tanh", tol: OP_TOL, run: case_tanh },
        OpCase { name: "scale", tol: OP_TOL, run: case_scale },
        OpCase { name: "add", tol: OP_TOL, run: case_add },
        OpCase { name: "mul", tol: OP_TOL, run: case_mul },
        OpCase { name: "concat+slice", tol: OP_TOL, run: case_concat_slice },
        OpCase { name: "reshape", tol: OP_TOL, run: case_reshape },
        OpCase { name: "softmax", tol: OP_TOL, run: case_softmax },
        OpCase { name: "log_softmax+pick", tol: OP_TOL, run: case_log_softmax_pick },
        OpCase { name: "gaussian_nll2", tol: OP_TOL, run: case_gaussian_nll },
        OpCase { name: "lstm_cell", tol: OP_TOL, run: case_lstm_step },
        OpCase { name: "lstm 3-step", tol: RECURRENT_TOL, run: case_lstm_three_steps },
    ]
}

/// Tiny style with pixel noise so that no two pooling candidates tie exactly.
pub fn noisy_tiny_style() -> StyleSpec {
    StyleSpec { noise_sigma: 20.0, ..StyleSpec::tiny() }
}

/// Tiny net with every parameter (biases included) moved off its initial value,
/// so no pre-activation sits exactly on a relu kink.
pub fn random_tiny_net(style: &StyleSpec, s: u64) -> ProposalNet {
    let mut net = ProposalNet::new(ArchConfig::tiny(style), s).unwrap();
    let mut r = rng(s ^ 0x5EED);
    for p in net.params_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    net
}

pub fn batch(style: &StyleSpec, n: usize, s: u64) -> Vec<(Latent, Image)> {
    let mut r = seed::rng(s, &[99]);
    (0..n)
        .map(|_| {
            let x = sample_prior(style, &mut r);
            let y = render(&x, style, &mut r).unwrap();
            (x, y)
        })
        .collect()
}

/// Relative error of the full training-loss gradient against central differences.
pub fn full_loss_grad_err(s: u64) -> f64 {
    let style = noisy_tiny_style();
    let mut net = random_tiny_net(&style, s);
    let data = batch(&style, 3, s);
    let (_, grads) = net.loss_and_grad(&style, &data).unwrap();
    let mut worst = 0.0f64;
    let central = |net: &mut ProposalNet, i: usize, j: usize, h: f64| {
        let orig = net.params()[i].data()[j];
        net.params_mut()[i].data_mut()[j] = orig + h;
        let up = net.loss(&style, &data).unwrap();
        net.params_mut()[i].data_mut()[j] = orig - h;
        let down = net.loss(&style, &data).unwrap();
        net.params_mut()[i].data_mut()[j] = orig;
        (up - down) / (2.0 * h)
    };
    for i in 0..grads.len() {
        for j in 0..grads[i].len() {
            let a = grads[i].data()[j];
            let mut n = central(&mut net, i, j, FD_STEP);
            if rel_err(a, n) > OP_TOL {
                // a relu/max kink inside [θ-h, θ+h] shows up as disagreement
                // between step sizes; smooth points agree to O(h²)
                let fine = central(&mut net, i, j, FD_STEP / 10.0);
                if rel_err(n, fine) > 1e-6 {
                    n = fine;
                }
            }
            worst = worst.max(rel_err(a, n));
        }
    }
    worst
}

/// `log q(x|y)` as a product of per-step head probabilities, walked one step
/// at a time through the recurrent-state API.
pub fn factorized_log_q(net: &ProposalNet, style: &StyleSpec, x: &Latent, y: &Image) -> f64 {
    let classes = latent_classes(x, style).unwrap();
    let embedding = net.embed(y).unwrap();
    let mut state = net.initial_state();
    let mut prev = None;
    let mut total = 0.0;
    for (t, &c) in classes.iter().enumerate() {
        let head = net.arch().heads.kind_at(t);
        let probs = net.step(&mut state, &StepInput { embedding: embedding.clone(), prev, head }).unwrap();
        total += probs[c].ln();
        prev = Some(c);
    }
    total
}

/// Largest gap between the batched training loss and `−mean log q` computed
/// step by step, for one random net and batch.
pub fn loss_identity_gap(s: u64) -> f64 {
    let style = StyleSpec::tiny();
    let net = random_tiny_net(&style, s);
    let data = batch(&style, 4 + (s as usize % 5), s);
    let loss = net.loss(&style, &data).unwrap();
    let mean: f64 = data.iter().map(|(x, y)| factorized_log_q(&net, &style, x, y)).sum::<f64>() / data.len() as f64;
    (loss + mean).abs()
}

/// Every latent of a style, in a fixed order.
pub fn enumerate_latents(style: &StyleSpec) -> Vec<Latent> {
    let mut eps_combos: Vec<Vec<i64>> = vec![vec![]];
    for e in &style.epsilons {
        eps_combos = eps_combos.iter().flat_map(|c| e.domain.iter().map(move |&v| [c.clone(), vec![v]].concat())).collect();
    }
    let a = style.alphabet_len();
    let mut out = Vec::new();
    for length in style.l_min..=style.l_max {
        let mut words: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..length {
            words = words.iter().flat_map(|w| (0..a).map(move |c| [w.clone(), vec![c]].concat())).collect();
        }
        for eps in &eps_combos {
            for w in &words {
                out.push(Latent { length, epsilons: eps.clone(), letters: w.clone() });
            }
        }
    }
    out
}

/// Exact ABC posterior over every latent by brute-force enumeration, with the
/// uniform prior written out from the domain sizes.
pub fn enumeration_posterior(style: &StyleSpec, y: &Image, abc_eps: f64) -> Vec<(Latent, f64)> {
    let lens = (style.l_max - style.l_min + 1) as f64;
    let eps: f64 = style.epsilons.iter().map(|e| e.domain.len() as f64).product();
    let a = style.alphabet_len() as f64;
    let logs: Vec<(Latent, f64)> = enumerate_latents(style)
        .into_iter()
        .map(|x| {
            let lp = -(lens * eps).ln() - x.length as f64 * a.ln();
            let ll = match amortize::captcha::render_mean(&x, style) {
                Ok(m) => -m.squared_distance(y) / (2.0 * abc_eps * abc_eps),
                Err(_) => f64::NEG_INFINITY,
            };
            (x, lp + ll)
        })
        .collect();
    let max = logs.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().map(|(_, l)| (l - max).exp()).sum();
    logs.into_iter().map(|(x, l)| (x, (l - max).exp() / z)).collect()
}

/// Total-variation distance between an importance-sampled set and the
/// enumerated posterior, over full latents.
pub fn tv_to_oracle(ps: &amortize::inference::ParticleSet, oracle: &[(Latent, f64)]) -> f64 {
    use std::collections::HashMap;
    let mut est: HashMap<&Latent, f64> = HashMap::new();
    for (p, &w) in ps.particles().iter().zip(ps.weights()) {
        *est.entry(&p.latent).or_insert(0.0) += w;
    }
    let mut tv: f64 = oracle.iter().map(|(x, p)| (p - est.get(x).copied().unwrap_or(0.0)).abs()).sum();
    // mass on latents outside the enumeration (none expected)
    tv += est.iter().filter(|(x, _)| !oracle.iter().any(|(o, _)| o == **x)).map(|(_, w)| w).sum::<f64>();
    0.5 * tv
}

/// Observation for the enumeration checks: a noisy render of a prior draw.
pub fn enumeration_observation(style: &StyleSpec, s: u64) -> Image {
    let mut r = seed::rng(s, &[77]);
    let x = sample_prior(style, &mut r);
    let y = amortize::captcha::render_mean(&x, style).unwrap();
    amortize::captcha::perturb_noise(&y, 60.0, &mut r)
}

/// Bandwidth used by the enumeration checks; wide enough that several latents
/// carry visible posterior mass.
pub const ENUM_ABC_EPS: f64 = 2.0;

/// TV between `importance_sample` with `m` particles and the enumeration
/// oracle on the tiny style, for seed `s`.
pub fn enumeration_tv(net: &ProposalNet, m: usize, s: u64) -> f64 {
    let style = StyleSpec::tiny();
    let y = enumeration_observation(&style, s);
    let oracle = enumeration_posterior(&style, &y, ENUM_ABC_EPS);
    let cfg = amortize::inference::AbcConfig::new(ENUM_ABC_EPS).unwrap();
    let ps = amortize::inference::importance_sample(&y, net, &style, m, &cfg, s).unwrap();
    tv_to_oracle(&ps, &oracle)
}

/// Log density of N(x; m, S) written out with the explicit 2×2 inverse.
pub fn log_normal(x: [f64; 2], m: [f64; 2], s: [[f64; 2]; 2]) -> f64 {
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let (d0, d1) = (x[0] - m[0], x[1] - m[1]);
    let q = (s[1][1] * d0 * d0 - 2.0 * s[0][1] * d0 * d1 + s[0][0] * d1 * d1) / det;
    -0.5 * q - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
}

pub fn random_spd(r: &mut rand_chacha::ChaCha8Rng) -> [[f64; 2]; 2] {
    let a: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
    let s00 = a[0] * a[0] + a[1] * a[1] + 0.3;
    let s01 = a[0] * a[2] + a[1] * a[3];
    let s11 = a[2] * a[2] + a[3] * a[3] + 0.3;
    [[s00, s01], [s01, s11]]
}

pub fn mat(s: [[f64; 2]; 2]) -> Mat2 {
    Mat2::new(s[0][0], s[0][1], s[1][0], s[1][1])
}

/// Posterior mean and covariance by Bayes' rule on a uniform grid.
pub fn grid_posterior(y: [f64; 2], mu_p: [f64; 2], s_p: [[f64; 2]; 2], s: [[f64; 2]; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
    let half = |i: usize| 7.0 * s_p[i][i].sqrt().max(s[i][i].sqrt());
    let lo = [mu_p[0].min(y[0]) - half(0), mu_p[1].min(y[1]) - half(1)];
    let hi = [mu_p[0].max(y[0]) + half(0), mu_p[1].max(y[1]) + half(1)];
    let n = 700;
    let mut pts = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let x = [
                lo[0] + (i as f64 + 0.5) * (hi[0] - lo[0]) / n as f64,
                lo[1] + (j as f64 + 0.5) * (hi[1] - lo[1]) / n as f64,
            ];
            pts.push((x, log_normal(x, mu_p, s_p) + log_normal(y, x, s)));
        }
    }
    let max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = pts.iter().map(|p| (p.1 - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut mean = [0.0; 2];
    for (p, wi) in pts.iter().zip(&w) {
        mean[0] += wi * p.0[0] / z;
        mean[1] += wi * p.0[1] / z;
    }
    let mut cov = [[0.0; 2]; 2];
    for (p, wi) in pts.iter().zip(&w) {
        let d = [p.0[0] - mean[0], p.0[1] - mean[1]];
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] += wi * d[a] * d[b] / z;
            }
        }
    }
    (mean, cov)
}

/// Largest deviation between the closed-form posterior and grid quadrature over 20 random worlds.
pub fn analytic_vs_grid_max_err() -> f64 {
    let mut worst = 0.0f64;
    for s in 0..20 {
        let mut r = rng(1000 + s);
        let mu_p = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
        let (s_p, s_l) = (random_spd(&mut r), random_spd(&mut r));
        let y = [r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)];
        let world = GaussianWorld {
            mu_pi: Vec2::new(mu_p[0], mu_p[1]),
            sigma_pi: mat(s_p),
            mu_p: Vec2::new(mu_p[0], mu_p[1]),
            sigma_p: mat(s_p),
            sigma: mat(s_l),
        };
        let post = analytic_posterior(&Vec2::new(y[0], y[1]), &world).unwrap();
        let (gm, gc) = grid_posterior(y, mu_p, s_p, s_l);
        for a in 0..2 {
            worst = worst.max((post.mean[a] - gm[a]).abs());
            for b in 0..2 {
                worst = worst.max((post.cov[(a, b)] - gc[a][b]).abs());
            }
        }
    }
    worst
}

