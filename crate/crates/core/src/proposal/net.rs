use rand::Rng;

use super::arch::ArchConfig;
use crate::autodiff::{lstm_cell, lstm_cell_from_gates, Graph, LstmVars, Tensor, Var};
use crate::captcha::{Image, Latent, StyleSpec};
use crate::error::{config_err, Error, Result};
use crate::seed;

/// Rows per forward/backward pass when training.
const MICRO_BATCH: usize = 32;

/// Indices into the flat parameter list.
#[derive(Clone, Debug)]
struct Layout {
    conv: Vec<(usize, usize)>,
    fc: Vec<(usize, usize)>,
    /// First LSTM layer: input weights split into embedding and token parts.
    w_emb: usize,
    w_tok: usize,
    w_hh0: usize,
    bias0: usize,
    /// Further layers: `(w_ih, w_hh, bias)`.
    upper: Vec<(usize, usize, usize)>,
    heads: Vec<(usize, usize)>,
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    /// Uniform with variance `1/(3·fan_in)`.
    FanIn(usize),
    /// Uniform with variance `2/fan_in`, for layers followed by a relu.
    He(usize),
    /// LSTM bias: zero except the forget block, which starts at 1.
    ForgetOne(usize),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn layout(arch: &ArchConfig) -> (Layout, Vec<ParamSpec>) {
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec { name, shape, init });
        specs.len() - 1
    };
    let mut conv = Vec::new();
    let mut channels = 1;
    for (i, &f) in arch.conv_filters.iter().enumerate() {
        let k = add(format!("conv{i}.kernel"), vec![f, channels, 3, 3], Init::He(channels * 9));
        let b = add(format!("conv{i}.bias"), vec![f], Init::Zero);
        conv.push((k, b));
        channels = f;
    }
    let (c, h, w) = arch.conv_output();
    let mut width = if arch.conv_filters.is_empty() { arch.input_height * arch.input_width } else { c * h * w };
    let mut fc = Vec::new();
    for (i, &out) in arch.fc_widths.iter().enumerate() {
        let wi = add(format!("fc{i}.weight"), vec![out, width], Init::He(width));
        let bi = add(format!("fc{i}.bias"), vec![out], Init::Zero);
        fc.push((wi, bi));
        width = out;
    }
    let hid = arch.lstm_hidden;
    let (emb, tok) = (arch.embedding_width(), arch.token_width());
    let w_emb = add("lstm0.w_emb".into(), vec![4 * hid, emb], Init::FanIn(emb + tok));
    let w_tok = add("lstm0.w_tok".into(), vec![4 * hid, tok], Init::FanIn(emb + tok));
    let w_hh0 = add("lstm0.w_hh".into(), vec![4 * hid, hid], Init::FanIn(hid));
    let bias0 = add("lstm0.bias".into(), vec![4 * hid], Init::ForgetOne(hid));
    let mut upper = Vec::new();
    for l in 1..arch.lstm_layers {
        let wi = add(format!("lstm{l}.w_ih"), vec![4 * hid, hid], Init::FanIn(hid));
        let wh = add(format!("lstm{l}.w_hh"), vec![4 * hid, hid], Init::FanIn(hid));
        let b = add(format!("lstm{l}.bias"), vec![4 * hid], Init::ForgetOne(hid));
        upper.push((wi, wh, b));
    }
    let mut heads = Vec::new();
    for kind in 0..arch.heads.kinds() {
        let d = arch.heads.dim(kind);
        let wi = add(format!("head{kind}.weight"), vec![d, hid], Init::FanIn(hid));
        let bi = add(format!("head{kind}.bias"), vec![d], Init::Zero);
        heads.push((wi, bi));
    }
    (Layout { conv, fc, w_emb, w_tok, w_hh0, bias0, upper, heads }, specs)
}

/// The image-conditioned recurrent proposal `q(x | y)`.
#[derive(Clone, Debug)]
pub struct ProposalNet {
    arch: ArchConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// Latent encoded as one class index per schedule step.
pub fn latent_classes(latent: &Latent, style: &StyleSpec) -> Result<Vec<usize>> {
    if latent.length < style.l_min || latent.length > style.l_max {
        return Err(Error::Data(format!("L = {} outside [{}, {}]", latent.length, style.l_min, style.l_max)));
    }
    if latent.epsilons.len() != style.k() || latent.letters.len() != latent.length {
        return Err(Error::Data(format!("malformed latent {latent:?} for style {}", style.id)));
    }
    let mut out = Vec::with_capacity(latent.steps());
    out.push(latent.length - style.l_min);
    for (e, v) in style.epsilons.iter().zip(&latent.epsilons) {
        out.push(e.class_of(*v).ok_or_else(|| Error::Data(format!("{} = {v} outside {:?}", e.name, e.domain)))?);
    }
    let n = style.alphabet_len();
    for &i in &latent.letters {
        if i >= n {
            return Err(Error::Data(format!("letter index {i} outside alphabet of {n}")));
        }
        out.push(i);
    }
    Ok(out)
}

/// Inverse of [`latent_classes`]; `classes` must hold a complete schedule.
pub fn latent_from_classes(classes: &[usize], style: &StyleSpec) -> Latent {
    let k = style.k();
    let length = style.l_min + classes[0];
    let epsilons = style.epsilons.iter().zip(&classes[1..=k]).map(|(e, &c)| e.domain[c]).collect();
    Latent { length, epsilons, letters: classes[1 + k..1 + k + length].to_vec() }
}

/// Batch of images as a `[B×1×H×W]` tensor.
pub(crate) fn image_batch(images: &[&Image], arch: &ArchConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * arch.input_height * arch.input_width);
    for img in images {
        if (img.height(), img.width()) != (arch.input_height, arch.input_width) {
            return Err(config_err!(
                "image is {}×{}, network expects {}×{}",
                img.height(),
                img.width(),
                arch.input_height,
                arch.input_width
            ));
        }
        data.extend_from_slice(img.pixels());
    }
    Tensor::new(vec![images.len(), 1, arch.input_height, arch.input_width], data)
}

/// Lowest index of the maximum.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from log-probabilities by inverting the CDF.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Recurrent decoder unrolled over a batch of rows inside a graph.
pub(crate) struct Unroll {
    proj: Var,
    h: Vec<Var>,
    c: Vec<Var>,
    rows: usize,
    t: usize,
}

impl Unroll {
    /// `emb` is `[rows×E]`; its input projection is computed once and reused at every step.
    pub fn new(net: &ProposalNet, g: &mut Graph, vars: &[Var], emb: Var) -> Result<Self> {
        let rows = g.value(emb).shape()[0];
        let l = &net.layout;
        let proj = g.linear(emb, vars[l.w_emb], Some(vars[l.bias0]))?;
        let hid = net.arch.lstm_hidden;
        let layers = net.arch.lstm_layers;
        let h = (0..layers).map(|_| g.input(Tensor::zeros(vec![rows, hid]))).collect();
        let c = (0..layers).map(|_| g.input(Tensor::zeros(vec![rows, hid]))).collect();
        Ok(Unroll { proj, h, c, rows, t: 0 })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Advances one step; `prev[n]` is the class emitted at the previous step
    /// for row `n` (`None` at the first step or for rows already finished).
    /// Returns log-probabilities `[rows×dim]` of the addressed head.
    pub fn step(&mut self, net: &ProposalNet, g: &mut Graph, vars: &[Var], prev: &[Option<usize>]) -> Result<Var> {
        let heads = &net.arch.heads;
        let kind = heads.kind_at(self.t);
        let tok = token(net, kind, prev, self.rows);
        let tok = g.input(tok);
        self.advance(net, g, vars, tok, kind)
    }

    fn advance(&mut self, net: &ProposalNet, g: &mut Graph, vars: &[Var], tok: Var, kind: usize) -> Result<Var> {
        let l = &net.layout;
        let tok_in = g.linear(tok, vars[l.w_tok], None)?;
        let gates = g.add(self.proj, tok_in)?;
        let (mut h, c) = lstm_cell_from_gates(g, gates, self.h[0], self.c[0], vars[l.w_hh0])?;
        self.h[0] = h;
        self.c[0] = c;
        for (i, &(w_ih, w_hh, bias)) in l.upper.iter().enumerate() {
            let p = LstmVars { w_ih: vars[w_ih], w_hh: vars[w_hh], bias: vars[bias] };
            let (hn, cn) = lstm_cell(g, h, self.h[i + 1], self.c[i + 1], p)?;
            self.h[i + 1] = hn;
            self.c[i + 1] = cn;
            h = hn;
        }
        let (w, b) = l.heads[kind];
        let logits = g.linear(h, vars[w], Some(vars[b]))?;
        self.t += 1;
        g.log_softmax(logits)
    }
}

/// Step token: previous value one-hot (zero-padded to the widest head) then head label.
fn token(net: &ProposalNet, kind: usize, prev: &[Option<usize>], rows: usize) -> Tensor {
    let width = net.arch.token_width();
    let max_dim = net.arch.heads.max_dim();
    let mut data = vec![0.0; rows * width];
    for (n, row) in data.chunks_exact_mut(width).enumerate() {
        if let Some(Some(p)) = prev.get(n) {
            row[*p] = 1.0;
        }
        row[max_dim + kind] = 1.0;
    }
    Tensor::from_parts(vec![rows, width], data)
}

fn row(t: &Tensor, n: usize) -> &[f64] {
    let cols = t.shape()[1];
    &t.data()[n * cols..(n + 1) * cols]
}

/// Recurrent state for single-image stepping through [`ProposalNet::step`].
#[derive(Clone, Debug)]
pub struct RecurrentState {
    h: Vec<Tensor>,
    c: Vec<Tensor>,
    t: usize,
    length: Option<usize>,
}

impl RecurrentState {
    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.t
    }
}

/// Input of one recurrent step.
#[derive(Clone, Debug)]
pub struct StepInput {
    /// Image embedding, re-supplied at every step.
    pub embedding: Vec<f64>,
    /// Class emitted at the previous step; `None` for the start token.
    pub prev: Option<usize>,
    /// Head kind addressed (0 = length, 1..=K = ε, K+1 = letter).
    pub head: usize,
}

impl ProposalNet {
    /// He-uniform conv/fc weights, fan-in uniform LSTM and head weights, zero
    /// biases except an LSTM forget-gate bias of 1.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (layout, specs) = layout(&arch);
        let mut rng = seed::rng(seed, &[seed::tag::INIT]);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for s in specs {
            params.push(match s.init {
                Init::Zero => Tensor::zeros(s.shape),
                Init::FanIn(f) => Tensor::fan_in_uniform(s.shape, f, &mut rng),
                Init::He(f) => {
                    let mut t = Tensor::fan_in_uniform(s.shape, f, &mut rng);
                    t.data_mut().iter_mut().for_each(|v| *v *= 6f64.sqrt());
                    t
                }
                Init::ForgetOne(hid) => {
                    let mut t = Tensor::zeros(s.shape);
                    t.data_mut()[hid..2 * hid].fill(1.0);
                    t
                }
            });
            names.push(s.name);
        }
        Ok(ProposalNet { arch, names, params, layout })
    }

    /// Rebuilds a network from named tensors (checkpoint loading).
    pub fn from_named(arch: ArchConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let (layout, specs) = layout(&arch);
        if named.len() != specs.len() {
            return Err(Error::Format(format!("{} tensors, architecture needs {}", named.len(), specs.len())));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.into_iter().zip(named) {
            if name != spec.name || t.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} where {} {:?} was expected",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            if !t.all_finite() {
                return Err(Error::Format(format!("tensor {name} has non-finite values")));
            }
            names.push(name);
            params.push(t);
        }
        Ok(ProposalNet { arch, names, params, layout })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Zeroes every output-head weight and bias.
    pub fn zero_heads(&mut self) {
        for &(w, b) in &self.layout.heads {
            self.params[w].data_mut().fill(0.0);
            self.params[b].data_mut().fill(0.0);
        }
    }

    /// Puts the parameters in the graph, as differentiable leaves when `trainable`.
    pub(crate) fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    /// Image embedding `[B×E]` for a `[B×1×H×W]` input.
    pub(crate) fn embed_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut x = x;
        let rows = g.value(x).shape()[0];
        for (i, &(k, b)) in self.layout.conv.iter().enumerate() {
            let y = g.conv2d(x, vars[k], vars[b])?;
            x = g.relu(y);
            if self.arch.pool_after.contains(&i) {
                x = g.maxpool2d(x)?;
            }
        }
        let flat = g.value(x).len() / rows;
        x = g.reshape(x, &[rows, flat])?;
        for &(w, b) in &self.layout.fc {
            let y = g.linear(x, vars[w], Some(vars[b]))?;
            x = g.relu(y);
        }
        Ok(x)
    }

    /// Per-row teacher-forced `log q(x | y)` as a `[B]` node.
    pub(crate) fn log_q_graph(&self, g: &mut Graph, vars: &[Var], emb: Var, classes: &[Vec<usize>]) -> Result<Var> {
        let steps = classes.iter().map(Vec::len).max().unwrap_or(0);
        let mut unroll = Unroll::new(self, g, vars, emb)?;
        let mut prev: Vec<Option<usize>> = vec![None; classes.len()];
        let mut total: Option<Var> = None;
        for t in 0..steps {
            let lp = unroll.step(self, g, vars, &prev)?;
            let idx: Vec<Option<usize>> = classes.iter().map(|c| c.get(t).copied()).collect();
            let picked = g.pick(lp, &idx)?;
            total = Some(match total {
                Some(acc) => g.add(acc, picked)?,
                None => picked,
            });
            prev = idx;
        }
        total.ok_or_else(|| Error::Usage("log q of an empty batch".into()))
    }

    /// Negative log-probability of the true latents (teacher forcing), summed
    /// over the rows and divided by `n`.
    pub(crate) fn loss_graph(&self, g: &mut Graph, vars: &[Var], images: &[&Image], classes: &[Vec<usize>], n: usize) -> Result<Var> {
        let x = g.input(image_batch(images, &self.arch)?);
        let emb = self.embed_graph(g, vars, x)?;
        let lq = self.log_q_graph(g, vars, emb, classes)?;
        let total = g.sum(lq);
        Ok(g.scale(total, -1.0 / n as f64))
    }

    /// Training loss on a batch of `(latent, image)` pairs.
    pub fn loss(&self, style: &StyleSpec, batch: &[(Latent, Image)]) -> Result<f64> {
        self.arch.check_style(style)?;
        let classes = batch.iter().map(|(x, _)| latent_classes(x, style)).collect::<Result<Vec<_>>>()?;
        let images: Vec<&Image> = batch.iter().map(|(_, y)| y).collect();
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let loss = self.loss_graph(&mut g, &vars, &images, &classes, images.len())?;
        Ok(g.value(loss).item())
    }

    /// Loss and its gradient with respect to every parameter tensor.
    pub fn loss_and_grad(&self, style: &StyleSpec, batch: &[(Latent, Image)]) -> Result<(f64, Vec<Tensor>)> {
        self.arch.check_style(style)?;
        let classes = batch.iter().map(|(x, _)| latent_classes(x, style)).collect::<Result<Vec<_>>>()?;
        let images: Vec<&Image> = batch.iter().map(|(_, y)| y).collect();
        self.loss_and_grad_classes(&images, &classes)
    }

    /// The batch is processed in fixed-size chunks whose losses and gradients
    /// are summed in order, which keeps activations small enough to stay in
    /// reused heap memory.
    pub(crate) fn loss_and_grad_classes(&self, images: &[&Image], classes: &[Vec<usize>]) -> Result<(f64, Vec<Tensor>)> {
        let n = images.len();
        let mut loss = 0.0;
        let mut total: Option<Vec<Tensor>> = None;
        for (imgs, cls) in images.chunks(MICRO_BATCH).zip(classes.chunks(MICRO_BATCH)) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, true);
            let l = self.loss_graph(&mut g, &vars, imgs, cls, n)?;
            let mut grads = g.backward(l)?;
            loss += g.value(l).item();
            let part: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            match &mut total {
                Some(acc) => acc.iter_mut().zip(&part).for_each(|(a, p)| a.add_assign(p)),
                None => total = Some(part),
            }
        }
        let grads = total.ok_or_else(|| Error::Usage("loss of an empty batch".into()))?;
        Ok((loss, grads))
    }

    /// Image embedding `CNN(y)`.
    pub fn embed(&self, y: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.input(image_batch(&[y], &self.arch)?);
        let emb = self.embed_graph(&mut g, &vars, x)?;
        Ok(g.value(emb).data().to_vec())
    }

    pub fn initial_state(&self) -> RecurrentState {
        let hid = self.arch.lstm_hidden;
        let zeros = || (0..self.arch.lstm_layers).map(|_| Tensor::zeros(vec![1, hid])).collect();
        RecurrentState { h: zeros(), c: zeros(), t: 0, length: None }
    }

    /// One recurrent step for a single image; returns the addressed head's
    /// probability vector and advances `state`.
    ///
    /// The head label must follow the fixed schedule (length, then each ε,
    /// then one letter per glyph); anything else is a usage error.
    pub fn step(&self, state: &mut RecurrentState, input: &StepInput) -> Result<Vec<f64>> {
        let heads = &self.arch.heads;
        let t = state.t;
        let expected = heads.kind_at(t);
        if input.head != expected {
            return Err(Error::Usage(format!("step {} addresses head {}, schedule expects head {expected}", t + 1, input.head)));
        }
        match (t, input.prev) {
            (0, None) => {}
            (0, Some(_)) => return Err(Error::Usage("the first step takes the start token".into())),
            (_, None) => return Err(Error::Usage(format!("step {} needs the previous value", t + 1))),
            (_, Some(p)) if p >= heads.dim(heads.kind_at(t - 1)) => {
                return Err(Error::Usage(format!("previous value {p} outside head {}", heads.kind_at(t - 1))))
            }
            _ => {}
        }
        let length = match (t, input.prev) {
            (1, Some(p)) => Some(heads.length_min + p),
            _ => state.length,
        };
        if let Some(len) = length {
            let total = 1 + heads.epsilons.len() + len;
            if t >= total {
                return Err(Error::Usage(format!("step {} past the end of a {total}-step schedule", t + 1)));
            }
        }
        if input.embedding.len() != self.arch.embedding_width() {
            return Err(config_err!("embedding has {} values, expected {}", input.embedding.len(), self.arch.embedding_width()));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let emb = g.input(Tensor::new(vec![1, input.embedding.len()], input.embedding.clone())?);
        let mut unroll = Unroll::new(self, &mut g, &vars, emb)?;
        unroll.h = state.h.iter().map(|h| g.input(h.clone())).collect();
        unroll.c = state.c.iter().map(|c| g.input(c.clone())).collect();
        unroll.t = t;
        let lp = unroll.step(self, &mut g, &vars, &[input.prev])?;
        state.length = length;
        state.h = unroll.h.iter().map(|&v| g.value(v).clone()).collect();
        state.c = unroll.c.iter().map(|&v| g.value(v).clone()).collect();
        state.t += 1;
        Ok(g.value(lp).data().iter().map(|v| v.exp()).collect())
    }

    /// Greedy decode of a batch of images.
    pub fn decode_batch(&self, style: &StyleSpec, images: &[&Image]) -> Result<Vec<Latent>> {
        self.arch.check_style(style)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.input(image_batch(images, &self.arch)?);
        let emb = self.embed_graph(&mut g, &vars, x)?;
        let mut unroll = Unroll::new(self, &mut g, &vars, emb)?;
        let k = style.k();
        let l_min = style.l_min;
        let mut classes: Vec<Vec<usize>> = vec![Vec::new(); images.len()];
        let mut prev = vec![None; images.len()];
        loop {
            let t = unroll.t();
            let active: Vec<bool> = classes.iter().map(|c| t == 0 || t < 1 + k + l_min + c[0]).collect();
            if !active.iter().any(|&a| a) {
                break;
            }
            let lp = unroll.step(self, &mut g, &vars, &prev)?;
            let lpv = g.value(lp);
            for (n, c) in classes.iter_mut().enumerate() {
                prev[n] = if active[n] {
                    let v = argmax(row(lpv, n));
                    c.push(v);
                    Some(v)
                } else {
                    None
                };
            }
        }
        Ok(classes.iter().map(|c| latent_from_classes(c, style)).collect())
    }

    /// Greedy (argmax) decode, lowest index on ties.
    pub fn decode_map(&self, style: &StyleSpec, y: &Image) -> Result<Latent> {
        Ok(self.decode_batch(style, &[y])?.remove(0))
    }

    /// Ancestral samples for one image, one rng per draw. Returns each latent
    /// with its exact log-density under the proposal.
    pub fn sample_many<R: Rng>(&self, style: &StyleSpec, y: &Image, rngs: &mut [R]) -> Result<Vec<(Latent, f64)>> {
        self.arch.check_style(style)?;
        let rows = rngs.len();
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.input(image_batch(&[y], &self.arch)?);
        let emb1 = self.embed_graph(&mut g, &vars, x)?;
        let e = g.value(emb1).data().to_vec();
        let tiled: Vec<f64> = e.iter().copied().cycle().take(rows * e.len()).collect();
        let emb = g.input(Tensor::new(vec![rows, e.len()], tiled)?);
        let mut unroll = Unroll::new(self, &mut g, &vars, emb)?;
        let k = style.k();
        let l_min = style.l_min;
        let mut classes: Vec<Vec<usize>> = vec![Vec::new(); rows];
        let mut log_q = vec![0.0; rows];
        let mut prev = vec![None; rows];
        loop {
            let t = unroll.t();
            let active: Vec<bool> = classes.iter().map(|c| t == 0 || t < 1 + k + l_min + c[0]).collect();
            if !active.iter().any(|&a| a) {
                break;
            }
            let lp = unroll.step(self, &mut g, &vars, &prev)?;
            let lpv = g.value(lp);
            for n in 0..rows {
                prev[n] = if active[n] {
                    let r = row(lpv, n);
                    let v = sample_categorical(r, &mut rngs[n]);
                    log_q[n] += r[v];
                    classes[n].push(v);
                    Some(v)
                } else {
                    None
                };
            }
        }
        Ok(classes.iter().zip(log_q).map(|(c, lq)| (latent_from_classes(c, style), lq)).collect())
    }

    /// One ancestral sample `x ~ q(·|y)` with `log q(x|y)`.
    pub fn sample_proposal<R: Rng>(&self, style: &StyleSpec, y: &Image, rng: &mut R) -> Result<(Latent, f64)> {
        Ok(self.sample_many(style, y, std::slice::from_mut(rng))?.remove(0))
    }

    /// Teacher-forced `log q(x|y)` for several latents given one image.
    pub fn score_many(&self, style: &StyleSpec, y: &Image, latents: &[Latent]) -> Result<Vec<f64>> {
        self.arch.check_style(style)?;
        let classes = latents.iter().map(|x| latent_classes(x, style)).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.input(image_batch(&[y], &self.arch)?);
        let emb1 = self.embed_graph(&mut g, &vars, x)?;
        let e = g.value(emb1).data().to_vec();
        let rows = latents.len();
        let tiled: Vec<f64> = e.iter().copied().cycle().take(rows * e.len()).collect();
        let emb = g.input(Tensor::new(vec![rows, e.len()], tiled)?);
        let lq = self.log_q_graph(&mut g, &vars, emb, &classes)?;
        Ok(g.value(lq).data().to_vec())
    }

    /// Teacher-forced `log q(x|y)`.
    pub fn score(&self, style: &StyleSpec, y: &Image, x: &Latent) -> Result<f64> {
        Ok(self.score_many(style, y, std::slice::from_ref(x))?[0])
    }
}
