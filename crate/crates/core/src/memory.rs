//! Memory cells, the per-token controller, and the memory update.
//!
//! Each step computes, in order: the entity probability `e`, a similarity per cell, the
//! masked coref scores, the coref/new-entity split `(c, n)`, the overwrite distribution
//! `o` (hard argmin-usage at inference, Gumbel-Softmax at training), and finally the
//! content and usage updates.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Mlp, MlpCache, Parameterized};
use crate::tensor::{sigmoid, softmax, softmax_backward, Tensor};

/// Subtracted from the coref score of unused cells. `exp(-1e4)` is exactly zero in `f64`.
pub const SENTINEL: f64 = 1e4;
/// Uniform draws for Gumbel noise are taken from `[ε, 1 − ε]`.
pub const GUMBEL_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    LearnedInit,
    FixedKey,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::LearnedInit, Variant::FixedKey];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Vanilla => "vanilla",
            Variant::LearnedInit => "learned_init",
            Variant::FixedKey => "fixed_key",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub num_cells: usize,
    pub cell_dim: usize,
    pub variant: Variant,
    /// Leading dimensions held fixed under [`Variant::FixedKey`].
    pub key_dim: usize,
    pub gamma: f64,
    pub temperature: f64,
    pub mode: Mode,
    /// Cells with usage at or below this value cannot receive coref mass.
    pub coref_usage_threshold: f64,
}

impl MemoryConfig {
    pub fn new(num_cells: usize, cell_dim: usize, variant: Variant) -> Self {
        MemoryConfig {
            num_cells,
            cell_dim,
            variant,
            key_dim: 20.min(cell_dim),
            gamma: 0.98,
            temperature: 1.0,
            mode: Mode::Infer,
            coref_usage_threshold: 0.0,
        }
    }

    pub fn value_dim(&self) -> usize {
        self.cell_dim - self.key_dim
    }

    /// First content dimension that the update may change.
    fn writable_from(&self) -> usize {
        match self.variant {
            Variant::FixedKey => self.key_dim,
            _ => 0,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.num_cells == 0 {
            return Err(Error::InvalidArgument("memory needs at least one cell".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.variant == Variant::FixedKey && (self.key_dim == 0 || self.key_dim >= self.cell_dim) {
            return Err(Error::InvalidArgument(format!(
                "fixed-key split {} + {} does not fit cell dim {}",
                self.key_dim,
                self.value_dim(),
                self.cell_dim
            )));
        }
        Ok(())
    }
}

/// Widths of the controller MLPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerShape {
    pub mlp_hidden: usize,
    /// Hidden layers in the entity and similarity MLPs.
    pub mlp_layers: usize,
    /// Hidden layers in the coref-update MLP (0 means a single affine map).
    pub update_layers: usize,
}

impl Default for ControllerShape {
    fn default() -> Self {
        ControllerShape {
            mlp_hidden: 300,
            mlp_layers: 2,
            update_layers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    /// `H → … → 1`, entity mention logit.
    pub entity: Mlp,
    /// `3H + 1 → … → 1`, cell similarity.
    pub similarity: Mlp,
    /// `2H → … → H`, coref update.
    pub update: Mlp,
    /// `N × H` (learned init) or `N × key_dim` (fixed key); absent for vanilla memory.
    pub cell_init: Option<Tensor>,
}

impl ControllerParams {
    fn dims(config: &MemoryConfig, shape: &ControllerShape) -> [Vec<usize>; 3] {
        let h = config.cell_dim;
        let hidden = |input: usize, layers: usize, out: usize| {
            let mut d = vec![input];
            d.extend(std::iter::repeat_n(shape.mlp_hidden, layers));
            d.push(out);
            d
        };
        [
            hidden(h, shape.mlp_layers, 1),
            hidden(3 * h + 1, shape.mlp_layers, 1),
            hidden(2 * h, shape.update_layers, h),
        ]
    }

    fn cell_init_shape(config: &MemoryConfig) -> Option<[usize; 2]> {
        match config.variant {
            Variant::Vanilla => None,
            Variant::LearnedInit => Some([config.num_cells, config.cell_dim]),
            Variant::FixedKey => Some([config.num_cells, config.key_dim]),
        }
    }

    pub fn init<R: Rng + ?Sized>(config: &MemoryConfig, shape: &ControllerShape, rng: &mut R) -> Self {
        let [d1, d2, d3] = Self::dims(config, shape);
        let entity = Mlp::init(&d1, rng);
        let similarity = Mlp::init(&d2, rng);
        let update = Mlp::init(&d3, rng);
        let bound = 1.0 / (config.cell_dim as f64).sqrt();
        let cell_init = Self::cell_init_shape(config).map(|s| Tensor::uniform(&s, bound, rng));
        ControllerParams {
            entity,
            similarity,
            update,
            cell_init,
        }
    }

    pub fn zeros(config: &MemoryConfig, shape: &ControllerShape) -> Self {
        let [d1, d2, d3] = Self::dims(config, shape);
        ControllerParams {
            entity: Mlp::zeros(&d1),
            similarity: Mlp::zeros(&d2),
            update: Mlp::zeros(&d3),
            cell_init: Self::cell_init_shape(config).map(|s| Tensor::zeros(&s)),
        }
    }

    pub fn check(&self, config: &MemoryConfig) -> Result<()> {
        let h = config.cell_dim;
        let ok = self.entity.input_dim() == h
            && self.entity.output_dim() == 1
            && self.similarity.input_dim() == 3 * h + 1
            && self.similarity.output_dim() == 1
            && self.update.input_dim() == 2 * h
            && self.update.output_dim() == h;
        if !ok {
            return Err(Error::Shape(format!("controller MLPs do not match cell dim {h}")));
        }
        let want = Self::cell_init_shape(config);
        let have = self.cell_init.as_ref().map(|t| [t.rows(), t.cols()]);
        if want != have {
            return Err(Error::Shape(format!(
                "{} memory expects cell parameters {want:?}, found {have:?}",
                config.variant
            )));
        }
        Ok(())
    }
}

impl Parameterized for ControllerParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.entity.visit(&join(prefix, "entity"), f);
        self.similarity.visit(&join(prefix, "similarity"), f);
        self.update.visit(&join(prefix, "update"), f);
        if let Some(t) = &self.cell_init {
            f(&join(prefix, "cell_init"), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.entity.visit_mut(&join(prefix, "entity"), f);
        self.similarity.visit_mut(&join(prefix, "similarity"), f);
        self.update.visit_mut(&join(prefix, "update"), f);
        if let Some(t) = &mut self.cell_init {
            f(&join(prefix, "cell_init"), t);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    /// `N × H` cell contents.
    pub content: Tensor,
    pub usage: Vec<f64>,
}

impl MemoryState {
    pub fn num_cells(&self) -> usize {
        self.usage.len()
    }
}

/// Interpretable per-token controller outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub e: f64,
    pub sim: Vec<f64>,
    pub cs: Vec<f64>,
    pub c: Vec<f64>,
    pub o: Vec<f64>,
    pub n: f64,
    /// Usage after the update.
    pub u: Vec<f64>,
}

pub fn init_memory(config: &MemoryConfig, params: &ControllerParams) -> MemoryState {
    let (n, h) = (config.num_cells, config.cell_dim);
    let mut content = Tensor::zeros(&[n, h]);
    match (config.variant, &params.cell_init) {
        (Variant::LearnedInit, Some(init)) => content.data_mut().copy_from_slice(init.data()),
        (Variant::FixedKey, Some(keys)) => {
            for i in 0..n {
                content.row_mut(i)[..config.key_dim].copy_from_slice(keys.row(i));
            }
        }
        _ => {}
    }
    MemoryState {
        content,
        usage: vec![0.0; n],
    }
}

pub fn entity_probability(params: &ControllerParams, h: &[f64]) -> f64 {
    sigmoid(params.entity.forward(h)[0])
}

fn similarity_input(h: &[f64], m: &[f64], u: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(3 * h.len() + 1);
    x.extend_from_slice(h);
    x.extend_from_slice(m);
    x.extend(h.iter().zip(m).map(|(a, b)| a * b));
    x.push(u);
    x
}

/// `MLP₂([h; m; h ⊙ m; u])`.
pub fn similarity(params: &ControllerParams, h: &[f64], m: &[f64], u: f64) -> f64 {
    params.similarity.forward(&similarity_input(h, m, u))[0]
}

/// Similarity minus [`SENTINEL`] for cells whose previous usage is at or below `threshold`.
pub fn coref_scores(sims: &[f64], usage_prev: &[f64], threshold: f64) -> Vec<f64> {
    sims.iter()
        .zip(usage_prev)
        .map(|(&s, &u)| if u > threshold { s } else { s - SENTINEL })
        .collect()
}

/// `(c₁..c_N, n) = e · softmax(cs₁..cs_N, 0)`.
pub fn operation_distribution(e: f64, cs: &[f64]) -> (Vec<f64>, f64) {
    let (c, n, _) = distribution_with_probs(e, cs);
    (c, n)
}

fn distribution_with_probs(e: f64, cs: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
    let mut logits = cs.to_vec();
    logits.push(0.0);
    let p = softmax(&logits);
    let c = p[..cs.len()].iter().map(|v| e * v).collect();
    let n = e * p[cs.len()];
    (c, n, p)
}

/// How inference resolves several cells sharing the minimal usage.
pub enum TieBreak<'a> {
    Uniform(&'a mut dyn RngCore),
    /// Highest similarity among tied unused cells; uniform otherwise.
    Similarity(&'a [f64], &'a mut dyn RngCore),
}

/// Hard overwrite: all of `n` goes to one least-used cell. Returns `(o, chosen cell)`.
pub fn overwrite_infer(n: f64, usage_prev: &[f64], tie: TieBreak<'_>) -> (Vec<f64>, usize) {
    let min = usage_prev.iter().copied().fold(f64::INFINITY, f64::min);
    let tied: Vec<usize> = (0..usage_prev.len()).filter(|&i| usage_prev[i] == min).collect();
    let chosen = match tie {
        _ if tied.len() == 1 => tied[0],
        TieBreak::Similarity(sims, _) if min == 0.0 => {
            // first index wins exact similarity ties
            let mut best = tied[0];
            for &i in &tied[1..] {
                if sims[i] > sims[best] {
                    best = i;
                }
            }
            best
        }
        TieBreak::Similarity(_, rng) | TieBreak::Uniform(rng) => tied[rng.random_range(0..tied.len())],
    };
    let mut o = vec![0.0; usage_prev.len()];
    o[chosen] = n;
    (o, chosen)
}

/// One standard Gumbel draw per cell from `u ~ U[ε, 1 − ε]`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let u = GUMBEL_EPS + (1.0 - 2.0 * GUMBEL_EPS) * rng.random::<f64>();
            -(-u.ln()).ln()
        })
        .collect()
}

fn gumbel_weights(usage_prev: &[f64], tau: f64, gumbel: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = usage_prev
        .iter()
        .zip(gumbel)
        .map(|(u, g)| (1.0 - u + g) / tau)
        .collect();
    softmax(&logits)
}

/// Relaxed overwrite `o = n · softmax((1 − u + g) / τ)` with fixed Gumbel draws `g`.
pub fn overwrite_train(n: f64, usage_prev: &[f64], tau: f64, gumbel: &[f64]) -> Vec<f64> {
    gumbel_weights(usage_prev, tau, gumbel).into_iter().map(|w| n * w).collect()
}

/// Randomness consumed by one step.
pub enum StepNoise<'a> {
    /// Pre-drawn Gumbel values, one per cell (training).
    Gumbel(&'a [f64]),
    /// Tie-breaking source (inference).
    Ties(&'a mut dyn RngCore),
}

/// Everything the backward pass needs from one step.
#[derive(Clone, Debug)]
pub struct StepCache {
    h: Vec<f64>,
    content_prev: Tensor,
    entity: MlpCache,
    similarity: Vec<MlpCache>,
    probs: Vec<f64>,
    overwrite: Overwrite,
    update: Vec<MlpCache>,
    update_out: Vec<Vec<f64>>,
    unclamped: Vec<bool>,
    pub flops: u64,
}

#[derive(Clone, Debug)]
enum Overwrite {
    Soft { weights: Vec<f64>, tau: f64 },
    Hard { cell: usize },
}

/// One controller step; public entry point with the step's randomness drawn from `rng`.
pub fn memory_step<R: RngCore>(
    state: &MemoryState,
    h: &[f64],
    params: &ControllerParams,
    config: &MemoryConfig,
    rng: &mut R,
) -> (MemoryState, StepTrace) {
    let (next, trace, _) = match config.mode {
        Mode::Train => {
            let g = sample_gumbel(rng, config.num_cells);
            step_forward(state, h, params, config, StepNoise::Gumbel(&g))
        }
        Mode::Infer => step_forward(state, h, params, config, StepNoise::Ties(rng)),
    };
    (next, trace)
}

pub fn step_forward(
    state: &MemoryState,
    h: &[f64],
    params: &ControllerParams,
    config: &MemoryConfig,
    noise: StepNoise<'_>,
) -> (MemoryState, StepTrace, StepCache) {
    let n_cells = config.num_cells;
    let dim = config.cell_dim;
    let mut flops = 0u64;

    let (logit, entity_cache) = params.entity.forward_cached(h);
    flops += params.entity.flops();
    let e = sigmoid(logit[0]);

    let mut sims = Vec::with_capacity(n_cells);
    let mut sim_caches = Vec::with_capacity(n_cells);
    for i in 0..n_cells {
        let x = similarity_input(h, state.content.row(i), state.usage[i]);
        let (s, cache) = params.similarity.forward_cached(&x);
        sims.push(s[0]);
        sim_caches.push(cache);
        flops += params.similarity.flops() + dim as u64;
    }

    let cs = coref_scores(&sims, &state.usage, config.coref_usage_threshold);
    let (c, n, probs) = distribution_with_probs(e, &cs);

    let (o, overwrite) = match noise {
        StepNoise::Gumbel(g) => {
            let weights = gumbel_weights(&state.usage, config.temperature, g);
            let o = weights.iter().map(|w| n * w).collect();
            (
                o,
                Overwrite::Soft {
                    weights,
                    tau: config.temperature,
                },
            )
        }
        StepNoise::Ties(rng) => {
            let tie = if config.variant == Variant::Vanilla {
                TieBreak::Uniform(rng)
            } else {
                TieBreak::Similarity(&sims, rng)
            };
            let (o, cell) = overwrite_infer(n, &state.usage, tie);
            (o, Overwrite::Hard { cell })
        }
    };

    let from = config.writable_from();
    let mut content = state.content.clone();
    let mut usage = vec![0.0; n_cells];
    let mut update_caches = Vec::with_capacity(n_cells);
    let mut update_out = Vec::with_capacity(n_cells);
    let mut unclamped = Vec::with_capacity(n_cells);
    for i in 0..n_cells {
        let m = state.content.row(i);
        let mut x = Vec::with_capacity(2 * dim);
        x.extend_from_slice(h);
        x.extend_from_slice(m);
        let (f, cache) = params.update.forward_cached(&x);
        flops += params.update.flops() + 3 * dim as u64;
        let keep = 1.0 - (o[i] + c[i]);
        let row = content.row_mut(i);
        for k in from..dim {
            row[k] = keep * m[k] + o[i] * h[k] + c[i] * f[k];
        }
        let raw = o[i] + c[i] + config.gamma * state.usage[i];
        unclamped.push(raw < 1.0);
        usage[i] = raw.min(1.0);
        update_caches.push(cache);
        update_out.push(f);
    }

    let trace = StepTrace {
        e,
        sim: sims,
        cs,
        c,
        o,
        n,
        u: usage.clone(),
    };
    let cache = StepCache {
        h: h.to_vec(),
        content_prev: state.content.clone(),
        entity: entity_cache,
        similarity: sim_caches,
        probs,
        overwrite,
        update: update_caches,
        update_out,
        unclamped,
        flops,
    };
    (MemoryState { content, usage }, trace, cache)
}

/// Upstream gradients arriving at one step.
pub struct StepGrads<'a> {
    /// w.r.t. the post-step content (`N × H`).
    pub content: &'a Tensor,
    /// w.r.t. the post-step usage.
    pub usage: &'a [f64],
    /// Direct loss gradients on this step's `o`, `c` and `e`.
    pub o: &'a [f64],
    pub c: &'a [f64],
    pub e: f64,
}

/// Reverse of [`step_forward`]. Accumulates parameter gradients into `grads` and the
/// token-state gradient into `d_h`; returns gradients for the previous content and usage.
pub fn step_backward(
    params: &ControllerParams,
    config: &MemoryConfig,
    cache: &StepCache,
    trace: &StepTrace,
    upstream: StepGrads<'_>,
    grads: &mut ControllerParams,
    d_h: &mut [f64],
) -> (Tensor, Vec<f64>) {
    let n_cells = config.num_cells;
    let dim = config.cell_dim;
    let from = config.writable_from();
    let h = &cache.h;

    let mut d_o = upstream.o.to_vec();
    let mut d_c = upstream.c.to_vec();
    let mut d_content = Tensor::zeros(&[n_cells, dim]);
    let mut d_usage = vec![0.0; n_cells];

    for i in 0..n_cells {
        let (o, c) = (trace.o[i], trace.c[i]);
        if cache.unclamped[i] {
            let du = upstream.usage[i];
            d_o[i] += du;
            d_c[i] += du;
            d_usage[i] += config.gamma * du;
        }

        let m = cache.content_prev.row(i);
        let f = &cache.update_out[i];
        let g = upstream.content.row(i);
        let keep = 1.0 - (o + c);
        let mut d_f = vec![0.0; dim];
        let mut any = false;
        {
            let dm = d_content.row_mut(i);
            for k in 0..from {
                dm[k] += g[k];
            }
            for k in from..dim {
                d_o[i] += g[k] * (h[k] - m[k]);
                d_c[i] += g[k] * (f[k] - m[k]);
                dm[k] += keep * g[k];
                d_h[k] += o * g[k];
                d_f[k] = c * g[k];
                any |= d_f[k] != 0.0;
            }
        }
        if any {
            let dx = params.update.backward(&cache.update[i], &d_f, &mut grads.update);
            for k in 0..dim {
                d_h[k] += dx[k];
            }
            let dm = d_content.row_mut(i);
            for k in 0..dim {
                dm[k] += dx[dim + k];
            }
        }
    }

    let mut d_n = 0.0;
    match &cache.overwrite {
        Overwrite::Soft { weights, tau } => {
            let d_w: Vec<f64> = d_o.iter().map(|g| trace.n * g).collect();
            d_n += d_o.iter().zip(weights).map(|(g, w)| g * w).sum::<f64>();
            let d_logit = softmax_backward(weights, &d_w);
            for i in 0..n_cells {
                d_usage[i] -= d_logit[i] / tau;
            }
        }
        Overwrite::Hard { cell } => d_n += d_o[*cell],
    }

    let p = &cache.probs;
    let e = trace.e;
    let mut d_e = upstream.e + d_n * p[n_cells];
    let mut d_p = Vec::with_capacity(n_cells + 1);
    for i in 0..n_cells {
        d_e += d_c[i] * p[i];
        d_p.push(e * d_c[i]);
    }
    d_p.push(e * d_n);
    let d_cs = softmax_backward(p, &d_p);

    for i in 0..n_cells {
        let ds = d_cs[i];
        if ds == 0.0 {
            continue;
        }
        let dx = params.similarity.backward(&cache.similarity[i], &[ds], &mut grads.similarity);
        let m = cache.content_prev.row(i);
        let dm = d_content.row_mut(i);
        for k in 0..dim {
            d_h[k] += dx[k] + dx[2 * dim + k] * m[k];
            dm[k] += dx[dim + k] + dx[2 * dim + k] * h[k];
        }
        d_usage[i] += dx[3 * dim];
    }

    let d_logit = d_e * e * (1.0 - e);
    if d_logit != 0.0 {
        let dx = params.entity.backward(&cache.entity, &[d_logit], &mut grads.entity);
        for k in 0..dim {
            d_h[k] += dx[k];
        }
    }
    (d_content, d_usage)
}

/// Routes the gradient on the initial content into the variant's cell parameters.
pub fn init_backward(config: &MemoryConfig, d_content: &Tensor, grads: &mut ControllerParams) {
    let Some(g) = grads.cell_init.as_mut() else {
        return;
    };
    match config.variant {
        Variant::Vanilla => {}
        Variant::LearnedInit => {
            for (a, b) in g.data_mut().iter_mut().zip(d_content.data()) {
                *a += b;
            }
        }
        Variant::FixedKey => {
            for i in 0..config.num_cells {
                let src = &d_content.row(i)[..config.key_dim];
                for (a, b) in g.row_mut(i).iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
    }
}
