//! The full entity tracker: encoder, controller, and the unrolled document pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorefInstance, Document};
use crate::encoder::{Encoder, EncoderCache, HiddenSequence};
use crate::error::{Error, Result};
use crate::link::TraceMatrix;
use crate::memory::{
    init_backward, init_memory, sample_gumbel, step_backward, step_forward, ControllerParams,
    ControllerShape, MemoryConfig, Mode, StepCache, StepGrads, StepNoise, StepTrace, Variant,
};
use crate::nn::{join, Parameterized};
use crate::objective::{total_loss_with_grad, LossBreakdown, LossWeights};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_cells: usize,
    pub variant: Variant,
    pub key_dim: usize,
    pub gamma: f64,
    pub dropout: f64,
    pub coref_usage_threshold: f64,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    pub update_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 3072,
            hidden_dim: 300,
            num_cells: 8,
            variant: Variant::Vanilla,
            key_dim: 20,
            gamma: 0.98,
            dropout: 0.5,
            coref_usage_threshold: 0.0,
            mlp_hidden: 300,
            mlp_layers: 2,
            update_layers: 0,
        }
    }
}

impl ModelConfig {
    pub fn memory(&self, mode: Mode, temperature: f64) -> MemoryConfig {
        MemoryConfig {
            num_cells: self.num_cells,
            cell_dim: self.hidden_dim,
            variant: self.variant,
            key_dim: self.key_dim,
            gamma: self.gamma,
            temperature,
            mode,
            coref_usage_threshold: self.coref_usage_threshold,
        }
    }

    pub fn shape(&self) -> ControllerShape {
        ControllerShape {
            mlp_hidden: self.mlp_hidden,
            mlp_layers: self.mlp_layers,
            update_layers: self.update_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::InvalidArgument("mlp_hidden must be positive".into()));
        }
        self.memory(Mode::Infer, 1.0).validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PetraModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub controller: ControllerParams,
}

impl Parameterized for PetraModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.controller.visit(&join(prefix, "controller"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.controller.visit_mut(&join(prefix, "controller"), f);
    }
}

/// Stable 64-bit seed from a global seed and any number of labels.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Randomness for one training pass over a document, drawn up front so that
/// repeated evaluations (finite differences) see identical draws.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentNoise {
    pub dropout_mask: Option<Vec<f64>>,
    /// `T × N` standard Gumbel draws.
    pub gumbel: Vec<f64>,
}

impl DocumentNoise {
    pub fn draw(model: &PetraModel, steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dropout_mask = (model.config.dropout > 0.0).then(|| model.encoder.dropout_mask(steps, &mut rng));
        let gumbel = sample_gumbel(&mut rng, steps * model.config.num_cells);
        DocumentNoise { dropout_mask, gumbel }
    }

    /// Gumbel draws only; no dropout.
    pub fn without_dropout(mut self) -> Self {
        self.dropout_mask = None;
        self
    }
}

pub enum Pass<'a> {
    Train { temperature: f64, noise: &'a DocumentNoise },
    Infer { seed: u64 },
}

/// Forward state of one document, kept for the backward pass.
pub struct DocumentForward {
    pub hidden: HiddenSequence,
    pub traces: Vec<StepTrace>,
    encoder: EncoderCache,
    steps: Vec<StepCache>,
    memory: MemoryConfig,
    /// Multiply-accumulate count of the controller steps.
    pub flops: u64,
}

impl DocumentForward {
    pub fn trace_matrix(&self) -> TraceMatrix {
        TraceMatrix::from_traces(&self.traces)
    }

    pub fn entity_probabilities(&self) -> Vec<f64> {
        self.traces.iter().map(|t| t.e).collect()
    }
}

impl PetraModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(config.input_dim, config.hidden_dim, config.dropout, &mut rng);
        let memory = config.memory(Mode::Infer, 1.0);
        let controller = ControllerParams::init(&memory, &config.shape(), &mut rng);
        Ok(PetraModel {
            config,
            encoder,
            controller,
        })
    }

    /// Same architecture, all parameters zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.encoder.input_dim() != self.config.input_dim
            || self.encoder.hidden_dim() != self.config.hidden_dim
        {
            return Err(Error::Shape("encoder does not match model config".into()));
        }
        self.controller.check(&self.config.memory(Mode::Infer, 1.0))
    }

    pub fn forward_tensor(&self, inputs: &Tensor, doc_id: &str, pass: Pass<'_>) -> Result<DocumentForward> {
        let steps = inputs.rows();
        let (memory, mask) = match &pass {
            Pass::Train { temperature, noise } => {
                if noise.gumbel.len() != steps * self.config.num_cells {
                    return Err(Error::Shape("Gumbel draws do not match T × N".into()));
                }
                (self.config.memory(Mode::Train, *temperature), noise.dropout_mask.clone())
            }
            Pass::Infer { .. } => (self.config.memory(Mode::Infer, 1.0), None),
        };
        let (hidden, encoder) = self.encoder.forward(inputs, mask)?;
        let mut state = init_memory(&memory, &self.controller);
        let mut traces = Vec::with_capacity(steps);
        let mut caches = Vec::with_capacity(steps);
        let mut flops = 0;
        let mut tie_rng = match &pass {
            Pass::Infer { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
            Pass::Train { .. } => None,
        };
        let n = self.config.num_cells;
        for t in 0..steps {
            let noise = match (&pass, tie_rng.as_mut()) {
                (Pass::Train { noise, .. }, _) => StepNoise::Gumbel(&noise.gumbel[t * n..(t + 1) * n]),
                (Pass::Infer { .. }, Some(rng)) => StepNoise::Ties(rng),
                (Pass::Infer { .. }, None) => unreachable!("inference always has a tie rng"),
            };
            let (next, trace, cache) = step_forward(&state, hidden.row(t), &self.controller, &memory, noise);
            if !trace.e.is_finite() || trace.o.iter().chain(&trace.c).any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    doc: doc_id.to_string(),
                    step: t,
                    detail: "non-finite controller output".into(),
                });
            }
            flops += cache.flops;
            state = next;
            traces.push(trace);
            caches.push(cache);
        }
        Ok(DocumentForward {
            hidden,
            traces,
            encoder,
            steps: caches,
            memory,
            flops,
        })
    }

    pub fn forward(&self, doc: &Document, pass: Pass<'_>) -> Result<DocumentForward> {
        self.forward_tensor(&doc.embeddings.to_tensor(), &doc.id, pass)
    }

    /// Inference traces with ties broken from `seed`.
    pub fn infer(&self, doc: &Document, seed: u64) -> Result<Vec<StepTrace>> {
        Ok(self.forward(doc, Pass::Infer { seed })?.traces)
    }

    /// Accumulates into `grads` the gradient of a loss whose partials w.r.t. `o`, `c`
    /// (row-major `T × N`) and `e` are given.
    pub fn backward(&self, fwd: &DocumentForward, d_o: &[f64], d_c: &[f64], d_e: &[f64], grads: &mut PetraModel) {
        let steps = fwd.traces.len();
        let (n, h) = (self.config.num_cells, self.config.hidden_dim);
        let mut d_hidden = Tensor::zeros(&[steps, h]);
        let mut d_content = Tensor::zeros(&[n, h]);
        let mut d_usage = vec![0.0; n];
        for t in (0..steps).rev() {
            let upstream = StepGrads {
                content: &d_content,
                usage: &d_usage,
                o: &d_o[t * n..(t + 1) * n],
                c: &d_c[t * n..(t + 1) * n],
                e: d_e[t],
            };
            let (dc, du) = step_backward(
                &self.controller,
                &fwd.memory,
                &fwd.steps[t],
                &fwd.traces[t],
                upstream,
                &mut grads.controller,
                d_hidden.row_mut(t),
            );
            d_content = dc;
            d_usage = du;
        }
        init_backward(&fwd.memory, &d_content, &mut grads.controller);
        self.encoder.backward(&fwd.encoder, &d_hidden, &mut grads.encoder);
    }

    /// Training loss of one instance and its gradient (accumulated into `grads`).
    pub fn loss_and_grad(
        &self,
        inst: &CorefInstance,
        temperature: f64,
        noise: &DocumentNoise,
        lambda: f64,
        weights: &LossWeights,
        grads: &mut PetraModel,
    ) -> Result<LossBreakdown> {
        let fwd = self.forward(&inst.doc, Pass::Train { temperature, noise })?;
        let e = fwd.entity_probabilities();
        let (loss, g) = total_loss_with_grad(inst, &fwd.trace_matrix(), &e, lambda, weights);
        if !loss.total.is_finite() {
            return Err(Error::Numeric {
                doc: inst.doc.id.clone(),
                step: inst.doc.len(),
                detail: format!("loss is {}", loss.total),
            });
        }
        self.backward(&fwd, &g.o, &g.c, &g.e, grads);
        Ok(loss)
    }

    /// Training loss without gradients, under the same fixed noise.
    pub fn loss(
        &self,
        inst: &CorefInstance,
        temperature: f64,
        noise: &DocumentNoise,
        lambda: f64,
        weights: &LossWeights,
    ) -> Result<LossBreakdown> {
        let fwd = self.forward(&inst.doc, Pass::Train { temperature, noise })?;
        let e = fwd.entity_probabilities();
        Ok(crate::objective::total_loss(inst, &fwd.trace_matrix(), &e, lambda, weights))
    }
}
