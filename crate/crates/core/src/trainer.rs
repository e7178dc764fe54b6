//! Adam training with plateau-halved learning rate, annealed Gumbel temperature and
//! early stopping on validation F1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorefInstance;
use crate::error::{Error, Result};
use crate::evaluation::{instance_scores, sweep_threshold_f1, ThresholdSweep};
use crate::link::TraceMatrix;
use crate::model::{derive_seed, DocumentNoise, PetraModel};
use crate::nn::Parameterized;
use crate::objective::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Non-improving epochs before each halving of the learning rate.
    pub lr_patience: usize,
    /// Non-improving epochs before training stops.
    pub stop_patience: usize,
    pub tau_init: f64,
    pub tau_halving_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub loss_weights: LossWeights,
    /// Validation F1 must exceed the best so far by more than this to count.
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            lr: 1e-3,
            lr_min: 1e-4,
            lr_patience: 5,
            stop_patience: 15,
            tau_init: 1.0,
            tau_halving_epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 0.1,
            loss_weights: LossWeights::default(),
            min_improvement: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr) {
            return bad(format!("need 0 < lr_min ({}) <= lr ({})", self.lr_min, self.lr));
        }
        if self.lr_patience == 0 || self.stop_patience == 0 || self.tau_halving_epochs == 0 {
            return bad("patience values must be at least 1".into());
        }
        if self.tau_init <= 0.0 {
            return bad(format!("tau_init must be positive, got {}", self.tau_init));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.lambda < 0.0 || self.min_improvement < 0.0 {
            return bad("lambda and min_improvement must be non-negative".into());
        }
        let w = self.loss_weights;
        if w.self_link < 0.0 || w.positive < 0.0 || w.negative < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    /// `τ₀ · 2^(−⌊epoch / halving⌋)`, epochs counted from 0.
    pub fn temperature(&self, epoch: usize) -> f64 {
        let halvings = (epoch / self.tau_halving_epochs).min(1000) as i32;
        self.tau_init * 0.5f64.powi(halvings)
    }
}

/// Plateau bookkeeping shared by the learning-rate and stopping rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub best_f1: f64,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
    pub stopped: bool,
}

impl Schedule {
    pub fn new(config: &TrainConfig) -> Self {
        Schedule {
            lr: config.lr,
            best_f1: f64::NEG_INFINITY,
            best_epoch: None,
            bad_epochs: 0,
            stopped: false,
        }
    }

    /// Records one epoch's validation F1; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, f1: f64, config: &TrainConfig) -> bool {
        if f1 > self.best_f1 + config.min_improvement || self.best_epoch.is_none() {
            self.best_f1 = f1;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            return true;
        }
        self.bad_epochs += 1;
        if self.bad_epochs.is_multiple_of(config.lr_patience) {
            self.lr = (self.lr * 0.5).max(config.lr_min);
        }
        if self.bad_epochs >= config.stop_patience {
            self.stopped = true;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(size: usize) -> Self {
        Adam {
            step: 0,
            m: vec![0.0; size],
            v: vec![0.0; size],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, config: &TrainConfig) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + config.adam_eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_threshold: f64,
    pub lr: f64,
    pub tau: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_f1,lr,tau\n");
    for r in history {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_f1, r.lr, r.tau));
    }
    out
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: PetraModel,
    pub adam: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    pub schedule: Schedule,
    pub best: Option<PetraModel>,
    pub history: Vec<EpochRecord>,
}

/// Seed for inference-time tie breaking on one document.
pub fn inference_seed(seed: u64, doc_id: &str) -> u64 {
    derive_seed(seed, &["infer", doc_id])
}

/// Inference-mode scores `[A, B]` for every instance, with their gold labels flattened.
pub fn score_instances(model: &PetraModel, instances: &[CorefInstance], seed: u64) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::with_capacity(2 * instances.len());
    let mut labels = Vec::with_capacity(2 * instances.len());
    for inst in instances {
        let traces = model.infer(&inst.doc, inference_seed(seed, &inst.doc.id))?;
        scores.extend(instance_scores(inst, &TraceMatrix::from_traces(&traces))?);
        labels.extend(inst.labels());
    }
    Ok((scores, labels))
}

pub fn validation_sweep(model: &PetraModel, instances: &[CorefInstance], seed: u64) -> Result<ThresholdSweep> {
    let (scores, labels) = score_instances(model, instances, seed)?;
    Ok(sweep_threshold_f1(&scores, &labels))
}

impl TrainState {
    pub fn new(model: PetraModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.check()?;
        let adam = Adam::new(model.parameter_count());
        let schedule = Schedule::new(&config);
        Ok(TrainState {
            config,
            model,
            adam,
            epoch: 0,
            schedule,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn finished(&self) -> bool {
        self.schedule.stopped || self.epoch >= self.config.max_epochs
    }

    /// The best validated model, or the current one before any epoch has run.
    pub fn best_model(&self) -> &PetraModel {
        self.best.as_ref().unwrap_or(&self.model)
    }

    pub fn noise_seed(&self, epoch: usize, index: usize, doc_id: &str) -> u64 {
        derive_seed(self.config.seed, &["noise", &epoch.to_string(), &index.to_string(), doc_id])
    }

    /// One pass over `train` in seeded shuffled order, then validation and scheduling.
    pub fn run_epoch(&mut self, train: &[CorefInstance], validation: &[CorefInstance]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training corpus is empty".into()));
        }
        let epoch = self.epoch;
        let tau = self.config.temperature(epoch);
        let lr = self.schedule.lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &["shuffle", &epoch.to_string()]));
        order.shuffle(&mut rng);

        let mut grads = self.model.zeros_like();
        let mut params = self.model.to_flat();
        let mut loss_sum = 0.0;
        for &k in &order {
            let inst = &train[k];
            let noise = DocumentNoise::draw(&self.model, inst.doc.len(), self.noise_seed(epoch, k, &inst.doc.id));
            grads.zero_();
            let loss = self.model.loss_and_grad(
                inst,
                tau,
                &noise,
                self.config.lambda,
                &self.config.loss_weights,
                &mut grads,
            )?;
            let g = grads.to_flat();
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    doc: inst.doc.id.clone(),
                    step: inst.doc.len(),
                    detail: format!("non-finite gradient at parameter index {bad}"),
                });
            }
            loss_sum += loss.total;
            self.adam.update(&mut params, &g, lr, &self.config);
            self.model.load_flat(&params);
        }

        let sweep = validation_sweep(&self.model, validation, self.config.seed)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_f1: sweep.best_value(),
            val_threshold: sweep.best_threshold(),
            lr,
            tau,
        };
        if self.schedule.observe(epoch, record.val_f1, &self.config) {
            self.best = Some(self.model.clone());
        }
        self.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    /// Runs epochs until a stopping rule fires; `on_epoch` sees each record as it completes.
    pub fn train(
        &mut self,
        train: &[CorefInstance],
        validation: &[CorefInstance],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        while !self.finished() {
            let r = self.run_epoch(train, validation)?;
            on_epoch(&r);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error. Central differences on an O(10) loss carry
/// roughly 1e-9 of round-off, so smaller gradients are compared at this scale instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;
pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Compares the analytic gradient of the training loss with central differences over every
/// parameter entry. Dropout masks and Gumbel draws are drawn once from `seed` and held fixed.
pub fn grad_check(
    model: &PetraModel,
    inst: &CorefInstance,
    config: &TrainConfig,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let noise = DocumentNoise::draw(model, inst.doc.len(), seed);
    let tau = config.tau_init;
    let (lambda, weights) = (config.lambda, &config.loss_weights);
    let mut grads = model.zeros_like();
    model.loss_and_grad(inst, tau, &noise, lambda, weights, &mut grads)?;
    let analytic = grads.to_flat();

    let base = model.to_flat();
    let mut probe = model.clone();
    let mut names = Vec::new();
    model.visit("", &mut |name, t| names.push((name.to_string(), t.len())));
    let mut tensors = Vec::with_capacity(names.len());
    let mut at = 0;
    let mut params = base.clone();
    for (name, len) in names {
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for k in at..at + len {
            params[k] = base[k] + step;
            probe.load_flat(&params);
            let plus = probe.loss(inst, tau, &noise, lambda, weights)?.total;
            params[k] = base[k] - step;
            probe.load_flat(&params);
            let minus = probe.loss(inst, tau, &noise, lambda, weights)?.total;
            params[k] = base[k];
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[k] - numeric).abs();
            let scale = analytic[k].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            max_abs = max_abs.max(err);
            max_rel = max_rel.max(err / scale);
        }
        at += len;
        tensors.push(TensorCheck {
            name,
            max_abs_error: max_abs,
            max_rel_error: max_rel,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step,
        tolerance,
        tensors,
        max_rel_error,
        passed: max_rel_error < tolerance,
    })
}
