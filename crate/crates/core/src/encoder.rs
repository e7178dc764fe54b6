//! Single-layer left-to-right GRU over frozen token embeddings.
//!
//! Gate convention: `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
//! `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`, from `h_0 = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Parameterized};
use crate::tensor::{affine_transpose_acc, outer_acc, sigmoid, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub w_update: Linear,
    pub u_update: Tensor,
    pub w_reset: Linear,
    pub u_reset: Tensor,
    pub w_candidate: Linear,
    pub u_candidate: Tensor,
    /// Output dropout rate, training only.
    pub dropout: f64,
}

/// `T × H` encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenSequence(pub Tensor);

impl HiddenSequence {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }
}

#[derive(Clone, Debug, Default)]
pub struct EncoderCache {
    inputs: Vec<Vec<f64>>,
    prev: Vec<Vec<f64>>,
    update: Vec<Vec<f64>>,
    reset: Vec<Vec<f64>>,
    candidate: Vec<Vec<f64>>,
    mask: Option<Vec<f64>>,
}

fn matvec_acc(m: &Tensor, x: &[f64], y: &mut [f64]) {
    let n = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        *yo += crate::tensor::dot(&m.data()[o * n..(o + 1) * n], x);
    }
}

impl Encoder {
    pub fn zeros(input_dim: usize, hidden: usize, dropout: f64) -> Self {
        Encoder {
            w_update: Linear::zeros(input_dim, hidden),
            u_update: Tensor::zeros(&[hidden, hidden]),
            w_reset: Linear::zeros(input_dim, hidden),
            u_reset: Tensor::zeros(&[hidden, hidden]),
            w_candidate: Linear::zeros(input_dim, hidden),
            u_candidate: Tensor::zeros(&[hidden, hidden]),
            dropout,
        }
    }

    /// Every weight and bias uniform in `±1/√H`.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, dropout: f64, rng: &mut R) -> Self {
        let mut enc = Encoder::zeros(input_dim, hidden, dropout);
        let bound = 1.0 / (hidden as f64).sqrt();
        enc.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        });
        enc
    }

    pub fn input_dim(&self) -> usize {
        self.w_update.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_update.output_dim()
    }

    pub fn flops_per_step(&self) -> u64 {
        self.w_update.flops() * 3 + (self.u_update.len() as u64) * 3
    }

    /// Inverted-dropout mask, one independent draw per output unit.
    pub fn dropout_mask<R: Rng + ?Sized>(&self, steps: usize, rng: &mut R) -> Vec<f64> {
        let keep = 1.0 - self.dropout;
        (0..steps * self.hidden_dim())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }

    /// Runs the recurrence; `mask` (if given) multiplies the `T × H` outputs.
    pub fn forward(&self, inputs: &Tensor, mask: Option<Vec<f64>>) -> Result<(HiddenSequence, EncoderCache)> {
        let h_dim = self.hidden_dim();
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "encoder expects {}-dim embeddings, got {}",
                self.input_dim(),
                inputs.cols()
            )));
        }
        let steps = inputs.rows();
        if let Some(m) = &mask {
            if m.len() != steps * h_dim {
                return Err(Error::Shape("dropout mask does not match T × H".into()));
            }
        }
        let mut out = Tensor::zeros(&[steps, h_dim]);
        let mut cache = EncoderCache::default();
        let mut h = vec![0.0; h_dim];
        for t in 0..steps {
            let x = inputs.row(t);
            let mut z = self.w_update.forward(x);
            matvec_acc(&self.u_update, &h, &mut z);
            z.iter_mut().for_each(|v| *v = sigmoid(*v));
            let mut r = self.w_reset.forward(x);
            matvec_acc(&self.u_reset, &h, &mut r);
            r.iter_mut().for_each(|v| *v = sigmoid(*v));
            let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
            let mut c = self.w_candidate.forward(x);
            matvec_acc(&self.u_candidate, &rh, &mut c);
            c.iter_mut().for_each(|v| *v = v.tanh());
            let next: Vec<f64> = (0..h_dim).map(|k| (1.0 - z[k]) * h[k] + z[k] * c[k]).collect();

            let row = out.row_mut(t);
            match &mask {
                Some(m) => {
                    for k in 0..h_dim {
                        row[k] = next[k] * m[t * h_dim + k];
                    }
                }
                None => row.copy_from_slice(&next),
            }
            cache.inputs.push(x.to_vec());
            cache.prev.push(std::mem::replace(&mut h, next));
            cache.update.push(z);
            cache.reset.push(r);
            cache.candidate.push(c);
        }
        cache.mask = mask;
        Ok((HiddenSequence(out), cache))
    }

    /// Backpropagation through time. `d_out` is the gradient w.r.t. the (masked) outputs.
    pub fn backward(&self, cache: &EncoderCache, d_out: &Tensor, grad: &mut Encoder) {
        let h_dim = self.hidden_dim();
        let steps = cache.inputs.len();
        let mut carry = vec![0.0; h_dim];
        for t in (0..steps).rev() {
            let mut dh = carry;
            for k in 0..h_dim {
                let m = cache.mask.as_ref().map_or(1.0, |m| m[t * h_dim + k]);
                dh[k] += d_out.row(t)[k] * m;
            }
            let (x, prev) = (&cache.inputs[t], &cache.prev[t]);
            let (z, r, c) = (&cache.update[t], &cache.reset[t], &cache.candidate[t]);

            let mut d_prev: Vec<f64> = (0..h_dim).map(|k| dh[k] * (1.0 - z[k])).collect();
            let da_z: Vec<f64> = (0..h_dim)
                .map(|k| dh[k] * (c[k] - prev[k]) * z[k] * (1.0 - z[k]))
                .collect();
            let da_c: Vec<f64> = (0..h_dim).map(|k| dh[k] * z[k] * (1.0 - c[k] * c[k])).collect();

            let rh: Vec<f64> = r.iter().zip(prev).map(|(a, b)| a * b).collect();
            self.w_candidate.backward(x, &da_c, &mut grad.w_candidate, None);
            outer_acc(grad.u_candidate.data_mut(), &da_c, &rh);
            let mut d_rh = vec![0.0; h_dim];
            affine_transpose_acc(self.u_candidate.data(), &da_c, &mut d_rh);
            let da_r: Vec<f64> = (0..h_dim)
                .map(|k| d_rh[k] * prev[k] * r[k] * (1.0 - r[k]))
                .collect();
            for k in 0..h_dim {
                d_prev[k] += d_rh[k] * r[k];
            }

            self.w_update.backward(x, &da_z, &mut grad.w_update, None);
            outer_acc(grad.u_update.data_mut(), &da_z, prev);
            affine_transpose_acc(self.u_update.data(), &da_z, &mut d_prev);

            self.w_reset.backward(x, &da_r, &mut grad.w_reset, None);
            outer_acc(grad.u_reset.data_mut(), &da_r, prev);
            affine_transpose_acc(self.u_reset.data(), &da_r, &mut d_prev);

            carry = d_prev;
        }
    }

    /// Encodes a document; when `training`, dropout is drawn from `rng_seed`.
    pub fn encode(&self, doc: &Document, training: bool, rng_seed: u64) -> Result<HiddenSequence> {
        let inputs = doc.embeddings.to_tensor();
        let mask = (training && self.dropout > 0.0).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            self.dropout_mask(inputs.rows(), &mut rng)
        });
        Ok(self.forward(&inputs, mask)?.0)
    }
}

impl Parameterized for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.w_update.visit(&join(prefix, "w_update"), f);
        f(&join(prefix, "u_update"), &self.u_update);
        self.w_reset.visit(&join(prefix, "w_reset"), f);
        f(&join(prefix, "u_reset"), &self.u_reset);
        self.w_candidate.visit(&join(prefix, "w_candidate"), f);
        f(&join(prefix, "u_candidate"), &self.u_candidate);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.w_update.visit_mut(&join(prefix, "w_update"), f);
        f(&join(prefix, "u_update"), &mut self.u_update);
        self.w_reset.visit_mut(&join(prefix, "w_reset"), f);
        f(&join(prefix, "u_reset"), &mut self.u_reset);
        self.w_candidate.visit_mut(&join(prefix, "w_candidate"), f);
        f(&join(prefix, "u_candidate"), &mut self.u_candidate);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_inputs(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[t, d], 1.0, &mut rng)
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let enc = Encoder::zeros(3, 4, 0.0);
        let (h, _) = enc.forward(&random_inputs(5, 3, 1), None).unwrap();
        assert!(h.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = Encoder::init(2, 2, 0.0, &mut rng);
        let x = [0.4, -1.2];
        let (h, _) = enc.forward(&Tensor::from_vec(&[1, 2], x.to_vec()).unwrap(), None).unwrap();

        // From h₀ = 0 the recurrent terms vanish: z = σ(W_z x + b_z), h̃ = tanh(W_h x + b_h), h₁ = z·h̃.
        for k in 0..2 {
            let wz = enc.w_update.weight.row(k);
            let wc = enc.w_candidate.weight.row(k);
            let z = 1.0 / (1.0 + (-(wz[0] * x[0] + wz[1] * x[1] + enc.w_update.bias.data()[k])).exp());
            let c = (wc[0] * x[0] + wc[1] * x[1] + enc.w_candidate.bias.data()[k]).tanh();
            assert!((h.row(0)[k] - z * c).abs() < 1e-15);
        }
    }

    #[test]
    fn inference_is_deterministic_and_dropout_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::init(3, 5, 0.5, &mut rng);
        let x = random_inputs(6, 3, 2);
        let a = enc.forward(&x, None).unwrap().0;
        let b = enc.forward(&x, None).unwrap().0;
        assert_eq!(a, b);
        let mask = |s| enc.dropout_mask(6, &mut ChaCha8Rng::seed_from_u64(s));
        assert_eq!(mask(1), mask(1));
        assert!(mask(1).iter().all(|&m| m == 0.0 || m == 2.0));
    }

    #[test]
    fn causality_under_future_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::init(3, 4, 0.0, &mut rng);
        let x = random_inputs(8, 3, 3);
        let base = enc.forward(&x, None).unwrap().0;
        for cut in 0..8 {
            let mut y = x.clone();
            for t in cut + 1..8 {
                for v in y.row_mut(t) {
                    *v += 0.7;
                }
            }
            let got = enc.forward(&y, None).unwrap().0;
            for t in 0..=cut {
                assert_eq!(got.row(t), base.row(t));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let enc = Encoder::zeros(3, 2, 0.0);
        assert!(matches!(enc.forward(&random_inputs(2, 4, 0), None), Err(Error::Shape(_))));
    }

    #[test]
    fn bptt_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = Encoder::init(3, 4, 0.3, &mut rng);
        let x = random_inputs(5, 3, 6);
        let mask = enc.dropout_mask(5, &mut ChaCha8Rng::seed_from_u64(1));
        let weights = random_inputs(5, 4, 7);
        let loss = |e: &Encoder| -> f64 {
            let (h, _) = e.forward(&x, Some(mask.clone())).unwrap();
            h.0.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };

        let (_, cache) = enc.forward(&x, Some(mask.clone())).unwrap();
        let mut grad = Encoder::zeros(3, 4, 0.0);
        enc.backward(&cache, &weights, &mut grad);

        let mut analytic = Vec::new();
        grad.visit("", &mut |n, t| analytic.push((n.to_string(), t.data().to_vec())));
        let step = 1e-6;
        let mut worst = 0.0_f64;
        for (name, g) in analytic {
            for (j, a) in g.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut e = enc.clone();
                    e.visit_mut("", &mut |n, t| {
                        if n == name {
                            t.data_mut()[j] += delta;
                        }
                    });
                    loss(&e)
                };
                let fd = (eval(step) - eval(-step)) / (2.0 * step);
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
