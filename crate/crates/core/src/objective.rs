//! Training loss: weighted binary cross-entropy over labeled and implied token links,
//! plus the masked mean entity probability outside the annotated spans.

use serde::{Deserialize, Serialize};

use crate::corpus::{CorefInstance, Span};
use crate::link::{link_probability, link_probability_backward, span_token_pairs, TraceMatrix};

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    SelfLink,
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub self_link: f64,
    pub positive: f64,
    pub negative: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            self_link: 1.0,
            positive: 5.0,
            negative: 50.0,
        }
    }
}

impl LossWeights {
    pub fn weight(&self, kind: PairKind) -> f64 {
        match kind {
            PairKind::SelfLink => self.self_link,
            PairKind::Positive => self.positive,
            PairKind::Negative => self.negative,
        }
    }
}

/// A supervised token pair, `a < b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPair {
    pub a: usize,
    pub b: usize,
    pub label: bool,
    pub kind: PairKind,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub coref: f64,
    pub entity: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Gradients of the total loss w.r.t. the `T × N` trace matrices and `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradients {
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub e: Vec<f64>,
}

fn push_cross(out: &mut Vec<LabeledPair>, x: Span, y: Span, label: bool, kind: PairKind, w: &LossWeights) {
    for (a, b) in span_token_pairs(x, y) {
        out.push(LabeledPair {
            a,
            b,
            label,
            kind,
            weight: w.weight(kind),
        });
    }
}

/// Ground-truth and implied token pairs for one instance.
///
/// Emits, in order: self-links from each span head to its remaining tokens (A, B, pronoun),
/// the A×pronoun and B×pronoun pairs with their annotated labels, and A×B as a negative.
pub fn expand_labels(inst: &CorefInstance, weights: &LossWeights) -> Vec<LabeledPair> {
    let mut out = Vec::new();
    for span in inst.spans() {
        for w in span.first + 1..=span.last {
            out.push(LabeledPair {
                a: span.head(),
                b: w,
                label: true,
                kind: PairKind::SelfLink,
                weight: weights.self_link,
            });
        }
    }
    let kind = |label| if label { PairKind::Positive } else { PairKind::Negative };
    push_cross(&mut out, inst.span_a, inst.span_p, inst.label_a, kind(inst.label_a), weights);
    push_cross(&mut out, inst.span_b, inst.span_p, inst.label_b, kind(inst.label_b), weights);
    push_cross(&mut out, inst.span_a, inst.span_b, false, PairKind::Negative, weights);
    out
}

fn bce(label: bool, p: f64) -> f64 {
    let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label {
        -q.ln()
    } else {
        -(1.0 - q).ln()
    }
}

fn bce_grad(label: bool, p: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    if label {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

pub fn coref_loss(pairs: &[LabeledPair], traces: &TraceMatrix) -> f64 {
    pairs
        .iter()
        .map(|pair| {
            let p = link_probability(traces, pair.a, pair.b).expect("labeled pairs are ordered and in range");
            pair.weight * bce(pair.label, p)
        })
        .sum()
}

/// Mask is 0 inside any of `spans`, 1 elsewhere.
fn entity_mask(steps: usize, spans: &[Span]) -> Vec<f64> {
    (0..steps)
        .map(|t| if spans.iter().any(|s| s.contains(t)) { 0.0 } else { 1.0 })
        .collect()
}

/// Mean entity probability over unmasked tokens; 0 when every token is masked.
pub fn entity_loss(e: &[f64], spans: &[Span]) -> f64 {
    let mask = entity_mask(e.len(), spans);
    let denom: f64 = mask.iter().sum();
    if denom == 0.0 {
        return 0.0;
    }
    e.iter().zip(&mask).map(|(a, m)| a * m).sum::<f64>() / denom
}

pub fn total_loss(
    inst: &CorefInstance,
    traces: &TraceMatrix,
    e: &[f64],
    lambda: f64,
    weights: &LossWeights,
) -> LossBreakdown {
    let pairs = expand_labels(inst, weights);
    let coref = coref_loss(&pairs, traces);
    let entity = entity_loss(e, &inst.spans());
    LossBreakdown {
        coref,
        entity,
        lambda,
        total: coref + lambda * entity,
    }
}

/// Loss together with its gradient w.r.t. traces and entity probabilities.
pub fn total_loss_with_grad(
    inst: &CorefInstance,
    traces: &TraceMatrix,
    e: &[f64],
    lambda: f64,
    weights: &LossWeights,
) -> (LossBreakdown, LossGradients) {
    let size = traces.steps() * traces.cells();
    let mut grads = LossGradients {
        o: vec![0.0; size],
        c: vec![0.0; size],
        e: vec![0.0; e.len()],
    };
    let pairs = expand_labels(inst, weights);
    let mut coref = 0.0;
    for pair in &pairs {
        let p = link_probability(traces, pair.a, pair.b).expect("labeled pairs are ordered and in range");
        coref += pair.weight * bce(pair.label, p);
        let dp = pair.weight * bce_grad(pair.label, p);
        if dp != 0.0 {
            link_probability_backward(traces, pair.a, pair.b, dp, &mut grads.o, &mut grads.c);
        }
    }
    let spans = inst.spans();
    let mask = entity_mask(e.len(), &spans);
    let denom: f64 = mask.iter().sum();
    let entity = if denom == 0.0 {
        0.0
    } else {
        for (g, m) in grads.e.iter_mut().zip(&mask) {
            *g = lambda * m / denom;
        }
        e.iter().zip(&mask).map(|(a, m)| a * m).sum::<f64>() / denom
    };
    let breakdown = LossBreakdown {
        coref,
        entity,
        lambda,
        total: coref + lambda * entity,
    };
    (breakdown, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Embeddings};
    use proptest::prelude::*;

    fn instance(t: usize, a: Span, b: Span, p: Span, la: bool, lb: bool) -> CorefInstance {
        CorefInstance {
            doc: Document::new(
                "x",
                vec!["w".into(); t],
                (0..t).map(|k| (2 * k, 2 * k + 1)).collect(),
                Embeddings::new(t, 1, vec![0.0; t]).unwrap(),
            )
            .unwrap(),
            span_a: a,
            span_b: b,
            span_p: p,
            label_a: la,
            label_b: lb,
        }
    }

    #[test]
    fn singleton_spans_give_three_pairs() {
        let inst = instance(6, Span::single(0), Span::single(2), Span::single(4), true, false);
        let pairs = expand_labels(&inst, &LossWeights::default());
        assert_eq!(pairs.len(), 3);
        assert_eq!((pairs[0].a, pairs[0].b, pairs[0].label, pairs[0].kind), (0, 4, true, PairKind::Positive));
        assert_eq!((pairs[1].a, pairs[1].b, pairs[1].label, pairs[1].kind), (2, 4, false, PairKind::Negative));
        assert_eq!((pairs[2].a, pairs[2].b, pairs[2].label, pairs[2].kind), (0, 2, false, PairKind::Negative));
        assert_eq!(pairs.iter().map(|p| p.weight).collect::<Vec<_>>(), vec![5.0, 50.0, 50.0]);
    }

    #[test]
    fn two_token_name_adds_one_self_link() {
        let inst = instance(6, Span::new(0, 1), Span::single(2), Span::single(4), true, false);
        let pairs = expand_labels(&inst, &LossWeights::default());
        let selfs: Vec<_> = pairs.iter().filter(|p| p.kind == PairKind::SelfLink).collect();
        assert_eq!(selfs.len(), 1);
        assert_eq!((selfs[0].a, selfs[0].b, selfs[0].weight), (0, 1, 1.0));
        assert_eq!(pairs.len(), 1 + 2 + 1 + 2);
    }

    #[test]
    fn pairs_point_forward_even_when_pronoun_comes_first() {
        let inst = instance(8, Span::single(5), Span::single(7), Span::single(1), false, true);
        for p in expand_labels(&inst, &LossWeights::default()) {
            assert!(p.a < p.b);
        }
    }

    proptest! {
        #[test]
        fn pair_count_matches_combinatorial_recount(
            la in 1usize..4, lb in 1usize..4, lp in 1usize..4,
            order in 0usize..6,
        ) {
            let lens = [la, lb, lp];
            let perm = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]][order];
            let mut spans = [Span::single(0); 3];
            let mut pos = 0;
            for &k in &perm {
                spans[k] = Span::new(pos, pos + lens[k] - 1);
                pos += lens[k] + 1;
            }
            let inst = instance(pos, spans[0], spans[1], spans[2], true, false);
            let expect = (la - 1) + (lb - 1) + (lp - 1) + la * lp + lb * lp + la * lb;
            prop_assert_eq!(expand_labels(&inst, &LossWeights::default()).len(), expect);
        }

        #[test]
        fn pair_count_is_independent_of_document_length(extra in 0usize..50) {
            let inst = instance(10 + extra, Span::new(0, 1), Span::single(4), Span::single(8), true, false);
            prop_assert_eq!(expand_labels(&inst, &LossWeights::default()).len(), 1 + 2 + 1 + 2);
        }

        #[test]
        fn entity_loss_ignores_masked_positions(vals in proptest::collection::vec(0.0f64..1.0, 10), junk in 0.0f64..1.0) {
            let spans = [Span::new(1, 2), Span::single(5), Span::single(9)];
            let mut other = vals.clone();
            other[1] = junk;
            other[5] = 1.0 - junk;
            other[9] = junk * 0.5;
            prop_assert_eq!(entity_loss(&vals, &spans), entity_loss(&other, &spans));
        }
    }

    fn one_cell(o: Vec<f64>, c: Vec<f64>) -> TraceMatrix {
        let t = o.len();
        TraceMatrix::new(t, 1, o, c).unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        let tr = one_cell(vec![1.0, 0.0], vec![0.0, 0.5]);
        let pair = LabeledPair { a: 0, b: 1, label: true, kind: PairKind::Positive, weight: 1.0 };
        assert!((coref_loss(&[pair], &tr) - std::f64::consts::LN_2).abs() < 1e-12);
        let tr = one_cell(vec![1.0, 0.0], vec![0.0, 0.0]);
        let neg = LabeledPair { label: false, ..pair };
        assert!(coref_loss(&[neg], &tr) < 1e-6);
    }

    #[test]
    fn weighted_mix_matches_scalar_recomputation() {
        // cell 0 written at t=0, partly overwritten at t=2
        let tr = one_cell(vec![0.9, 0.0, 0.3, 0.0], vec![0.05, 0.6, 0.1, 0.4]);
        let w = LossWeights::default();
        let pairs = [
            LabeledPair { a: 0, b: 1, label: true, kind: PairKind::SelfLink, weight: w.self_link },
            LabeledPair { a: 0, b: 3, label: true, kind: PairKind::Positive, weight: w.positive },
            LabeledPair { a: 1, b: 3, label: false, kind: PairKind::Negative, weight: w.negative },
        ];
        let p01: f64 = (0.9 + 0.05) * 1.0 * 0.6;
        let p03: f64 = (0.9 + 0.05) * (1.0 * 0.7 * 1.0) * 0.4;
        let p13: f64 = (0.0 + 0.6) * (0.7 * 1.0) * 0.4;
        let expect = -p01.ln() - 5.0 * p03.ln() - 50.0 * (1.0 - p13).ln();
        assert!((coref_loss(&pairs, &tr) - expect).abs() < 1e-12);
    }

    #[test]
    fn entity_loss_cases() {
        let spans = [Span::single(0), Span::single(1), Span::single(2)];
        assert_eq!(entity_loss(&[0.9, 0.9, 0.9, 0.3, 0.3], &spans), 0.3);
        assert_eq!(entity_loss(&[0.0; 5], &spans), 0.0);
        assert_eq!(entity_loss(&[0.4, 0.7, 0.2], &spans), 0.0);

        let e = [0.1, 0.5, 0.9, 0.2, 0.6, 0.8, 0.3];
        let spans = [Span::new(1, 2), Span::single(4), Span::single(6)];
        let direct = (0.1 + 0.2 + 0.8) / 3.0;
        assert!((entity_loss(&e, &spans) - direct).abs() < 1e-15);
    }

    #[test]
    fn total_loss_composition() {
        let inst = instance(4, Span::single(0), Span::single(1), Span::single(3), true, false);
        let tr = one_cell(vec![0.8, 0.1, 0.0, 0.0], vec![0.0, 0.3, 0.0, 0.6]);
        let e = [0.8, 0.4, 0.2, 0.6];
        let w = LossWeights::default();
        let zero = total_loss(&inst, &tr, &e, 0.0, &w);
        assert_eq!(zero.total, zero.coref);
        let full = total_loss(&inst, &tr, &e, 0.1, &w);
        assert!((full.total - (full.coref + 0.1 * full.entity)).abs() < 1e-12);
        assert!((full.entity - 0.2).abs() < 1e-15);
        let (with_grad, _) = total_loss_with_grad(&inst, &tr, &e, 0.1, &w);
        assert_eq!(with_grad, full);

        let b = LossBreakdown { coref: 0.7, entity: 0.2, lambda: 0.1, total: 0.7 + 0.1 * 0.2 };
        assert!((b.total - 0.72).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let inst = instance(6, Span::new(0, 1), Span::single(3), Span::single(5), false, true);
        let (n, t) = (2, 6);
        let mut o = Vec::new();
        let mut c = Vec::new();
        for k in 0..t * n {
            o.push(0.05 + 0.07 * ((k * 7) % 5) as f64);
            c.push(0.04 + 0.06 * ((k * 3) % 4) as f64);
        }
        let e: Vec<f64> = (0..t).map(|k| 0.2 + 0.1 * k as f64).collect();
        let w = LossWeights::default();
        let tr = TraceMatrix::new(t, n, o.clone(), c.clone()).unwrap();
        let (_, g) = total_loss_with_grad(&inst, &tr, &e, 0.1, &w);
        let h = 1e-7;
        for idx in 0..t * n {
            for which in 0..2 {
                let f = |d: f64| {
                    let (mut o2, mut c2) = (o.clone(), c.clone());
                    if which == 0 { o2[idx] += d } else { c2[idx] += d }
                    total_loss(&inst, &TraceMatrix::new(t, n, o2, c2).unwrap(), &e, 0.1, &w).total
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let a = if which == 0 { g.o[idx] } else { g.c[idx] };
                assert!((fd - a).abs() < 1e-5 * fd.abs().max(1.0), "{idx}/{which}: {fd} vs {a}");
            }
        }
        for k in 0..t {
            let f = |d: f64| {
                let mut e2 = e.clone();
                e2[k] += d;
                total_loss(&inst, &tr, &e2, 0.1, &w).total
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - g.e[k]).abs() < 1e-7);
        }
    }
}
