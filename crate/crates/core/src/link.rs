//! Coreference-link probability between two tokens, marginalized over memory cells:
//!
//! `P(t₁, t₂) = Σᵢ (o[t₁,i] + c[t₁,i]) · Π_{j=t₁+1..=t₂} (1 − o[j,i]) · c[t₂,i]`
//!
//! i.e. token `t₁` is written to (or merged into) cell `i`, no overwrite of `i` happens
//! afterwards up to and including `t₂`, and token `t₂` corefers with `i`.

use crate::corpus::Span;
use crate::error::{Error, Result};
use crate::memory::StepTrace;

/// `T × N` overwrite and coref matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceMatrix {
    steps: usize,
    cells: usize,
    o: Vec<f64>,
    c: Vec<f64>,
}

impl TraceMatrix {
    pub fn new(steps: usize, cells: usize, o: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        if o.len() != steps * cells || c.len() != steps * cells {
            return Err(Error::Shape(format!(
                "trace matrices must be {steps}×{cells}"
            )));
        }
        if o.iter().chain(&c).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("trace entries must lie in [0, 1]".into()));
        }
        Ok(TraceMatrix { steps, cells, o, c })
    }

    pub fn from_traces(traces: &[StepTrace]) -> Self {
        let cells = traces.first().map_or(0, |t| t.o.len());
        let mut o = Vec::with_capacity(traces.len() * cells);
        let mut c = Vec::with_capacity(traces.len() * cells);
        for t in traces {
            o.extend_from_slice(&t.o);
            c.extend_from_slice(&t.c);
        }
        TraceMatrix {
            steps: traces.len(),
            cells,
            o,
            c,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn o(&self, t: usize, i: usize) -> f64 {
        self.o[t * self.cells + i]
    }

    pub fn c(&self, t: usize, i: usize) -> f64 {
        self.c[t * self.cells + i]
    }

    fn check_pair(&self, t1: usize, t2: usize) -> Result<()> {
        if t1 >= t2 {
            return Err(Error::InvalidArgument(format!(
                "link endpoints must satisfy t1 < t2, got ({t1}, {t2})"
            )));
        }
        if t2 >= self.steps {
            return Err(Error::InvalidArgument(format!(
                "token {t2} outside a {}-step trace",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Direct evaluation, `O((t₂ − t₁) · N)`.
pub fn link_probability(traces: &TraceMatrix, t1: usize, t2: usize) -> Result<f64> {
    traces.check_pair(t1, t2)?;
    let mut total = 0.0;
    for i in 0..traces.cells {
        let mut survive = 1.0;
        for j in t1 + 1..=t2 {
            survive *= 1.0 - traces.o(j, i);
        }
        total += (traces.o(t1, i) + traces.c(t1, i)) * survive * traces.c(t2, i);
    }
    Ok(total)
}

/// Answers many queries from running per-cell survival products.
///
/// Queries must be sorted by `t₂`. One left-to-right sweep builds prefix products of the
/// non-zero survival factors plus a count of exact zeros, so each query costs `O(N)` and
/// the whole batch `O(T·N + Q·N)`.
pub fn link_probability_all_pairs_incremental(
    traces: &TraceMatrix,
    queries: &[(usize, usize)],
) -> Result<Vec<f64>> {
    if queries.windows(2).any(|w| w[0].1 > w[1].1) {
        return Err(Error::InvalidArgument("queries must be sorted by t2".into()));
    }
    let n = traces.cells;
    // prefix[t*n + i] = Π_{j ≤ t, o<1} (1 − o[j,i]); zeros[t*n + i] = #{j ≤ t : o[j,i] = 1}
    let mut prefix: Vec<f64> = Vec::with_capacity(traces.steps * n);
    let mut zeros: Vec<u32> = Vec::with_capacity(traces.steps * n);
    let mut out = Vec::with_capacity(queries.len());
    for &(t1, t2) in queries {
        traces.check_pair(t1, t2)?;
        while prefix.len() < (t2 + 1) * n {
            let t = prefix.len() / n;
            for i in 0..n {
                let f = 1.0 - traces.o(t, i);
                let (p, z) = if t == 0 {
                    (1.0, 0)
                } else {
                    (prefix[(t - 1) * n + i], zeros[(t - 1) * n + i])
                };
                if f == 0.0 {
                    prefix.push(p);
                    zeros.push(z + 1);
                } else {
                    prefix.push(p * f);
                    zeros.push(z);
                }
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            let (a, b) = (t1 * n + i, t2 * n + i);
            let survive = if zeros[b] != zeros[a] {
                0.0
            } else if prefix[a] > 0.0 {
                prefix[b] / prefix[a]
            } else {
                // prefix underflowed; fall back to the direct product
                (t1 + 1..=t2).map(|j| 1.0 - traces.o(j, i)).product()
            };
            total += (traces.o(t1, i) + traces.c(t1, i)) * survive * traces.c(t2, i);
        }
        out.push(total);
    }
    Ok(out)
}

/// Ordered token pairs `(earlier, later)` across two spans, skipping identical tokens.
pub fn span_token_pairs(x: Span, y: Span) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(x.len() * y.len());
    for a in x.tokens() {
        for b in y.tokens() {
            match a.cmp(&b) {
                std::cmp::Ordering::Less => pairs.push((a, b)),
                std::cmp::Ordering::Greater => pairs.push((b, a)),
                std::cmp::Ordering::Equal => {}
            }
        }
    }
    pairs
}

/// Maximum token-level link probability over all cross-span token pairs.
pub fn span_link_probability(traces: &TraceMatrix, x: Span, y: Span) -> Result<f64> {
    if x == y {
        return Err(Error::InvalidArgument(format!(
            "span [{}, {}] linked with itself",
            x.first, x.last
        )));
    }
    let mut best = 0.0_f64;
    for (a, b) in span_token_pairs(x, y) {
        best = best.max(link_probability(traces, a, b)?);
    }
    Ok(best)
}

/// Accumulates `dp · ∂P(t₁, t₂)/∂o` and `∂/∂c` into row-major `T × N` buffers.
pub(crate) fn link_probability_backward(
    traces: &TraceMatrix,
    t1: usize,
    t2: usize,
    dp: f64,
    d_o: &mut [f64],
    d_c: &mut [f64],
) {
    let n = traces.cells;
    let len = t2 - t1;
    let mut before = vec![1.0; len + 1];
    for i in 0..n {
        // before[k] = Π of the first k survival factors, after = running suffix product
        for k in 0..len {
            before[k + 1] = before[k] * (1.0 - traces.o(t1 + 1 + k, i));
        }
        let survive = before[len];
        let head = traces.o(t1, i) + traces.c(t1, i);
        let tail = traces.c(t2, i);

        let d_head = dp * survive * tail;
        d_o[t1 * n + i] += d_head;
        d_c[t1 * n + i] += d_head;
        d_c[t2 * n + i] += dp * head * survive;

        let d_survive = dp * head * tail;
        if d_survive != 0.0 {
            let mut after = 1.0;
            for k in (0..len).rev() {
                let j = t1 + 1 + k;
                d_o[j * n + i] -= d_survive * before[k] * after;
                after *= 1.0 - traces.o(j, i);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random traces obeying Σᵢ (o + c) ≤ e ≤ 1 per row.
    pub(crate) fn random_traces(steps: usize, cells: usize, seed: u64) -> TraceMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut o = Vec::new();
        let mut c = Vec::new();
        for _ in 0..steps {
            let e: f64 = rng.random();
            let w: Vec<f64> = (0..2 * cells + 1).map(|_| rng.random::<f64>()).collect();
            let s: f64 = w.iter().sum();
            let n = e * w[2 * cells] / s;
            let g: Vec<f64> = (0..cells).map(|_| rng.random::<f64>()).collect();
            let gs: f64 = g.iter().sum();
            for i in 0..cells {
                o.push(n * g[i] / gs);
                c.push(e * w[i] / s);
            }
        }
        TraceMatrix::new(steps, cells, o, c).unwrap()
    }

    /// Triple-loop oracle written straight from the definition.
    fn naive(tr: &TraceMatrix, t1: usize, t2: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..tr.cells() {
            let mut term = tr.o(t1, i) + tr.c(t1, i);
            for j in t1 + 1..=t2 {
                term *= 1.0 - tr.o(j, i);
            }
            total += term * tr.c(t2, i);
        }
        total
    }

    #[test]
    fn single_cell_closed_forms() {
        let tr = TraceMatrix::new(3, 1, vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.7]).unwrap();
        assert!((link_probability(&tr, 0, 2).unwrap() - 0.7).abs() < 1e-15);
        let tr = TraceMatrix::new(3, 1, vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 0.7]).unwrap();
        assert_eq!(link_probability(&tr, 0, 2).unwrap(), 0.0);
        assert!(link_probability(&tr, 2, 1).is_err());
        assert!(link_probability(&tr, 1, 1).is_err());
    }

    #[test]
    fn direct_matches_naive_oracle() {
        let tr = random_traces(5, 3, 17);
        for t1 in 0..5 {
            for t2 in t1 + 1..5 {
                let d = link_probability(&tr, t1, t2).unwrap();
                assert!((d - naive(&tr, t1, t2)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn incremental_edge_cases() {
        let tr = random_traces(6, 2, 3);
        assert!(link_probability_all_pairs_incremental(&tr, &[]).unwrap().is_empty());
        let got = link_probability_all_pairs_incremental(&tr, &[(1, 4), (1, 4)]).unwrap();
        assert_eq!(got[0], got[1]);
        assert!(link_probability_all_pairs_incremental(&tr, &[(0, 5), (1, 4)]).is_err());
    }

    #[test]
    fn incremental_handles_exact_overwrites() {
        let mut o = vec![0.0; 8];
        o[2 * 2] = 1.0; // t = 2, cell 0 fully overwritten
        let c = vec![0.5; 8];
        let tr = TraceMatrix::new(4, 2, o, c).unwrap();
        let q: Vec<(usize, usize)> = vec![(0, 1), (0, 3), (1, 3), (2, 3)];
        let got = link_probability_all_pairs_incremental(&tr, &q).unwrap();
        for (k, &(a, b)) in q.iter().enumerate() {
            assert!((got[k] - link_probability(&tr, a, b).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn span_probability_is_max_over_pairs() {
        let tr = random_traces(8, 3, 5);
        let x = Span::new(1, 2);
        let y = Span::new(5, 6);
        let pairs = [(1, 5), (1, 6), (2, 5), (2, 6)];
        let expect = pairs
            .iter()
            .map(|&(a, b)| naive(&tr, a, b))
            .fold(0.0_f64, f64::max);
        assert!((span_link_probability(&tr, x, y).unwrap() - expect).abs() < 1e-15);
        let single = span_link_probability(&tr, Span::single(1), Span::single(5)).unwrap();
        assert_eq!(single, link_probability(&tr, 1, 5).unwrap());
        assert!(span_link_probability(&tr, x, x).is_err());
        // reversed order and interleaving are oriented by position
        assert_eq!(span_link_probability(&tr, y, x).unwrap(), span_link_probability(&tr, x, y).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let tr = random_traces(6, 3, 23);
        let (t1, t2) = (1, 4);
        let mut d_o = vec![0.0; 18];
        let mut d_c = vec![0.0; 18];
        link_probability_backward(&tr, t1, t2, 1.0, &mut d_o, &mut d_c);
        let h = 1e-7;
        for idx in 0..18 {
            for which in 0..2 {
                let bump = |delta: f64| {
                    let mut o = tr.o.clone();
                    let mut c = tr.c.clone();
                    if which == 0 {
                        o[idx] += delta;
                    } else {
                        c[idx] += delta;
                    }
                    let t = TraceMatrix { steps: 6, cells: 3, o, c };
                    naive(&t, t1, t2)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let a = if which == 0 { d_o[idx] } else { d_c[idx] };
                assert!((fd - a).abs() < 1e-7, "idx {idx} which {which}: {fd} vs {a}");
            }
        }
    }

    proptest! {
        #[test]
        fn link_probability_is_bounded(steps in 2usize..12, cells in 1usize..5, seed in any::<u64>()) {
            let tr = random_traces(steps, cells, seed);
            for t1 in 0..steps {
                for t2 in t1 + 1..steps {
                    let p = link_probability(&tr, t1, t2).unwrap();
                    prop_assert!((0.0..=1.0).contains(&p));
                }
            }
        }

        #[test]
        fn full_overwrite_severs_links(steps in 3usize..10, cells in 1usize..4, seed in any::<u64>(), cut in 1usize..9) {
            let mut tr = random_traces(steps, cells, seed);
            let cut = 1 + cut % (steps - 1);
            for i in 0..cells {
                tr.o[cut * cells + i] = 1.0;
            }
            for t1 in 0..cut {
                for t2 in cut..steps {
                    prop_assert_eq!(link_probability(&tr, t1, t2).unwrap(), 0.0);
                }
            }
        }

        #[test]
        fn enlarging_a_span_never_lowers_the_score(seed in any::<u64>(), extra in 1usize..3) {
            let tr = random_traces(10, 3, seed);
            let x = Span::new(1, 2);
            let y = Span::single(6);
            let base = span_link_probability(&tr, x, y).unwrap();
            let grown = span_link_probability(&tr, Span::new(1, 2 + extra), y).unwrap();
            prop_assert!(grown >= base);
        }
    }
}
