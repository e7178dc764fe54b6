//! Pronoun-resolution F1, people counting, overwrite diagnostics, and memory logs.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorefInstance, Document};
use crate::error::{Error, Result};
use crate::link::{span_link_probability, TraceMatrix};
use crate::memory::StepTrace;

pub const GRID_POINTS: usize = 100;

/// Threshold grid `{0.01, 0.02, ..., 1.00}`.
pub fn threshold_grid() -> Vec<f64> {
    (1..=GRID_POINTS).map(|k| k as f64 / 100.0).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // from counts, so equal confusion matrices give bitwise-equal scores
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        Prf { precision, recall, f1 }
    }
}

/// Micro-averaged scores over independent binary link decisions.
pub fn gap_f1(scores: &[f64], labels: &[bool], threshold: f64) -> Prf {
    assert_eq!(scores.len(), labels.len(), "one score per label");
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Prf::from_counts(tp, fp, fn_)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub best_index: usize,
}

impl ThresholdSweep {
    /// Picks the best grid point; earlier (smaller) thresholds win ties.
    fn select(values: Vec<f64>, maximize: bool) -> Self {
        let mut best_index = 0;
        for (k, &v) in values.iter().enumerate() {
            let better = if maximize { v > values[best_index] } else { v < values[best_index] };
            if better {
                best_index = k;
            }
        }
        ThresholdSweep {
            thresholds: threshold_grid(),
            values,
            best_index,
        }
    }

    pub fn best_threshold(&self) -> f64 {
        self.thresholds[self.best_index]
    }

    pub fn best_value(&self) -> f64 {
        self.values[self.best_index]
    }
}

pub fn sweep_threshold_f1(scores: &[f64], labels: &[bool]) -> ThresholdSweep {
    let values = threshold_grid().iter().map(|&th| gap_f1(scores, labels, th).f1).collect();
    ThresholdSweep::select(values, true)
}

/// Number of `(t, i)` overwrite entries at or above `alpha`.
pub fn count_people(o: &[f64], alpha: f64) -> usize {
    o.iter().filter(|&&v| v >= alpha).count()
}

/// Total absolute counting error per grid point, minimized over the grid.
pub fn sweep_threshold_count(logs: &[MemoryLog], gold: &[usize]) -> ThresholdSweep {
    assert_eq!(logs.len(), gold.len(), "one gold count per log");
    let values = threshold_grid()
        .iter()
        .map(|&alpha| {
            logs.iter()
                .zip(gold)
                .map(|(log, &g)| count_people(&log.o, alpha).abs_diff(g) as f64)
                .sum()
        })
        .collect();
    ThresholdSweep::select(values, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum OverwriteKl {
    Divergence(f64),
    NoOverwrites,
}

impl OverwriteKl {
    pub fn value(&self) -> Option<f64> {
        match self {
            OverwriteKl::Divergence(v) => Some(*v),
            OverwriteKl::NoOverwrites => None,
        }
    }
}

impl std::fmt::Display for OverwriteKl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OverwriteKl::Divergence(v) => write!(f, "{v}"),
            OverwriteKl::NoOverwrites => f.write_str("no-overwrites"),
        }
    }
}

/// KL divergence (nats) of the corpus-averaged per-cell overwrite mass from uniform.
///
/// Each document contributes its per-cell sum over tokens; documents are averaged,
/// then the result is normalized over cells.
pub fn overwrite_kl(logs: &[MemoryLog]) -> Result<OverwriteKl> {
    let Some(first) = logs.first() else {
        return Ok(OverwriteKl::NoOverwrites);
    };
    let n = first.num_cells;
    let mut mass = vec![0.0; n];
    for log in logs {
        if log.num_cells != n {
            return Err(Error::Shape(format!(
                "log {} has {} cells, expected {n}",
                log.doc_id, log.num_cells
            )));
        }
        for row in log.o.chunks(n) {
            for (m, v) in mass.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    for m in &mut mass {
        *m /= logs.len() as f64;
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Ok(OverwriteKl::NoOverwrites);
    }
    let kl = mass
        .iter()
        .map(|m| m / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * (p * n as f64).ln())
        .sum::<f64>();
    Ok(OverwriteKl::Divergence(kl.max(0.0)))
}

/// Span-level scores `[P(A, pronoun), P(B, pronoun)]` from one document's traces.
pub fn instance_scores(inst: &CorefInstance, traces: &TraceMatrix) -> Result<[f64; 2]> {
    Ok([
        span_link_probability(traces, inst.span_a, inst.span_p)?,
        span_link_probability(traces, inst.span_b, inst.span_p)?,
    ])
}

/// Per-token controller record of one document.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryLog {
    pub doc_id: String,
    pub num_cells: usize,
    pub tokens: Vec<String>,
    pub e: Vec<f64>,
    /// `T × N` row-major.
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    doc_id: String,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "T")]
    t: usize,
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    token: String,
    e: f64,
    o: Vec<f64>,
    c: Vec<f64>,
    u: Vec<f64>,
}

impl MemoryLog {
    pub fn from_traces(doc: &Document, traces: &[StepTrace]) -> Result<Self> {
        if traces.len() != doc.len() {
            return Err(Error::Shape(format!(
                "{} traces for a {}-token document",
                traces.len(),
                doc.len()
            )));
        }
        let num_cells = traces.first().map_or(0, |t| t.o.len());
        let mut log = MemoryLog {
            doc_id: doc.id.clone(),
            num_cells,
            tokens: doc.tokens.clone(),
            e: Vec::with_capacity(traces.len()),
            o: Vec::with_capacity(traces.len() * num_cells),
            c: Vec::with_capacity(traces.len() * num_cells),
            u: Vec::with_capacity(traces.len() * num_cells),
        };
        for t in traces {
            log.e.push(t.e);
            log.o.extend_from_slice(&t.o);
            log.c.extend_from_slice(&t.c);
            log.u.extend_from_slice(&t.u);
        }
        Ok(log)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn trace_matrix(&self) -> Result<TraceMatrix> {
        TraceMatrix::new(self.len(), self.num_cells, self.o.clone(), self.c.clone())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let n = self.num_cells;
        let mut out = serde_json::to_string(&LogHeader {
            doc_id: self.doc_id.clone(),
            n,
            t: self.len(),
        })?;
        out.push('\n');
        for (t, token) in self.tokens.iter().enumerate() {
            let line = LogLine {
                token: token.clone(),
                e: self.e[t],
                o: self.o[t * n..(t + 1) * n].to_vec(),
                c: self.c[t * n..(t + 1) * n].to_vec(),
                u: self.u[t * n..(t + 1) * n].to_vec(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: LogHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Format("memory log is empty".into()))?,
        )?;
        let mut log = MemoryLog {
            doc_id: header.doc_id,
            num_cells: header.n,
            tokens: Vec::with_capacity(header.t),
            e: Vec::new(),
            o: Vec::new(),
            c: Vec::new(),
            u: Vec::new(),
        };
        for (k, raw) in lines.enumerate() {
            let line: LogLine = serde_json::from_str(raw)?;
            if line.o.len() != header.n || line.c.len() != header.n || line.u.len() != header.n {
                return Err(Error::Consistency(format!(
                    "memory log line {} does not have {} cells",
                    k + 2,
                    header.n
                )));
            }
            log.tokens.push(line.token);
            log.e.push(line.e);
            log.o.extend(line.o);
            log.c.extend(line.c);
            log.u.extend(line.u);
        }
        if log.len() != header.t {
            return Err(Error::Consistency(format!(
                "memory log header says T={}, found {} lines",
                header.t,
                log.len()
            )));
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl()?.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::parse_jsonl(&text)
    }
}

pub const ELLIPSIS_MAX_E: f64 = 0.05;
pub const ELLIPSIS_MIN_RUN: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    Token(usize),
    Ellipsis { first: usize, last: usize },
}

/// Heatmap columns: runs of at least 10 tokens with `e < 0.05` collapse to one ellipsis.
pub fn heatmap_columns(e: &[f64]) -> Vec<Column> {
    let mut cols = Vec::new();
    let mut t = 0;
    while t < e.len() {
        if e[t] < ELLIPSIS_MAX_E {
            let start = t;
            while t < e.len() && e[t] < ELLIPSIS_MAX_E {
                t += 1;
            }
            if t - start >= ELLIPSIS_MIN_RUN {
                cols.push(Column::Ellipsis { first: start, last: t - 1 });
            } else {
                cols.extend((start..t).map(Column::Token));
            }
        } else {
            cols.push(Column::Token(t));
            t += 1;
        }
    }
    cols
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(ch),
        }
    }
    out
}

fn shade(v: f64) -> u8 {
    (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8
}

/// SVG with an OW and a CR row per cell; darker means higher.
pub fn heatmap_svg(log: &MemoryLog) -> String {
    const CELL: usize = 18;
    const LEFT: usize = 56;
    const TOP: usize = 8;
    const LABEL: usize = 80;
    let cols = heatmap_columns(&log.e);
    let n = log.num_cells;
    let width = LEFT + cols.len() * CELL + 8;
    let height = TOP + 2 * n * CELL + LABEL;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(&log.doc_id));
    for i in 0..n {
        for (r, (kind, values)) in [("ow", &log.o), ("cr", &log.c)].into_iter().enumerate() {
            let y = TOP + (2 * i + r) * CELL;
            let label = format!("{}{}", kind.to_uppercase(), i);
            let _ = writeln!(s, r#"<text x="2" y="{}">{label}</text>"#, y + 13);
            for (k, col) in cols.iter().enumerate() {
                let x = LEFT + k * CELL;
                let v = match col {
                    Column::Token(t) => values[t * n + i],
                    Column::Ellipsis { .. } => 0.0,
                };
                let g = shade(v);
                let _ = writeln!(
                    s,
                    r##"<rect class="{kind}" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})" stroke="#ccc" data-v="{v:.4}"/>"##
                );
            }
        }
    }
    let base = TOP + 2 * n * CELL + 6;
    for (k, col) in cols.iter().enumerate() {
        let x = LEFT + k * CELL + CELL / 2;
        let text = match col {
            Column::Token(t) => escape(&log.tokens[*t]),
            Column::Ellipsis { .. } => "…".to_string(),
        };
        let _ = writeln!(
            s,
            r#"<text transform="translate({x},{base}) rotate(60)">{text}</text>"#
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn render_heatmap(log: &MemoryLog, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_svg(log)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn log(n: usize, e: Vec<f64>, o: Vec<f64>, c: Vec<f64>) -> MemoryLog {
        let t = e.len();
        MemoryLog {
            doc_id: "d".into(),
            num_cells: n,
            tokens: (0..t).map(|k| format!("w{k}")).collect(),
            e,
            o,
            c,
            u: vec![0.0; t * n],
        }
    }

    #[test]
    fn grid_has_exact_points() {
        let g = threshold_grid();
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 0.01);
        assert_eq!(g[99], 1.0);
        assert_eq!(g[49], 0.5);
    }

    #[test]
    fn f1_cases() {
        let labels = [true, false, true, false];
        assert_eq!(gap_f1(&[0.9, 0.1, 0.8, 0.2], &labels, 0.5).f1, 1.0);
        let none = gap_f1(&[0.0; 4], &labels, 0.5);
        assert_eq!((none.recall, none.f1), (0.0, 0.0));
        // three instances, six links: 4 TP, 1 FP, 1 FN
        let scores = [0.9, 0.8, 0.7, 0.6, 0.2, 0.9];
        let labels = [true, true, true, true, true, false];
        let prf = gap_f1(&scores, &labels, 0.5);
        assert!((prf.precision - 0.8).abs() < 1e-15);
        assert!((prf.recall - 0.8).abs() < 1e-15);
        assert!((prf.f1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sweep_tie_rules() {
        let s = sweep_threshold_f1(&[1.0; 4], &[true; 4]);
        assert_eq!((s.best_threshold(), s.best_value()), (0.01, 1.0));
        // separated at 0.3 / 0.7: every threshold in (0.3, 0.7] is perfect, 0.31 chosen
        let s = sweep_threshold_f1(&[0.7, 0.3, 0.8, 0.2], &[true, false, true, false]);
        assert_eq!((s.best_threshold(), s.best_value()), (0.31, 1.0));
    }

    #[test]
    fn count_people_cases() {
        assert_eq!(count_people(&[0.9, 0.6, 0.4], 0.5), 2);
        assert_eq!(count_people(&[0.9, 0.6, 0.4], 1.01), 0);
    }

    #[test]
    fn count_sweep_edges() {
        // one crisp overwrite per person
        let logs = vec![log(2, vec![1.0; 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], vec![0.0; 6])];
        let s = sweep_threshold_count(&logs, &[2]);
        assert_eq!(s.best_value(), 0.0);
        let zeros = vec![log(2, vec![0.0; 3], vec![0.0; 6], vec![0.0; 6]); 2];
        let s = sweep_threshold_count(&zeros, &[3, 4]);
        assert!(s.values.iter().all(|&v| v == 7.0));
        assert_eq!(s.best_threshold(), 0.01);
    }

    #[test]
    fn kl_cases() {
        let uniform = vec![log(4, vec![1.0; 2], vec![0.25; 8], vec![0.0; 8])];
        assert!(overwrite_kl(&uniform).unwrap().value().unwrap().abs() < 1e-12);
        let onehot = vec![log(2, vec![1.0; 2], vec![1.0, 0.0, 0.5, 0.0], vec![0.0; 4])];
        let kl = overwrite_kl(&onehot).unwrap().value().unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);
        let none = vec![log(2, vec![1.0; 2], vec![0.0; 4], vec![0.0; 4])];
        assert_eq!(overwrite_kl(&none).unwrap(), OverwriteKl::NoOverwrites);
        assert_eq!(overwrite_kl(&[]).unwrap(), OverwriteKl::NoOverwrites);
        let mixed = vec![log(2, vec![1.0], vec![1.0, 0.0], vec![0.0; 2]), log(3, vec![1.0], vec![0.0; 3], vec![0.0; 3])];
        assert!(overwrite_kl(&mixed).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_header() {
        let mut l = log(2, vec![0.5, 0.25], vec![0.1, 0.2, 0.3, 0.4], vec![0.0, 0.1, 0.2, 1.0 / 3.0]);
        l.u = vec![0.1, 0.2, 0.3, 0.4];
        l.tokens[1] = "\"quoted\" tab\t".into();
        let text = l.to_jsonl().unwrap();
        let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(header, serde_json::json!({"doc_id": "d", "N": 2, "T": 2}));
        assert_eq!(MemoryLog::parse_jsonl(&text).unwrap(), l);
        let truncated: String = text.lines().take(2).map(|s| format!("{s}\n")).collect();
        assert!(matches!(MemoryLog::parse_jsonl(&truncated), Err(Error::Consistency(_))));
    }

    #[test]
    fn file_round_trip_and_unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let l = log(1, vec![0.5; 3], vec![0.1, 0.2, 0.3], vec![0.0; 3]);
        let p = dir.path().join("d.jsonl");
        l.write(&p).unwrap();
        assert_eq!(MemoryLog::read(&p).unwrap(), l);
        let bad = dir.path().join("missing").join("x.svg");
        assert!(matches!(render_heatmap(&l, &bad), Err(Error::Io { .. })));
    }

    #[test]
    fn zero_trace_compresses_everything() {
        let l = log(2, vec![0.0; 12], vec![0.0; 24], vec![0.0; 24]);
        assert_eq!(heatmap_columns(&l.e), vec![Column::Ellipsis { first: 0, last: 11 }]);
        let svg = heatmap_svg(&l);
        assert!(!svg.contains("rgb(0,0,0)"));
        assert!(svg.contains("…"));
        // short quiet runs stay visible
        let mut e = vec![0.0; 9];
        e.push(1.0);
        assert_eq!(heatmap_columns(&e).len(), 10);
    }

    #[test]
    fn scripted_trace_has_one_dark_overwrite_per_entity() {
        // entities 0, 1, 2 first mentioned at 0, 3, 15; repeats corefer; quiet stretch 4..=14
        let n = 3;
        let t = 20;
        let mut e = vec![0.0; t];
        let mut o = vec![0.0; t * n];
        let mut c = vec![0.0; t * n];
        for (t0, cell) in [(0, 0), (3, 1), (15, 2)] {
            e[t0] = 1.0;
            o[t0 * n + cell] = 1.0;
        }
        for (t0, cell) in [(1, 0), (16, 1), (18, 2), (19, 0)] {
            e[t0] = 1.0;
            c[t0 * n + cell] = 1.0;
        }
        let svg = heatmap_svg(&log(n, e, o, c));
        let dark_ow = svg
            .lines()
            .filter(|l| l.contains(r#"class="ow""#) && l.contains("data-v=\"1.0000\""))
            .count();
        assert_eq!(dark_ow, 3);
        assert_eq!(svg.matches("…").count(), 1);
    }

    fn sweep_oracle(scores: &[f64], labels: &[bool]) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for k in 1..=100usize {
            let th = k as f64 / 100.0;
            let pred: Vec<bool> = scores.iter().map(|&s| s >= th).collect();
            let tp = pred.iter().zip(labels).filter(|(p, l)| **p && **l).count() as f64;
            let np = pred.iter().filter(|p| **p).count() as f64;
            let ap = labels.iter().filter(|l| **l).count() as f64;
            let f = if tp == 0.0 { 0.0 } else { 2.0 * tp / (np + ap) };
            if f > best.1 + 1e-15 {
                best = (k - 1, f);
            }
        }
        best
    }

    proptest! {
        #[test]
        fn f1_sweep_matches_oracle(
            data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..40)
        ) {
            let (scores, labels): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
            let s = sweep_threshold_f1(&scores, &labels);
            let (k, f) = sweep_oracle(&scores, &labels);
            prop_assert!((s.best_value() - f).abs() < 1e-12);
            prop_assert_eq!(s.best_index, k);
        }

        #[test]
        fn count_sweep_matches_oracle(
            docs in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 2..12), 0usize..5), 1..8)
        ) {
            let logs: Vec<MemoryLog> = docs.iter().map(|(o, _)| log(1, vec![1.0; o.len()], o.clone(), vec![0.0; o.len()])).collect();
            let gold: Vec<usize> = docs.iter().map(|(_, g)| *g).collect();
            let s = sweep_threshold_count(&logs, &gold);
            let mut best = (0usize, i64::MAX);
            for k in 1..=100usize {
                let err: i64 = docs.iter().map(|(o, g)| {
                    let mut cnt = 0i64;
                    for v in o { if *v >= k as f64 / 100.0 { cnt += 1; } }
                    (cnt - *g as i64).abs()
                }).sum();
                if err < best.1 { best = (k - 1, err); }
            }
            prop_assert_eq!(s.best_index, best.0);
            prop_assert_eq!(s.best_value(), best.1 as f64);
        }

        #[test]
        fn count_is_monotone_in_alpha(o in prop::collection::vec(0.0f64..1.0, 0..50), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(count_people(&o, hi) <= count_people(&o, lo));
        }

        #[test]
        fn kl_matches_formula_and_is_order_invariant(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..20),
            split in 0usize..20,
        ) {
            let split = split.min(rows.len());
            let mk = |rs: &[Vec<f64>]| log(3, vec![1.0; rs.len()], rs.concat(), vec![0.0; rs.len() * 3]);
            let mut logs = vec![mk(&rows[..split]), mk(&rows[split..])];
            logs.retain(|l| !l.is_empty());
            let kl = overwrite_kl(&logs).unwrap();
            let mut mass = [0.0; 3];
            for l in &logs {
                for t in 0..l.len() { for (i, m) in mass.iter_mut().enumerate() { *m += l.o[t * 3 + i] / logs.len() as f64; } }
            }
            let z: f64 = mass.iter().sum();
            if z == 0.0 {
                prop_assert_eq!(kl, OverwriteKl::NoOverwrites);
            } else {
                let want: f64 = mass.iter().map(|m| m / z).filter(|p| *p > 0.0).map(|p| p * (p * 3.0).ln()).sum();
                let got = kl.value().unwrap();
                prop_assert!(got >= 0.0);
                prop_assert!((got - want.max(0.0)).abs() < 1e-12);
            }
            logs.reverse();
            let back = overwrite_kl(&logs).unwrap();
            prop_assert!((back.value().unwrap_or(0.0) - kl.value().unwrap_or(0.0)).abs() < 1e-15);
        }
    }
}
