//! Documents, annotated span-pair instances, and their on-disk formats.

mod align;
mod gap;
mod ptem;
mod synthetic;

pub use align::{align_span, span_to_chars};
pub use gap::{load_gap, read_gap_rows, write_gap, GapRow};
pub use ptem::{
    load_documents, load_embeddings, manifest_path, read_manifest, read_ptem, write_manifest,
    write_ptem, ManifestEntry,
};
pub use synthetic::{
    generate_synthetic, read_counts, write_counts, write_corpus, SyntheticCorpus, SyntheticRecord,
    SyntheticSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `T × D` matrix of frozen 32-bit token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Embeddings {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows * dim != data.len() {
            return Err(Error::Shape(format!(
                "{rows}×{dim} embedding matrix needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        Ok(Embeddings { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.rows, self.dim],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("embedding shape is consistent by construction")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
    /// Per-token `(start, end)` character offsets, end exclusive.
    pub char_offsets: Vec<(usize, usize)>,
    pub embeddings: Embeddings,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<String>,
        char_offsets: Vec<(usize, usize)>,
        embeddings: Embeddings,
    ) -> Result<Self> {
        let doc = Document {
            id: id.into(),
            tokens,
            char_offsets,
            embeddings,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.tokens.len();
        if t == 0 {
            return Err(Error::Consistency(format!("document `{}` has no tokens", self.id)));
        }
        if self.char_offsets.len() != t {
            return Err(Error::Consistency(format!(
                "document `{}`: {} tokens but {} offsets",
                self.id,
                t,
                self.char_offsets.len()
            )));
        }
        if self.embeddings.rows() != t {
            return Err(Error::Consistency(format!(
                "document `{}`: {} tokens but {} embedding rows",
                self.id,
                t,
                self.embeddings.rows()
            )));
        }
        for (k, &(s, e)) in self.char_offsets.iter().enumerate() {
            if e < s {
                return Err(Error::Consistency(format!(
                    "document `{}`: token {k} has inverted offsets ({s}, {e})",
                    self.id
                )));
            }
            if k > 0 {
                let (ps, pe) = self.char_offsets[k - 1];
                if s <= ps || s < pe {
                    return Err(Error::Consistency(format!(
                        "document `{}`: token {k} offsets ({s}, {e}) overlap or precede token {} ({ps}, {pe})",
                        self.id,
                        k - 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Inclusive token-index range; the first token is the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub first: usize,
    pub last: usize,
}

impl Span {
    pub fn new(first: usize, last: usize) -> Self {
        assert!(first <= last, "span [{first}, {last}] is inverted");
        Span { first, last }
    }

    pub fn single(t: usize) -> Self {
        Span { first: t, last: t }
    }

    pub fn head(&self) -> usize {
        self.first
    }

    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        self.first <= t && t <= self.last
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.first <= other.last && other.first <= self.last
    }

    pub fn tokens(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorefInstance {
    pub doc: Document,
    pub span_a: Span,
    pub span_b: Span,
    pub span_p: Span,
    pub label_a: bool,
    pub label_b: bool,
}

impl CorefInstance {
    pub fn validate(&self) -> Result<()> {
        self.doc.validate()?;
        let t = self.doc.len();
        for (name, span) in [("A", self.span_a), ("B", self.span_b), ("pronoun", self.span_p)] {
            if span.first > span.last || span.last >= t {
                return Err(Error::Consistency(format!(
                    "document `{}`: span {name} [{}, {}] outside [0, {t})",
                    self.doc.id, span.first, span.last
                )));
            }
        }
        if self.span_a.overlaps(&self.span_b) {
            return Err(Error::Consistency(format!(
                "document `{}`: candidate spans overlap",
                self.doc.id
            )));
        }
        Ok(())
    }

    pub fn spans(&self) -> [Span; 3] {
        [self.span_a, self.span_b, self.span_p]
    }

    pub fn labels(&self) -> [bool; 2] {
        [self.label_a, self.label_b]
    }
}
