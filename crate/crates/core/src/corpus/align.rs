use super::{Document, Span};
use crate::error::{Error, Result};

/// Maps the character range `[start, end)` to the minimal token range covering it.
///
/// Every token that shares at least one character with the range is included, so a
/// range ending mid-token resolves to that whole token.
pub fn align_span(doc: &Document, start: usize, end: usize) -> Result<Span> {
    let offsets = &doc.char_offsets;
    let overlaps = |&(s, e): &(usize, usize)| s < end && start < e;
    // offsets are sorted and disjoint, so the overlapping tokens are contiguous
    let first = offsets.iter().position(overlaps);
    let last = offsets.iter().rposition(overlaps);
    match (first, last) {
        (Some(first), Some(last)) if start < end => Ok(Span { first, last }),
        _ => Err(Error::Alignment {
            doc: doc.id.clone(),
            start,
            end,
        }),
    }
}

/// Character range spanned by a token range.
pub fn span_to_chars(doc: &Document, span: Span) -> (usize, usize) {
    (doc.char_offsets[span.first].0, doc.char_offsets[span.last].1)
}
