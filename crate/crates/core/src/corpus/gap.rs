//! GAP-layout TSV: `ID Text Pronoun Pronoun-offset A A-offset A-coref B B-offset B-coref URL`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::align::align_span;
use super::ptem::load_documents;
use super::CorefInstance;
use crate::error::{Error, Result};

const HEADER: [&str; 11] = [
    "ID",
    "Text",
    "Pronoun",
    "Pronoun-offset",
    "A",
    "A-offset",
    "A-coref",
    "B",
    "B-offset",
    "B-coref",
    "URL",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GapRow {
    pub id: String,
    pub text: String,
    pub pronoun: String,
    pub pronoun_offset: usize,
    pub a: String,
    pub a_offset: usize,
    pub a_coref: bool,
    pub b: String,
    pub b_offset: usize,
    pub b_coref: bool,
    pub url: String,
}

fn parse_bool(s: &str, line: usize) -> Result<bool> {
    match s.trim().to_ascii_uppercase().as_str() {
        "TRUE" => Ok(true),
        "FALSE" => Ok(false),
        other => Err(Error::Format(format!("line {line}: expected TRUE/FALSE, got `{other}`"))),
    }
}

fn parse_offset(s: &str, line: usize) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {line}: bad offset `{s}`")))
}

pub fn read_gap_rows(path: &Path) -> Result<Vec<GapRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty TSV", path.display())))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 10 || cols[..10] != HEADER[..10] {
        return Err(Error::Format(format!(
            "{}: header does not follow the GAP column layout",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 10 {
            return Err(Error::Format(format!(
                "line {lineno}: expected at least 10 columns, got {}",
                f.len()
            )));
        }
        rows.push(GapRow {
            id: f[0].to_string(),
            text: f[1].to_string(),
            pronoun: f[2].to_string(),
            pronoun_offset: parse_offset(f[3], lineno)?,
            a: f[4].to_string(),
            a_offset: parse_offset(f[5], lineno)?,
            a_coref: parse_bool(f[6], lineno)?,
            b: f[7].to_string(),
            b_offset: parse_offset(f[8], lineno)?,
            b_coref: parse_bool(f[9], lineno)?,
            url: f.get(10).copied().unwrap_or("").to_string(),
        });
    }
    Ok(rows)
}

pub fn write_gap(path: &Path, rows: &[GapRow]) -> Result<()> {
    let mut out = Vec::new();
    let b = |v: bool| if v { "TRUE" } else { "FALSE" };
    writeln!(out, "{}", HEADER.join("\t")).expect("write to Vec");
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.id,
            r.text,
            r.pronoun,
            r.pronoun_offset,
            r.a,
            r.a_offset,
            b(r.a_coref),
            r.b,
            r.b_offset,
            b(r.b_coref),
            r.url
        )
        .expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Offsets count Unicode scalar values, matching the exporter's manifest.
fn check_mention(row: &GapRow, mention: &str, offset: usize) -> Result<(usize, usize)> {
    let n = mention.chars().count();
    let found: String = row.text.chars().skip(offset).take(n).collect();
    if found != mention {
        return Err(Error::Consistency(format!(
            "`{}`: text at offset {offset} is `{found}`, expected `{mention}`",
            row.id
        )));
    }
    Ok((offset, offset + n))
}

/// Loads annotated instances and joins them with precomputed embeddings.
pub fn load_gap(tsv_path: &Path, embed_path: &Path) -> Result<Vec<CorefInstance>> {
    let rows = read_gap_rows(tsv_path)?;
    let mut docs = load_documents(embed_path)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let doc = docs
            .remove(&row.id)
            .ok_or_else(|| Error::MissingDocument(row.id.clone()))?;
        let align = |mention: &str, offset| -> Result<_> {
            let (s, e) = check_mention(&row, mention, offset)?;
            align_span(&doc, s, e)
        };
        let span_a = align(&row.a, row.a_offset)?;
        let span_b = align(&row.b, row.b_offset)?;
        let span_p = align(&row.pronoun, row.pronoun_offset)?;
        let inst = CorefInstance {
            doc,
            span_a,
            span_b,
            span_p,
            label_a: row.a_coref,
            label_b: row.b_coref,
        };
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}
