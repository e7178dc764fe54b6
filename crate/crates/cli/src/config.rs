//! The single declarative run file that drives every command.
//!
//! TOML with the sections `[model]`, `[train]`, `[train.loss_weights]`, `[data]`,
//! `[synthetic]`, `[visualize]`, `[sweep]` and `[grad_check]`. Every key is optional and
//! falls back to its default; unknown keys are errors.

use std::path::{Path, PathBuf};

use petra::corpus::SyntheticSpec;
use petra::memory::Variant;
use petra::model::ModelConfig;
use petra::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synthetic: SynthConfig,
    pub visualize: VisualizeConfig,
    pub sweep: SweepConfig,
    pub grad_check: GradCheckConfig,
}

/// GAP-layout TSV files. An empty `train` means all splits are generated from `[synthetic]`.
/// Empty embedding paths default to the TSV path with a `.ptem` extension and empty
/// counts to `<test or validation stem>.counts.tsv`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: String,
    pub train_embeddings: String,
    pub validation: String,
    pub validation_embeddings: String,
    pub test: String,
    pub test_embeddings: String,
    pub counts: String,
}

/// Train, validation and test corpora use seeds `seed`, `seed + 1` and `seed + 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_docs: usize,
    pub validation_docs: usize,
    pub test_docs: usize,
    pub doc_length: (usize, usize),
    pub num_entities: (usize, usize),
    pub mentions_per_entity: (usize, usize),
    pub embed_dim: usize,
    pub noise_scale: f64,
    pub entity_pool: usize,
    pub pool_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        SynthConfig {
            seed: s.seed,
            train_docs: 500,
            validation_docs: 100,
            test_docs: 100,
            doc_length: s.doc_length,
            num_entities: s.num_entities,
            mentions_per_entity: s.mentions_per_entity,
            embed_dim: s.embed_dim,
            noise_scale: s.noise_scale,
            entity_pool: s.entity_pool,
            pool_seed: s.pool_seed,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self, split: Split) -> SyntheticSpec {
        let (num_docs, offset) = match split {
            Split::Train => (self.train_docs, 0),
            Split::Validation => (self.validation_docs, 1),
            Split::Test => (self.test_docs, 2),
        };
        SyntheticSpec {
            num_docs,
            doc_length: self.doc_length,
            num_entities: self.num_entities,
            mentions_per_entity: self.mentions_per_entity,
            embed_dim: self.embed_dim,
            noise_scale: self.noise_scale,
            entity_pool: self.entity_pool,
            pool_seed: self.pool_seed,
            seed: self.seed.wrapping_add(offset),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualizeConfig {
    /// Document ids to render; empty renders the first `max_docs` of the evaluation split.
    pub docs: Vec<String>,
    pub max_docs: usize,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        VisualizeConfig { docs: Vec::new(), max_docs: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub cells: Vec<usize>,
    /// Training runs per memory size; run `r` uses seed `train.seed + r`.
    pub runs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { cells: (1..=10).map(|k| 2 * k).collect(), runs: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    pub step: f64,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_cells: usize,
    pub tokens: usize,
    pub key_dim: usize,
    pub mlp_hidden: usize,
    pub variants: Vec<Variant>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            tolerance: 1e-4,
            step: petra::trainer::GRAD_CHECK_STEP,
            input_dim: 4,
            hidden_dim: 6,
            num_cells: 3,
            tokens: 5,
            key_dim: 2,
            mlp_hidden: 5,
            variants: Variant::ALL.to_vec(),
            seed: 0,
        }
    }
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => out.push(path),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => unknown_keys(g, kn, &path, out),
            _ => {}
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e| CliError::Invalid(format!("config is not valid TOML: {e}")))?;
        let known = toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&table, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(CliError::Invalid(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig = table.try_into().map_err(|e| CliError::Invalid(format!("bad config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Collects every problem instead of stopping at the first.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let mut check = |section: &str, r: petra::Result<()>| {
            if let Err(e) = r {
                problems.push(format!("[{section}] {e}"));
            }
        };
        check("model", self.model.validate());
        check("train", self.train.validate());
        let d = &self.data;
        if d.train.is_empty() {
            for split in [Split::Train, Split::Validation, Split::Test] {
                check("synthetic", self.synthetic.spec(split).validate());
            }
            if self.synthetic.train_docs == 0 || self.synthetic.validation_docs == 0 {
                problems.push("[synthetic] train_docs and validation_docs must be positive".into());
            }
        } else if d.validation.is_empty() {
            problems.push("[data] validation is required when train is set".into());
        }
        for (key, path, tsv) in [
            ("train_embeddings", &d.train_embeddings, &d.train),
            ("validation_embeddings", &d.validation_embeddings, &d.validation),
            ("test_embeddings", &d.test_embeddings, &d.test),
        ] {
            if !path.is_empty() && tsv.is_empty() {
                problems.push(format!("[data] {key} is set without its TSV"));
            }
        }
        if d.train.is_empty() && (!d.validation.is_empty() || !d.test.is_empty()) {
            problems.push("[data] validation/test files need a train file too".into());
        }
        if self.sweep.cells.is_empty() || self.sweep.cells.contains(&0) || self.sweep.runs == 0 {
            problems.push("[sweep] cells must be non-empty and positive, runs at least 1".into());
        }
        let g = &self.grad_check;
        if !(g.tolerance > 0.0 && g.step > 0.0) {
            problems.push("[grad_check] tolerance and step must be positive".into());
        }
        if g.input_dim == 0 || g.hidden_dim == 0 || g.num_cells == 0 || g.mlp_hidden == 0 || g.key_dim == 0 {
            problems.push("[grad_check] dimensions must be positive".into());
        }
        if g.tokens < 5 {
            problems.push("[grad_check] tokens must be at least 5 to hold two names and a pronoun".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Invalid(problems.join("; ")))
        }
    }

    /// Checks that only matter to commands that feed documents through the model.
    pub fn validate_data(&self) -> Result<(), CliError> {
        if self.synthetic_data() && self.model.input_dim != self.synthetic.embed_dim {
            return Err(CliError::Invalid(format!(
                "[model] input_dim {} differs from synthetic.embed_dim {}",
                self.model.input_dim, self.synthetic.embed_dim
            )));
        }
        Ok(())
    }

    pub fn synthetic_data(&self) -> bool {
        self.data.train.is_empty()
    }

    /// TSV and embedding paths of a file-backed split, if configured.
    pub fn split_files(&self, split: Split) -> Option<(PathBuf, PathBuf)> {
        let d = &self.data;
        let (tsv, emb) = match split {
            Split::Train => (&d.train, &d.train_embeddings),
            Split::Validation => (&d.validation, &d.validation_embeddings),
            Split::Test => (&d.test, &d.test_embeddings),
        };
        if tsv.is_empty() {
            return None;
        }
        let tsv = PathBuf::from(tsv);
        let emb = if emb.is_empty() { tsv.with_extension("ptem") } else { PathBuf::from(emb) };
        Some((tsv, emb))
    }

    /// Test when configured, otherwise validation.
    pub fn eval_split(&self) -> Split {
        let has_test = if self.synthetic_data() { self.synthetic.test_docs > 0 } else { !self.data.test.is_empty() };
        if has_test {
            Split::Test
        } else {
            Split::Validation
        }
    }

    pub fn counts_path(&self) -> Option<PathBuf> {
        if !self.data.counts.is_empty() {
            return Some(PathBuf::from(&self.data.counts));
        }
        self.split_files(self.eval_split()).map(|(tsv, _)| tsv.with_extension("counts.tsv"))
    }
}
