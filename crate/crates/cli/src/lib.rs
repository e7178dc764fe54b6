//! Command implementations behind the `petra` binary.

pub mod commands;
pub mod config;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use petra::corpus::{generate_synthetic, load_gap, read_counts, CorefInstance};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{RunConfig, Split};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags or missing inputs.
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] petra::Error),
    /// A check that ran to completion but did not pass.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Core(_) | CliError::Failed(_) => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    EvalGap,
    CountPeople,
    Visualize,
    GenSynth,
    SweepMemory,
    GradCheck,
}

impl Command {
    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Command::EvalGap | Command::CountPeople | Command::Visualize)
    }
}

pub struct Invocation {
    pub command: Command,
    pub config: RunConfig,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

/// `--seed` replaces the seed of the command's own random stage.
pub fn apply_seed(config: &mut RunConfig, command: Command, seed: u64) {
    match command {
        Command::GenSynth => config.synthetic.seed = seed,
        Command::GradCheck => config.grad_check.seed = seed,
        _ => config.train.seed = seed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub config_hash: String,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_file(out: &Path, rel: &str, contents: impl AsRef<[u8]>) -> Result<String, CliError> {
    let path = out.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| petra::Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(&path, contents).map_err(|e| petra::Error::Io { path, source: e })?;
    Ok(rel.to_string())
}

fn manifest_for(out: &Path, command: Command, config: &RunConfig, mut files: Vec<String>) -> Result<Manifest, CliError> {
    files.sort();
    files.dedup();
    let mut entries = Vec::with_capacity(files.len());
    for rel in files {
        let path = out.join(&rel);
        let bytes = fs::read(&path).map_err(|e| petra::Error::Io { path, source: e })?;
        entries.push(FileEntry { path: rel, bytes: bytes.len() as u64, sha256: hex_digest(&bytes) });
    }
    Ok(Manifest { command, config_hash: config.hash(), files: entries })
}

/// Runs one command and writes `config.toml` and `manifest.json` next to its outputs.
pub fn execute(inv: &Invocation) -> Result<Manifest, CliError> {
    inv.config.validate()?;
    if inv.command.needs_checkpoint() && inv.checkpoint.is_none() {
        return Err(CliError::Invalid("this command needs --checkpoint".into()));
    }
    if let Some(p) = &inv.checkpoint {
        if !p.is_file() {
            return Err(CliError::Invalid(format!("checkpoint {} does not exist", p.display())));
        }
    }
    fs::create_dir_all(&inv.out).map_err(|e| petra::Error::Io { path: inv.out.clone(), source: e })?;
    let mut files = commands::run(inv)?;
    files.push(write_file(&inv.out, "config.toml", inv.config.to_toml())?);
    let manifest = manifest_for(&inv.out, inv.command, &inv.config, files)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(petra::Error::from)?;
    write_file(&inv.out, MANIFEST_FILE, json + "\n")?;
    Ok(manifest)
}

/// Instances of one split with optional gold people counts aligned to them.
pub struct SplitData {
    pub instances: Vec<CorefInstance>,
    pub counts: Option<Vec<usize>>,
}

pub fn load_split(config: &RunConfig, split: Split) -> Result<SplitData, CliError> {
    if config.synthetic_data() {
        let corpus = generate_synthetic(&config.synthetic.spec(split))?;
        let counts = corpus.records.iter().map(|r| r.people()).collect();
        return Ok(SplitData { instances: corpus.instances, counts: Some(counts) });
    }
    let Some((tsv, emb)) = config.split_files(split) else {
        return Err(CliError::Invalid(format!("no {} data configured", split.name())));
    };
    for p in [&tsv, &emb] {
        if !p.is_file() {
            return Err(CliError::Invalid(format!("{} input {} does not exist", split.name(), p.display())));
        }
    }
    Ok(SplitData { instances: load_gap(&tsv, &emb)?, counts: None })
}

/// The evaluation split restricted to documents with gold counts.
pub fn load_counted(config: &RunConfig) -> Result<SplitData, CliError> {
    let split = config.eval_split();
    let mut data = load_split(config, split)?;
    if data.counts.is_some() {
        return Ok(data);
    }
    let path = config.counts_path().expect("file-backed split has a counts path");
    if !path.is_file() {
        return Err(CliError::Invalid(format!("counts file {} does not exist", path.display())));
    }
    let gold = read_counts(&path)?;
    data.instances.retain(|i| gold.contains_key(&i.doc.id));
    if data.instances.is_empty() {
        return Err(CliError::Invalid(format!("no {} document has a count in {}", split.name(), path.display())));
    }
    data.counts = Some(data.instances.iter().map(|i| gold[&i.doc.id]).collect());
    Ok(data)
}
