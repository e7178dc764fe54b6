use std::fmt::Write as _;
use std::path::Path;

use petra::checkpoint;
use petra::corpus::{generate_synthetic, write_corpus, SyntheticSpec};
use petra::evaluation::{
    count_people, gap_f1, heatmap_svg, overwrite_kl, sweep_threshold_count, MemoryLog,
};
use petra::model::{ModelConfig, PetraModel};
use petra::trainer::{grad_check, TrainConfig, history_csv, inference_seed, score_instances, validation_sweep, TrainState};
use serde_json::json;

use crate::config::{RunConfig, Split};
use crate::plot::{sweep_svg, SweepPoint};
use crate::{load_counted, load_split, write_file, CliError, Command, Invocation};

pub const CHECKPOINT_FILE: &str = "checkpoint.ptck";

pub fn run(inv: &Invocation) -> Result<Vec<String>, CliError> {
    let (cfg, out) = (&inv.config, inv.out.as_path());
    match inv.command {
        Command::Train => train(cfg, out, inv.checkpoint.as_deref()),
        Command::EvalGap => eval_gap(cfg, out, &load_model(cfg, inv)?),
        Command::CountPeople => count(cfg, out, &load_model(cfg, inv)?),
        Command::Visualize => visualize(cfg, out, &load_model(cfg, inv)?),
        Command::GenSynth => gen_synth(cfg, out),
        Command::SweepMemory => sweep_memory(cfg, out),
        Command::GradCheck => run_grad_check(cfg, out),
    }
}

fn json_text(v: serde_json::Value) -> String {
    serde_json::to_string_pretty(&v).expect("JSON values serialize") + "\n"
}

fn load_model(cfg: &RunConfig, inv: &Invocation) -> Result<PetraModel, CliError> {
    cfg.validate_data()?;
    let state = checkpoint::load(inv.checkpoint.as_deref().expect("checked by execute"))?;
    Ok(state.best_model().clone())
}

fn fresh_state(model: ModelConfig, cfg: &RunConfig, seed: u64) -> Result<TrainState, CliError> {
    let train = TrainConfig { seed, ..cfg.train.clone() };
    Ok(TrainState::new(PetraModel::new(model, seed)?, train)?)
}

fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<Vec<String>, CliError> {
    cfg.validate_data()?;
    let mut state = match resume {
        Some(p) => {
            let mut s = checkpoint::load(p)?;
            // Only the epoch budget may change between a run and its continuation.
            let same_train = TrainConfig { max_epochs: s.config.max_epochs, ..cfg.train.clone() } == s.config;
            if s.model.config != cfg.model || !same_train {
                return Err(CliError::Invalid(format!(
                    "checkpoint {} was written with a different [model] or [train] config",
                    p.display()
                )));
            }
            s.config.max_epochs = cfg.train.max_epochs;
            s
        }
        None => fresh_state(cfg.model.clone(), cfg, cfg.train.seed)?,
    };
    let train = load_split(cfg, Split::Train)?.instances;
    let val = load_split(cfg, Split::Validation)?.instances;
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(&state, &ckpt)?;
    while !state.finished() {
        let r = state.run_epoch(&train, &val)?;
        eprintln!(
            "epoch {:3}  loss {:.4}  val_f1 {:.4} @ {:.2}  lr {:.1e}  tau {:.3}",
            r.epoch, r.train_loss, r.val_f1, r.val_threshold, r.lr, r.tau
        );
        checkpoint::save(&state, &ckpt)?;
    }
    let s = &state.schedule;
    let best = s.best_epoch.map(|e| &state.history[e]);
    let metrics = json!({
        "epochs_run": state.epoch,
        "stopped_early": s.stopped,
        "best_epoch": s.best_epoch,
        "best_val_f1": best.map(|r| r.val_f1),
        "best_val_threshold": best.map(|r| r.val_threshold),
    });
    Ok(vec![
        CHECKPOINT_FILE.to_string(),
        write_file(out, "history.csv", history_csv(&state.history))?,
        write_file(out, "metrics.json", json_text(metrics))?,
    ])
}

fn eval_gap(cfg: &RunConfig, out: &Path, model: &PetraModel) -> Result<Vec<String>, CliError> {
    let seed = cfg.train.seed;
    let val = load_split(cfg, Split::Validation)?.instances;
    let sweep = validation_sweep(model, &val, seed)?;
    let threshold = sweep.best_threshold();

    let split = cfg.eval_split();
    let eval = if split == Split::Validation { val } else { load_split(cfg, split)?.instances };
    let (scores, labels) = score_instances(model, &eval, seed)?;
    let prf = gap_f1(&scores, &labels, threshold);

    let mut sweep_csv = String::from("threshold,f1\n");
    for (t, v) in sweep.thresholds.iter().zip(&sweep.values) {
        writeln!(sweep_csv, "{t:.2},{v}").unwrap();
    }
    let mut tsv = String::from("id\tscore_a\tscore_b\tgold_a\tgold_b\tpred_a\tpred_b\n");
    for (k, inst) in eval.iter().enumerate() {
        let (a, b) = (scores[2 * k], scores[2 * k + 1]);
        writeln!(
            tsv,
            "{}\t{a}\t{b}\t{}\t{}\t{}\t{}",
            inst.doc.id,
            labels[2 * k],
            labels[2 * k + 1],
            a >= threshold,
            b >= threshold
        )
        .unwrap();
    }
    let metrics = json!({
        "threshold": threshold,
        "validation_f1": sweep.best_value(),
        "split": split.name(),
        "instances": eval.len(),
        "precision": prf.precision,
        "recall": prf.recall,
        "f1": prf.f1,
    });
    eprintln!("{} F1 {:.4} (P {:.4} R {:.4}) at threshold {threshold:.2}", split.name(), prf.f1, prf.precision, prf.recall);
    Ok(vec![
        write_file(out, "sweep.csv", sweep_csv)?,
        write_file(out, "scores.tsv", tsv)?,
        write_file(out, "metrics.json", json_text(metrics))?,
    ])
}

fn memory_logs(model: &PetraModel, insts: &[petra::corpus::CorefInstance], seed: u64) -> Result<Vec<MemoryLog>, CliError> {
    insts
        .iter()
        .map(|i| {
            let traces = model.infer(&i.doc, inference_seed(seed, &i.doc.id))?;
            Ok(MemoryLog::from_traces(&i.doc, &traces)?)
        })
        .collect()
}

fn count(cfg: &RunConfig, out: &Path, model: &PetraModel) -> Result<Vec<String>, CliError> {
    let data = load_counted(cfg)?;
    let gold = data.counts.expect("load_counted fills counts");
    let logs = memory_logs(model, &data.instances, cfg.train.seed)?;
    let sweep = sweep_threshold_count(&logs, &gold);
    let alpha = sweep.best_threshold();
    let kl = overwrite_kl(&logs)?;

    let mut sweep_csv = String::from("alpha,total_error\n");
    for (t, v) in sweep.thresholds.iter().zip(&sweep.values) {
        writeln!(sweep_csv, "{t:.2},{v}").unwrap();
    }
    let mut tsv = String::from("doc_id\tgold\tpredicted\n");
    for (log, g) in logs.iter().zip(&gold) {
        writeln!(tsv, "{}\t{g}\t{}", log.doc_id, count_people(&log.o, alpha)).unwrap();
    }
    let n = logs.len() as f64;
    let metrics = json!({
        "alpha": alpha,
        "total_error": sweep.best_value(),
        "documents": logs.len(),
        "error_per_document": sweep.best_value() / n,
        "overwrite_kl": kl,
    });
    eprintln!("best alpha {alpha:.2}: {} errors over {} documents, overwrite KL {kl}", sweep.best_value(), logs.len());
    Ok(vec![
        write_file(out, "count_sweep.csv", sweep_csv)?,
        write_file(out, "counts.tsv", tsv)?,
        write_file(out, "metrics.json", json_text(metrics))?,
    ])
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

fn visualize(cfg: &RunConfig, out: &Path, model: &PetraModel) -> Result<Vec<String>, CliError> {
    let split = cfg.eval_split();
    let mut insts = load_split(cfg, split)?.instances;
    let wanted = &cfg.visualize.docs;
    if wanted.is_empty() {
        insts.truncate(cfg.visualize.max_docs);
    } else {
        if let Some(missing) = wanted.iter().find(|id| !insts.iter().any(|i| &i.doc.id == *id)) {
            return Err(CliError::Invalid(format!("document `{missing}` is not in the {} split", split.name())));
        }
        insts.retain(|i| wanted.contains(&i.doc.id));
    }
    let mut files = Vec::new();
    for log in memory_logs(model, &insts, cfg.train.seed)? {
        let stem = file_stem(&log.doc_id);
        files.push(write_file(out, &format!("logs/{stem}.jsonl"), log.to_jsonl()?)?);
        files.push(write_file(out, &format!("heatmaps/{stem}.svg"), heatmap_svg(&log))?);
    }
    Ok(files)
}

fn gen_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<String>, CliError> {
    let mut files = Vec::new();
    for split in [Split::Train, Split::Validation, Split::Test] {
        let spec = cfg.synthetic.spec(split);
        if spec.num_docs == 0 {
            continue;
        }
        let corpus = generate_synthetic(&spec)?;
        for p in write_corpus(out, split.name(), &corpus)? {
            let rel = p.strip_prefix(out).expect("written under out").to_string_lossy().into_owned();
            files.push(rel);
        }
    }
    Ok(files)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn sweep_memory(cfg: &RunConfig, out: &Path) -> Result<Vec<String>, CliError> {
    cfg.validate_data()?;
    let train = load_split(cfg, Split::Train)?.instances;
    let val = load_split(cfg, Split::Validation)?.instances;
    let mut runs_csv = String::from("cells,run,seed,epochs,best_epoch,val_f1\n");
    let mut points = Vec::new();
    for &n in &cfg.sweep.cells {
        let mut f1s = Vec::with_capacity(cfg.sweep.runs);
        for r in 0..cfg.sweep.runs {
            let seed = cfg.train.seed.wrapping_add(r as u64);
            let mut state = fresh_state(ModelConfig { num_cells: n, ..cfg.model.clone() }, cfg, seed)?;
            state.train(&train, &val, |_| {})?;
            let s = &state.schedule;
            let f1 = s.best_epoch.map_or(0.0, |_| s.best_f1);
            eprintln!("N={n:2} run {r}: val F1 {f1:.4} after {} epochs", state.epoch);
            let best = s.best_epoch.map_or(String::new(), |e| e.to_string());
            writeln!(runs_csv, "{n},{r},{seed},{},{best},{f1}", state.epoch).unwrap();
            f1s.push(f1);
        }
        let (mean, std) = mean_std(&f1s);
        points.push(SweepPoint { cells: n, mean, std });
    }
    let mut table = String::from("cells,runs,mean_f1,std_f1\n");
    for p in &points {
        writeln!(table, "{},{},{},{}", p.cells, cfg.sweep.runs, p.mean, p.std).unwrap();
    }
    Ok(vec![
        write_file(out, "runs.csv", runs_csv)?,
        write_file(out, "sweep.csv", table)?,
        write_file(out, "sweep.svg", sweep_svg(&points))?,
    ])
}

fn run_grad_check(cfg: &RunConfig, out: &Path) -> Result<Vec<String>, CliError> {
    let g = &cfg.grad_check;
    let spec = SyntheticSpec {
        num_docs: 1,
        doc_length: (g.tokens, g.tokens),
        num_entities: (2, 2),
        mentions_per_entity: (1, 2),
        embed_dim: g.input_dim,
        seed: g.seed,
        ..SyntheticSpec::default()
    };
    let inst = generate_synthetic(&spec)?.instances.remove(0);
    let mut reports = serde_json::Map::new();
    let mut failed = Vec::new();
    for &variant in &g.variants {
        let model = PetraModel::new(
            ModelConfig {
                input_dim: g.input_dim,
                hidden_dim: g.hidden_dim,
                num_cells: g.num_cells,
                variant,
                key_dim: g.key_dim,
                mlp_hidden: g.mlp_hidden,
                ..cfg.model.clone()
            },
            g.seed,
        )?;
        let report = grad_check(&model, &inst, &cfg.train, g.seed, g.step, g.tolerance)?;
        let name = serde_json::to_value(variant).map_err(petra::Error::from)?;
        let name = name.as_str().expect("variants serialize as strings").to_string();
        eprintln!(
            "{name:13} max relative error {:.3e}  {}",
            report.max_rel_error,
            if report.passed { "ok" } else { "FAILED" }
        );
        if !report.passed {
            failed.push(format!("{name} ({:.3e})", report.max_rel_error));
        }
        reports.insert(name, serde_json::to_value(&report).map_err(petra::Error::from)?);
    }
    let file = write_file(out, "grad_check.json", json_text(serde_json::Value::Object(reports)))?;
    if !failed.is_empty() {
        return Err(CliError::Failed(format!(
            "gradient check above tolerance {:e} for {}",
            g.tolerance,
            failed.join(", ")
        )));
    }
    Ok(vec![file])
}
