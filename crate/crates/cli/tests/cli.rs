use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use petra_cli::{apply_seed, execute, Command, Invocation, RunConfig, MANIFEST_FILE};
use serde_json::Value;

fn small_config(synth: &Path, epochs: usize) -> RunConfig {
    let d = synth.display();
    RunConfig::parse(&format!(
        r#"
[model]
input_dim = 32
hidden_dim = 16
num_cells = 4
mlp_hidden = 16
dropout = 0.0
coref_usage_threshold = 0.1

[train]
max_epochs = {epochs}
lambda = 1.0

[synthetic]
train_docs = 60
validation_docs = 30
test_docs = 30

[data]
train = "{d}/train.tsv"
validation = "{d}/validation.tsv"
test = "{d}/test.tsv"
"#
    ))
    .unwrap()
}

fn run(command: Command, config: &RunConfig, out: &Path, checkpoint: Option<PathBuf>) -> petra_cli::Manifest {
    execute(&Invocation { command, config: config.clone(), out: out.to_path_buf(), checkpoint }).unwrap()
}

fn gen_synth(dir: &Path) -> PathBuf {
    let synth = dir.join("synth");
    let mut cfg = small_config(&synth, 0);
    apply_seed(&mut cfg, Command::GenSynth, 7);
    run(Command::GenSynth, &cfg, &synth, None);
    synth
}

fn metrics(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn golden_eval_f1() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = gen_synth(tmp.path());
    let cfg = small_config(&synth, 3);
    let train = tmp.path().join("train");
    run(Command::Train, &cfg, &train, None);
    let eval = tmp.path().join("eval");
    run(Command::EvalGap, &cfg, &eval, Some(train.join("checkpoint.ptck")));

    let golden: Value =
        serde_json::from_str(include_str!("golden/eval_gap.json")).unwrap();
    let got = metrics(&eval);
    for key in ["threshold", "validation_f1", "f1"] {
        let (g, e) = (got[key].as_f64().unwrap(), golden[key].as_f64().unwrap());
        assert!((g - e).abs() < 1e-12, "{key}: got {g}, golden {e}");
    }
}

#[test]
fn untrained_checkpoint_scores_near_the_all_positive_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = gen_synth(tmp.path());
    let cfg = small_config(&synth, 0);
    let train = tmp.path().join("t0");
    run(Command::Train, &cfg, &train, None);
    let eval = tmp.path().join("e0");
    run(Command::EvalGap, &cfg, &eval, Some(train.join("checkpoint.ptck")));

    let scores = fs::read_to_string(eval.join("scores.tsv")).unwrap();
    let (mut pos, mut total) = (0usize, 0usize);
    for line in scores.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        pos += (f[3] == "true") as usize + (f[4] == "true") as usize;
        total += 2;
    }
    let p = pos as f64 / total as f64;
    let all_positive = 2.0 * p / (p + 1.0);
    assert!((all_positive - 2.0 / 3.0).abs() < 0.05, "labels are not balanced: {p}");

    let sweep = fs::read_to_string(eval.join("sweep.csv")).unwrap();
    let first: f64 = sweep.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    let val_p = {
        let (s, _) = petra::trainer::score_instances(
            &petra::checkpoint::load(&train.join("checkpoint.ptck")).unwrap().model,
            &petra_cli::load_split(&cfg, petra_cli::Split::Validation).unwrap().instances,
            cfg.train.seed,
        )
        .unwrap();
        assert!(s.iter().all(|&v| v >= 0.01), "an untrained model should score every pair above 0.01");
        let labels = petra_cli::load_split(&cfg, petra_cli::Split::Validation).unwrap().instances;
        let pos: usize = labels.iter().map(|i| i.label_a as usize + i.label_b as usize).sum();
        pos as f64 / (2 * labels.len()) as f64
    };
    assert!((first - 2.0 * val_p / (val_p + 1.0)).abs() < 1e-12);
    let f1 = metrics(&eval)["validation_f1"].as_f64().unwrap();
    assert!((f1 - 2.0 / 3.0).abs() < 0.05, "untrained validation F1 {f1}");
}

#[test]
fn resuming_through_the_cli_matches_a_straight_run() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = gen_synth(tmp.path());
    let straight = tmp.path().join("straight");
    run(Command::Train, &small_config(&synth, 4), &straight, None);

    let part = tmp.path().join("part");
    run(Command::Train, &small_config(&synth, 2), &part, None);
    let resumed = tmp.path().join("resumed");
    run(Command::Train, &small_config(&synth, 4), &resumed, Some(part.join("checkpoint.ptck")));

    for f in ["checkpoint.ptck", "history.csv", "metrics.json"] {
        assert_eq!(fs::read(straight.join(f)).unwrap(), fs::read(resumed.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn manifest_lists_every_output_with_its_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = gen_synth(tmp.path());
    let cfg = small_config(&synth, 1);
    let train = tmp.path().join("train");
    let m = run(Command::Train, &cfg, &train, None);
    let names: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(names, ["checkpoint.ptck", "config.toml", "history.csv", "metrics.json"]);
    assert_eq!(m.config_hash, cfg.hash());
    let on_disk: petra_cli::Manifest =
        serde_json::from_str(&fs::read_to_string(train.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, m);
    // The saved config reproduces the hash.
    let saved = RunConfig::load(&train.join("config.toml")).unwrap();
    assert_eq!(saved.hash(), m.config_hash);

    let vis = tmp.path().join("vis");
    let mut vcfg = cfg.clone();
    vcfg.visualize.max_docs = 2;
    let m = run(Command::Visualize, &vcfg, &vis, Some(train.join("checkpoint.ptck")));
    assert_eq!(m.files.iter().filter(|f| f.path.ends_with(".svg")).count(), 2);
    assert_eq!(m.files.iter().filter(|f| f.path.ends_with(".jsonl")).count(), 2);

    let count = tmp.path().join("count");
    run(Command::CountPeople, &cfg, &count, Some(train.join("checkpoint.ptck")));
    assert_eq!(metrics(&count)["documents"], 30);
}

#[test]
fn memory_sweep_writes_one_row_per_size() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = gen_synth(tmp.path());
    let mut cfg = small_config(&synth, 1);
    cfg.sweep.cells = vec![2, 4];
    cfg.sweep.runs = 2;
    let out = tmp.path().join("sweep");
    run(Command::SweepMemory, &cfg, &out, None);
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("cells,runs,mean_f1,std_f1\n2,2,"));
    assert_eq!(fs::read_to_string(out.join("runs.csv")).unwrap().lines().count(), 5);
    assert!(fs::read_to_string(out.join("sweep.svg")).unwrap().contains("<polyline"));
}

fn petra() -> Process {
    Process::new(env!("CARGO_BIN_EXE_petra"))
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");

    let st = petra().args(["grad-check", "--out"]).arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(0));

    let cfg = tmp.path().join("strict.toml");
    fs::write(&cfg, "[grad_check]\ntolerance = 1e-12\n").unwrap();
    let o = petra().args(["grad-check", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2));

    fs::write(&cfg, "[model]\nhiden_dim = 3\n[train]\nlr = 0.1\nlr_typo = 1\n").unwrap();
    let o = petra().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model.hiden_dim") && err.contains("train.lr_typo"), "{err}");

    let o = petra().args(["eval-gap", "--checkpoint", "missing.ptck", "--out"]).arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = petra().args(["train"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
