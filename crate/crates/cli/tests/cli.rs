use std::path::{Path, PathBuf};
use std::process::Command;

use hpn_cli::{resolve_config, GlobalArgs, Pipeline};
use hpn_core::config::RunConfig;
use hpn_core::policy_net::{HpnModel, Variant};
use hpn_core::rollout::read_jsonl;
use hpn_core::trajdata::{ingest, synthesize, IngestOptions};
use hpn_core::weak_labels::{label_all, read_sidecar};
use sha2::{Digest, Sha256};

const SMALL: &str = "\
[synth]
n_possessions = 6
[split]
holdout_fraction = 0.34
[model]
conv = 4x3/2
gru_cells = 8
cnn_hidden = 8
transfer_hidden = 8
[train]
pretrain_epochs = 1
finetune_epochs = 1
batch_size = 8
[eval]
rollout_count = 2
render_count = 1
";

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.hpn"), SMALL).unwrap();
        Env { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn args(&self, seed: u64, extra: &[&str]) -> Vec<String> {
        let mut a = vec![
            "hpn".to_string(),
            "--seed".into(),
            seed.to_string(),
            "--config".into(),
            self.dir.path().join("small.hpn").display().to_string(),
            "--set".into(),
            format!("paths.out_dir={}", self.out().display()),
        ];
        a.extend(extra.iter().map(|s| s.to_string()));
        a
    }

    fn run(&self, seed: u64, extra: &[&str]) -> i32 {
        hpn_cli::run(self.args(seed, extra))
    }

    fn pipeline(&self, seed: u64) -> Pipeline {
        let mut cfg = RunConfig::from_document(SMALL).unwrap().with_seed(seed);
        cfg.paths.out_dir = self.out().display().to_string();
        Pipeline::new(cfg)
    }
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    if !dir.exists() {
        return out;
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), digest(&p)));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_with_one() {
    let e = Env::new();
    assert_eq!(hpn_cli::run(["hpn", "synth"]), 1);
    assert_eq!(hpn_cli::run(["hpn", "--seed", "1", "frobnicate"]), 1);
    assert_eq!(hpn_cli::run(["hpn", "--seed", "x", "synth"]), 1);
    assert_eq!(hpn_cli::run(["hpn", "--help"]), 0);
    assert_eq!(e.run(1, &["--set", "train.batch_size=1", "synth"]), 1);
    assert_eq!(e.run(1, &["--set", "train.seed=4", "synth"]), 1);
    assert_eq!(e.run(1, &["--set", "nosuch.key=4", "synth"]), 1);
    assert_eq!(e.run(1, &["train", "--variant", "LSTM"]), 1);
    assert!(!e.out().exists());
}

#[test]
fn data_errors_exit_with_two() {
    let e = Env::new();
    assert_eq!(e.run(1, &["label"]), 2);
    assert_eq!(e.run(1, &["synth"]), 0);
    assert_eq!(e.run(1, &["train", "--variant", "CNN"]), 2);
    assert_eq!(e.run(1, &["label"]), 0);
    assert_eq!(e.run(1, &["rollout", "--variant", "CNN"]), 2);
    std::fs::write(e.out().join("possessions.jsonl"), "{not json\n").unwrap();
    assert_eq!(e.run(1, &["label"]), 2);
}

#[test]
fn empty_corpus_is_valid() {
    let e = Env::new();
    assert_eq!(e.run(3, &["--set", "synth.n_possessions=0", "synth"]), 0);
    let p = e.out().join("possessions.jsonl");
    assert_eq!(std::fs::read(&p).unwrap(), b"");
}

#[test]
fn synth_and_label_are_deterministic_and_match_the_library() {
    let (a, b, c) = (Env::new(), Env::new(), Env::new());
    for e in [&a, &b] {
        assert_eq!(e.run(5, &["synth"]), 0);
        assert_eq!(e.run(5, &["label"]), 0);
    }
    assert_eq!(c.run(6, &["synth"]), 0);
    assert_eq!(tree(&a.out()), tree(&b.out()));
    assert_ne!(digest(&a.out().join("possessions.jsonl")), digest(&c.out().join("possessions.jsonl")));

    let p = a.pipeline(5);
    let direct = synthesize(&p.cfg.synth, &p.cfg.court).unwrap();
    let opts = IngestOptions {
        court: p.cfg.court.clone(),
        ..IngestOptions::default()
    };
    assert_eq!(ingest(&a.out().join("possessions.jsonl"), &opts).unwrap(), direct);

    let seqs = p.sequences().unwrap();
    let labels = label_all(&seqs, &p.cfg.court, &p.cfg.labels);
    let records = read_sidecar(&p.labels_path()).unwrap();
    assert_eq!(records.len(), seqs.len());
    for ((r, s), l) in records.iter().zip(&seqs).zip(&labels) {
        assert_eq!((&r.possession_id, &r.focal_agent, r.t0), (&s.possession_id, &s.focal_agent, s.t0));
        assert_eq!(&r.labels, l);
    }
}

#[test]
fn thread_count_and_config_env_do_not_change_outputs() {
    let (a, b) = (Env::new(), Env::new());
    assert_eq!(a.run(8, &["--threads", "1", "synth"]), 0);
    assert_eq!(a.run(8, &["--threads", "1", "label"]), 0);
    let cfg = b.dir.path().join("small.hpn");
    for cmd in ["synth", "label"] {
        let status = Command::new(env!("CARGO_BIN_EXE_hpn"))
            .env("HPN_CONFIG", &cfg)
            .args(["--seed", "8", "--threads", "3", "--set"])
            .arg(format!("paths.out_dir={}", b.out().display()))
            .arg(cmd)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    }
    assert_eq!(tree(&a.out()), tree(&b.out()));
    let missing = Command::new(env!("CARGO_BIN_EXE_hpn")).arg("synth").output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--seed"));
}

#[test]
fn zero_epochs_write_the_initialization() {
    let e = Env::new();
    assert_eq!(e.run(2, &["synth"]), 0);
    assert_eq!(e.run(2, &["label"]), 0);
    assert_eq!(e.run(2, &["--set", "train.pretrain_epochs=0", "--set", "train.finetune_epochs=0", "train", "--variant", "H_ATT"]), 0);
    let p = e.pipeline(2);
    let loaded = p.load_model(Variant::HAtt).unwrap();
    let init = HpnModel::new(&p.cfg.court, &p.cfg.model.clone().with_variant(Variant::HAtt), 2).unwrap();
    for (a, b) in loaded.store.params().iter().zip(init.store.params()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn invalid_stage_for_variant_leaves_no_files() {
    let e = Env::new();
    assert_eq!(e.run(2, &["synth"]), 0);
    assert_eq!(e.run(2, &["label"]), 0);
    let before = tree(&e.out());
    assert_eq!(e.run(2, &["--set", "train.schedule=pretrain_macro", "train", "--variant", "CNN"]), 1);
    assert_eq!(e.run(2, &["--set", "train.schedule=finetune", "train", "--variant", "GRU_CNN"]), 1);
    assert_eq!(tree(&e.out()), before);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (a, b) = (Env::new(), Env::new());
    let long = ["--set", "train.pretrain_epochs=2", "--set", "train.finetune_epochs=1"];
    for e in [&a, &b] {
        assert_eq!(e.run(4, &["synth"]), 0);
        assert_eq!(e.run(4, &["label"]), 0);
    }
    let train = |e: &Env, extra: &[&str]| {
        let mut args: Vec<&str> = long.to_vec();
        args.extend(["train", "--variant", "H_ATT"]);
        args.extend(extra);
        e.run(4, &args)
    };
    assert_eq!(train(&a, &[]), 0);
    assert_eq!(train(&b, &["--stop-after", "1"]), 0);
    assert_eq!(train(&b, &["--stop-after", "2"]), 0);
    assert_eq!(train(&b, &[]), 0);
    assert_eq!(tree(&a.out()), tree(&b.out()));
    // Finished runs are not retrained, and --fresh reproduces them.
    assert_eq!(train(&b, &[]), 0);
    assert_eq!(train(&b, &["--fresh"]), 0);
    assert_eq!(tree(&a.out()), tree(&b.out()));
}

#[test]
fn rollout_bench_and_render() {
    let e = Env::new();
    for cmd in [&["synth"][..], &["label"], &["train", "--variant", "GRU_CNN"]] {
        assert_eq!(e.run(9, cmd), 0);
    }
    assert_eq!(e.run(9, &["--set", "rollout.horizon_steps=0", "rollout", "--variant", "GRU_CNN"]), 0);
    let p = e.pipeline(9);
    let rs = read_jsonl(&p.rollout_path(Variant::GruCnn)).unwrap();
    let holdout = p.dataset().unwrap().holdout;
    assert_eq!(rs.len(), 2);
    for (r, s) in rs.iter().zip(&holdout) {
        assert_eq!(r.path, s.raw_positions[..20].to_vec());
    }

    assert_eq!(e.run(9, &["rollout", "--variant", "GRU_CNN"]), 0);
    assert_eq!(e.run(9, &["render", "--variant", "GRU_CNN"]), 0);
    let svgs = tree(&p.render_dir(Variant::GruCnn));
    assert_eq!(svgs.len(), 1);

    assert_eq!(e.run(9, &["bench", "--oracle"]), 0);
    let csv = std::fs::read_to_string(p.bench_path()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("GRU_CNN,"));
    let oracle: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(oracle[0], "ORACLE");
    assert!(oracle[1..8].iter().all(|v| *v == "1.000000"), "{}", lines[2]);
    let first = digest(&p.bench_path());
    assert_eq!(e.run(9, &["bench", "--oracle"]), 0);
    assert_eq!(digest(&p.bench_path()), first);
    assert_eq!(e.run(9, &["bench", "--variant", "H_ATT"]), 2);
}

#[test]
fn config_command_round_trips() {
    let g = GlobalArgs {
        seed: Some(12),
        config: None,
        overrides: vec!["train.batch_size=4".into()],
        threads: None,
    };
    let cfg = resolve_config(&g).unwrap();
    assert_eq!(cfg.seed(), 12);
    let again = RunConfig::from_document(&cfg.to_document().unwrap()).unwrap().with_seed(12);
    assert_eq!(again, cfg);
    let missing = GlobalArgs { seed: None, ..g };
    assert!(resolve_config(&missing).is_err());
}
