//! End-to-end tests of the `mlmlab` binary: exit-code conventions, the
//! corpus → train → eval → probe pipeline, and byte-determinism of emitted
//! artifacts (modulo wall-clock columns).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlmlab::trainer::TrainConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mlmlab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn mlmlab")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "mlmlab {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn exit_code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_paths_exit_zero_with_usage_text() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    let out = run(&["train", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("--config"));
}

#[test]
fn usage_errors_exit_one_runtime_failures_exit_two() {
    assert_eq!(exit_code(&["--nonsense"]), 1);
    assert_eq!(exit_code(&["frobnicate"]), 1);
    assert_eq!(exit_code(&["probe", "--preset", "nope"]), 1);
    assert_eq!(exit_code(&["probe", "--trials", "0"]), 1);
    assert_eq!(
        exit_code(&["eval", "--checkpoint", "missing.bin", "--shard", "missing.bin"]),
        2
    );
    assert_eq!(exit_code(&["stages", "--input", "no_such_log.csv"]), 2);
}

/// Deterministic printable pseudo-text: enough lines to binarize into a few
/// hundred training windows.
fn lorem_bytes() -> Vec<u8> {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut text = Vec::new();
    for _ in 0..200 {
        for _ in 0..64 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            text.push(32 + ((state >> 33) % 95) as u8);
        }
        text.push(b'\n');
    }
    text
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace { dir: tempfile::tempdir().expect("tempdir") }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, contents: &[u8]) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, contents).unwrap();
        p
    }
}

#[test]
fn fresh_init_eval_reports_near_vocab_perplexity() {
    let ws = Workspace::new();
    let text = ws.write("corpus.txt", &lorem_bytes());
    let shard = ws.path("corpus.bin");
    let summary = run_ok(&["binarize", "--input", path_str(&text), "--output", path_str(&shard)]);
    assert!(summary.contains("vocab_size=259"), "{summary}");

    // A zero-step run checkpoints the seeded initialization untouched.
    let mut cfg = TrainConfig::default();
    cfg.total_steps = 0;
    cfg.warmup_steps = 0;
    cfg.eval_interval = 0;
    cfg.train_shard = shard.to_str().unwrap().to_string();
    cfg.valid_shard = String::new();
    let cfg_path = ws.write("run.cfg", cfg.to_text().as_bytes());
    let out_dir = ws.path("run");
    run_ok(&["train", "--config", path_str(&cfg_path), "--out-dir", path_str(&out_dir)]);

    let ckpt = out_dir.join("checkpoint_final.bin");
    let stdout = run_ok(&["eval", "--checkpoint", path_str(&ckpt), "--shard", path_str(&shard)]);
    let ppl: f64 = stdout
        .split_whitespace()
        .find_map(|f| f.strip_prefix("valid_ppl="))
        .expect("valid_ppl field")
        .parse()
        .unwrap();
    assert!(
        (200.0..=320.0).contains(&ppl),
        "fresh-init perplexity {ppl} outside the near-uniform band"
    );
}

#[test]
fn stages_finds_the_fixture_curve_boundaries() {
    let fixture =
        concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/four_stage_train_log.csv");
    let stdout = run_ok(&["stages", "--input", fixture]);
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("starting_end,plateau_end,diving_end,plateau_length"));
    let fields: Vec<u64> =
        lines.next().unwrap().split(',').map(|f| f.parse().unwrap()).collect();
    let w = 50;
    assert!(fields[0].abs_diff(1000) <= w, "starting_end {}", fields[0]);
    assert!(fields[1].abs_diff(8000) <= w, "plateau_end {}", fields[1]);
    assert!(fields[2].abs_diff(10000) <= w, "diving_end {}", fields[2]);
    assert_eq!(fields[3], fields[1] - fields[0]);
}

/// Tiny synthetic-corpus run config matching `synth --n-keys 8 --seq-len 8`.
fn tiny_config(train_shard: &Path, valid_shard: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.d_ffn = 32;
    cfg.model.vocab_size = 19;
    cfg.model.max_seq_len = 8;
    cfg.batch_size = 4;
    cfg.total_steps = 20;
    cfg.warmup_steps = 2;
    cfg.eval_interval = 10;
    cfg.checkpoint_interval = 10;
    cfg.mlm.mask_token_id = 17;
    cfg.mlm.pad_token_id = 16;
    cfg.train_shard = train_shard.to_str().unwrap().to_string();
    cfg.valid_shard = valid_shard.to_str().unwrap().to_string();
    cfg
}

fn strip_wall_clock(csv: &str) -> String {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0).collect::<Vec<_>>().join("\n")
}

#[test]
fn pipeline_artifacts_are_deterministic_and_resume_matches() {
    let ws = Workspace::new();
    let train_shard = ws.path("train.bin");
    let valid_shard = ws.path("valid.bin");
    let synth =
        |out: &Path, seed: &str| {
            run_ok(&[
                "synth", "--output", path_str(out), "--n-keys", "8", "--seq-len", "8",
                "--n-sequences", "96", "--seed", seed,
            ])
        };
    synth(&train_shard, "5");
    synth(&valid_shard, "6");

    // Same flags, same bytes.
    let again = ws.path("train_again.bin");
    synth(&again, "5");
    assert_eq!(std::fs::read(&train_shard).unwrap(), std::fs::read(&again).unwrap());

    let cfg = tiny_config(&train_shard, &valid_shard);
    let cfg_path = ws.write("run.cfg", cfg.to_text().as_bytes());
    let (out1, out2) = (ws.path("run1"), ws.path("run2"));
    let s1 = run_ok(&["train", "--config", path_str(&cfg_path), "--out-dir", path_str(&out1)]);
    let s2 = run_ok(&["train", "--config", path_str(&cfg_path), "--out-dir", path_str(&out2)]);
    assert_eq!(s1, s2, "run summaries must match");
    assert!(s1.starts_with("steps=20 final_train_loss="), "{s1}");

    let read = |d: &Path, n: &str| std::fs::read(d.join(n)).unwrap();
    let read_text = |d: &Path, n: &str| String::from_utf8(read(d, n)).unwrap();
    assert_eq!(
        strip_wall_clock(&read_text(&out1, "train_log.csv")),
        strip_wall_clock(&read_text(&out2, "train_log.csv"))
    );
    assert_eq!(read_text(&out1, "eval_log.csv"), read_text(&out2, "eval_log.csv"));
    assert_eq!(read(&out1, "checkpoint_final.bin"), read(&out2, "checkpoint_final.bin"));

    // Resuming the midpoint checkpoint reproduces the final state exactly.
    let midpoint = out1.join("checkpoint_10.bin");
    assert!(midpoint.exists(), "interval checkpoint missing");
    let out3 = ws.path("run3");
    let s3 = run_ok(&["train", "--resume", path_str(&midpoint), "--out-dir", path_str(&out3)]);
    assert_eq!(s1, s3, "resumed summary must match the uninterrupted run");
    assert_eq!(read(&out1, "checkpoint_final.bin"), read(&out3, "checkpoint_final.bin"));

    // The checkpoint evaluates identically across invocations, and the
    // printed pair satisfies ppl = exp(loss).
    let ckpt = out1.join("checkpoint_final.bin");
    let eval1 = run_ok(&["eval", "--checkpoint", path_str(&ckpt), "--shard", path_str(&valid_shard)]);
    let eval2 = run_ok(&["eval", "--checkpoint", path_str(&ckpt), "--shard", path_str(&valid_shard)]);
    assert_eq!(eval1, eval2);
    let field = |s: &str, k: &str| -> f64 {
        s.split_whitespace().find_map(|f| f.strip_prefix(k)).unwrap().parse().unwrap()
    };
    let (loss, ppl) = (field(&eval1, "valid_loss="), field(&eval1, "valid_ppl="));
    assert!((ppl - loss.exp()).abs() <= 1e-12 * ppl);
}

#[test]
fn probe_verdicts_split_by_architecture_and_repeat_bit_identically() {
    let bert = run_ok(&["probe", "--preset", "bert", "--trials", "5", "--threshold", "1e-4"]);
    assert!(bert.contains(",equivariant"), "{bert}");
    let gpt = run_ok(&[
        "probe", "--preset", "gpt_decoder", "--trials", "5", "--threshold", "1e-2", "--seed", "3",
    ]);
    assert!(gpt.contains(",order-sensitive"), "{gpt}");
    let gpt_again = run_ok(&[
        "probe", "--preset", "gpt_decoder", "--trials", "5", "--threshold", "1e-2", "--seed", "3",
    ]);
    assert_eq!(gpt, gpt_again, "probe output must be stable under a fixed seed");

    let flow = run_ok(&["probe", "--probe", "causal-flow", "--preset", "gpt_decoder", "--seq-len", "8"]);
    let mut lines = flow.lines();
    assert_eq!(lines.next(), Some("model,probe,passed,vacuous,excluded_pairs,reachable_pairs"));
    assert!(lines.next().unwrap().contains(",causal_flow,true,false,"), "{flow}");
    let flow_bert = run_ok(&["probe", "--probe", "causal-flow", "--preset", "bert", "--seq-len", "8"]);
    assert!(flow_bert.lines().nth(1).unwrap().contains(",causal_flow,true,true,0,"), "{flow_bert}");
}

#[test]
fn matrix_tabulates_cells_and_persists_the_table() {
    let ws = Workspace::new();
    let train_shard = ws.path("train.bin");
    let valid_shard = ws.path("valid.bin");
    run_ok(&[
        "synth", "--output", path_str(&train_shard), "--n-keys", "8", "--seq-len", "8",
        "--n-sequences", "96", "--seed", "5",
    ]);
    run_ok(&[
        "synth", "--output", path_str(&valid_shard), "--n-keys", "8", "--seq-len", "8",
        "--n-sequences", "96", "--seed", "6",
    ]);
    let cfg = tiny_config(&train_shard, &valid_shard);
    let cfg_path = ws.write("base.cfg", cfg.to_text().as_bytes());
    let out_dir = ws.path("matrix");
    let stdout = run_ok(&[
        "matrix",
        "--config", path_str(&cfg_path),
        "--cell", "bert,learnable,1",
        "--cell", "decbert_diff,learnable,1",
        "--out-dir", path_str(&out_dir),
    ]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("cell,preset,pe,seed,status,"));
    assert!(lines[1].starts_with("bert/learnable/s1,bert,learnable,1,ok,"));
    assert!(lines[2].starts_with("decbert_diff/learnable/s1,decbert_diff,learnable,1,ok,"));
    assert_eq!(std::fs::read_to_string(out_dir.join("matrix.csv")).unwrap(), stdout);
    assert!(out_dir.join("bert_learnable_s1").join("train_log.csv").exists());
    assert!(out_dir.join("decbert_diff_learnable_s1").join("checkpoint_final.bin").exists());
}
