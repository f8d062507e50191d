use std::path::Path;
use std::process::Command;

use pairconnect_cli::run;

const BIN: &str = env!("CARGO_BIN_EXE_pairconnect");

const SMALL: &[&str] = &[
    "--set", "vocab_size=22",
    "--set", "layers=1",
    "--set", "heads=1",
    "--set", "d_model=16",
    "--set", "d_hidden=16",
    "--set", "pair_dim=16",
    "--set", "pair_hidden=16",
    "--set", "seq_len=8",
    "--set", "table_size=64",
    "--set", "batch_size=8",
    "--set", "eval_every=5",
    "--set", "lr=0.001",
    "--set", "record_wall_time=false",
    "--set", "train_sequences=64",
    "--set", "eval_sequences=16",
];

fn run_args(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let argv = std::iter::once("pairconnect").chain(args.iter().copied());
    let code = run(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn with_small<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).chain(tail).copied().collect()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = Command::new(BIN).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr).to_string() + &String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    for args in [&["frobnicate"][..], &["train", "--no-such-flag"][..]] {
        let out = Command::new(BIN).args(args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_1_with_one_line() {
    let out = Command::new(BIN).args(["train", "--set", "steps=zero"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    let out = Command::new(BIN).args(["eval", "--checkpoint", "/nonexistent/x.ckpt"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_error_and_exit_code_matches_tolerance() {
    let precision = if std::mem::size_of::<pairconnect::numerics::Scalar>() == 8 { "f64" } else { "f32" };
    let (code, out) = run_args(&["gradcheck", "--model", "pairconnect", "--precision", precision, "--pooling", "pool-then-mlp"]);
    let line = out.lines().last().unwrap();
    assert!(line.starts_with("max relative error"), "{out}");
    let value: f64 = line
        .trim_start_matches("max relative error ")
        .split(':')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(code == 0, value <= 1e-6, "{out}");
    assert!(out.contains("roundoff-adjusted ratio"));
}

#[test]
fn gradcheck_rejects_precision_the_build_lacks() {
    let missing = if std::mem::size_of::<pairconnect::numerics::Scalar>() == 8 { "f32" } else { "f64" };
    let (code, _) = run_args(&["gradcheck", "--precision", missing]);
    assert_eq!(code, 1);
    let (code, _) = run_args(&["gradcheck", "--precision", "f16"]);
    assert_eq!(code, 1);
}

#[test]
fn collide_prints_rates() {
    let (code, out) = run_args(&["collide", "--k", "16", "--heads", "2", "--samples", "20000", "--seed", "3"]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "heads,K,samples,kind,rate,std_error,expected");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].contains("all-heads"));
}

#[test]
fn train_resume_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (metrics_a, metrics_b) = (p("a.csv"), p("b.csv"));
    let (ck_half, ck_full, ck_direct) = (p("half.ckpt"), p("full.ckpt"), p("direct.ckpt"));

    let (code, _) = run_args(&with_small(&["train"], &["--steps", "6", "--metrics", &metrics_a, "--checkpoint", &ck_half]));
    assert_eq!(code, 0);
    let (code, out) = run_args(&["train", "--resume", &ck_half, "--steps", "12", "--metrics", &metrics_a, "--checkpoint", &ck_full]);
    assert_eq!(code, 0);
    assert!(out.contains("step 12"), "{out}");

    let (code, _) = run_args(&with_small(&["train"], &["--steps", "12", "--metrics", &metrics_b, "--checkpoint", &ck_direct]));
    assert_eq!(code, 0);

    // The resumed run logs the step-6 evaluation twice (end of the first
    // leg, start of the second); the train rows must agree exactly.
    let train_rows = |path: &str| -> Vec<String> {
        std::fs::read_to_string(path).unwrap().lines().filter(|l| l.contains(",train,")).map(String::from).collect()
    };
    assert_eq!(train_rows(&metrics_a), train_rows(&metrics_b));
    assert_eq!(std::fs::read(&ck_full).unwrap(), std::fs::read(&ck_direct).unwrap());

    let (code, out) = run_args(&["eval", "--checkpoint", &ck_full]);
    assert_eq!(code, 0);
    assert!(out.starts_with("eval loss"), "{out}");

    let (code, _) = run_args(&["eval", "--checkpoint", &ck_full, "--set", "d_model=32"]);
    assert_eq!(code, 1);
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small model\nsteps = 3\nmodel = transformer\n").unwrap();
    let ck = dir.path().join("x.ckpt");
    let args = with_small(
        &["train", "--config", cfg.to_str().unwrap()],
        &["--set", "steps=4", "--checkpoint", ck.to_str().unwrap()],
    );
    let (code, out) = run_args(&args);
    assert_eq!(code, 0, "{out}");
    assert!(out.starts_with("transformer trained to step 4"), "{out}");
    assert!(Path::new(&ck).exists());
}

#[test]
fn bench_and_sweep_emit_csv() {
    let (code, out) = run_args(&with_small(&["bench"], &["--compare", "--no-pin"]));
    assert_eq!(code, 0, "{out}");
    let header = "model,mode,L,heads,d,K,m,samples_per_sec,flops_est,lookups";
    assert!(out.lines().any(|l| l == header));
    assert_eq!(out.lines().filter(|l| l.starts_with("pairconnect,") || l.starts_with("transformer,")).count(), 2);

    let (code, out) = run_args(&with_small(&["sweep"], &["--m", "4,8", "--k", "16,32", "--no-pin"]));
    assert_eq!(code, 0, "{out}");
    // 2 m values × (2 K values for pairconnect + 1 for the transformer)
    assert_eq!(out.lines().count(), 1 + 2 * 3, "{out}");

    let (code, _) = run_args(&with_small(&["bench"], &["--iterations", "3"]));
    assert_eq!(code, 1);
}

#[test]
fn ablate_hash_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("ablate.csv");
    let (code, out) = run_args(&with_small(&["ablate-hash"], &["--k", "16,64", "--steps", "3", "--out", out_path.to_str().unwrap()]));
    assert_eq!(code, 0, "{out}");
    let csv = std::fs::read_to_string(&out_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "hash_size,dataset,test_loss,train_loss");
    assert!(lines[1].starts_with("16,cycles,"));
    assert!(lines[2].starts_with("64,cycles,"));
}
