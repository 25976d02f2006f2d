use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use prefdiff_cli::RunConfig;

const TINY: &str = "version=1
model.hidden=16
model.depth=1
model.time_features=4
model.cond_embed=4
train.steps=30
train.log_every=10
finetune.steps=10
finetune.log_every=5
curate.sources=12
eval.n_samples=100
variance.n_draws=1000
";

fn prefdiff(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefdiff"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = prefdiff(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("{key} missing from {line}"))
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

#[test]
fn verify_passes_and_lists_every_check() {
    let dir = setup();
    let out = ok(&["verify", "--out", "v"], dir.path());
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "check\tvalue\ttolerance\tresult");
    for name in [
        "dpo_loss_ln2_at_reference",
        "gradient_identity_50",
        "finite_diff_total_loss",
        "diffusion_moments_t1000_stderrs",
        "order_stat_normal_gap",
        "storage_dpo_with_original",
        "jensen_worst_violation_stderrs",
    ] {
        assert!(lines.iter().any(|l| l.starts_with(name)), "{name} not reported");
    }
    for l in &lines[1..] {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f.len(), 4, "{l}");
        assert_eq!(f[3], "PASS", "{l}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("v/verify.tsv")).unwrap(), out);
    assert!(dir.path().join("v/run.cfg").exists());
}

#[test]
fn missing_required_flag_exits_2_naming_it() {
    let dir = setup();
    let out = prefdiff(&["curate", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--method"));
    let out = prefdiff(&["train-base"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn unknown_flag_prints_usage() {
    let dir = setup();
    let out = prefdiff(&["verify", "--margn", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn runtime_errors_are_one_line() {
    let dir = setup();
    fs::write(dir.path().join("bad.cfg"), "version=1\nmargn=0.5\n").unwrap();
    let out = prefdiff(&["verify", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[config]:") && err.contains("margn"), "{err}");

    fs::write(dir.path().join("old.cfg"), "version=7\n").unwrap();
    let out = prefdiff(&["verify", "--config", "old.cfg"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[migration]:"));

    let out = Command::new(env!("CARGO_BIN_EXE_prefdiff"))
        .args(["verify"])
        .env("PREFDIFF_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PREFDIFF_THREADS"));
}

#[test]
fn config_is_written_before_work() {
    let dir = setup();
    let out = prefdiff(&["curate", "--config", "tiny.cfg", "--out", "o", "--method", "cpo", "--seed", "9"], dir.path());
    assert!(!out.status.success(), "no base checkpoint exists yet");
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]:"));
    let cfg = RunConfig::parse(&fs::read_to_string(dir.path().join("o/run.cfg")).unwrap()).unwrap();
    assert_eq!(cfg.run.seed, 9);
    assert_eq!(cfg.curate.sources, 12);
}

#[test]
fn pipeline_end_to_end() {
    let dir = setup();
    let d = dir.path();
    let c = ["--config", "tiny.cfg", "--out", "o"];
    let with = |extra: &[&'static str]| -> Vec<&str> { c.iter().copied().chain(extra.iter().copied()).collect() };
    ok(&[&["train-base"][..], &with(&[])].concat(), d);
    let base = fs::read(d.join("o/base.ckpt")).unwrap();
    assert_eq!(&base[..8], b"PREFDIFF");

    // Replaying the recorded config reproduces the checkpoint exactly.
    ok(&["train-base", "--config", "o/run.cfg", "--out", "replay"], d);
    assert_eq!(fs::read(d.join("replay/base.ckpt")).unwrap(), base);

    let cpo = ok(&[&["curate"][..], &with(&["--method", "cpo"])].concat(), d);
    let dpo = ok(&[&["curate"][..], &with(&["--method", "dpo"])].concat(), d);
    let (cc, dc): (usize, usize) = (
        field(&cpo, "generator_calls").parse().unwrap(),
        field(&dpo, "generator_calls").parse().unwrap(),
    );
    assert_eq!(cc, 12);
    assert_eq!(dc, 20 * 12);

    for m in ["cpo", "dpo"] {
        let out = ok(&["finetune", "--config", "tiny.cfg", "--out", "o", "--method", m], d);
        assert_eq!(field(&out, "steps"), "10");
        assert!(d.join(format!("o/{m}.ckpt")).exists());
    }
    let wrong = prefdiff(
        &["finetune", "--config", "tiny.cfg", "--out", "o", "--method", "cpo", "--data", "o/dpo.tsv"],
        d,
    );
    assert!(!wrong.status.success());

    let sweep = ok(&[&["eval"][..], &with(&["--model", "o/cpo.ckpt", "--cfg-scales", "0,1.5"])].concat(), d);
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(field(lines[0], "guidance"), "0.0");
    assert_eq!(field(lines[1], "guidance"), "1.5");
    assert_eq!(field(lines[0], "condition_hash"), field(lines[1], "condition_hash"));

    // The worker count never changes results.
    let threaded = Command::new(env!("CARGO_BIN_EXE_prefdiff"))
        .args(["eval", "--config", "tiny.cfg", "--out", "o", "--model", "o/cpo.ckpt", "--cfg-scales", "0,1.5"])
        .env("PREFDIFF_THREADS", "3")
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(threaded.stdout).unwrap(), sweep);
    let single = ok(&[&["eval"][..], &with(&["--model", "o/cpo.ckpt", "--cfg-scales", "0,1.5", "--deterministic"])].concat(), d);
    assert_eq!(single, sweep);

    let var = ok(&[&["variance"][..], &with(&[])].concat(), d);
    let lines: Vec<&str> = var.lines().collect();
    assert_eq!(lines.len(), 3);
    for (l, t) in lines.iter().zip(["100", "500", "900"]) {
        assert_eq!(field(l, "t_policy"), format!("fixed:{t}"));
        assert!(field(l, "var_cpo").parse::<f64>().unwrap() >= 0.0);
    }

    ok(&["report", "--out", "o"], d);
    let first = fs::read(d.join("o/report.csv")).unwrap();
    ok(&["report", "--out", "o"], d);
    assert_eq!(fs::read(d.join("o/report.csv")).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("run_id,step,metric,value,seed\n"));
    for id in ["base,", "curate-dpo,", "finetune-cpo,", "eval-cpo-w1.5,"] {
        assert!(text.lines().any(|l| l.starts_with(id)), "{id} missing");
    }
}

#[test]
fn report_ignores_input_order() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("a.tsv"), "r2\t5\tloss\t0.5\t1\nr1\t10\tloss\t0.25\t1\n").unwrap();
    fs::write(d.join("b.tsv"), "r1\t5\tloss\t0.75\t1\n\nr1\t5\tmmd\t1e-3\t2\n").unwrap();
    ok(&["report", "--out", "x", "a.tsv", "b.tsv"], d);
    ok(&["report", "--out", "y", "b.tsv", "a.tsv"], d);
    let x = fs::read_to_string(d.join("x/report.csv")).unwrap();
    assert_eq!(x, fs::read_to_string(d.join("y/report.csv")).unwrap());
    assert_eq!(
        x,
        "run_id,step,metric,value,seed\nr1,5,loss,0.75,1\nr1,10,loss,0.25,1\nr1,5,mmd,0.001,2\nr2,5,loss,0.5,1\n"
    );
    fs::write(d.join("c.tsv"), "r1\tfive\tloss\t0.5\t1\n").unwrap();
    let out = prefdiff(&["report", "--out", "z", "c.tsv"], d);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}
