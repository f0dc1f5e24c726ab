use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn simtrace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simtrace"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = simtrace(args);
    assert!(
        out.status.success(),
        "simtrace {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|f| (f.file_name().unwrap().into(), fs::read(&f).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn zero_samples_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.txt");
    fs::write(&obs, "1.0\n").unwrap();
    let out = simtrace(&[
        "infer",
        "--engine",
        "is",
        "--endpoint",
        "inproc:conjugate",
        "--observation",
        p(&obs),
        "--n",
        "0",
        "--out",
        p(&dir.path().join("r.tsv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(simtrace(&["infer", "--bogus"]).status.code(), Some(2));
    let out = simtrace(&[
        "simulate",
        "--endpoint",
        "inproc:nope",
        "--n",
        "3",
        "--out",
        p(&dir.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.txt");
    fs::write(&obs, "0.7\n").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "--seed",
            "9",
            "infer",
            "--engine",
            "rmh",
            "--endpoint",
            "inproc:conjugate",
            "--observation",
            p(&obs),
            "--n",
            "2000",
            "--chains",
            "2",
            "--out",
            p(&out),
        ]);
        fs::read(out).unwrap()
    };
    assert_eq!(run("a.tsv"), run("b.tsv"));

    for name in ["x", "y"] {
        ok(&[
            "--seed",
            "4",
            "simulate",
            "--endpoint",
            "inproc:cascade",
            "--n",
            "50",
            "--out",
            p(&dir.path().join(name)),
        ]);
    }
    assert_eq!(
        dir_bytes(&dir.path().join("x")),
        dir_bytes(&dir.path().join("y"))
    );
}

#[test]
fn conjugate_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    ok(&[
        "--seed",
        "1",
        "simulate",
        "--endpoint",
        "inproc:conjugate",
        "--n",
        "2000",
        "--out",
        p(&d("raw")),
    ]);
    ok(&[
        "dataset",
        "sort",
        "--input",
        p(&d("raw")),
        "--out",
        p(&d("sorted")),
        "--validation",
        p(&d("val")),
        "--workers",
        "2",
    ]);
    let summary = ok(&["dataset", "inspect", "--input", p(&d("sorted"))]);
    assert!(!summary.is_empty());

    fs::write(
        d("train.cfg"),
        "obs_embedder = mlp\nlstm_hidden = 16\nhead_hidden = 16\niterations = 200\nminibatch_size = 32\nlr = 2e-3\n",
    )
    .unwrap();
    ok(&[
        "train",
        "--dataset",
        p(&d("sorted")),
        "--config",
        p(&d("train.cfg")),
        "--validation",
        p(&d("val")),
        "--checkpoint",
        p(&d("net")),
        "--log",
        p(&d("train.log")),
    ]);
    let log = fs::read_to_string(d("train.log")).unwrap();
    assert!(log.lines().count() >= 200);

    let (obs, net) = (d("obs.txt"), d("net"));
    fs::write(&obs, "1.0\n").unwrap();
    for (engine, extra) in [("is", vec![]), ("ic", vec!["--checkpoint", p(&net)])] {
        let mut args = vec![
            "infer",
            "--engine",
            engine,
            "--endpoint",
            "inproc:conjugate",
            "--observation",
            p(&obs),
            "--n",
            "5000",
            "--out",
        ];
        let out = d(&format!("{engine}.tsv"));
        args.push(p(&out));
        args.extend(extra);
        ok(&args);
    }
    let report = ok(&[
        "compare",
        "--a",
        p(&d("is.tsv")),
        "--b",
        p(&d("ic.tsv")),
        "--histograms",
        p(&d("hist")),
    ]);
    let w1: f64 = report
        .lines()
        .find(|l| l.starts_with("conjugate/latent"))
        .and_then(|l| l.split('\t').nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!(w1 < 0.1, "IS vs IC W1 {w1}");
    assert!(fs::read_dir(d("hist")).unwrap().count() > 0);

    let same = ok(&["compare", "--a", p(&d("is.tsv")), "--b", p(&d("is.tsv"))]);
    for line in same.lines().skip(1) {
        let v: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 0.0, "{line}");
    }
}

#[test]
fn rmh_chains_feed_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.txt");
    fs::write(&obs, "1.0\n").unwrap();
    let out = dir.path().join("rmh.tsv");
    ok(&[
        "infer",
        "--engine",
        "rmh",
        "--endpoint",
        "inproc:conjugate",
        "--observation",
        p(&obs),
        "--n",
        "5000",
        "--chains",
        "3",
        "--out",
        p(&out),
    ]);
    let chains: Vec<String> = (0..3).map(|c| format!("{}.chain{c}", p(&out))).collect();
    let report = ok(&[
        "diagnose",
        "--chains",
        &chains.join(","),
        "--address",
        "conjugate/latent/Normal",
    ]);
    assert!(!report.is_empty());
}

#[test]
fn toy_sim_serves_over_tcp() {
    let mut server = Command::new(env!("CARGO_BIN_EXE_toy-sim"))
        .args([
            "--model",
            "cascade",
            "--listen",
            "tcp:127.0.0.1:0",
            "--once",
        ])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stderr.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap()
        .to_string();

    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "--seed",
        "3",
        "simulate",
        "--endpoint",
        &addr,
        "--n",
        "40",
        "--out",
        p(&dir.path().join("remote")),
    ]);
    assert!(server.wait().unwrap().success());
    ok(&[
        "--seed",
        "3",
        "simulate",
        "--endpoint",
        "inproc:cascade",
        "--n",
        "40",
        "--out",
        p(&dir.path().join("local")),
    ]);
    assert_eq!(
        dir_bytes(&dir.path().join("remote")),
        dir_bytes(&dir.path().join("local"))
    );
}
