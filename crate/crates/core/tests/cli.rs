//! The `sth` binary end to end: determinism and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sth(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sth")).current_dir(dir).args(args).env("STH_THREADS", "1").output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Every file below `dir`, relative path and bytes, sorted.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let smoke = configs().join("smoke.conf");
    let smoke = smoke.to_str().unwrap();
    for d in ["d1", "d2"] {
        ok(sth(t, &["gen-data", "--config", smoke, "--seed", "7", "--out", d]));
    }
    let data = snapshot(&t.join("d1"));
    assert_eq!(data, snapshot(&t.join("d2")));
    assert!(data.iter().any(|(p, _)| p == Path::new("train.tsv")));

    for r in ["r1", "r2"] {
        ok(sth(t, &["train", "d1", "--config", smoke, "--seed", "7", "--out", r]));
    }
    let run = snapshot(&t.join("r1"));
    assert_eq!(run, snapshot(&t.join("r2")));
    let metrics = String::from_utf8(std::fs::read(t.join("r1/metrics.csv")).unwrap()).unwrap();
    assert!(metrics.starts_with("epoch,split,loss,top1,top5,lr\n"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);

    let e1 = ok(sth(t, &["eval", "r1", "d1", "--csv", "e1.csv"]));
    let e2 = ok(sth(t, &["eval", "r2", "d1", "--csv", "e2.csv"]));
    assert_eq!(e1, e2);
    assert_eq!(std::fs::read(t.join("e1.csv")).unwrap(), std::fs::read(t.join("e2.csv")).unwrap());

    ok(sth(t, &["dump-attention", "r1", "d1", "--out", "att"]));
    let rows = std::fs::read_to_string(t.join("att/attention_samples.csv")).unwrap();
    let mut n = 0;
    for line in rows.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert!((f[2] + f[3] - 1.0).abs() < 1e-12, "{line}");
        n += 1;
    }
    // 8 validation videos, 16 hybrid layers
    assert_eq!(n, 8 * 16);
}

#[test]
fn exit_codes_separate_failure_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    std::fs::write(t.join("bad.conf"), "net.p = 1/4\nnet.p = 3/4\n").unwrap();
    let out = sth(t, &["analyze", "--config", "bad.conf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    assert_eq!(sth(t, &["verify", "everything"]).status.code(), Some(2));
    assert_eq!(sth(t, &["eval", "no-such-checkpoint"]).status.code(), Some(3));

    // a 4-class checkpoint against 3-class data
    let smoke = configs().join("smoke.conf");
    let smoke = smoke.to_str().unwrap();
    std::fs::write(t.join("three.conf"), format!("{}\ndata.num_class = 3\nnet.num_class = 3\n", std::fs::read_to_string(smoke).unwrap())).unwrap();
    ok(sth(t, &["gen-data", "--config", "three.conf", "--out", "d3"]));
    std::fs::write(t.join("one.conf"), format!("{}\ntrain.epochs = 1\n", std::fs::read_to_string(smoke).unwrap())).unwrap();
    ok(sth(t, &["train", "--config", "one.conf", "--out", "r"]));
    assert_eq!(sth(t, &["eval", "r", "d3"]).status.code(), Some(4));

    // attention export needs attention
    std::fs::write(t.join("plain.conf"), format!("{}net.attention = off\n", std::fs::read_to_string(t.join("one.conf")).unwrap())).unwrap();
    ok(sth(t, &["train", "--config", "plain.conf", "--out", "plain"]));
    assert_eq!(sth(t, &["dump-attention", "plain"]).status.code(), Some(2));

    assert_eq!(Command::new(env!("CARGO_BIN_EXE_sth")).args(["verify", "shapes"]).env("STH_THREADS", "zero").output().unwrap().status.code(), Some(2));
}

#[test]
fn analyze_writes_csv_matching_the_text() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let full_size = configs().join("full_size.conf");
    let text = ok(sth(t, &["analyze", "--config", full_size.to_str().unwrap(), "--csv", "cost.csv", "--sweep-p", "0,1/8,1/4,1/2"]));
    let csv = std::fs::read_to_string(t.join("cost.csv")).unwrap();
    let (mut params, mut macs) = (0u64, 0u64);
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        params += f[1].parse::<u64>().unwrap();
        macs += f[2].parse::<u64>().unwrap();
    }
    let total: Vec<u64> = text
        .lines()
        .find(|l| l.starts_with("total "))
        .unwrap()
        .split_whitespace()
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!((total[0], total[1]), (params, macs));
    assert!(text.contains("p = 1/4") && text.contains("kernel_type = fixed") && text.contains("attention = off"), "{text}");
}

#[test]
fn verify_all_passes() {
    let out = ok(sth(Path::new("."), &["verify", "all"]));
    assert!(!out.contains("FAIL"), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}
