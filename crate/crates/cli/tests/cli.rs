use std::path::Path;
use std::process::Command;

use mergeforge::checkpoint::save_checkpoint;
use mergeforge::synth::{generate_suite, SuiteConfig};

fn run(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_mergeforge"))
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixtures(dir: &Path) -> (std::path::PathBuf, Vec<std::path::PathBuf>) {
    let suite = generate_suite(&SuiteConfig {
        tasks: 3,
        d_i: 24,
        d_o: 12,
        n: 48,
        r_d: 3,
        ..SuiteConfig::default()
    })
    .unwrap();
    let base = dir.join("base.ntc");
    save_checkpoint(&suite.base, &base).unwrap();
    let tasks = suite
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let p = dir.join(format!("t{i}.ntc"));
            save_checkpoint(&t.theta, &p).unwrap();
            p
        })
        .collect();
    (base, tasks)
}

#[test]
fn echoed_config_reproduces_the_merge() {
    let dir = tempfile::tempdir().unwrap();
    let (base, tasks) = fixtures(dir.path());
    let first = dir.path().join("first.ntc");
    let mut args = vec![
        "merge",
        "--method",
        "nuwa",
        "--rl",
        "4",
        "--seed",
        "3",
        "--base",
        s(&base),
        "--out",
        s(&first),
    ];
    for t in &tasks {
        args.extend(["--task", s(t)]);
    }
    assert_eq!(run(&args), 0);
    let echo = dir.path().join("first.ntc.config.json");
    assert!(dir.path().join("first.ntc.log.json").exists());
    let second = dir.path().join("second.ntc");
    assert_eq!(run(&["merge", "--config", s(&echo), "--out", s(&second)]), 0);
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn failed_merge_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let (base, tasks) = fixtures(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"method": "wudi", "params": {"wudi_lr": 1e6, "wudi_iters": 500}}"#,
    )
    .unwrap();
    let out = dir.path().join("out.ntc");
    let mut args = vec!["merge", "--config", s(&cfg), "--base", s(&base), "--out", s(&out)];
    for t in &tasks {
        args.extend(["--task", s(t)]);
    }
    assert_eq!(run(&args), 4);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("out"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn threads_flag_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let (base, tasks) = fixtures(dir.path());
    let mut outs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("m{threads}.ntc"));
        let mut args = vec!["--threads", threads, "merge", "--base", s(&base), "--out", s(&out)];
        for t in &tasks {
            args.extend(["--task", s(t)]);
        }
        assert_eq!(run(&args), 0);
        outs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn verify_single_weyl_instance_passes() {
    assert_eq!(
        run(&["verify", "--check", "weyl", "--instances", "1", "--seed", "0"]),
        0
    );
}
