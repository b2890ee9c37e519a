use std::fs;
use std::path::{Path, PathBuf};

use promptgrasp::cli::cli_main;
use promptgrasp::eval::{rows_from_csv, Method, Report};

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["promptgrasp"];
    argv.extend_from_slice(args);
    cli_main(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small end-to-end run: 20 demos, tiny heads, few trials.
struct Small {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Small {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("c.json");
        fs::write(
            &config,
            r#"{"train": {"hidden": [16], "epochs": 2}, "eval": {"n_trials": 6, "n_demos": 20}}"#,
        )
        .unwrap();
        let me = Small { dir, config };
        assert_eq!(run(&["--config", s(&me.config), "--out", s(&me.path("d.jsonl")), "gen-demos"]), 0);
        for m in Method::ALL {
            let cache = me.path(&format!("c_{m}.jsonl"));
            let ckpt = me.path(&format!("{m}.ckpt"));
            let code = run(&[
                "--config",
                s(&me.config),
                "--out",
                s(&cache),
                "cache-features",
                "--dataset",
                s(&me.path("d.jsonl")),
                "--method",
                m.name(),
            ]);
            assert_eq!(code, 0);
            assert_eq!(run(&["--config", s(&me.config), "--out", s(&ckpt), "train", "--cache", s(&cache)]), 0);
        }
        me
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn checkpoint_args(&self) -> Vec<String> {
        Method::ALL
            .iter()
            .flat_map(|m| ["--checkpoint".to_string(), format!("{m}={}", s(&self.path(&format!("{m}.ckpt"))))])
            .collect()
    }
}

#[test]
fn gen_demos_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        assert_eq!(run(&["--seed", "1", "--out", s(out), "gen-demos", "--episodes", "4"]), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["gen-demos", "--bogus"]), 2);
}

#[test]
fn train_with_mismatched_widths_leaves_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.jsonl");
    let c = dir.path().join("c.jsonl");
    let ckpt = dir.path().join("h.ckpt");
    assert_eq!(run(&["--out", s(&d), "gen-demos", "--episodes", "2"]), 0);
    assert_eq!(run(&["--out", s(&c), "cache-features", "--dataset", s(&d), "--method", "global"]), 0);
    let narrow = dir.path().join("narrow.json");
    fs::write(&narrow, r#"{"perception": {"capacity": 4}}"#).unwrap();
    let code = run(&["--config", s(&narrow), "--out", s(&ckpt), "train", "--cache", s(&c)]);
    assert_ne!(code, 0);
    assert!(!ckpt.exists());
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.contains("partial"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn reports_have_the_expected_shape() {
    let small = Small::new();
    let cfg = s(&small.config).to_string();

    // eval twice on the same seeds
    let e1 = small.path("e1.csv");
    let e2 = small.path("e2.csv");
    for out in [&e1, &e2] {
        let ckpt = small.path("ours.ckpt");
        let code = run(&["--config", &cfg, "--out", s(out), "eval", "--method", "ours", "--checkpoint", s(&ckpt)]);
        assert_eq!(code, 0);
    }
    assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());

    let rep = small.path("rep");
    let mut args = vec!["--config".to_string(), cfg.clone(), "--out".into(), s(&rep).into(), "compare".into()];
    args.extend(small.checkpoint_args());
    assert_eq!(run(&args.iter().map(String::as_str).collect::<Vec<_>>()), 0);
    let rows = rows_from_csv(&fs::read_to_string(rep.join("compare.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.p == 0.0 && r.n_trials == 6));

    let mut args = vec!["--config".to_string(), cfg, "--out".into(), s(&rep).into(), "sweep-occlusion".into()];
    args.extend(small.checkpoint_args());
    assert_eq!(run(&args.iter().map(String::as_str).collect::<Vec<_>>()), 0);
    let csv = fs::read_to_string(rep.join("sweep.csv")).unwrap();
    let rows = rows_from_csv(&csv).unwrap();
    assert_eq!(rows.len(), 12);
    let report: Report = serde_json::from_str(&fs::read_to_string(rep.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(report.rows, rows);
    assert_eq!(report.to_csv().unwrap(), csv);
    assert_eq!(report.trials.len(), 12);
    // every cell shares the same scene seeds
    let seeds: Vec<u64> = report.trials[0].iter().map(|t| t.scene_seed).collect();
    assert!(report.trials.iter().all(|t| t.iter().map(|x| x.scene_seed).collect::<Vec<_>>() == seeds));
}

#[test]
fn eval_refuses_training_seeds() {
    let small = Small::new();
    let ckpt = small.path("global.ckpt");
    let out = small.path("e.csv");
    let code = run(&[
        "--config",
        s(&small.config),
        "--seed",
        "5",
        "--out",
        s(&out),
        "eval",
        "--method",
        "global",
        "--checkpoint",
        s(&ckpt),
    ]);
    assert_eq!(code, 1);
    assert!(!out.exists());
}

#[test]
fn checkpoint_for_another_method_is_refused() {
    let small = Small::new();
    let code = run(&[
        "--config",
        s(&small.config),
        "--out",
        s(&small.path("e.csv")),
        "eval",
        "--method",
        "global",
        "--checkpoint",
        s(&small.path("ours.ckpt")),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn run_episode_dumps_the_command_log() {
    let small = Small::new();
    let out = small.path("ep.json");
    for threaded in [false, true] {
        let mut args = vec![
            "--config",
            s(&small.config),
            "--out",
            s(&out),
            "run-episode",
            "--method",
            "ours",
            "--checkpoint",
        ];
        let ckpt = small.path("ours.ckpt");
        args.push(s(&ckpt));
        args.extend(["--scene-seed", "2000000"]);
        if threaded {
            args.push("--threaded");
        }
        assert_eq!(run(&args), 0);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert!(!v["commands"].as_array().unwrap().is_empty());
    }
}
