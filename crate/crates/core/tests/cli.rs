use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ivediff::cli::*;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ivediff"))
}

fn gen_args(out: &Path, seed: u64) -> GenDataArgs {
    GenDataArgs {
        out: out.to_path_buf(),
        config: None,
        clips: Some(3),
        frames: Some(30),
        size: Some(32),
        triplets: Some(2),
        seed: Some(seed),
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn sampler(seed: u64, steps: usize, mode: &str) -> SamplerArgs {
    SamplerArgs {
        config: None,
        seed: Some(seed),
        steps: Some(steps),
        guidance: None,
        mode: Some(mode.into()),
    }
}

fn trained(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    cmd_gen_data(&gen_args(&data, 5)).unwrap();
    let a = root.join("a");
    cmd_train(&TrainArgs {
        stage: Stage::A,
        config: None,
        data: data.clone(),
        init: None,
        out: a.clone(),
        steps: Some(2),
        seed: None,
    })
    .unwrap();
    (data, a.join("checkpoint.ived"))
}

#[test]
fn gen_data_is_deterministic_and_laid_out() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_gen_data(&gen_args(&a, 3)).unwrap();
    cmd_gen_data(&gen_args(&b, 3)).unwrap();
    assert_eq!(tree(&a), tree(&b));
    assert!(a.join("train/clip_0002/clip.json").exists());
    assert!(a.join("bench/triplet_001/triplet.json").exists());
    assert!(a.join("run_meta.json").exists());
    assert!(!a.join(".lock").exists());
    let c = dir.path().join("c");
    cmd_gen_data(&gen_args(&c, 4)).unwrap();
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn bad_size_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let st = bin()
        .args(["gen-data", "--size", "50", "--out"])
        .arg(dir.path().join("d"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn fine_tune_without_init_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--stage", "mmm", "--data"])
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Stage A checkpoint required"));
}

#[test]
fn missing_checkpoint_fails_before_editing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_gen_data(&gen_args(&data, 1)).unwrap();
    let out = dir.path().join("eval");
    let err = cmd_eval(&EvalArgs {
        bench: data.clone(),
        ckpt: dir.path().join("nope.ived"),
        out: out.clone(),
        sampler: sampler(0, 2, "inflated"),
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(!out.join("report.csv").exists());
    let st = bin()
        .args(["eval", "--bench"])
        .arg(&data)
        .arg("--ckpt")
        .arg(dir.path().join("nope.ived"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(4));
}

#[test]
fn train_edit_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt_a) = trained(dir.path());
    let log = fs::read_to_string(dir.path().join("a/train_log.csv")).unwrap();
    let steps: Vec<usize> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(log.lines().next(), Some("step,loss,wallclock_s"));
    assert_eq!(steps, vec![1, 2]);

    let cfg = dir.path().join("mmm.json");
    fs::write(&cfg, serde_json::to_string(&ivediff::training::TrainConfig { mask_ratio: 0.75, steps: 2, ..Default::default() }).unwrap()).unwrap();
    let m = dir.path().join("m");
    cmd_train(&TrainArgs {
        stage: Stage::Mmm,
        config: Some(cfg),
        data: data.clone(),
        init: Some(ckpt_a.clone()),
        out: m.clone(),
        steps: None,
        seed: None,
    })
    .unwrap();
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(m.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["mask_ratio"], 0.75);

    // re-running from the saved run_meta.json reproduces the checkpoint
    let m2 = dir.path().join("m2");
    cmd_train(&TrainArgs {
        stage: Stage::Mmm,
        config: Some(m.join("run_meta.json")),
        data: data.clone(),
        init: Some(ckpt_a),
        out: m2.clone(),
        steps: None,
        seed: None,
    })
    .unwrap();
    assert_eq!(fs::read(m.join("checkpoint.ived")).unwrap(), fs::read(m2.join("checkpoint.ived")).unwrap());
    assert_eq!(fs::read(m.join("run_meta.json")).unwrap(), fs::read(m2.join("run_meta.json")).unwrap());

    let ckpt = m.join("checkpoint.ived");
    let mut schemas = Vec::new();
    for mode in ["frame_wise_baseline", "inflated"] {
        let out = dir.path().join(format!("eval_{mode}"));
        cmd_eval(&EvalArgs {
            bench: data.clone(),
            ckpt: ckpt.clone(),
            out: out.clone(),
            sampler: sampler(1, 2, mode),
        })
        .unwrap();
        let csv = fs::read_to_string(out.join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        let aggs = json["aggregates"].as_object().unwrap();
        assert!(aggs.contains_key("texture_transfer") && aggs.contains_key("object_modification") && aggs.contains_key("all"));
        let mut keys: Vec<String> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        schemas.push((csv.lines().next().unwrap().to_string(), keys));
    }
    assert_eq!(schemas[0], schemas[1]);
}

#[test]
fn sequential_edits_compose() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let triplet = data.join("bench/triplet_000");
    let first = dir.path().join("first");
    cmd_edit(&EditArgs {
        triplet: triplet.clone(),
        ckpt: ckpt.clone(),
        source: None,
        out: first.clone(),
        sampler: sampler(2, 2, "inflated"),
    })
    .unwrap();
    let second = dir.path().join("second");
    cmd_edit(&EditArgs {
        triplet,
        ckpt,
        source: Some(first.clone()),
        out: second.clone(),
        sampler: sampler(3, 2, "inflated"),
    })
    .unwrap();
    assert_eq!(fs::read_dir(second.join("frames")).unwrap().count(), 8);
}
