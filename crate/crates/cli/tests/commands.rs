use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use dig_cli::config::{to_pretty, RunConfig};
use dig_cli::score::Prediction;
use dig_cli::{
    eval, generate, score, train, ConfigArgs, EvalArgs, GenerateArgs, GrpoArgs, RewardArgs,
    RunManifest, ScoreArgs, SplitArg, TrainArgs,
};
use dig_core::curriculum::{AnnotationRecord, KRule, StageSpec};
use dig_core::reward::boxes_to_text;

fn toy_config(dir: &Path, updates: usize) -> PathBuf {
    let stage = |name: &str, k_rule, hint| StageSpec {
        name: name.into(),
        k_rule,
        count_hint_given: hint,
        n_pairs: 200,
        n_updates: updates,
        eval_pairs: 40,
    };
    let cfg = RunConfig {
        seed: 3,
        stages: vec![
            stage("dig1", KRule::Fixed { k: 1 }, true),
            stage("dig2", KRule::Fixed { k: 2 }, true),
            stage("digmix", KRule::Uniform { n_max: 4 }, false),
        ],
        hidden: 16,
        ..RunConfig::default()
    };
    let path = dir.join("toy.json");
    fs::write(&path, to_pretty(&cfg)).unwrap();
    path
}

fn generate_args(
    config: Option<PathBuf>,
    out: PathBuf,
    stage: &str,
    n: usize,
    split: SplitArg,
) -> GenerateArgs {
    GenerateArgs {
        config: ConfigArgs { config, seed: None },
        out,
        stage: Some(stage.into()),
        n: Some(n),
        split,
    }
}

fn train_args(config: &Path, out: PathBuf, resume: Option<PathBuf>) -> TrainArgs {
    TrainArgs {
        config: ConfigArgs {
            config: Some(config.to_path_buf()),
            seed: None,
        },
        out,
        resume,
        reward: RewardArgs::default(),
        grpo: GrpoArgs::default(),
    }
}

fn annotations(dir: &Path) -> Vec<AnnotationRecord> {
    fs::read_to_string(dir.join("annotations.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write_predictions(path: &Path, preds: &[Prediction]) {
    let text: String = preds
        .iter()
        .map(|p| serde_json::to_string(p).unwrap() + "\n")
        .collect();
    fs::write(path, text).unwrap();
}

fn dig() -> Process {
    Process::new(env!("CARGO_BIN_EXE_dig"))
}

#[test]
fn stage_override_generates_single_difference_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let manifest = generate::cmd_generate(&generate_args(
        None,
        out.clone(),
        "dig1",
        10,
        SplitArg::Train,
    ))
    .unwrap();
    let recs = annotations(&out.join("dig1"));
    assert_eq!(recs.len(), 10);
    assert!(recs
        .iter()
        .all(|r| r.k == 1 && r.boxes.len() == 1 && r.count_hint == 1));
    // 10 × (scene + 2 images) + annotations.
    assert_eq!(manifest.digests.len(), 31);
    assert_eq!(RunManifest::load(&out).unwrap(), manifest);
    for (rel, digest) in &manifest.digests {
        assert_eq!(&dig_cli::io::file_digest(&out.join(rel)).unwrap(), digest);
    }
}

#[test]
fn score_perfect_empty_and_garbage_answers() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    generate::cmd_generate(&generate_args(
        None,
        data.clone(),
        "digmix",
        12,
        SplitArg::Train,
    ))
    .unwrap();
    let ann = data.join("digmix/annotations.jsonl");
    let recs = annotations(&data.join("digmix"));
    let run = |name: &str, text: &dyn Fn(&AnnotationRecord) -> String| {
        let preds: Vec<Prediction> = recs
            .iter()
            .map(|r| Prediction {
                pair_id: r.pair_id.clone(),
                text: text(r),
            })
            .collect();
        let p = tmp.path().join(format!("{name}.jsonl"));
        write_predictions(&p, &preds);
        score::cmd_score(&ScoreArgs {
            predictions: p,
            annotations: ann.clone(),
            out: tmp.path().join(name),
            reward: RewardArgs::default(),
        })
        .unwrap()
    };
    let perfect = run("perfect", &|r| {
        format!("Differences: {}", boxes_to_text(&r.boxes))
    });
    assert_eq!(perfect.n, 12);
    assert!((perfect.mean.r_total - 1.0).abs() < 1e-12);
    let empty = run("empty", &|_| "[]".into());
    assert!((empty.mean.r_total - 0.1).abs() < 1e-12);
    let garbage = run("garbage", &|_| "no idea, sorry".into());
    assert_eq!(garbage.mean.r_total, 0.0);
    assert_eq!(
        fs::read_to_string(tmp.path().join("garbage/scores.jsonl"))
            .unwrap()
            .lines()
            .count(),
        12
    );
}

#[test]
fn unknown_prediction_ids_exit_with_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    generate::cmd_generate(&generate_args(
        None,
        data.clone(),
        "dig1",
        2,
        SplitArg::Train,
    ))
    .unwrap();
    let preds = tmp.path().join("p.jsonl");
    write_predictions(
        &preds,
        &[Prediction {
            pair_id: "nope".into(),
            text: "[]".into(),
        }],
    );
    let output = dig()
        .args(["score", "--predictions"])
        .arg(&preds)
        .arg("--annotations")
        .arg(data.join("dig1/annotations.jsonl"))
        .arg("--out")
        .arg(tmp.path().join("s"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("nope"));
    assert!(!tmp.path().join("s/manifest.json").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let status = dig().args(["train", "--out"]).status().unwrap();
    assert_eq!(status.code(), Some(1));
    let status = dig()
        .args(["generate", "--out", "/nonexistent-dir-x", "--n", "0"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    let status = dig().args(["--version"]).output().unwrap().status;
    assert_eq!(status.code(), Some(0));
}

#[test]
fn divergent_training_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 3);
    let status = dig()
        .args(["train", "--beta", "1e305", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("t"))
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(3));
    assert!(tmp.path().join("t/train_log.csv").exists());
}

#[test]
fn training_writes_checkpoints_and_resumes_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 25);
    let full_dir = tmp.path().join("full");
    let full = train::cmd_train(&train_args(&cfg, full_dir.clone(), None)).unwrap();
    assert_eq!(full.checkpoints.len(), 4);
    assert_eq!(full.step, 75);
    let log = fs::read_to_string(full_dir.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,stage,mean_r_acc,mean_f1,mean_iou,mean_kl,loss"
    );
    assert_eq!(lines.count(), 75);

    // Resume at the start of the second stage, in a fresh directory and in
    // the original one (whose later history must be replaced, not duplicated).
    let stage2 = full_dir.join("checkpoints/ckpt-1-dig1.txt");
    let copy = tmp.path().join("stage2.txt");
    fs::copy(&stage2, &copy).unwrap();
    for dir in [tmp.path().join("resumed"), full_dir.clone()] {
        let resumed = train::cmd_train(&train_args(&cfg, dir.clone(), Some(copy.clone()))).unwrap();
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.step, 75);
        assert_eq!(resumed.summaries, full.summaries[1..]);
        assert_eq!(resumed.checkpoints.len(), 2);
    }
    assert_eq!(
        fs::read_to_string(full_dir.join("train_log.csv")).unwrap(),
        log
    );
    let resumed_log = fs::read_to_string(tmp.path().join("resumed/train_log.csv")).unwrap();
    assert_eq!(resumed_log.lines().count(), 51);
    assert!(log.ends_with(
        &resumed_log
            .lines()
            .skip(1)
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    ));
    assert_eq!(
        fs::read_to_string(full_dir.join("stage_summaries.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn eval_is_deterministic_and_training_helps_every_k() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 150);
    let run_dir = tmp.path().join("run");
    train::cmd_train(&train_args(&cfg, run_dir.clone(), None)).unwrap();
    let data = tmp.path().join("eval-data");
    let gen = GenerateArgs {
        config: ConfigArgs {
            config: Some(cfg.clone()),
            seed: None,
        },
        out: data.clone(),
        stage: None,
        n: Some(60),
        split: SplitArg::Eval,
    };
    generate::cmd_generate(&gen).unwrap();
    let eval_at = |ckpt: &str, stage: &str, out: &str| {
        eval::cmd_eval(&EvalArgs {
            checkpoint: run_dir.join("checkpoints").join(ckpt),
            data: data.join(stage),
            out: tmp.path().join(out),
            reward: RewardArgs::default(),
        })
        .unwrap()
    };
    let untrained = eval_at("ckpt-0-init.txt", "dig1", "e0");
    assert!(untrained.mean_r_acc < 0.1, "{}", untrained.mean_r_acc);

    let before = eval_at("ckpt-0-init.txt", "digmix", "e1");
    let after = eval_at("ckpt-3-digmix.txt", "digmix", "e2");
    let again = eval_at("ckpt-3-digmix.txt", "digmix", "e3");
    assert_eq!(after, again);
    assert_eq!(
        fs::read(tmp.path().join("e2/eval.csv")).unwrap(),
        fs::read(tmp.path().join("e3/eval.csv")).unwrap()
    );
    assert_eq!(before.per_k.len(), after.per_k.len());
    for (b, a) in before.per_k.iter().zip(&after.per_k) {
        assert!(
            a.mean_r_acc >= b.mean_r_acc,
            "k={}: {} < {}",
            a.k,
            a.mean_r_acc,
            b.mean_r_acc
        );
    }
    let csv = fs::read_to_string(tmp.path().join("e2/eval.csv")).unwrap();
    assert!(csv.starts_with("k,n,mean_r_acc,mean_f1,mean_iou\n1,"));
    assert!(csv.lines().last().unwrap().starts_with("all,60,"));
}
