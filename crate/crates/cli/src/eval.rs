use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use dig_core::curriculum::{evaluate, AnnotationRecord, EvalSummary};
use dig_core::grpo::{featurize, Checkpoint, GridEnv, TrainSample};
use dig_core::reward::RewardConfig;

use crate::config::apply_reward_flags;
use crate::generate::{image_paths, ANNOTATIONS_FILE};
use crate::{io, CliError, EvalArgs, Result, RunManifest};

pub const EVAL_FILE: &str = "eval.csv";

#[derive(Debug, Serialize)]
struct Row {
    k: String,
    n: usize,
    mean_r_acc: f64,
    mean_f1: f64,
    mean_iou: f64,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::from_text(&io::read_to_string(path)?)?)
}

/// Loads a generated stage directory as featurized evaluation samples.
pub fn load_dataset(dir: &Path, env: &GridEnv) -> Result<Vec<TrainSample>> {
    let records: Vec<AnnotationRecord> = io::read_jsonl(&dir.join(ANNOTATIONS_FILE))?;
    records
        .par_iter()
        .map(|r| {
            let (pa, pb) = image_paths(dir, &r.pair_id);
            let (a, b) = (io::load_png(&pa)?, io::load_png(&pb)?);
            if a.dims() != r.dims() || b.dims() != r.dims() {
                return Err(CliError::ShapeMismatch(format!(
                    "{}: images are not {}×{}",
                    r.pair_id, r.width, r.height
                )));
            }
            Ok(TrainSample {
                pair_id: r.pair_id.clone(),
                features: featurize(&a, &b, r.count_hint, env)?,
                gt_boxes: r.boxes.clone(),
                dims: r.dims(),
                k: r.k,
                count_hint: r.count_hint,
            })
        })
        .collect()
}

/// Per-K rows for every K from 1 to the largest present (empty rows have
/// n = 0), then an `all` row.
pub fn eval_csv(summary: &EvalSummary) -> String {
    let max_k = summary.per_k.iter().map(|m| m.k).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    for k in 1..=max_k {
        let m = summary
            .per_k
            .iter()
            .find(|m| m.k == k)
            .copied()
            .unwrap_or_default();
        w.serialize(Row {
            k: k.to_string(),
            n: m.n,
            mean_r_acc: m.mean_r_acc,
            mean_f1: m.mean_f1,
            mean_iou: m.mean_iou,
        })
        .expect("in-memory csv");
    }
    w.serialize(Row {
        k: "all".into(),
        n: summary.n,
        mean_r_acc: summary.mean_r_acc,
        mean_f1: summary.mean_f1,
        mean_iou: summary.mean_iou,
    })
    .expect("in-memory csv");
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalSummary> {
    let mut reward = RewardConfig::default();
    apply_reward_flags(&mut reward, &args.reward)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let samples = load_dataset(&args.data, &ckpt.env)?;
    let summary = evaluate(&ckpt.params, &samples, &ckpt.env, &reward);

    io::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::new(
        "eval",
        None,
        json!({ "reward": reward, "env": ckpt.env, "hidden": ckpt.params.hidden, "step": ckpt.step }),
    );
    manifest.inputs = vec![
        args.checkpoint.display().to_string(),
        args.data.display().to_string(),
    ];
    let csv = eval_csv(&summary);
    io::write(&args.out.join(EVAL_FILE), csv.as_bytes())?;
    manifest.record_bytes(EVAL_FILE, csv.as_bytes());
    manifest.write(&args.out)?;
    print!("{csv}");
    Ok(summary)
}
