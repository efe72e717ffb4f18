use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use dig_core::curriculum::AnnotationRecord;
use dig_core::reward::{score_batch, RewardConfig, ScoreRecord};
use dig_core::RewardBreakdown;

use crate::config::{apply_reward_flags, to_pretty};
use crate::{io, CliError, Result, RunManifest, ScoreArgs};

pub const SCORES_FILE: &str = "scores.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// One model answer to be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub pair_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n: usize,
    #[serde(flatten)]
    pub mean: RewardBreakdown,
}

pub fn print_breakdown(b: &RewardBreakdown) {
    println!("r_total   {:.6}", b.r_total);
    println!("r_acc     {:.6}", b.r_acc);
    println!("r_format  {:.6}", b.r_format);
    println!("f1        {:.6}", b.f1);
    println!("precision {:.6}", b.precision);
    println!("recall    {:.6}", b.recall);
    println!("mean_iou  {:.6}", b.mean_iou);
}

pub fn cmd_score(args: &ScoreArgs) -> Result<ScoreSummary> {
    let mut cfg = RewardConfig::default();
    apply_reward_flags(&mut cfg, &args.reward)?;
    let predictions: Vec<Prediction> = io::read_jsonl(&args.predictions)?;
    let annotations: Vec<AnnotationRecord> = io::read_jsonl(&args.annotations)?;
    let mut by_id = HashMap::with_capacity(annotations.len());
    for a in &annotations {
        if by_id.insert(a.pair_id.as_str(), a).is_some() {
            return Err(CliError::Malformed {
                path: args.annotations.clone(),
                message: format!("duplicate pair_id {}", a.pair_id),
            });
        }
    }
    let mut missing: Vec<String> = predictions
        .iter()
        .filter(|p| !by_id.contains_key(p.pair_id.as_str()))
        .map(|p| p.pair_id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(CliError::MissingPair(missing));
    }
    let records: Vec<ScoreRecord> = predictions
        .into_iter()
        .map(|p| {
            let a = by_id[p.pair_id.as_str()];
            ScoreRecord {
                pair_id: p.pair_id,
                text: p.text,
                gt_boxes: a.boxes.clone(),
                width: a.width,
                height: a.height,
            }
        })
        .collect();
    let (scored, mean) = score_batch(&records, &cfg);
    let summary = ScoreSummary {
        n: scored.len(),
        mean,
    };

    io::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::new("score", None, json!({ "reward": cfg }));
    manifest.inputs = vec![
        args.predictions.display().to_string(),
        args.annotations.display().to_string(),
    ];
    let scores = io::to_jsonl(&scored);
    io::write(&args.out.join(SCORES_FILE), scores.as_bytes())?;
    manifest.record_bytes(SCORES_FILE, scores.as_bytes());
    let text = to_pretty(&summary);
    io::write(&args.out.join(SUMMARY_FILE), text.as_bytes())?;
    manifest.record_bytes(SUMMARY_FILE, text.as_bytes());
    manifest.write(&args.out)?;

    println!("scored {} predictions", summary.n);
    print_breakdown(&summary.mean);
    Ok(summary)
}
