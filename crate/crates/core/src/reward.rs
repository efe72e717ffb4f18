//! Verifiable reward for difference localization.
//!
//! The reward has three layers:
//!
//! * a binary format term, 1 iff the model text parses into a box list;
//! * an accuracy term `λ1·F1 + λ2·mean IoU`, where precision and recall come
//!   from a maximum-IoU one-to-one assignment of predictions to ground truth;
//! * the total `(1 − α)·r_acc + α·r_format`.
//!
//! Matching uses an exact O(n³) assignment solver; [`brute_force_match`]
//! enumerates every injection and exists to check it.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{BBox, Dims};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error("brute-force matching supports at most {limit} pairs, got {size}")]
    SizeLimitExceeded { size: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub match_min_iou: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            alpha: 0.1,
            match_min_iou: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |m: &str| Err(RewardError::InvalidConfig(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda weights must be non-negative");
        }
        if (self.lambda1 + self.lambda2 - 1.0).abs() > 1e-9 {
            return bad("lambda1 + lambda2 must equal 1");
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.match_min_iou) {
            return bad("match_min_iou must lie in [0, 1)");
        }
        Ok(())
    }

    fn iou_floor(&self) -> f64 {
        self.match_min_iou.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Surviving pairs, sorted by prediction index.
    pub pairs: Vec<MatchedPair>,
    pub n_pred: usize,
    pub n_gt: usize,
}

impl MatchResult {
    pub fn n_matched(&self) -> usize {
        self.pairs.len()
    }

    pub fn total_iou(&self) -> f64 {
        self.pairs.iter().map(|p| p.iou).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_iou: f64,
    pub r_acc: f64,
    pub r_total: f64,
}

fn list_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?";
        let quad = format!(r"\[\s*{num}\s*,\s*{num}\s*,\s*{num}\s*,\s*{num}\s*\]");
        Regex::new(&format!(r"\[\s*(?:{quad}(?:\s*,\s*{quad})*)?\s*\]")).unwrap()
    })
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?").unwrap())
}

/// Extracts the last `[[x_min, y_min, x_max, y_max], ...]` list from model text.
///
/// Coordinates are clamped to the image. Any box that is empty after
/// clamping invalidates the whole answer. `"[]"` is a valid empty answer.
pub fn parse_boxes(text: &str, dims: Dims) -> Option<Vec<BBox>> {
    let list = list_regex().find_iter(text).last()?;
    let values: Vec<f64> = number_regex()
        .find_iter(list.as_str())
        .map(|m| m.as_str().parse::<f64>())
        .collect::<Result<_, _>>()
        .ok()?;
    let (w, h) = (dims.width as f64, dims.height as f64);
    values
        .chunks_exact(4)
        .map(|q| {
            BBox::new(
                q[0].clamp(0.0, w),
                q[1].clamp(0.0, h),
                q[2].clamp(0.0, w),
                q[3].clamp(0.0, h),
            )
        })
        .collect()
}

/// 1 when the text parses to a (possibly empty) box list, else 0.
pub fn format_reward(text: &str, dims: Dims) -> f64 {
    if parse_boxes(text, dims).is_some() {
        1.0
    } else {
        0.0
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Minimum-cost perfect assignment on a square cost matrix (row-major, n×n).
/// Returns `assign[row] = col`.
///
/// Shortest augmenting paths with row/column potentials; O(n³).
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based internally; index 0 is a virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < min_to[j] {
                    min_to[j] = cur;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            assign[col_owner[j] - 1] = j - 1;
        }
    }
    assign
}

fn finalize(
    mut pairs: Vec<MatchedPair>,
    n_pred: usize,
    n_gt: usize,
    cfg: &RewardConfig,
) -> MatchResult {
    let floor = cfg.iou_floor();
    pairs.retain(|p| p.iou > floor);
    pairs.sort_by_key(|p| p.pred);
    MatchResult {
        pairs,
        n_pred,
        n_gt,
    }
}

/// Maximum-total-IoU one-to-one matching, then drops pairs at or below the
/// IoU floor (zero-overlap pairs never count).
pub fn hungarian_match(pred: &[BBox], gt: &[BBox], cfg: &RewardConfig) -> MatchResult {
    let n = pred.len().max(gt.len());
    if pred.is_empty() || gt.is_empty() {
        return finalize(Vec::new(), pred.len(), gt.len(), cfg);
    }
    // Maximize IoU by minimizing its negation; padding cells cost 0.
    let mut cost = vec![0.0; n * n];
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            cost[i * n + j] = -iou(p, g);
        }
    }
    let assign = solve_assignment(&cost, n);
    let pairs = assign
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < pred.len() && j < gt.len())
        .map(|(i, &j)| MatchedPair {
            pred: i,
            gt: j,
            iou: iou(&pred[i], &gt[j]),
        })
        .collect();
    finalize(pairs, pred.len(), gt.len(), cfg)
}

pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Exhaustive matching over all injections of the smaller side into the larger.
pub fn brute_force_match(
    pred: &[BBox],
    gt: &[BBox],
    cfg: &RewardConfig,
) -> Result<MatchResult, RewardError> {
    let small = pred.len().min(gt.len());
    if small > BRUTE_FORCE_LIMIT {
        return Err(RewardError::SizeLimitExceeded {
            size: small,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let pred_is_small = pred.len() <= gt.len();
    let (rows, cols) = if pred_is_small {
        (pred, gt)
    } else {
        (gt, pred)
    };
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| cols.iter().map(|c| iou(r, c)).collect())
        .collect();

    struct Search<'a> {
        table: &'a [Vec<f64>],
        used: Vec<bool>,
        current: Vec<usize>,
        best: Vec<usize>,
        best_total: f64,
    }
    impl Search<'_> {
        fn go(&mut self, row: usize, total: f64) {
            if row == self.table.len() {
                if total > self.best_total {
                    self.best_total = total;
                    self.best = self.current.clone();
                }
                return;
            }
            for c in 0..self.used.len() {
                if !self.used[c] {
                    self.used[c] = true;
                    self.current.push(c);
                    self.go(row + 1, total + self.table[row][c]);
                    self.current.pop();
                    self.used[c] = false;
                }
            }
        }
    }
    let mut s = Search {
        table: &table,
        used: vec![false; cols.len()],
        current: Vec::with_capacity(rows.len()),
        best: Vec::new(),
        best_total: f64::NEG_INFINITY,
    };
    s.go(0, 0.0);

    let pairs = s
        .best
        .iter()
        .enumerate()
        .map(|(r, &c)| {
            let (i, j) = if pred_is_small { (r, c) } else { (c, r) };
            MatchedPair {
                pred: i,
                gt: j,
                iou: table[r][c],
            }
        })
        .collect();
    Ok(finalize(pairs, pred.len(), gt.len(), cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyTerms {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_iou: f64,
    pub r_acc: f64,
}

pub fn accuracy_reward(m: &MatchResult, cfg: &RewardConfig) -> AccuracyTerms {
    let n_m = m.n_matched() as f64;
    let ratio = |den: usize| if den == 0 { 0.0 } else { n_m / den as f64 };
    let precision = ratio(m.n_pred);
    let recall = ratio(m.n_gt);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let mean_iou = if m.pairs.is_empty() {
        0.0
    } else {
        m.total_iou() / n_m
    };
    AccuracyTerms {
        precision,
        recall,
        f1,
        mean_iou,
        r_acc: cfg.lambda1 * f1 + cfg.lambda2 * mean_iou,
    }
}

/// Scores an already-parsed prediction; `None` means the parse failed.
pub fn score_boxes(pred: Option<&[BBox]>, gt: &[BBox], cfg: &RewardConfig) -> RewardBreakdown {
    let Some(pred) = pred else {
        return RewardBreakdown::default();
    };
    let acc = accuracy_reward(&hungarian_match(pred, gt, cfg), cfg);
    RewardBreakdown {
        r_format: 1.0,
        precision: acc.precision,
        recall: acc.recall,
        f1: acc.f1,
        mean_iou: acc.mean_iou,
        r_acc: acc.r_acc,
        r_total: (1.0 - cfg.alpha) * acc.r_acc + cfg.alpha,
    }
}

/// Full reward of raw model text against ground-truth boxes.
pub fn total_reward(text: &str, gt: &[BBox], dims: Dims, cfg: &RewardConfig) -> RewardBreakdown {
    score_boxes(parse_boxes(text, dims).as_deref(), gt, cfg)
}

/// Renders boxes in the answer schema, e.g. `[[1, 2, 3, 4], [5, 6, 7, 8]]`.
pub fn boxes_to_text(boxes: &[BBox]) -> String {
    serde_json::to_string(boxes)
        .expect("boxes serialize")
        .replace(',', ", ")
}

/// One line of a batch-scoring input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub pair_id: String,
    pub text: String,
    pub gt_boxes: Vec<BBox>,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub pair_id: String,
    #[serde(flatten)]
    pub breakdown: RewardBreakdown,
}

/// Scores each record and appends the component means.
pub fn score_batch(
    records: &[ScoreRecord],
    cfg: &RewardConfig,
) -> (Vec<ScoredRecord>, RewardBreakdown) {
    use rayon::prelude::*;
    let scored: Vec<ScoredRecord> = records
        .par_iter()
        .map(|r| ScoredRecord {
            pair_id: r.pair_id.clone(),
            breakdown: total_reward(
                &r.text,
                &r.gt_boxes,
                Dims {
                    width: r.width,
                    height: r.height,
                },
                cfg,
            ),
        })
        .collect();
    let summary = mean_breakdown(scored.iter().map(|s| &s.breakdown));
    (scored, summary)
}

/// Component-wise mean; all zeros for an empty input.
pub fn mean_breakdown<'a>(items: impl IntoIterator<Item = &'a RewardBreakdown>) -> RewardBreakdown {
    let mut sum = RewardBreakdown::default();
    let mut n = 0usize;
    for b in items {
        sum.r_format += b.r_format;
        sum.precision += b.precision;
        sum.recall += b.recall;
        sum.f1 += b.f1;
        sum.mean_iou += b.mean_iou;
        sum.r_acc += b.r_acc;
        sum.r_total += b.r_total;
        n += 1;
    }
    if n == 0 {
        return sum;
    }
    let n = n as f64;
    RewardBreakdown {
        r_format: sum.r_format / n,
        precision: sum.precision / n,
        recall: sum.recall / n,
        f1: sum.f1 / n,
        mean_iou: sum.mean_iou / n,
        r_acc: sum.r_acc / n,
        r_total: sum.r_total / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    const DIMS: Dims = Dims {
        width: 256,
        height: 256,
    };

    #[test]
    fn parses_two_boxes() {
        let got = parse_boxes("Differences: [[10, 20, 30, 40], [5, 5, 15, 15]]", DIMS).unwrap();
        assert_eq!(
            got,
            vec![bx(10.0, 20.0, 30.0, 40.0), bx(5.0, 5.0, 15.0, 15.0)]
        );
    }

    #[test]
    fn prose_does_not_parse() {
        assert_eq!(parse_boxes("I see no list here", DIMS), None);
        assert_eq!(format_reward("I see no list here", DIMS), 0.0);
    }

    #[test]
    fn inverted_box_invalidates() {
        assert_eq!(parse_boxes("[[30,40,10,20]]", DIMS), None);
        assert_eq!(parse_boxes("[[1,2,3,4],[30,40,10,20]]", DIMS), None);
    }

    #[test]
    fn empty_list_is_valid() {
        assert_eq!(parse_boxes("[]", DIMS), Some(vec![]));
        assert_eq!(format_reward("[]", DIMS), 1.0);
        assert_eq!(format_reward("answer: [ ]", DIMS), 1.0);
    }

    #[test]
    fn last_list_wins_and_decimals_clamp() {
        let text = "first guess [[0,0,5,5]] final: [[-3.5, 10.25, 300, 1e2]]";
        assert_eq!(
            parse_boxes(text, DIMS),
            Some(vec![bx(0.0, 10.25, 256.0, 100.0)])
        );
    }

    #[test]
    fn box_collapsed_by_clamping_invalidates() {
        assert_eq!(parse_boxes("[[300, 0, 400, 10]]", DIMS), None);
    }

    #[test]
    fn malformed_quadruples_do_not_parse() {
        assert_eq!(parse_boxes("[[1, 2, 3]]", DIMS), None);
        assert_eq!(parse_boxes("[1, 2, 3, 4]", DIMS), None);
        assert_eq!(format_reward("[[1, 2, 3, 4],]", DIMS), 0.0);
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        // Touching edges share no area.
        assert_eq!(iou(&a, &bx(10.0, 0.0, 20.0, 10.0)), 0.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn assignment_small_known_instance() {
        // Optimal cost 5 via (0->1, 1->0, 2->2).
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = solve_assignment(&cost, 3);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn hungarian_identity_and_empty() {
        let cfg = RewardConfig::default();
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let m = hungarian_match(&[a], &[a], &cfg);
        assert_eq!(
            m.pairs,
            vec![MatchedPair {
                pred: 0,
                gt: 0,
                iou: 1.0
            }]
        );
        let gt = [a, bx(20.0, 20.0, 30.0, 30.0), bx(40.0, 0.0, 50.0, 9.0)];
        let m = hungarian_match(&[], &gt, &cfg);
        assert_eq!(m.n_matched(), 0);
        assert_eq!(m.n_gt, 3);
    }

    #[test]
    fn two_exact_of_three() {
        let cfg = RewardConfig::default();
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(20.0, 20.0, 40.0, 40.0);
        let c = bx(100.0, 100.0, 110.0, 110.0);
        let m = hungarian_match(&[a, b], &[a, b, c], &cfg);
        assert_eq!(m.n_matched(), 2);
        assert!(m.pairs.iter().all(|p| p.iou == 1.0 && p.pred == p.gt));
        let acc = accuracy_reward(&m, &cfg);
        assert!((acc.f1 - 0.8).abs() < 1e-12);
        assert_eq!(acc.mean_iou, 1.0);
        assert!((acc.r_acc - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_iou_assignments_are_discarded() {
        let cfg = RewardConfig::default();
        let m = hungarian_match(
            &[bx(0.0, 0.0, 10.0, 10.0)],
            &[bx(50.0, 50.0, 60.0, 60.0)],
            &cfg,
        );
        assert_eq!(m.n_matched(), 0);
        let strict = RewardConfig {
            match_min_iou: 0.5,
            ..cfg
        };
        let m = hungarian_match(
            &[bx(0.0, 0.0, 10.0, 10.0)],
            &[bx(5.0, 0.0, 15.0, 10.0)],
            &strict,
        );
        assert_eq!(m.n_matched(), 0);
    }

    #[test]
    fn f1_from_counts() {
        let m = MatchResult {
            pairs: vec![
                MatchedPair {
                    pred: 0,
                    gt: 0,
                    iou: 1.0,
                },
                MatchedPair {
                    pred: 1,
                    gt: 2,
                    iou: 1.0,
                },
            ],
            n_pred: 2,
            n_gt: 4,
        };
        let acc = accuracy_reward(&m, &RewardConfig::default());
        assert_eq!(acc.precision, 1.0);
        assert_eq!(acc.recall, 0.5);
        assert!((acc.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn total_reward_cases() {
        let cfg = RewardConfig::default();
        let gt = [bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 30.0)];
        assert_eq!(total_reward("no boxes", &gt, DIMS, &cfg).r_total, 0.0);
        let perfect = total_reward(&boxes_to_text(&gt), &gt, DIMS, &cfg);
        assert!((perfect.r_total - 1.0).abs() < 1e-12);
        let empty = total_reward("[]", &gt, DIMS, &cfg);
        assert_eq!(empty.r_format, 1.0);
        assert_eq!(empty.r_acc, 0.0);
        assert!((empty.r_total - 0.1).abs() < 1e-12);
    }

    #[test]
    fn brute_force_limits_and_trivia() {
        let cfg = RewardConfig::default();
        let many: Vec<BBox> = (0..9)
            .map(|i| bx(i as f64, 0.0, i as f64 + 5.0, 5.0))
            .collect();
        assert!(matches!(
            brute_force_match(&many, &many, &cfg),
            Err(RewardError::SizeLimitExceeded { size: 9, .. })
        ));
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(5.0, 5.0, 15.0, 15.0);
        let m = brute_force_match(&[a], &[b], &cfg).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].iou, iou(&a, &b));
        assert_eq!(brute_force_match(&[], &[a], &cfg).unwrap().n_matched(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        let c = RewardConfig {
            lambda1: 0.7,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = RewardConfig {
            alpha: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = RewardConfig {
            match_min_iou: -0.1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn batch_summary_means() {
        let cfg = RewardConfig::default();
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0)];
        let rec = |id: &str, text: &str| ScoreRecord {
            pair_id: id.into(),
            text: text.into(),
            gt_boxes: gt.clone(),
            width: 256,
            height: 256,
        };
        let (rows, summary) = score_batch(&[rec("a", "[[0,0,10,10]]"), rec("b", "junk")], &cfg);
        assert_eq!(rows.len(), 2);
        assert!((summary.r_total - 0.5).abs() < 1e-12);
        assert!((summary.r_format - 0.5).abs() < 1e-12);
    }
}
