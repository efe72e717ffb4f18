//! Staged datasets and the staged training schedule.
//!
//! The default schedule runs three stages of increasing difficulty: exactly
//! one difference, exactly two, then a uniform mix of one to `n_max`. The
//! first two stages tell the policy how many differences to find; the mixed
//! stage withholds the count.

use std::collections::{BTreeMap, HashSet};
use std::ops::ControlFlow;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{self, GridEnv, GrpoConfig, GrpoError, PolicyParams, TrainSample};
use crate::render::{self, Annotation, Camera, Dims, RenderError, RenderedPair};
use crate::reward::{self, RewardConfig};
use crate::scene::{self, ModKind, PairParams, PairSpec, SceneError};
use crate::seed;

pub const MAX_RETRIES: u64 = 100;
pub const DEFAULT_STAGE_PAIRS: usize = 1600;
pub const DEFAULT_EVAL_PAIRS: usize = 200;

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("stage {stage}: sample {index} failed after {retries} attempts: {last}")]
    GenerationFailed {
        stage: String,
        index: usize,
        retries: u64,
        last: String,
    },
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("observer aborted: {0}")]
    Observer(String),
}

pub type Result<T> = std::result::Result<T, CurriculumError>;

/// How a stage chooses the number of differences per pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum KRule {
    Fixed { k: usize },
    Uniform { n_max: usize },
}

impl KRule {
    pub fn upper_bound(&self) -> usize {
        match *self {
            KRule::Fixed { k } => k,
            KRule::Uniform { n_max } => n_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub k_rule: KRule,
    pub count_hint_given: bool,
    pub n_pairs: usize,
    pub n_updates: usize,
    #[serde(default = "default_eval_pairs")]
    pub eval_pairs: usize,
}

fn default_eval_pairs() -> usize {
    DEFAULT_EVAL_PAIRS
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CurriculumError::InvalidSchedule(m));
        match self.k_rule {
            KRule::Fixed { k } if k < 1 => {
                return bad(format!("{}: fixed k must be ≥ 1", self.name))
            }
            KRule::Fixed { .. } if !self.count_hint_given => {
                return bad(format!(
                    "{}: fixed-count stages give the count hint",
                    self.name
                ))
            }
            KRule::Uniform { n_max } if n_max < 1 => {
                return bad(format!("{}: n_max must be ≥ 1", self.name))
            }
            KRule::Uniform { .. } if self.count_hint_given => {
                return bad(format!(
                    "{}: mixed stages withhold the count hint",
                    self.name
                ))
            }
            _ => {}
        }
        if self.n_pairs == 0 {
            return bad(format!("{}: n_pairs must be positive", self.name));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub stages: Vec<StageSpec>,
    pub root_seed: u64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(CurriculumError::InvalidSchedule("no stages".into()));
        }
        let mut names = HashSet::new();
        for s in &self.stages {
            s.validate()?;
            if !names.insert(s.name.as_str()) {
                return Err(CurriculumError::InvalidSchedule(format!(
                    "duplicate stage name {}",
                    s.name
                )));
            }
        }
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn total_updates(&self) -> usize {
        self.stages.iter().map(|s| s.n_updates).sum()
    }

    /// Largest difference count any stage can produce.
    pub fn n_max(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.k_rule.upper_bound())
            .max()
            .unwrap_or(1)
    }
}

/// Single → double → mixed (count withheld).
pub fn default_schedule(
    n_max: usize,
    sizes: [usize; 3],
    updates: [usize; 3],
    root_seed: u64,
) -> Result<Schedule> {
    if n_max < 2 {
        return Err(CurriculumError::InvalidSchedule(
            "the mixed stage needs n_max ≥ 2".into(),
        ));
    }
    let stage = |name: &str, k_rule, hint, i: usize| StageSpec {
        name: name.into(),
        k_rule,
        count_hint_given: hint,
        n_pairs: sizes[i],
        n_updates: updates[i],
        eval_pairs: DEFAULT_EVAL_PAIRS,
    };
    let schedule = Schedule {
        stages: vec![
            stage("dig1", KRule::Fixed { k: 1 }, true, 0),
            stage("dig2", KRule::Fixed { k: 2 }, true, 1),
            stage("digmix", KRule::Uniform { n_max }, false, 2),
        ],
        root_seed,
    };
    schedule.validate()?;
    Ok(schedule)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Rendering and generation settings shared by every stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dims: Dims,
    pub pair: PairParams,
}

impl DataConfig {
    pub fn camera(&self) -> Camera {
        Camera::for_dims(self.dims)
    }
}

/// Seed of a stage's split. Keyed by the stage *name*, so the same stage
/// yields the same data in any schedule sharing the root seed.
pub fn stage_seed(root_seed: u64, stage: &StageSpec, split: Split) -> u64 {
    let split_tag = match split {
        Split::Train => 0,
        Split::Eval => 1,
    };
    seed::derive(root_seed, &[seed::hash_str(&stage.name), split_tag])
}

/// One generated and verified pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pair: PairSpec,
    pub rendered: RenderedPair,
    pub count_hint: usize,
}

impl Sample {
    pub fn annotation(&self) -> &Annotation {
        &self.rendered.annotation
    }
}

/// Generates sample `index` of a stage split, retrying with a fresh sub-seed
/// when an edit is invisible or falls off screen.
pub fn stage_sample(
    stage: &StageSpec,
    split_seed: u64,
    index: usize,
    data: &DataConfig,
) -> Result<Sample> {
    let camera = data.camera();
    let (n_max, count_override) = match stage.k_rule {
        KRule::Fixed { k } => (k, Some(k)),
        KRule::Uniform { n_max } => (n_max, None),
    };
    let mut last = String::new();
    for retry in 0..MAX_RETRIES {
        let pair_seed = seed::derive(split_seed, &[index as u64, retry]);
        let pair = match scene::make_pair(pair_seed, n_max, count_override, &data.pair) {
            Ok(p) => p,
            Err(e @ SceneError::PlacementExhausted { .. }) => {
                last = e.to_string();
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        match render::render_pair(&pair, &camera, data.dims) {
            Ok(rendered) => {
                let count_hint = if stage.count_hint_given { pair.k } else { 0 };
                return Ok(Sample {
                    pair,
                    rendered,
                    count_hint,
                });
            }
            Err(
                e @ (RenderError::InvisibleDifference { .. } | RenderError::DegenerateBox { .. }),
            ) => {
                last = e.to_string();
            }
            Err(e) => {
                return Err(CurriculumError::GenerationFailed {
                    stage: stage.name.clone(),
                    index,
                    retries: retry + 1,
                    last: e.to_string(),
                })
            }
        }
    }
    Err(CurriculumError::GenerationFailed {
        stage: stage.name.clone(),
        index,
        retries: MAX_RETRIES,
        last,
    })
}

fn split_size(stage: &StageSpec, split: Split) -> usize {
    match split {
        Split::Train => stage.n_pairs,
        Split::Eval => stage.eval_pairs,
    }
}

/// All samples of a stage split, generated in parallel.
pub fn stage_dataset(
    stage: &StageSpec,
    root_seed: u64,
    split: Split,
    data: &DataConfig,
) -> Result<Vec<Sample>> {
    let s = stage_seed(root_seed, stage, split);
    (0..split_size(stage, split))
        .into_par_iter()
        .map(|i| stage_sample(stage, s, i, data))
        .collect()
}

/// Drops the images of a sample, keeping what training needs.
pub fn to_train_sample(sample: &Sample, env: &GridEnv) -> Result<TrainSample> {
    let r = &sample.rendered;
    Ok(TrainSample {
        pair_id: sample.pair.pair_id.clone(),
        features: grpo::featurize(&r.image_a, &r.image_b, sample.count_hint, env)?,
        gt_boxes: r.annotation.boxes.clone(),
        dims: r.image_a.dims(),
        k: sample.pair.k,
        count_hint: sample.count_hint,
    })
}

/// Featurized stage split; images are discarded as soon as they are encoded.
pub fn stage_train_set(
    stage: &StageSpec,
    root_seed: u64,
    split: Split,
    data: &DataConfig,
    env: &GridEnv,
) -> Result<Vec<TrainSample>> {
    let s = stage_seed(root_seed, stage, split);
    (0..split_size(stage, split))
        .into_par_iter()
        .map(|i| to_train_sample(&stage_sample(stage, s, i, data)?, env))
        .collect()
}

/// One line of `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub pair_id: String,
    pub stage: String,
    pub k: usize,
    pub count_hint: usize,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<render::BBox>,
    pub kinds: Vec<ModKind>,
}

impl AnnotationRecord {
    pub fn new(stage: &str, sample: &Sample) -> Self {
        let ann = sample.annotation();
        Self {
            pair_id: ann.pair_id.clone(),
            stage: stage.to_string(),
            k: sample.pair.k,
            count_hint: sample.count_hint,
            width: sample.rendered.image_a.width,
            height: sample.rendered.image_a.height,
            boxes: ann.boxes.clone(),
            kinds: ann.kinds.clone(),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub n: usize,
    pub mean_r_acc: f64,
    pub mean_f1: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub mean_r_acc: f64,
    pub mean_f1: f64,
    pub mean_iou: f64,
    pub per_k: Vec<KMetrics>,
}

/// Greedy-decoding evaluation with a per-difference-count breakdown.
pub fn evaluate(
    params: &PolicyParams,
    samples: &[TrainSample],
    env: &GridEnv,
    reward_cfg: &RewardConfig,
) -> EvalSummary {
    let scores: Vec<(usize, reward::RewardBreakdown)> = samples
        .par_iter()
        .map(|s| {
            let r = grpo::greedy_rollout(params, &s.features, env);
            let boxes = grpo::actions_to_boxes(&r.actions, env, s.dims);
            (
                s.k,
                reward::score_boxes(Some(&boxes), &s.gt_boxes, reward_cfg),
            )
        })
        .collect();
    let summarize = |k: usize, items: &[&reward::RewardBreakdown]| {
        let n = items.len().max(1) as f64;
        KMetrics {
            k,
            n: items.len(),
            mean_r_acc: items.iter().map(|b| b.r_acc).sum::<f64>() / n,
            mean_f1: items.iter().map(|b| b.f1).sum::<f64>() / n,
            mean_iou: items.iter().map(|b| b.mean_iou).sum::<f64>() / n,
        }
    };
    let mut by_k: BTreeMap<usize, Vec<&reward::RewardBreakdown>> = BTreeMap::new();
    for (k, b) in &scores {
        by_k.entry(*k).or_default().push(b);
    }
    let all: Vec<&reward::RewardBreakdown> = scores.iter().map(|(_, b)| b).collect();
    let total = summarize(0, &all);
    EvalSummary {
        n: scores.len(),
        mean_r_acc: total.mean_r_acc,
        mean_f1: total.mean_f1,
        mean_iou: total.mean_iou,
        per_k: by_k.iter().map(|(k, v)| summarize(*k, v)).collect(),
    }
}

/// Training knobs beyond the GRPO loss itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub env: GridEnv,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    /// Inputs per update; each contributes one group of rollouts.
    pub pairs_per_update: usize,
    /// Reset the KL reference to the current policy at each stage start.
    pub refresh_reference: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            env: GridEnv::default(),
            reward: RewardConfig::default(),
            grpo: GrpoConfig::default(),
            pairs_per_update: 4,
            refresh_reference: true,
        }
    }
}

impl TrainSettings {
    /// Settings that train the toy policy quickly and stably.
    ///
    /// Uses the exact KL: the sampled k3 estimator's gradient grows like
    /// `π_ref/π` on rarely sampled tokens, and at this step size one such
    /// spike can throw the policy into stopping immediately, which yields
    /// identical rewards and therefore no signal to recover from.
    pub fn toy_preset() -> Self {
        Self {
            grpo: GrpoConfig {
                lr: 1.0,
                exact_kl: true,
                ..GrpoConfig::default()
            },
            pairs_per_update: 16,
            ..Self::default()
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: usize,
    pub stage: String,
    pub mean_r_acc: f64,
    pub mean_f1: f64,
    pub mean_iou: f64,
    pub mean_kl: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub updates: usize,
    pub mean_train_r_acc: f64,
    pub eval: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<UpdateRecord>,
    pub summaries: Vec<StageSummary>,
}

/// Resumable position in a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub params: PolicyParams,
    /// Updates completed so far.
    pub step: usize,
    /// Index of the next stage to run.
    pub next_stage: usize,
}

/// A stage with its featurized train and eval splits.
#[derive(Debug, Clone)]
pub struct PreparedStage {
    pub spec: StageSpec,
    pub train: Vec<TrainSample>,
    pub eval: Vec<TrainSample>,
}

pub fn prepare_stages(
    schedule: &Schedule,
    data: &DataConfig,
    env: &GridEnv,
) -> Result<Vec<PreparedStage>> {
    schedule
        .stages
        .iter()
        .map(|s| {
            Ok(PreparedStage {
                spec: s.clone(),
                train: stage_train_set(s, schedule.root_seed, Split::Train, data, env)?,
                eval: stage_train_set(s, schedule.root_seed, Split::Eval, data, env)?,
            })
        })
        .collect()
}

/// Hooks into a curriculum run.
pub trait Observer {
    /// Called after every update. `Break` stops the run after this update.
    fn on_update(&mut self, _record: &UpdateRecord, _params: &PolicyParams) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    /// Called after each completed stage, with the state to resume from.
    fn on_stage_end(
        &mut self,
        _summary: &StageSummary,
        _state: &CurriculumState,
    ) -> std::result::Result<(), String> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct NoObserver;
impl Observer for NoObserver {}

/// Runs the stages from `state.next_stage` onwards. Parameters carry across
/// stage boundaries; randomness is keyed by stage name and in-stage update
/// index, so resuming from a stage boundary reproduces an uninterrupted run.
pub fn run_prepared(
    root_seed: u64,
    stages: &[PreparedStage],
    state: CurriculumState,
    settings: &TrainSettings,
    observer: &mut dyn Observer,
) -> Result<(CurriculumState, TrainLog)> {
    settings.grpo.validate()?;
    if settings.pairs_per_update == 0 {
        return Err(CurriculumError::InvalidSchedule(
            "pairs_per_update must be positive".into(),
        ));
    }
    let mut state = state;
    let mut log = TrainLog::default();
    let mut reference = state.params.clone();
    for (si, stage) in stages.iter().enumerate().skip(state.next_stage) {
        if settings.refresh_reference {
            reference = state.params.clone();
        }
        let name_key = seed::hash_str(&stage.spec.name);
        let mut r_acc_sum = 0.0;
        let mut stopped = false;
        let mut done = 0;
        for u in 0..stage.spec.n_updates {
            let mut rng = seed::rng(seed::derive(root_seed, &[name_key, 2, u as u64]));
            let batch: Vec<TrainSample> = (0..settings.pairs_per_update)
                .map(|_| stage.train[rng.gen_range(0..stage.train.len())].clone())
                .collect();
            let (next, stats) = grpo::train_batch(
                &state.params,
                &reference,
                &batch,
                &settings.env,
                &settings.reward,
                &settings.grpo,
                seed::derive(root_seed, &[name_key, 3, u as u64]),
            )?;
            state.params = next;
            state.step += 1;
            done += 1;
            r_acc_sum += stats.mean_r_acc;
            let record = UpdateRecord {
                step: state.step,
                stage: stage.spec.name.clone(),
                mean_r_acc: stats.mean_r_acc,
                mean_f1: stats.mean_f1,
                mean_iou: stats.mean_iou,
                mean_kl: stats.mean_kl,
                loss: stats.loss,
            };
            let flow = observer.on_update(&record, &state.params);
            log.records.push(record);
            if flow.is_break() {
                stopped = true;
                break;
            }
        }
        if stopped {
            break;
        }
        state.next_stage = si + 1;
        let summary = StageSummary {
            stage: stage.spec.name.clone(),
            updates: done,
            mean_train_r_acc: if done > 0 {
                r_acc_sum / done as f64
            } else {
                0.0
            },
            eval: evaluate(&state.params, &stage.eval, &settings.env, &settings.reward),
        };
        observer
            .on_stage_end(&summary, &state)
            .map_err(CurriculumError::Observer)?;
        log.summaries.push(summary);
    }
    Ok((state, log))
}

/// Builds every stage's data and runs the whole schedule from `initial`.
pub fn run_curriculum(
    schedule: &Schedule,
    initial: PolicyParams,
    data: &DataConfig,
    settings: &TrainSettings,
    observer: &mut dyn Observer,
) -> Result<(PolicyParams, TrainLog)> {
    schedule.validate()?;
    settings.env.validate(schedule.n_max())?;
    let stages = prepare_stages(schedule, data, &settings.env)?;
    let state = CurriculumState {
        params: initial,
        step: 0,
        next_stage: 0,
    };
    let (state, log) = run_prepared(schedule.root_seed, &stages, state, settings, observer)?;
    Ok((state.params, log))
}
