use std::fs::{File, OpenOptions};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde_json::json;

use dig_core::curriculum::{
    prepare_stages, run_prepared, CurriculumState, Observer, PreparedStage, StageSummary,
    UpdateRecord,
};
use dig_core::grpo::{Checkpoint, GridEnv, PolicyParams};
use dig_core::seed;

use crate::config::{apply_grpo_flags, apply_reward_flags, RunConfig};
use crate::eval::load_checkpoint;
use crate::{io, CliError, Result, RunManifest, TrainArgs};

pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARIES_FILE: &str = "stage_summaries.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// `checkpoints/ckpt-<n>-<label>.txt`, where `n` counts completed stages.
pub fn checkpoint_rel(completed: usize, label: &str) -> String {
    format!("{CHECKPOINT_DIR}/ckpt-{completed}-{label}.txt")
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: PolicyParams,
    pub step: usize,
    pub summaries: Vec<StageSummary>,
    pub checkpoints: Vec<PathBuf>,
}

struct FileObserver<'a> {
    out: &'a Path,
    env: GridEnv,
    log: csv::Writer<File>,
    log_path: PathBuf,
    failure: Option<CliError>,
    checkpoints: Vec<PathBuf>,
}

impl FileObserver<'_> {
    fn write_row(&mut self, record: &UpdateRecord) -> Result<()> {
        let csv_err = |source| CliError::Csv {
            path: self.log_path.clone(),
            source,
        };
        self.log.serialize(record).map_err(csv_err)?;
        self.log.flush().map_err(|source| CliError::Io {
            path: self.log_path.clone(),
            source,
        })
    }

    fn checkpoint(&mut self, completed: usize, label: &str, state: &CurriculumState) -> Result<()> {
        let ckpt = Checkpoint {
            env: self.env,
            params: state.params.clone(),
            step: state.step,
            next_stage: state.next_stage,
        };
        let path = self.out.join(checkpoint_rel(completed, label));
        io::write_atomic(&path, ckpt.to_text().as_bytes())?;
        self.checkpoints.push(path);
        Ok(())
    }
}

impl Observer for FileObserver<'_> {
    fn on_update(&mut self, record: &UpdateRecord, _: &PolicyParams) -> ControlFlow<()> {
        match self.write_row(record) {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                self.failure = Some(e);
                ControlFlow::Break(())
            }
        }
    }

    fn on_stage_end(
        &mut self,
        summary: &StageSummary,
        state: &CurriculumState,
    ) -> std::result::Result<(), String> {
        let line = serde_json::to_string(summary).expect("serializable") + "\n";
        let path = self.out.join(SUMMARIES_FILE);
        let appended = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| std::io::Write::write_all(&mut f, line.as_bytes()));
        appended.map_err(|e| format!("{}: {e}", path.display()))?;
        self.checkpoint(state.next_stage, &summary.stage, state)
            .map_err(|e| e.to_string())?;
        println!(
            "{}: {} updates, train r_acc {:.4}, eval r_acc {:.4} (f1 {:.4}, iou {:.4}, n {})",
            summary.stage,
            summary.updates,
            summary.mean_train_r_acc,
            summary.eval.mean_r_acc,
            summary.eval.mean_f1,
            summary.eval.mean_iou,
            summary.eval.n
        );
        Ok(())
    }
}

/// Keeps the log rows and stage summaries that precede a resume point, so a
/// resumed run continues the same files without duplicates.
fn truncate_history(out: &Path, step: usize, completed: usize) -> Result<Vec<UpdateRecord>> {
    let log_path = out.join(LOG_FILE);
    let mut kept = Vec::new();
    if log_path.exists() {
        let mut r = csv::Reader::from_path(&log_path).map_err(|source| CliError::Csv {
            path: log_path.clone(),
            source,
        })?;
        for row in r.deserialize::<UpdateRecord>() {
            let row = row.map_err(|source| CliError::Csv {
                path: log_path.clone(),
                source,
            })?;
            if row.step <= step {
                kept.push(row);
            }
        }
    }
    let sum_path = out.join(SUMMARIES_FILE);
    if sum_path.exists() {
        let lines: Vec<String> = io::read_to_string(&sum_path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .take(completed)
            .map(|l| format!("{l}\n"))
            .collect();
        io::write(&sum_path, lines.concat().as_bytes())?;
    }
    Ok(kept)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport> {
    let mut cfg = RunConfig::load(&args.config)?;
    apply_reward_flags(&mut cfg.train.reward, &args.reward)?;
    apply_grpo_flags(&mut cfg.train, &args.grpo);
    cfg.validate()?;
    let out = args.out.as_path();
    io::create_dir_all(&out.join(CHECKPOINT_DIR))?;
    let schedule = cfg.schedule();
    let env = cfg.env();

    let resumed = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.env != env {
                return Err(CliError::ShapeMismatch(format!(
                    "checkpoint grid {:?} differs from configured {:?}",
                    ckpt.env, env
                )));
            }
            if ckpt.params.hidden != cfg.hidden {
                return Err(CliError::ShapeMismatch(format!(
                    "checkpoint hidden width {} differs from configured {}",
                    ckpt.params.hidden, cfg.hidden
                )));
            }
            if ckpt.next_stage > schedule.stages.len() {
                return Err(CliError::Usage(format!(
                    "checkpoint is past stage {} of a {}-stage schedule",
                    ckpt.next_stage,
                    schedule.stages.len()
                )));
            }
            Some(CurriculumState {
                params: ckpt.params,
                step: ckpt.step,
                next_stage: ckpt.next_stage,
            })
        }
        None => None,
    };

    let log_path = out.join(LOG_FILE);
    let kept = match &resumed {
        Some(s) => truncate_history(out, s.step, s.next_stage)?,
        None => {
            let sum_path = out.join(SUMMARIES_FILE);
            if sum_path.exists() {
                io::write(&sum_path, b"")?;
            }
            Vec::new()
        }
    };
    let log = csv::Writer::from_path(&log_path).map_err(|source| CliError::Csv {
        path: log_path.clone(),
        source,
    })?;
    let mut observer = FileObserver {
        out,
        env,
        log,
        log_path,
        failure: None,
        checkpoints: Vec::new(),
    };
    for row in &kept {
        observer.write_row(row)?;
    }

    let state = match resumed {
        Some(s) => s,
        None => {
            let params = PolicyParams::init(
                cfg.hidden,
                seed::derive(cfg.seed, &[seed::hash_str("policy-init")]),
            );
            let s = CurriculumState {
                params,
                step: 0,
                next_stage: 0,
            };
            observer.checkpoint(0, "init", &s)?;
            s
        }
    };

    // Stages already completed need no data.
    let todo = dig_core::curriculum::Schedule {
        stages: schedule.stages[state.next_stage..].to_vec(),
        root_seed: schedule.root_seed,
    };
    let mut stages: Vec<PreparedStage> = schedule.stages[..state.next_stage]
        .iter()
        .map(|s| PreparedStage {
            spec: s.clone(),
            train: Vec::new(),
            eval: Vec::new(),
        })
        .collect();
    stages.extend(prepare_stages(&todo, &cfg.data, &env)?);

    let (final_state, log) = run_prepared(
        schedule.root_seed,
        &stages,
        state,
        &cfg.train,
        &mut observer,
    )?;
    if let Some(e) = observer.failure.take() {
        return Err(e);
    }

    let mut manifest = RunManifest::new("train", Some(cfg.seed), json!({ "run": cfg }));
    manifest
        .inputs
        .extend(args.config.config.iter().map(|p| p.display().to_string()));
    manifest
        .inputs
        .extend(args.resume.iter().map(|p| p.display().to_string()));
    manifest.record_file(out, LOG_FILE)?;
    if out.join(SUMMARIES_FILE).exists() {
        manifest.record_file(out, SUMMARIES_FILE)?;
    }
    for path in &observer.checkpoints {
        let rel = path.strip_prefix(out).expect("checkpoints live under out");
        manifest.record_file(out, &rel.to_string_lossy())?;
    }
    manifest.write(out)?;

    Ok(TrainReport {
        params: final_state.params,
        step: final_state.step,
        summaries: log.summaries,
        checkpoints: observer.checkpoints,
    })
}
