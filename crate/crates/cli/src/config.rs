use std::path::Path;

use serde::{Deserialize, Serialize};

use dig_core::curriculum::{self, DataConfig, Schedule, StageSpec, TrainSettings};
use dig_core::grpo::GridEnv;
use dig_core::reward::RewardConfig;

use crate::{io, CliError, ConfigArgs, GrpoArgs, Result, RewardArgs};

pub const DEFAULT_N_MAX: usize = 4;
pub const DEFAULT_STAGE_UPDATES: usize = 500;
pub const DEFAULT_HIDDEN: usize = 32;

/// Everything that determines a run. Written back, fully resolved, into
/// each manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub stages: Vec<StageSpec>,
    pub data: DataConfig,
    pub train: TrainSettings,
    /// Hidden width of the policy network.
    pub hidden: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = curriculum::default_schedule(
            DEFAULT_N_MAX,
            [curriculum::DEFAULT_STAGE_PAIRS; 3],
            [DEFAULT_STAGE_UPDATES; 3],
            0,
        )
        .expect("default schedule is valid");
        Self {
            seed: 0,
            stages: schedule.stages,
            data: DataConfig::default(),
            train: TrainSettings::toy_preset(),
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl RunConfig {
    pub fn load(args: &ConfigArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text = io::read_to_string(path)?;
                serde_json::from_str(&text).map_err(|e| CliError::Malformed {
                    path: path.clone(),
                    message: e.to_string(),
                })?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            stages: self.stages.clone(),
            root_seed: self.seed,
        }
    }

    pub fn env(&self) -> GridEnv {
        self.train.env
    }

    /// Checks everything a command could trip over later.
    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| CliError::Usage(m);
        let schedule = self.schedule();
        schedule.validate()?;
        self.train
            .reward
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        self.train.grpo.validate()?;
        self.train.env.validate(schedule.n_max())?;
        if self.hidden == 0 {
            return Err(usage("hidden width must be positive".into()));
        }
        if self.train.pairs_per_update == 0 {
            return Err(usage("pairs_per_update must be positive".into()));
        }
        let d = self.data.dims;
        if (d.width as usize) < self.train.env.grid || (d.height as usize) < self.train.env.grid {
            return Err(usage(format!(
                "{}×{} images are smaller than the {}-cell grid",
                d.width, d.height, self.train.env.grid
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, to_pretty(self).as_bytes())
    }
}

pub fn to_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn apply_reward_flags(cfg: &mut RewardConfig, args: &RewardArgs) -> Result<()> {
    if let Some(v) = args.lambda1 {
        cfg.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        cfg.lambda2 = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.min_iou {
        cfg.match_min_iou = v;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))
}

pub fn apply_grpo_flags(settings: &mut TrainSettings, args: &GrpoArgs) {
    let g = &mut settings.grpo;
    if let Some(v) = args.group_size {
        g.group_size = v;
    }
    if let Some(v) = args.clip_eps {
        g.clip_eps = v;
    }
    if let Some(v) = args.beta {
        g.beta = v;
    }
    if let Some(v) = args.lr {
        g.lr = v;
    }
}
