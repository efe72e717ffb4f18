//! Differential grounding at desk scale.
//!
//! * [`scene`] generates base scenes and sampled edits.
//! * [`render`] rasterizes scenes and derives pixel-exact difference boxes.
//! * [`reward`] parses box answers and scores them against ground truth.
//! * [`grpo`] trains a grid-localization policy with group-relative policy
//!   optimization.
//! * [`curriculum`] builds staged datasets and runs the staged schedule.

pub mod curriculum;
pub mod grpo;
pub mod render;
pub mod reward;
pub mod scene;
pub mod seed;

pub use grpo::{Checkpoint, GridEnv, GrpoConfig, PolicyParams, Rollout};
pub use render::{Annotation, BBox, Camera, Dims, Image};
pub use reward::{MatchResult, RewardBreakdown, RewardConfig};
pub use scene::{ModKind, Modification, ObjectSpec, PairSpec, SceneConfig};
