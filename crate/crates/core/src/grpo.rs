//! Group Relative Policy Optimization on a grid-localization policy.
//!
//! The policy reads an image pair as a `C×C` grid of cells and emits a short
//! token sequence: each token either selects a not-yet-chosen cell (which
//! becomes a predicted box) or is `STOP`. Every sampled sequence is scored
//! with the box reward, rewards are normalized within their group, and the
//! clipped surrogate plus a KL penalty towards a reference policy is
//! minimized by plain gradient descent. Gradients are analytic.
//!
//! Network: each cell's features go through a shared `tanh` layer; a linear
//! head turns the hidden vector into the cell's logit. The STOP logit is a
//! linear head over the mean and max of the hidden vectors of the cells that
//! are still selectable, plus the fraction of the step budget already used.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{BBox, Dims, Image};
use crate::reward::{self, RewardConfig};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimMismatch(Dims, Dims),
    #[error("group advantages need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("loss is not finite; reduce the learning rate")]
    NonFiniteLoss,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint parse error on line {line}: {message}")]
    Checkpoint { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, GrpoError>;

pub const FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridEnv {
    pub grid: usize,
    pub max_steps: usize,
}

impl Default for GridEnv {
    fn default() -> Self {
        Self {
            grid: 8,
            max_steps: 6,
        }
    }
}

impl GridEnv {
    pub fn n_cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Action id of the STOP token.
    pub fn stop(&self) -> usize {
        self.n_cells()
    }

    pub fn validate(&self, n_max: usize) -> Result<()> {
        if self.grid < 2 {
            return Err(GrpoError::InvalidConfig("grid must be at least 2".into()));
        }
        if self.max_steps < n_max + 1 {
            return Err(GrpoError::InvalidConfig(format!(
                "max_steps {} leaves no room for STOP after {n_max} boxes",
                self.max_steps
            )));
        }
        Ok(())
    }

    fn cell_size(&self, dims: Dims) -> (u32, u32) {
        let c = self.grid as u32;
        (dims.width.div_ceil(c), dims.height.div_ceil(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub beta: f64,
    pub lr: f64,
    pub std_floor: f64,
    pub updates_per_batch: usize,
    /// Use the exact per-state KL over the selectable actions instead of the
    /// sampled-token `k3` estimator.
    pub exact_kl: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            beta: 0.01,
            lr: 1e-2,
            std_floor: 1e-6,
            updates_per_batch: 1,
            exact_kl: false,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return bad("beta must be non-negative");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.updates_per_batch == 0 {
            return bad("updates_per_batch must be positive");
        }
        Ok(())
    }
}

/// Row-per-cell feature matrix: `[diff, column, row, count hint]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFeatures {
    pub grid: usize,
    pub data: Vec<f64>,
}

impl CellFeatures {
    pub fn n_cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn row(&self, cell: usize) -> &[f64] {
        &self.data[cell * FEATURES..(cell + 1) * FEATURES]
    }
}

/// Encodes a count hint as a feature value; 0 means "not given".
pub fn hint_feature(count_hint: usize, env: &GridEnv) -> f64 {
    count_hint as f64 / env.max_steps as f64
}

/// Per-cell mean absolute RGB difference, normalized cell coordinates, and
/// the broadcast count hint. The difference column is divided by its largest
/// value, so the most-changed cell reads 1 whatever the colors involved. Images whose size is not a
/// multiple of the grid are padded by edge replication.
pub fn featurize(a: &Image, b: &Image, count_hint: usize, env: &GridEnv) -> Result<CellFeatures> {
    if a.dims() != b.dims() {
        return Err(GrpoError::DimMismatch(a.dims(), b.dims()));
    }
    let dims = a.dims();
    let (cw, ch) = env.cell_size(dims);
    let c = env.grid;
    let mut diff = vec![0.0; c * c];
    for (cell, d) in diff.iter_mut().enumerate() {
        let (col, row) = ((cell % c) as u32, (cell / c) as u32);
        let mut total = 0u64;
        for py in row * ch..(row + 1) * ch {
            for px in col * cw..(col + 1) * cw {
                let (x, y) = (px.min(dims.width - 1), py.min(dims.height - 1));
                let (p, q) = (a.pixel(x, y), b.pixel(x, y));
                total += p
                    .iter()
                    .zip(&q)
                    .map(|(u, v)| u.abs_diff(*v) as u64)
                    .sum::<u64>();
            }
        }
        *d = total as f64 / (3.0 * 255.0 * (cw * ch) as f64);
    }
    let peak = diff.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        diff.iter_mut().for_each(|d| *d /= peak);
    }
    let span = (c - 1) as f64;
    let hint = hint_feature(count_hint, env);
    let data = diff
        .iter()
        .enumerate()
        .flat_map(|(cell, &d)| [d, (cell % c) as f64 / span, (cell / c) as f64 / span, hint])
        .collect();
    Ok(CellFeatures { grid: c, data })
}

/// Flat parameter vector of the policy network.
///
/// Layout: `w1[H×F] b1[H] w2[H] b2 ws[2H+1] bs`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub hidden: usize,
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn len_for(hidden: usize) -> usize {
        hidden * FEATURES + hidden + hidden + 1 + 2 * hidden + 1 + 1
    }

    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden,
            values: vec![0.0; Self::len_for(hidden)],
        }
    }

    /// Random first layer (Xavier-normal), zero output heads. The untrained
    /// policy is therefore uniform over the selectable actions.
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(hidden);
        let mut rng = seed::rng(seed);
        let std = (2.0 / (FEATURES + hidden) as f64).sqrt();
        for w in p.w1_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = z * std;
        }
        p
    }

    /// Random values everywhere, for tests and gradient checks.
    pub fn random(hidden: usize, seed: u64, scale: f64) -> Self {
        let mut p = Self::zeros(hidden);
        let mut rng = seed::rng(seed);
        for v in &mut p.values {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * scale;
        }
        p
    }

    fn offsets(&self) -> [usize; 6] {
        let h = self.hidden;
        let w1 = 0;
        let b1 = w1 + h * FEATURES;
        let w2 = b1 + h;
        let b2 = w2 + h;
        let ws = b2 + 1;
        let bs = ws + 2 * h + 1;
        [w1, b1, w2, b2, ws, bs]
    }

    pub fn w1(&self) -> &[f64] {
        let o = self.offsets();
        &self.values[o[0]..o[1]]
    }
    fn w1_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.values[o[0]..o[1]]
    }
    pub fn b1(&self) -> &[f64] {
        let o = self.offsets();
        &self.values[o[1]..o[2]]
    }
    pub fn w2(&self) -> &[f64] {
        let o = self.offsets();
        &self.values[o[2]..o[3]]
    }
    pub fn b2(&self) -> f64 {
        self.values[self.offsets()[3]]
    }
    pub fn ws(&self) -> &[f64] {
        let o = self.offsets();
        &self.values[o[4]..o[5]]
    }
    pub fn bs(&self) -> f64 {
        self.values[self.offsets()[5]]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_shape(&self, other: &PolicyParams) -> Result<()> {
        if self.hidden != other.hidden || self.values.len() != other.values.len() {
            return Err(GrpoError::ShapeMismatch(format!(
                "hidden {} ({} values) vs hidden {} ({} values)",
                self.hidden,
                self.values.len(),
                other.hidden,
                other.values.len()
            )));
        }
        Ok(())
    }
}

/// Per-pair network activations; independent of the decoding history.
struct Forward<'a> {
    params: &'a PolicyParams,
    hidden: Vec<f64>,
    cell_logits: Vec<f64>,
    n: usize,
}

/// Distribution at one decoding step.
struct StepState {
    stop_input: Vec<f64>,
    max_idx: Vec<usize>,
    stop_logit: f64,
    log_norm: f64,
}

/// Incrementally maintained set of selectable cells.
struct Remaining {
    open: Vec<bool>,
    count: usize,
    sum: Vec<f64>,
}

impl<'a> Forward<'a> {
    fn new(params: &'a PolicyParams, features: &CellFeatures) -> Self {
        let h = params.hidden;
        let n = features.n_cells();
        let (w1, b1, w2, b2) = (params.w1(), params.b1(), params.w2(), params.b2());
        let mut hidden = vec![0.0; n * h];
        let mut cell_logits = vec![0.0; n];
        for c in 0..n {
            let f = features.row(c);
            let hc = &mut hidden[c * h..(c + 1) * h];
            for j in 0..h {
                let w = &w1[j * FEATURES..(j + 1) * FEATURES];
                let u: f64 = b1[j] + w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
                hc[j] = u.tanh();
            }
            cell_logits[c] = b2 + w2.iter().zip(hc.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        Self {
            params,
            hidden,
            cell_logits,
            n,
        }
    }

    fn h(&self, c: usize) -> &[f64] {
        let h = self.params.hidden;
        &self.hidden[c * h..(c + 1) * h]
    }

    fn start(&self) -> Remaining {
        let h = self.params.hidden;
        let mut sum = vec![0.0; h];
        for c in 0..self.n {
            for (s, v) in sum.iter_mut().zip(self.h(c)) {
                *s += v;
            }
        }
        Remaining {
            open: vec![true; self.n],
            count: self.n,
            sum,
        }
    }

    fn take(&self, rem: &mut Remaining, cell: usize) {
        debug_assert!(rem.open[cell]);
        rem.open[cell] = false;
        rem.count -= 1;
        for (s, v) in rem.sum.iter_mut().zip(self.h(cell)) {
            *s -= v;
        }
    }

    fn state(&self, rem: &Remaining, t: usize, max_steps: usize) -> StepState {
        let h = self.params.hidden;
        let mut stop_input = vec![0.0; 2 * h + 1];
        let mut max_idx = vec![usize::MAX; h];
        if rem.count > 0 {
            // Recompute from scratch: the running sum drifts after many removals.
            let mut mean = vec![0.0; h];
            let mut max = vec![f64::NEG_INFINITY; h];
            for c in (0..self.n).filter(|&c| rem.open[c]) {
                for (j, &v) in self.h(c).iter().enumerate() {
                    mean[j] += v;
                    if v > max[j] {
                        max[j] = v;
                        max_idx[j] = c;
                    }
                }
            }
            for j in 0..h {
                stop_input[j] = mean[j] / rem.count as f64;
                stop_input[h + j] = max[j];
            }
        }
        stop_input[2 * h] = t as f64 / max_steps as f64;
        let stop_logit = self.params.bs()
            + self
                .params
                .ws()
                .iter()
                .zip(&stop_input)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        let mut top = stop_logit;
        for c in (0..self.n).filter(|&c| rem.open[c]) {
            top = top.max(self.cell_logits[c]);
        }
        let mut z = (stop_logit - top).exp();
        for c in (0..self.n).filter(|&c| rem.open[c]) {
            z += (self.cell_logits[c] - top).exp();
        }
        StepState {
            stop_input,
            max_idx,
            stop_logit,
            log_norm: top + z.ln(),
        }
    }

    fn logit(&self, st: &StepState, action: usize) -> f64 {
        if action == self.n {
            st.stop_logit
        } else {
            self.cell_logits[action]
        }
    }

    fn logprob(&self, st: &StepState, action: usize) -> f64 {
        self.logit(st, action) - st.log_norm
    }

    /// Selectable actions at this step, STOP last.
    fn actions<'r>(&self, rem: &'r Remaining) -> impl Iterator<Item = usize> + 'r {
        let n = self.n;
        (0..n)
            .filter(move |&c| rem.open[c])
            .chain(std::iter::once(n))
    }

    /// Replays `actions`, calling `f(t, state, remaining)` before each token.
    fn walk(
        &self,
        actions: &[usize],
        max_steps: usize,
        mut f: impl FnMut(usize, &StepState, &Remaining),
    ) {
        let mut rem = self.start();
        for (t, &a) in actions.iter().enumerate() {
            let st = self.state(&rem, t, max_steps);
            f(t, &st, &rem);
            if a != self.n {
                self.take(&mut rem, a);
            }
        }
    }
}

/// One sampled token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub actions: Vec<usize>,
    pub old_logprobs: Vec<f64>,
    pub reward: f64,
    pub group_id: usize,
}

/// Samples a sequence autoregressively; chosen cells are masked and decoding
/// ends at STOP or after `max_steps` tokens. Records log-probabilities under
/// `params`; the reward is left at zero.
pub fn sample_rollout(
    params: &PolicyParams,
    features: &CellFeatures,
    env: &GridEnv,
    rng_seed: u64,
) -> Rollout {
    let mut rng = seed::rng(rng_seed);
    decode(params, features, env, |fwd, st, rem| {
        categorical(
            rng.gen(),
            fwd.actions(rem).map(|a| (a, fwd.logprob(st, a).exp())),
        )
    })
}

/// Inverse-CDF draw from `(action, probability)` pairs given `u ∈ [0, 1)`.
/// Rounding slack at the top end falls to the last action.
pub fn categorical(u: f64, probs: impl Iterator<Item = (usize, f64)>) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (a, p) in probs {
        acc += p;
        last = a;
        if u < acc {
            return a;
        }
    }
    last
}

/// Deterministic decoding: the most probable action at every step (lowest
/// action id on ties).
pub fn greedy_rollout(params: &PolicyParams, features: &CellFeatures, env: &GridEnv) -> Rollout {
    decode(params, features, env, |fwd, st, rem| {
        let mut best = (f64::NEG_INFINITY, fwd.n);
        for a in fwd.actions(rem) {
            let l = fwd.logit(st, a);
            if l > best.0 {
                best = (l, a);
            }
        }
        best.1
    })
}

fn decode(
    params: &PolicyParams,
    features: &CellFeatures,
    env: &GridEnv,
    mut choose: impl FnMut(&Forward, &StepState, &Remaining) -> usize,
) -> Rollout {
    let fwd = Forward::new(params, features);
    let mut rem = fwd.start();
    let mut actions = Vec::new();
    let mut old_logprobs = Vec::new();
    for t in 0..env.max_steps {
        let st = fwd.state(&rem, t, env.max_steps);
        let a = choose(&fwd, &st, &rem);
        actions.push(a);
        old_logprobs.push(fwd.logprob(&st, a));
        if a == fwd.n {
            break;
        }
        fwd.take(&mut rem, a);
    }
    Rollout {
        actions,
        old_logprobs,
        reward: 0.0,
        group_id: 0,
    }
}

/// Per-token log-probabilities of a fixed action sequence.
pub fn sequence_logprobs(
    params: &PolicyParams,
    features: &CellFeatures,
    env: &GridEnv,
    actions: &[usize],
) -> Vec<f64> {
    let fwd = Forward::new(params, features);
    let mut out = Vec::with_capacity(actions.len());
    fwd.walk(actions, env.max_steps, |t, st, _| {
        out.push(fwd.logprob(st, actions[t]))
    });
    out
}

/// Full per-step distributions along a fixed action sequence, as
/// `(action, probability)` lists with STOP last.
pub fn step_distributions(
    params: &PolicyParams,
    features: &CellFeatures,
    env: &GridEnv,
    actions: &[usize],
) -> Vec<Vec<(usize, f64)>> {
    let fwd = Forward::new(params, features);
    let mut out = Vec::new();
    fwd.walk(actions, env.max_steps, |_, st, rem| {
        out.push(
            fwd.actions(rem)
                .map(|a| (a, fwd.logprob(st, a).exp()))
                .collect(),
        )
    });
    out
}

/// Each non-STOP action becomes its cell's pixel rectangle, in order.
pub fn actions_to_boxes(actions: &[usize], env: &GridEnv, dims: Dims) -> Vec<BBox> {
    let (cw, ch) = env.cell_size(dims);
    actions
        .iter()
        .filter(|&&a| a < env.n_cells())
        .filter_map(|&a| {
            let (col, row) = ((a % env.grid) as u32, (a / env.grid) as u32);
            BBox::new(
                (col * cw) as f64,
                (row * ch) as f64,
                ((col + 1) * cw).min(dims.width) as f64,
                ((row + 1) * ch).min(dims.height) as f64,
            )
        })
        .collect()
}

/// `(r − mean) / max(std, floor)` with the population standard deviation.
/// The floor only matters for (near-)constant groups, whose advantages are
/// then (near) zero; otherwise the output has unit standard deviation.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(std_floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// One group of rollouts sampled for the same input.
#[derive(Debug, Clone)]
pub struct Group<'a> {
    pub features: &'a CellFeatures,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: PolicyParams,
    /// Mean KL penalty (before β), weighted like the loss.
    pub kl: f64,
    /// Mean clipped surrogate, weighted like the loss.
    pub surrogate: f64,
}

/// Accumulates `dL/dz` for one step into parameter and hidden gradients.
struct Backprop<'a, 'f> {
    fwd: &'f Forward<'a>,
    grad: &'f mut [f64],
    dh: Vec<f64>,
    offsets: [usize; 6],
}

impl Backprop<'_, '_> {
    fn step(&mut self, st: &StepState, rem: &Remaining, dz: impl Fn(usize) -> f64) {
        let h = self.fwd.params.hidden;
        let [_, _, ow2, ob2, ows, obs] = self.offsets;
        let w2 = self.fwd.params.w2();
        let ws = self.fwd.params.ws();
        for c in (0..self.fwd.n).filter(|&c| rem.open[c]) {
            let g = dz(c);
            if g == 0.0 {
                continue;
            }
            let hc = self.fwd.h(c);
            for j in 0..h {
                self.grad[ow2 + j] += g * hc[j];
                self.dh[c * h + j] += g * w2[j];
            }
            self.grad[ob2] += g;
        }
        let g = dz(self.fwd.n);
        if g != 0.0 {
            for (k, s) in st.stop_input.iter().enumerate() {
                self.grad[ows + k] += g * s;
            }
            self.grad[obs] += g;
            if rem.count > 0 {
                let inv = 1.0 / rem.count as f64;
                for c in (0..self.fwd.n).filter(|&c| rem.open[c]) {
                    for (d, w) in self.dh[c * h..(c + 1) * h].iter_mut().zip(&ws[..h]) {
                        *d += g * w * inv;
                    }
                }
                for (j, (&idx, w)) in st.max_idx.iter().zip(&ws[h..2 * h]).enumerate() {
                    self.dh[idx * h + j] += g * w;
                }
            }
        }
    }

    /// Pushes the accumulated hidden gradients through the first layer.
    fn finish(self, features: &CellFeatures) {
        let h = self.fwd.params.hidden;
        let [ow1, ob1, ..] = self.offsets;
        for c in 0..self.fwd.n {
            let f = features.row(c);
            let hc = self.fwd.h(c);
            for (j, hj) in hc.iter().enumerate().take(h) {
                let du = self.dh[c * h + j] * (1.0 - hj * hj);
                if du == 0.0 {
                    continue;
                }
                for (k, fk) in f.iter().enumerate() {
                    self.grad[ow1 + j * FEATURES + k] += du * fk;
                }
                self.grad[ob1 + j] += du;
            }
        }
    }
}

/// Clipped-surrogate loss with KL penalty, averaged per token within each
/// sequence, per sequence within each group, and over groups; plus its exact
/// gradient with respect to `params`.
pub fn grpo_loss_and_grad(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    groups: &[Group],
    cfg: &GrpoConfig,
    env: &GridEnv,
) -> Result<LossOutput> {
    params.check_shape(ref_params)?;
    let mut grad = PolicyParams::zeros(params.hidden);
    let offsets = params.offsets();
    let (mut loss, mut kl_total, mut surr_total) = (0.0, 0.0, 0.0);
    let n_groups = groups.len().max(1) as f64;
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);

    for group in groups {
        let fwd = Forward::new(params, group.features);
        let ref_fwd = Forward::new(ref_params, group.features);
        let g_count = group.rollouts.len().max(1) as f64;
        let mut bp = Backprop {
            fwd: &fwd,
            grad: &mut grad.values,
            dh: vec![0.0; fwd.n * params.hidden],
            offsets,
        };
        for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
            let len = rollout.actions.len();
            if len == 0 {
                continue;
            }
            let w = 1.0 / (n_groups * g_count * len as f64);
            // Reference log-probabilities along the same trajectory.
            let mut ref_steps: Vec<Vec<(usize, f64)>> = Vec::with_capacity(len);
            ref_fwd.walk(&rollout.actions, env.max_steps, |_, st, rem| {
                ref_steps.push(
                    ref_fwd
                        .actions(rem)
                        .map(|a| (a, ref_fwd.logprob(st, a)))
                        .collect(),
                );
            });
            let mut err = None;
            fwd.walk(&rollout.actions, env.max_steps, |t, st, rem| {
                let a = rollout.actions[t];
                let logp = fwd.logprob(st, a);
                let ratio = (logp - rollout.old_logprobs[t]).exp();
                let unclipped = ratio * adv;
                let clipped = ratio.clamp(lo, hi) * adv;
                let surrogate = unclipped.min(clipped);
                // dLoss/dlogπ(a_t) from the surrogate; the clipped branch is flat.
                let mut coeff = if unclipped <= clipped {
                    -w * adv * ratio
                } else {
                    0.0
                };

                let ref_lp = &ref_steps[t];
                let (kl, kl_logit_grad) = if cfg.exact_kl {
                    let probs: Vec<(usize, f64, f64)> = ref_lp
                        .iter()
                        .map(|&(b, lr)| {
                            let lp = fwd.logprob(st, b);
                            (b, lp, lr)
                        })
                        .collect();
                    let kl: f64 = probs.iter().map(|&(_, lp, lr)| lp.exp() * (lp - lr)).sum();
                    (kl, Some((probs, kl)))
                } else {
                    let lr = ref_lp.iter().find(|(b, _)| *b == a).unwrap().1;
                    let delta = lr - logp;
                    coeff += cfg.beta * w * (1.0 - delta.exp());
                    (delta.exp() - delta - 1.0, None)
                };
                if !(surrogate.is_finite() && kl.is_finite()) {
                    err = Some(GrpoError::NonFiniteLoss);
                }
                loss += w * (-surrogate + cfg.beta * kl);
                surr_total += w * surrogate;
                kl_total += w * kl;

                // dlogπ(a)/dz_b = [b = a] − π(b)
                let p_of = |b: usize| fwd.logprob(st, b).exp();
                bp.step(st, rem, |b| {
                    let mut g = coeff * ((b == a) as u8 as f64 - p_of(b));
                    if let Some((probs, kl)) = &kl_logit_grad {
                        if let Some(&(_, lp, lr)) = probs.iter().find(|(x, _, _)| *x == b) {
                            g += cfg.beta * w * lp.exp() * ((lp - lr) - kl);
                        }
                    }
                    g
                });
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        bp.finish(group.features);
    }
    if !loss.is_finite() || !grad.is_finite() {
        return Err(GrpoError::NonFiniteLoss);
    }
    Ok(LossOutput {
        loss,
        grad,
        kl: kl_total,
        surrogate: surr_total,
    })
}

/// `params − lr · grad`.
pub fn update_step(params: &PolicyParams, grad: &PolicyParams, lr: f64) -> PolicyParams {
    PolicyParams {
        hidden: params.hidden,
        values: params
            .values
            .iter()
            .zip(&grad.values)
            .map(|(p, g)| p - lr * g)
            .collect(),
    }
}

/// A training input: features of one image pair plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub pair_id: String,
    pub features: CellFeatures,
    pub gt_boxes: Vec<BBox>,
    pub dims: Dims,
    pub k: usize,
    pub count_hint: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean_reward: f64,
    pub mean_r_acc: f64,
    pub mean_f1: f64,
    pub mean_iou: f64,
    pub mean_kl: f64,
    pub loss: f64,
    pub mean_len: f64,
}

/// Samples a group per input, scores it, and applies `updates_per_batch`
/// descent steps on the resulting loss.
pub fn train_batch(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    batch: &[TrainSample],
    env: &GridEnv,
    reward_cfg: &RewardConfig,
    cfg: &GrpoConfig,
    rng_seed: u64,
) -> Result<(PolicyParams, BatchStats)> {
    if batch.is_empty() {
        return Err(GrpoError::InvalidConfig("empty batch".into()));
    }
    let sampled: Vec<(Vec<Rollout>, Vec<reward::RewardBreakdown>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            (0..cfg.group_size)
                .map(|g| {
                    let mut r = sample_rollout(
                        params,
                        &sample.features,
                        env,
                        seed::derive(rng_seed, &[i as u64, g as u64]),
                    );
                    let boxes = actions_to_boxes(&r.actions, env, sample.dims);
                    let score = reward::score_boxes(Some(&boxes), &sample.gt_boxes, reward_cfg);
                    r.reward = score.r_total;
                    r.group_id = i;
                    (r, score)
                })
                .unzip()
        })
        .collect();

    let mut groups = Vec::with_capacity(batch.len());
    let mut stats = BatchStats::default();
    let mut n = 0.0;
    for (sample, (rollouts, scores)) in batch.iter().zip(sampled) {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        for (r, s) in rollouts.iter().zip(&scores) {
            stats.mean_reward += r.reward;
            stats.mean_r_acc += s.r_acc;
            stats.mean_f1 += s.f1;
            stats.mean_iou += s.mean_iou;
            stats.mean_len += r.actions.len() as f64;
            n += 1.0;
        }
        groups.push(Group {
            features: &sample.features,
            advantages: group_advantages(&rewards, cfg.std_floor)?,
            rollouts,
        });
    }
    stats.mean_reward /= n;
    stats.mean_r_acc /= n;
    stats.mean_f1 /= n;
    stats.mean_iou /= n;
    stats.mean_len /= n;

    let mut current = params.clone();
    for u in 0..cfg.updates_per_batch {
        let out = grpo_loss_and_grad(&current, ref_params, &groups, cfg, env)?;
        if u == 0 {
            stats.loss = out.loss;
            stats.mean_kl = out.kl;
        }
        current = update_step(&current, &out.grad, cfg.lr);
    }
    if !current.is_finite() {
        return Err(GrpoError::NonFiniteLoss);
    }
    Ok((current, stats))
}

/// Serialized policy state with enough metadata to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub env: GridEnv,
    pub params: PolicyParams,
    /// Updates completed so far.
    pub step: usize,
    /// Index of the next curriculum stage to run.
    pub next_stage: usize,
}

const CHECKPOINT_MAGIC: &str = "dig-policy-checkpoint v1";

impl Checkpoint {
    /// Text dump: a `key value` header, then one parameter per line as the
    /// hexadecimal bit pattern of the `f64` (bit-exact round trip).
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{CHECKPOINT_MAGIC}\nfeatures {FEATURES}\nhidden {}\ngrid {}\nmax_steps {}\nstep {}\nnext_stage {}\nvalues {}\n",
            self.params.hidden,
            self.env.grid,
            self.env.max_steps,
            self.step,
            self.next_stage,
            self.params.values.len()
        );
        for v in &self.params.values {
            s.push_str(&format!("{:016x}\n", v.to_bits()));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let err = |line: usize, message: String| GrpoError::Checkpoint {
            line: line + 1,
            message,
        };
        match lines.next() {
            Some((_, l)) if l == CHECKPOINT_MAGIC => {}
            _ => return Err(err(0, "missing checkpoint header".into())),
        }
        let mut header = |key: &str| -> Result<usize> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| err(usize::MAX - 1, format!("missing `{key}`")))?;
            let value = line
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| err(i, format!("expected `{key}`")))?;
            value
                .parse()
                .map_err(|e| err(i, format!("bad `{key}`: {e}")))
        };
        let features = header("features")?;
        let hidden = header("hidden")?;
        let grid = header("grid")?;
        let max_steps = header("max_steps")?;
        let step = header("step")?;
        let next_stage = header("next_stage")?;
        let count = header("values")?;
        if features != FEATURES {
            return Err(GrpoError::ShapeMismatch(format!(
                "checkpoint has {features} features, expected {FEATURES}"
            )));
        }
        if count != PolicyParams::len_for(hidden) {
            return Err(GrpoError::ShapeMismatch(format!(
                "{count} values do not fit hidden width {hidden}"
            )));
        }
        let values = lines
            .by_ref()
            .take(count)
            .map(|(i, l)| {
                u64::from_str_radix(l.trim(), 16)
                    .map(f64::from_bits)
                    .map_err(|e| err(i, e.to_string()))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != count {
            return Err(err(usize::MAX - 1, "truncated parameter list".into()));
        }
        Ok(Self {
            env: GridEnv { grid, max_steps },
            params: PolicyParams { hidden, values },
            step,
            next_stage,
        })
    }
}
