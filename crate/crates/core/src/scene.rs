//! Procedural scene configurations and paired edits.
//!
//! A [`SceneConfig`] is a declarative list of objects on a ground plane. A
//! [`PairSpec`] couples a base scene with an edited copy and the exact list of
//! [`Modification`]s that turns one into the other.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("could not place object {object} after {attempts} attempts (scene too dense)")]
    PlacementExhausted { object: usize, attempts: usize },
    #[error("cannot apply {k} distinct edits: capacity is {capacity}")]
    InfeasibleEditBudget { k: usize, capacity: usize },
    #[error("modification targets unknown object id {0}")]
    UnknownTarget(u32),
    #[error("objects {0} and {1} are closer than the minimum separation")]
    SeparationViolated(u32, u32),
    #[error("invalid modification: {0}")]
    InvalidModification(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, SceneError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Cube,
    Sphere,
    Cylinder,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Sphere, Shape::Cylinder];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Gray,
    Red,
    Blue,
    Green,
    Brown,
    Purple,
    Cyan,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Gray,
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Brown,
        Color::Purple,
        Color::Cyan,
        Color::Yellow,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Gray => [87, 87, 87],
            Color::Red => [173, 35, 35],
            Color::Blue => [42, 75, 215],
            Color::Green => [29, 105, 20],
            Color::Brown => [129, 74, 25],
            Color::Purple => [129, 38, 192],
            Color::Cyan => [41, 208, 208],
            Color::Yellow => [255, 238, 51],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Medium,
    Large,
}

impl Size {
    pub const ALL: [Size; 3] = [Size::Small, Size::Medium, Size::Large];

    /// Radius in world units.
    pub fn radius(self) -> f64 {
        match self {
            Size::Small => 0.35,
            Size::Medium => 0.55,
            Size::Large => 0.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Material {
    Matte,
    Metal,
}

impl Material {
    pub const ALL: [Material; 2] = [Material::Matte, Material::Metal];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: u32,
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub material: Material,
    /// Ground-plane position `(x, y)`; larger `y` is farther from the camera.
    pub position: [f64; 2],
}

impl ObjectSpec {
    pub fn radius(&self) -> f64 {
        self.size.radius()
    }

    /// Attributes (excluding id and position) that differ between two objects.
    fn differing_attributes(&self, other: &ObjectSpec) -> usize {
        (self.shape != other.shape) as usize
            + (self.color != other.color) as usize
            + (self.size != other.size) as usize
            + (self.material != other.material) as usize
    }
}

pub const DEFAULT_WORLD_HALF_EXTENT: f64 = 3.0;
pub const MIN_SEPARATION_FACTOR: f64 = 0.9;
pub const PLACEMENT_ATTEMPTS: usize = 10_000;
pub const MAX_OBJECTS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub world_half_extent: f64,
    pub objects: Vec<ObjectSpec>,
}

impl SceneConfig {
    pub fn object(&self, id: u32) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Checks bounds and pairwise separation of every object.
    pub fn validate(&self) -> Result<()> {
        let w = self.world_half_extent;
        let mut ids = HashSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(SceneError::InvalidModification(format!(
                    "duplicate object id {}",
                    o.id
                )));
            }
            if o.position.iter().any(|c| !c.is_finite() || c.abs() > w) {
                return Err(SceneError::InvalidParameter(format!(
                    "object {} lies outside the world bounds",
                    o.id
                )));
            }
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                if !separated(a.position, a.radius(), b.position, b.radius()) {
                    return Err(SceneError::SeparationViolated(a.id, b.id));
                }
            }
        }
        Ok(())
    }
}

/// Minimum-separation predicate between two discs on the ground plane.
pub fn separated(p: [f64; 2], r: f64, q: [f64; 2], s: f64) -> bool {
    let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    d >= MIN_SEPARATION_FACTOR * (r + s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModKind {
    ShapeChange,
    ColorChange,
    SizeChange,
    MaterialChange,
    Add,
    Remove,
}

impl ModKind {
    pub const ALL: [ModKind; 6] = [
        ModKind::ShapeChange,
        ModKind::ColorChange,
        ModKind::SizeChange,
        ModKind::MaterialChange,
        ModKind::Add,
        ModKind::Remove,
    ];

    pub fn is_attribute_change(self) -> bool {
        !matches!(self, ModKind::Add | ModKind::Remove)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modification {
    pub kind: ModKind,
    pub target_id: Option<u32>,
    pub before: Option<ObjectSpec>,
    pub after: Option<ObjectSpec>,
}

impl Modification {
    /// Structural checks that do not need a scene.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(SceneError::InvalidModification(format!(
                "{:?}: {msg}",
                self.kind
            )))
        };
        match self.kind {
            ModKind::Add => {
                if self.target_id.is_some() || self.before.is_some() || self.after.is_none() {
                    return bad("needs `after` only");
                }
            }
            ModKind::Remove => {
                let (Some(t), Some(before)) = (self.target_id, &self.before) else {
                    return bad("needs `target_id` and `before`");
                };
                if self.after.is_some() || before.id != t {
                    return bad("needs `before` only, matching the target");
                }
            }
            kind => {
                let (Some(t), Some(before), Some(after)) =
                    (self.target_id, &self.before, &self.after)
                else {
                    return bad("needs `target_id`, `before` and `after`");
                };
                if before.id != t || after.id != t || before.position != after.position {
                    return bad("snapshots must describe the target in place");
                }
                if before.differing_attributes(after) != 1 {
                    return bad("exactly one attribute must change");
                }
                let changed = match kind {
                    ModKind::ShapeChange => before.shape != after.shape,
                    ModKind::ColorChange => before.color != after.color,
                    ModKind::SizeChange => before.size != after.size,
                    ModKind::MaterialChange => before.material != after.material,
                    ModKind::Add | ModKind::Remove => unreachable!(),
                };
                if !changed {
                    return bad("the changed attribute does not match the kind");
                }
            }
        }
        Ok(())
    }

    /// Id of the object this edit touches (the new object's id for `Add`).
    pub fn object_id(&self) -> u32 {
        self.target_id
            .or_else(|| self.after.as_ref().map(|o| o.id))
            .expect("validated modification has an object")
    }

    /// The edit that undoes this one.
    pub fn inverse(&self) -> Modification {
        let kind = match self.kind {
            ModKind::Add => ModKind::Remove,
            ModKind::Remove => ModKind::Add,
            k => k,
        };
        let target_id = match kind {
            ModKind::Add => None,
            _ => Some(self.object_id()),
        };
        Modification {
            kind,
            target_id,
            before: self.after.clone(),
            after: self.before.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub pair_id: String,
    pub base: SceneConfig,
    pub edited: SceneConfig,
    pub mods: Vec<Modification>,
    pub k: usize,
    pub n_max: usize,
}

impl PairSpec {
    /// Verifies count bounds, distinct targets and that replaying `mods` on
    /// `base` reproduces `edited`.
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k > self.n_max || self.mods.len() != self.k {
            return Err(SceneError::InvalidParameter(format!(
                "k={} with {} mods and n_max={}",
                self.k,
                self.mods.len(),
                self.n_max
            )));
        }
        let mut seen = HashSet::new();
        for m in &self.mods {
            if m.kind != ModKind::Add && !seen.insert(m.object_id()) {
                return Err(SceneError::InvalidModification(format!(
                    "object {} edited twice",
                    m.object_id()
                )));
            }
        }
        let replayed = apply_modifications(&self.base, &self.mods)?;
        if replayed != self.edited {
            return Err(SceneError::InvalidModification(
                "edited scene does not match replayed modifications".into(),
            ));
        }
        Ok(())
    }
}

/// Knobs for base-scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub min_objects: usize,
    pub max_objects: usize,
    pub world_half_extent: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_objects: 3,
            max_objects: 8,
            world_half_extent: DEFAULT_WORLD_HALF_EXTENT,
        }
    }
}

/// Knobs for edit sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditParams {
    pub allow_add: bool,
    /// Upper bound on objects in the edited scene; caps the number of adds.
    pub max_objects: usize,
}

impl Default for EditParams {
    fn default() -> Self {
        Self {
            allow_add: true,
            max_objects: MAX_OBJECTS,
        }
    }
}

fn quantized(rng: &mut impl Rng, half_extent: f64) -> f64 {
    let v = rng.gen_range(-half_extent..=half_extent);
    ((v * 1000.0).round() / 1000.0).clamp(-half_extent, half_extent)
}

fn random_object(rng: &mut impl Rng, id: u32, position: [f64; 2]) -> ObjectSpec {
    ObjectSpec {
        id,
        shape: *Shape::ALL.choose(rng).unwrap(),
        color: *Color::ALL.choose(rng).unwrap(),
        size: *Size::ALL.choose(rng).unwrap(),
        material: *Material::ALL.choose(rng).unwrap(),
        position,
    }
}

/// Rejection-samples a position for a disc of `radius` that keeps clear of
/// every object in `placed`.
fn place(
    rng: &mut impl Rng,
    placed: &[ObjectSpec],
    radius: f64,
    half_extent: f64,
) -> Option<[f64; 2]> {
    (0..PLACEMENT_ATTEMPTS).find_map(|_| {
        let p = [quantized(rng, half_extent), quantized(rng, half_extent)];
        placed
            .iter()
            .all(|o| separated(p, radius, o.position, o.radius()))
            .then_some(p)
    })
}

/// Generates a base scene whose object count is uniform on the configured range.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<SceneConfig> {
    let (lo, hi) = (params.min_objects, params.max_objects);
    if lo < 1 || lo > hi || hi > MAX_OBJECTS {
        return Err(SceneError::InvalidParameter(format!(
            "object count range [{lo}, {hi}] must lie within [1, {MAX_OBJECTS}]"
        )));
    }
    let w = params.world_half_extent;
    let mut rng = seed::rng(seed);
    let count = rng.gen_range(lo..=hi);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    for i in 0..count {
        let mut obj = random_object(&mut rng, i as u32, [0.0, 0.0]);
        obj.position =
            place(&mut rng, &objects, obj.radius(), w).ok_or(SceneError::PlacementExhausted {
                object: i,
                attempts: PLACEMENT_ATTEMPTS,
            })?;
        objects.push(obj);
    }
    Ok(SceneConfig {
        seed,
        world_half_extent: w,
        objects,
    })
}

fn pick_other<T: Copy + PartialEq>(rng: &mut impl Rng, domain: &[T], current: T) -> T {
    let options: Vec<T> = domain.iter().copied().filter(|v| *v != current).collect();
    *options.choose(rng).unwrap()
}

/// Builds one attribute change (or removal) of `target` in `work`.
/// Returns `None` when the kind is infeasible for this object.
fn edit_existing(
    rng: &mut impl Rng,
    work: &SceneConfig,
    target: &ObjectSpec,
    kind: ModKind,
) -> Option<Modification> {
    let mut after = target.clone();
    match kind {
        ModKind::Remove => {
            return Some(Modification {
                kind,
                target_id: Some(target.id),
                before: Some(target.clone()),
                after: None,
            })
        }
        ModKind::ShapeChange => after.shape = pick_other(rng, &Shape::ALL, target.shape),
        ModKind::ColorChange => after.color = pick_other(rng, &Color::ALL, target.color),
        ModKind::MaterialChange => {
            after.material = pick_other(rng, &Material::ALL, target.material)
        }
        ModKind::SizeChange => {
            // Only sizes that keep the scene valid are eligible.
            let feasible: Vec<Size> = Size::ALL
                .iter()
                .copied()
                .filter(|s| *s != target.size)
                .filter(|s| {
                    work.objects
                        .iter()
                        .filter(|o| o.id != target.id)
                        .all(|o| separated(target.position, s.radius(), o.position, o.radius()))
                })
                .collect();
            after.size = *feasible.choose(rng)?;
        }
        ModKind::Add => unreachable!(),
    }
    Some(Modification {
        kind,
        target_id: Some(target.id),
        before: Some(target.clone()),
        after: Some(after),
    })
}

/// Samples `k` edits on distinct objects. Each edit's kind is uniform over
/// the kinds that are still feasible; `Add` introduces a fresh object and does
/// not consume an existing one.
pub fn sample_modifications(
    scene: &SceneConfig,
    k: usize,
    rng_seed: u64,
    params: &EditParams,
) -> Result<Vec<Modification>> {
    let add_budget = if params.allow_add {
        params.max_objects.saturating_sub(scene.objects.len())
    } else {
        0
    };
    let capacity = scene.objects.len() + add_budget;
    if k == 0 || k > capacity {
        return Err(SceneError::InfeasibleEditBudget { k, capacity });
    }

    let mut rng = seed::rng(rng_seed);
    let mut untouched: Vec<u32> = scene.objects.iter().map(|o| o.id).collect();
    untouched.shuffle(&mut rng);
    let mut adds_left = add_budget;
    let mut next_id = scene.objects.iter().map(|o| o.id + 1).max().unwrap_or(0);
    let mut work = scene.clone();
    let mut mods = Vec::with_capacity(k);

    while mods.len() < k {
        let mut kinds: Vec<ModKind> = ModKind::ALL
            .iter()
            .copied()
            .filter(|kind| match kind {
                ModKind::Add => adds_left > 0,
                _ => !untouched.is_empty(),
            })
            .collect();
        let m = loop {
            if kinds.is_empty() {
                return Err(SceneError::InfeasibleEditBudget { k, capacity });
            }
            let idx = rng.gen_range(0..kinds.len());
            let kind = kinds[idx];
            let candidate = if kind == ModKind::Add {
                let mut obj = random_object(&mut rng, next_id, [0.0, 0.0]);
                place(
                    &mut rng,
                    &work.objects,
                    obj.radius(),
                    work.world_half_extent,
                )
                .map(|p| {
                    obj.position = p;
                    Modification {
                        kind,
                        target_id: None,
                        before: None,
                        after: Some(obj),
                    }
                })
            } else {
                let target = work.object(*untouched.last().unwrap()).unwrap().clone();
                edit_existing(&mut rng, &work, &target, kind)
            };
            match candidate {
                Some(m) => break m,
                None => {
                    kinds.remove(idx);
                }
            }
        };
        if m.kind == ModKind::Add {
            adds_left -= 1;
            next_id += 1;
        } else {
            untouched.pop();
        }
        work = apply_modifications(&work, std::slice::from_ref(&m))?;
        mods.push(m);
    }
    Ok(mods)
}

/// Replays `mods` in order. Every other object is carried over untouched.
pub fn apply_modifications(scene: &SceneConfig, mods: &[Modification]) -> Result<SceneConfig> {
    let mut out = scene.clone();
    for m in mods {
        m.validate()?;
        match m.kind {
            ModKind::Add => {
                let obj = m.after.clone().unwrap();
                if out.object(obj.id).is_some() {
                    return Err(SceneError::InvalidModification(format!(
                        "added object id {} already exists",
                        obj.id
                    )));
                }
                out.objects.push(obj);
            }
            _ => {
                let id = m.target_id.unwrap();
                let idx = out
                    .objects
                    .iter()
                    .position(|o| o.id == id)
                    .ok_or(SceneError::UnknownTarget(id))?;
                if m.before.as_ref() != Some(&out.objects[idx]) {
                    return Err(SceneError::InvalidModification(format!(
                        "`before` snapshot of object {id} does not match the scene"
                    )));
                }
                match &m.after {
                    Some(after) => out.objects[idx] = after.clone(),
                    None => {
                        out.objects.remove(idx);
                    }
                }
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// Knobs for pair construction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairParams {
    pub scene: SceneParams,
    pub edits: EditParams,
}

/// Generates a base scene and an edited twin differing in `k` objects, with
/// `k` uniform on `[1, n_max]` unless pinned by `count_override`.
pub fn make_pair(
    seed: u64,
    n_max: usize,
    count_override: Option<usize>,
    params: &PairParams,
) -> Result<PairSpec> {
    if n_max < 1 {
        return Err(SceneError::InvalidParameter(
            "n_max must be at least 1".into(),
        ));
    }
    if let Some(k) = count_override {
        if k < 1 || k > n_max {
            return Err(SceneError::InvalidParameter(format!(
                "count override {k} outside [1, {n_max}]"
            )));
        }
    }
    let mut rng = seed::rng(seed::derive(seed, &[0]));
    let k = count_override.unwrap_or_else(|| rng.gen_range(1..=n_max));
    let base = generate_scene(seed::derive(seed, &[1]), &params.scene)?;
    let mods = sample_modifications(&base, k, seed::derive(seed, &[2]), &params.edits)?;
    let edited = apply_modifications(&base, &mods)?;
    Ok(PairSpec {
        pair_id: format!("{seed:016x}"),
        base,
        edited,
        mods,
        k,
        n_max,
    })
}

/// Serializes a scene or pair into its canonical document form.
pub fn to_document<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("scene types always serialize");
    s.push('\n');
    s
}

/// Parses a document produced by [`to_document`].
pub fn from_document<T: DeserializeOwned>(doc: &str) -> Result<T> {
    serde_json::from_str(doc).map_err(|e| SceneError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}
