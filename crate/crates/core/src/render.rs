//! Flat-shaded software rasterizer and pixel-exact difference boxes.
//!
//! Objects are drawn as silhouettes under a fixed pseudo-perspective camera:
//! ground-plane position maps affinely to the screen, size shrinks linearly
//! with depth, and objects are painted far-to-near. There is no anti-aliasing,
//! so a pixel belongs to a silhouette iff its center passes the shape test.

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Material, ModKind, ObjectSpec, PairSpec, SceneConfig, Shape};

pub const BACKGROUND: [u8; 3] = [64, 64, 64];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("modification {index} of pair {pair_id} has an empty box inside the image")]
    DegenerateBox { pair_id: String, index: usize },
    #[error("box {index} of pair {pair_id} contains no differing pixel")]
    InvisibleDifference { pair_id: String, index: usize },
    #[error("pixel ({x}, {y}) of pair {pair_id} differs outside every box")]
    ContainmentViolated { pair_id: String, x: u32, y: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dims {
    pub width: u32,
    pub height: u32,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
        }
    }
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(dims: Dims, rgb: [u8; 3]) -> Self {
        let n = dims.width as usize * dims.height as usize;
        Self {
            width: dims.width,
            height: dims.height,
            pixels: rgb.iter().copied().cycle().take(n * 3).collect(),
        }
    }

    /// Wraps raw RGB bytes; `None` if the length does not match.
    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == width as usize * height as usize * 3).then_some(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn dims(&self) -> Dims {
        Dims {
            width: self.width,
            height: self.height,
        }
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Axis-aligned box in pixel coordinates, half-open: `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Returns `None` unless the box has positive width and height.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Option<Self> {
        let all_finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        (all_finite && x_min < x_max && y_min < y_max).then_some(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    /// Whether pixel `(x, y)` (its unit square) lies inside the box.
    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        let (x, y) = (x as f64, y as f64);
        x >= self.x_min && x + 1.0 <= self.x_max && y >= self.y_min && y + 1.0 <= self.y_max
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Checks the invariant `0 ≤ min < max ≤ extent` on both axes.
    pub fn within(&self, dims: Dims) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= dims.width as f64
            && self.y_max <= dims.height as f64
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }
}

// Boxes serialize as a bare quadruple; integral coordinates are written as integers.
impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(4))?;
        for v in self.to_array() {
            if v.fract() == 0.0 && v.abs() < 1e15 {
                seq.serialize_element(&(v as i64))?;
            } else {
                seq.serialize_element(&v)?;
            }
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct Quad;
        impl<'de> Visitor<'de> for Quad {
            type Value = BBox;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("[x_min, y_min, x_max, y_max]")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<BBox, A::Error> {
                let mut v = [0.0; 4];
                for (i, slot) in v.iter_mut().enumerate() {
                    *slot = seq
                        .next_element()?
                        .ok_or_else(|| de::Error::invalid_length(i, &self))?;
                }
                if seq.next_element::<f64>()?.is_some() {
                    return Err(de::Error::invalid_length(5, &self));
                }
                BBox::new(v[0], v[1], v[2], v[3])
                    .ok_or_else(|| de::Error::custom("box has non-positive extent"))
            }
        }
        deserializer.deserialize_seq(Quad)
    }
}

/// Fixed pseudo-perspective camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Pixel half-extent of a unit-radius object at mid depth.
    pub scale0: f64,
    /// Relative shrink between mid depth and the far edge.
    pub depth_factor: f64,
    /// Screen pixels per world unit of ground-plane displacement.
    pub pixels_per_unit: f64,
    pub world_half_extent: f64,
}

impl Camera {
    pub fn for_dims(dims: Dims) -> Self {
        Self {
            scale0: 28.0,
            depth_factor: 0.25,
            pixels_per_unit: dims.width.min(dims.height) as f64 / 8.0,
            world_half_extent: crate::scene::DEFAULT_WORLD_HALF_EXTENT,
        }
    }
}

/// Screen-space footprint of an object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub cx: f64,
    pub cy: f64,
    pub half: f64,
    /// Painter's key: larger is farther.
    pub depth: f64,
}

pub fn project(obj: &ObjectSpec, camera: &Camera, dims: Dims) -> Footprint {
    let [x, y] = obj.position;
    let y_norm = y / camera.world_half_extent;
    Footprint {
        cx: dims.width as f64 / 2.0 + x * camera.pixels_per_unit,
        cy: dims.height as f64 / 2.0 - y * camera.pixels_per_unit,
        half: obj.radius() * camera.scale0 * (1.0 - camera.depth_factor * y_norm),
        depth: y,
    }
}

/// Shape membership test at pixel `(px, py)`, sampling the pixel center.
pub fn covers(shape: Shape, fp: &Footprint, px: i64, py: i64) -> bool {
    let dx = px as f64 + 0.5 - fp.cx;
    let dy = py as f64 + 0.5 - fp.cy;
    let h = fp.half;
    match shape {
        Shape::Sphere => dx * dx + dy * dy <= h * h,
        Shape::Cube => dx.abs() <= h && dy.abs() <= h,
        // Upward triangle: apex at (cx, cy - h), base along cy + h.
        Shape::Cylinder => dy >= -h && dy <= h && dx.abs() <= (dy + h) / 2.0,
    }
}

/// Unclamped pixel range that can contain the footprint.
fn candidate_range(fp: &Footprint) -> (i64, i64, i64, i64) {
    (
        (fp.cx - fp.half - 1.0).floor() as i64,
        (fp.cy - fp.half - 1.0).floor() as i64,
        (fp.cx + fp.half + 1.0).ceil() as i64,
        (fp.cy + fp.half + 1.0).ceil() as i64,
    )
}

/// Pixels of the object's silhouette that fall inside the image, row-major.
pub fn silhouette(obj: &ObjectSpec, camera: &Camera, dims: Dims) -> Vec<(u32, u32)> {
    let fp = project(obj, camera, dims);
    let (x0, y0, x1, y1) = candidate_range(&fp);
    let mut out = Vec::new();
    for py in y0.max(0)..=y1.min(dims.height as i64 - 1) {
        for px in x0.max(0)..=x1.min(dims.width as i64 - 1) {
            if covers(obj.shape, &fp, px, py) {
                out.push((px as u32, py as u32));
            }
        }
    }
    out
}

/// Tight box around the in-image silhouette; `None` if nothing is on screen.
pub fn silhouette_box(obj: &ObjectSpec, camera: &Camera, dims: Dims) -> Option<BBox> {
    let px = silhouette(obj, camera, dims);
    let x_min = px.iter().map(|p| p.0).min()?;
    let x_max = px.iter().map(|p| p.0).max()?;
    let y_min = px.first()?.1;
    let y_max = px.last()?.1;
    BBox::new(
        x_min as f64,
        y_min as f64,
        x_max as f64 + 1.0,
        y_max as f64 + 1.0,
    )
}

fn darker(rgb: [u8; 3]) -> [u8; 3] {
    rgb.map(|c| c / 2)
}

fn draw_object(img: &mut Image, obj: &ObjectSpec, camera: &Camera) {
    let dims = img.dims();
    let fp = project(obj, camera, dims);
    let fill = obj.color.rgb();
    let shade = darker(fill);
    let (x0, y0, x1, y1) = candidate_range(&fp);
    let inside = |x: i64, y: i64| covers(obj.shape, &fp, x, y);
    let top = (y0..=y1).find(|&y| (x0..=x1).any(|x| inside(x, y)));
    for py in y0.max(0)..=y1.min(dims.height as i64 - 1) {
        for px in x0.max(0)..=x1.min(dims.width as i64 - 1) {
            if !inside(px, py) {
                continue;
            }
            let color = match obj.material {
                Material::Matte => fill,
                Material::Metal => {
                    let border = (1..=2).any(|d| {
                        !inside(px - d, py)
                            || !inside(px + d, py)
                            || !inside(px, py - d)
                            || !inside(px, py + d)
                    });
                    let stripe = top.is_some_and(|t| (py - t) % 4 == 0);
                    if border || stripe {
                        shade
                    } else {
                        fill
                    }
                }
            };
            img.put(px as u32, py as u32, color);
        }
    }
}

/// Paints the scene far-to-near over a uniform background.
pub fn render_scene(scene: &SceneConfig, camera: &Camera, dims: Dims) -> Image {
    let mut img = Image::filled(dims, BACKGROUND);
    let mut order: Vec<(&ObjectSpec, f64)> = scene
        .objects
        .iter()
        .map(|o| (o, project(o, camera, dims).depth))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
    for (obj, _) in order {
        draw_object(&mut img, obj, camera);
    }
    img
}

/// Ground-truth difference boxes of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub pair_id: String,
    pub boxes: Vec<BBox>,
    pub kinds: Vec<ModKind>,
}

/// One box per modification: removals use the base silhouette, additions the
/// edited silhouette, attribute changes the union of both.
pub fn gt_boxes(pair: &PairSpec, camera: &Camera, dims: Dims) -> Result<Annotation, RenderError> {
    let degenerate = |index| RenderError::DegenerateBox {
        pair_id: pair.pair_id.clone(),
        index,
    };
    let mut boxes = Vec::with_capacity(pair.mods.len());
    for (i, m) in pair.mods.iter().enumerate() {
        let before = m.before.as_ref().map(|o| silhouette_box(o, camera, dims));
        let after = m.after.as_ref().map(|o| silhouette_box(o, camera, dims));
        let b = match (before.flatten(), after.flatten()) {
            (Some(a), Some(b)) => a.union(&b),
            (Some(a), None) if m.kind == ModKind::Remove => a,
            (None, Some(b)) if m.kind == ModKind::Add => b,
            _ => return Err(degenerate(i)),
        };
        boxes.push(b);
    }
    Ok(Annotation {
        pair_id: pair.pair_id.clone(),
        boxes,
        kinds: pair.mods.iter().map(|m| m.kind).collect(),
    })
}

/// A rendered pair with its verified annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPair {
    pub image_a: Image,
    pub image_b: Image,
    pub annotation: Annotation,
}

/// Pixels whose RGB values differ between two same-sized images.
pub fn differing_pixels(a: &Image, b: &Image) -> Vec<(u32, u32)> {
    assert_eq!(a.dims(), b.dims());
    a.pixels
        .chunks_exact(3)
        .zip(b.pixels.chunks_exact(3))
        .enumerate()
        .filter(|(_, (p, q))| p != q)
        .map(|(i, _)| ((i % a.width as usize) as u32, (i / a.width as usize) as u32))
        .collect()
}

/// Renders both scenes, derives boxes, and checks that every differing pixel
/// is covered and every box covers at least one differing pixel.
pub fn render_pair(
    pair: &PairSpec,
    camera: &Camera,
    dims: Dims,
) -> Result<RenderedPair, RenderError> {
    let image_a = render_scene(&pair.base, camera, dims);
    let image_b = render_scene(&pair.edited, camera, dims);
    let annotation = gt_boxes(pair, camera, dims)?;
    let diff = differing_pixels(&image_a, &image_b);
    let mut hit = vec![false; annotation.boxes.len()];
    for &(x, y) in &diff {
        let mut covered = false;
        for (h, b) in hit.iter_mut().zip(&annotation.boxes) {
            if b.contains_pixel(x, y) {
                *h = true;
                covered = true;
            }
        }
        if !covered {
            return Err(RenderError::ContainmentViolated {
                pair_id: pair.pair_id.clone(),
                x,
                y,
            });
        }
    }
    if let Some(index) = hit.iter().position(|h| !h) {
        return Err(RenderError::InvisibleDifference {
            pair_id: pair.pair_id.clone(),
            index,
        });
    }
    Ok(RenderedPair {
        image_a,
        image_b,
        annotation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Color, Modification, Size};

    fn dims() -> Dims {
        Dims::default()
    }

    fn obj(id: u32, shape: Shape, size: Size, x: f64, y: f64) -> ObjectSpec {
        ObjectSpec {
            id,
            shape,
            color: Color::Red,
            size,
            material: Material::Matte,
            position: [x, y],
        }
    }

    fn scene(objects: Vec<ObjectSpec>) -> SceneConfig {
        SceneConfig {
            seed: 0,
            world_half_extent: 3.0,
            objects,
        }
    }

    #[test]
    fn origin_projects_to_center() {
        let cam = Camera::for_dims(dims());
        let fp = project(&obj(0, Shape::Sphere, Size::Medium, 0.0, 0.0), &cam, dims());
        assert_eq!((fp.cx, fp.cy), (128.0, 128.0));
        assert!((fp.half - 0.55 * 28.0).abs() < 1e-12);
        assert_eq!(fp.half.round(), 15.0);
    }

    #[test]
    fn farther_is_smaller() {
        let cam = Camera::for_dims(dims());
        let near = project(&obj(0, Shape::Cube, Size::Large, 1.0, -1.0), &cam, dims());
        let far = project(&obj(0, Shape::Cube, Size::Large, 1.0, 1.5), &cam, dims());
        assert!(far.half < near.half);
        assert!(far.cy < near.cy);
    }

    #[test]
    fn world_corners_stay_on_screen() {
        let cam = Camera::for_dims(dims());
        for &(x, y) in &[(-3.0, -3.0), (-3.0, 3.0), (3.0, -3.0), (3.0, 3.0)] {
            let fp = project(&obj(0, Shape::Cube, Size::Large, x, y), &cam, dims());
            assert!(fp.cx - fp.half >= 0.0 && fp.cx + fp.half <= 256.0);
            assert!(fp.cy - fp.half >= 0.0 && fp.cy + fp.half <= 256.0);
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let img = render_scene(&scene(vec![]), &Camera::for_dims(dims()), dims());
        assert_eq!(img.pixels.len(), 256 * 256 * 3);
        assert!(img.pixels.chunks(3).all(|p| p == BACKGROUND));
    }

    #[test]
    fn disc_area_matches_inequality_count() {
        let cam = Camera::for_dims(dims());
        let img = render_scene(
            &scene(vec![obj(0, Shape::Sphere, Size::Medium, 0.0, 0.0)]),
            &cam,
            dims(),
        );
        let red = img
            .pixels
            .chunks(3)
            .filter(|p| *p == Color::Red.rgb())
            .count();
        // Independent count: pixel centers within radius 15.4 of (128, 128).
        let r = 0.55 * 28.0;
        let mut expected = 0;
        for y in 0..256 {
            for x in 0..256 {
                let dx = x as f64 + 0.5 - 128.0;
                let dy = y as f64 + 0.5 - 128.0;
                if dx * dx + dy * dy <= r * r {
                    expected += 1;
                }
            }
        }
        assert_eq!(red, expected);
    }

    #[test]
    fn nearer_object_paints_over_farther() {
        let cam = Camera::for_dims(dims());
        let mut near = obj(0, Shape::Cube, Size::Large, 0.0, -0.3);
        near.color = Color::Blue;
        let far = obj(1, Shape::Cube, Size::Large, 0.0, 0.3);
        // Deliberately list the near object first.
        let img = render_scene(&scene(vec![near.clone(), far]), &cam, dims());
        let fp = project(&near, &cam, dims());
        assert_eq!(img.pixel(fp.cx as u32, fp.cy as u32), Color::Blue.rgb());
    }

    #[test]
    fn metal_has_darker_border_and_stripes() {
        let cam = Camera::for_dims(dims());
        let mut o = obj(0, Shape::Cube, Size::Large, 0.0, 0.0);
        o.material = Material::Metal;
        let img = render_scene(&scene(vec![o.clone()]), &cam, dims());
        let b = silhouette_box(&o, &cam, dims()).unwrap();
        let (x0, y0) = (b.x_min as u32, b.y_min as u32);
        assert_eq!(img.pixel(x0, y0 + 5), [86, 17, 17]);
        assert_eq!(img.pixel(x0 + 1, y0 + 5), [86, 17, 17]);
        assert_eq!(img.pixel(x0 + 2, y0 + 5), Color::Red.rgb());
        // Stripe rows repeat every 4 rows from the top edge.
        assert_eq!(img.pixel(x0 + 10, y0 + 8), [86, 17, 17]);
        assert_eq!(img.pixel(x0 + 10, y0 + 9), Color::Red.rgb());
    }

    #[test]
    fn silhouette_box_is_tight() {
        let cam = Camera::for_dims(dims());
        for shape in Shape::ALL {
            let o = obj(0, shape, Size::Medium, 0.37, -1.21);
            let px = silhouette(&o, &cam, dims());
            let b = silhouette_box(&o, &cam, dims()).unwrap();
            assert!(px.iter().all(|&(x, y)| b.contains_pixel(x, y)));
            assert!(px.iter().any(|&(x, _)| x as f64 == b.x_min));
            assert!(px.iter().any(|&(x, _)| x as f64 + 1.0 == b.x_max));
            assert!(px.iter().any(|&(_, y)| y as f64 == b.y_min));
            assert!(px.iter().any(|&(_, y)| y as f64 + 1.0 == b.y_max));
        }
    }

    fn single_edit_pair(m: Modification, base: SceneConfig) -> PairSpec {
        let edited = crate::scene::apply_modifications(&base, std::slice::from_ref(&m)).unwrap();
        PairSpec {
            pair_id: "t".into(),
            base,
            edited,
            mods: vec![m],
            k: 1,
            n_max: 4,
        }
    }

    #[test]
    fn remove_only_object_box_is_its_silhouette() {
        let cam = Camera::for_dims(dims());
        let o = obj(0, Shape::Cylinder, Size::Large, 1.0, 0.5);
        let m = Modification {
            kind: ModKind::Remove,
            target_id: Some(0),
            before: Some(o.clone()),
            after: None,
        };
        let pair = single_edit_pair(m, scene(vec![o.clone()]));
        let ann = gt_boxes(&pair, &cam, dims()).unwrap();
        assert_eq!(ann.boxes, vec![silhouette_box(&o, &cam, dims()).unwrap()]);
        render_pair(&pair, &cam, dims()).unwrap();
    }

    #[test]
    fn growing_box_equals_large_box() {
        let cam = Camera::for_dims(dims());
        let small = obj(0, Shape::Sphere, Size::Small, -0.5, 0.5);
        let mut large = small.clone();
        large.size = Size::Large;
        let m = Modification {
            kind: ModKind::SizeChange,
            target_id: Some(0),
            before: Some(small.clone()),
            after: Some(large.clone()),
        };
        let pair = single_edit_pair(m, scene(vec![small]));
        let ann = gt_boxes(&pair, &cam, dims()).unwrap();
        assert_eq!(ann.boxes[0], silhouette_box(&large, &cam, dims()).unwrap());
    }

    #[test]
    fn fully_hidden_edit_is_invisible() {
        let cam = Camera::for_dims(dims());
        // A small far cube completely covered by a large near cube.
        let hidden = obj(0, Shape::Cube, Size::Small, 0.0, 0.1);
        let mut cover = obj(1, Shape::Cube, Size::Large, 0.0, 0.0);
        cover.color = Color::Blue;
        let mut recolored = hidden.clone();
        recolored.color = Color::Green;
        let m = Modification {
            kind: ModKind::ColorChange,
            target_id: Some(0),
            before: Some(hidden.clone()),
            after: Some(recolored),
        };
        let base = SceneConfig {
            seed: 0,
            world_half_extent: 3.0,
            objects: vec![hidden, cover],
        };
        // Bypass separation validation: construct the pair by hand.
        let mut edited = base.clone();
        edited.objects[0].color = Color::Green;
        let pair = PairSpec {
            pair_id: "hidden".into(),
            base,
            edited,
            mods: vec![m],
            k: 1,
            n_max: 1,
        };
        assert_eq!(
            render_pair(&pair, &cam, dims()),
            Err(RenderError::InvisibleDifference {
                pair_id: "hidden".into(),
                index: 0
            })
        );
    }

    #[test]
    fn bbox_serializes_integral_coordinates_as_integers() {
        let b = BBox::new(1.0, 2.0, 30.0, 40.5).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,30,40.5]");
        let back: BBox = serde_json::from_str("[1,2,30,40.5]").unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BBox>("[3,2,1,4]").is_err());
        assert!(serde_json::from_str::<BBox>("[1,2,3]").is_err());
    }
}
