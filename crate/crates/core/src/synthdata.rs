//! Deterministic synthetic scenes: convex "thing" shapes split into shaded
//! parts, irregular textured "stuff" regions tiling the rest of the image,
//! and templated referring expressions. Scenes serialize to a JSON manifest
//! with RLE masks and PNG rasters.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mask_to_box, rle_decode, rle_encode, BBox, BinaryMask, RleMask};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Gradient,
    Noise,
    Dots,
    Stripes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThingClassDef {
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
    /// Top-to-bottom bands.
    pub parts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StuffClassDef {
    pub name: String,
    pub color: [u8; 3],
    pub texture: Texture,
}

/// Label space. The "other" slot sits after every thing and stuff class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub thing_classes: Vec<String>,
    pub stuff_classes: Vec<String>,
    pub part_classes: Vec<String>,
    pub part_grouping: BTreeMap<String, Vec<String>>,
}

impl Vocabulary {
    pub fn new(
        thing_classes: Vec<String>,
        stuff_classes: Vec<String>,
        part_classes: Vec<String>,
        part_grouping: BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        let v = Self {
            thing_classes,
            stuff_classes,
            part_classes,
            part_grouping,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for name in self.thing_classes.iter().chain(&self.stuff_classes).chain(&self.part_classes) {
            if name.trim().is_empty() {
                return Err(Error::Vocabulary("empty class name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Vocabulary(format!("duplicate class name `{name}`")));
            }
        }
        for (group, parts) in &self.part_grouping {
            for p in parts {
                if !self.part_classes.contains(p) {
                    return Err(Error::Vocabulary(format!(
                        "group `{group}` lists unknown part `{p}`"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn other_index(&self) -> usize {
        self.thing_classes.len() + self.stuff_classes.len()
    }

    /// Things followed by stuff, the order used for category prompts.
    pub fn all_classes(&self) -> Vec<String> {
        self.thing_classes.iter().chain(&self.stuff_classes).cloned().collect()
    }

    pub fn is_thing(&self, name: &str) -> bool {
        self.thing_classes.iter().any(|c| c == name)
    }

    pub fn is_stuff(&self, name: &str) -> bool {
        self.stuff_classes.iter().any(|c| c == name)
    }

    pub fn group_of(&self, part: &str) -> Option<&str> {
        self.part_grouping
            .iter()
            .find(|(_, parts)| parts.iter().any(|p| p == part))
            .map(|(g, _)| g.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub things: Vec<ThingClassDef>,
    pub stuff: Vec<StuffClassDef>,
    pub part_grouping: BTreeMap<String, Vec<String>>,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Half-extent range of a thing, in pixels.
    pub min_radius: usize,
    pub max_radius: usize,
    pub allow_duplicate_classes: bool,
    pub stuff_seeds: usize,
    pub max_stuff_classes: usize,
    pub placement_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let thing = |name: &str, shape, color, parts: &[&str]| ThingClassDef {
            name: name.into(),
            shape,
            color,
            parts: parts.iter().map(|p| p.to_string()).collect(),
        };
        let stuff = |name: &str, color, texture| StuffClassDef {
            name: name.into(),
            color,
            texture,
        };
        let mut grouping = BTreeMap::new();
        grouping.insert("upper".to_string(), vec!["cap".to_string()]);
        grouping.insert("lower".to_string(), vec!["core".to_string(), "base".to_string()]);
        Self {
            height: 64,
            width: 64,
            channels: 3,
            things: vec![
                thing("red disk", Shape::Disk, [220, 40, 40], &["cap", "base"]),
                thing("red square", Shape::Square, [220, 40, 40], &["cap", "core", "base"]),
                thing("green square", Shape::Square, [40, 190, 60], &["cap", "base"]),
                thing("green triangle", Shape::Triangle, [40, 190, 60], &["cap", "core", "base"]),
                thing("blue triangle", Shape::Triangle, [40, 70, 230], &["cap", "base"]),
                thing("blue disk", Shape::Disk, [40, 70, 230], &["cap", "core", "base"]),
            ],
            stuff: vec![
                stuff("sky", [170, 200, 225], Texture::Gradient),
                stuff("grass", [95, 120, 55], Texture::Noise),
                stuff("sand", [200, 180, 130], Texture::Dots),
                stuff("water", [40, 60, 110], Texture::Stripes),
            ],
            part_grouping: grouping,
            min_instances: 1,
            max_instances: 3,
            min_radius: 7,
            max_radius: 12,
            allow_duplicate_classes: false,
            stuff_seeds: 5,
            max_stuff_classes: 3,
            placement_attempts: 200,
        }
    }
}

impl GeneratorConfig {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut parts: Vec<String> = Vec::new();
        for t in &self.things {
            for p in &t.parts {
                if !parts.contains(p) {
                    parts.push(p.clone());
                }
            }
        }
        Vocabulary::new(
            self.things.iter().map(|t| t.name.clone()).collect(),
            self.stuff.iter().map(|s| s.name.clone()).collect(),
            parts,
            self.part_grouping.clone(),
        )
    }

    /// Drops the named thing and stuff classes, e.g. to build a training
    /// split that never shows held-out classes.
    pub fn without_classes(&self, held_out: &[String]) -> GeneratorConfig {
        let mut cfg = self.clone();
        cfg.things.retain(|t| !held_out.contains(&t.name));
        cfg.stuff.retain(|s| !held_out.contains(&s.name));
        cfg
    }

    fn validate(&self) -> Result<()> {
        if self.things.is_empty() || self.stuff.is_empty() {
            return Err(Error::Generator("need at least one thing and one stuff class".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Generator("image dimensions must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Generator(format!("unsupported channel count {}", self.channels)));
        }
        if self.min_instances > self.max_instances || self.min_radius > self.max_radius || self.min_radius < 2 {
            return Err(Error::Generator("inverted or too-small instance ranges".into()));
        }
        if !self.allow_duplicate_classes && self.max_instances > self.things.len() {
            return Err(Error::Generator(
                "more instances than distinct thing classes without duplicates".into(),
            ));
        }
        if self.things.iter().any(|t| t.parts.is_empty() || t.parts.len() > self.min_radius) {
            return Err(Error::Generator("each thing needs 1..=min_radius parts".into()));
        }
        if self.stuff_seeds == 0 || self.max_stuff_classes == 0 {
            return Err(Error::Generator("need at least one stuff seed and class".into()));
        }
        self.vocabulary().map(|_| ())
    }
}

/// `height x width x channels` raster, values in `[0, 1]`, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.width + c) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes)
                .ok_or_else(|| Error::InvalidShape("raster size".into()))?
                .save(path)?,
            3 => image::RgbImage::from_raw(w, h, bytes)
                .ok_or_else(|| Error::InvalidShape("raster size".into()))?
                .save(path)?,
            n => return Err(Error::InvalidShape(format!("cannot write {n}-channel image"))),
        }
        Ok(())
    }

    pub fn load_png(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path)?;
        let (data, w, h): (Vec<u8>, u32, u32) = match channels {
            1 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                (g.into_raw(), w, h)
            }
            _ => {
                let g = img.to_rgb8();
                let (w, h) = g.dimensions();
                (g.into_raw(), w, h)
            }
        };
        Ok(Self {
            height: h as usize,
            width: w as usize,
            channels: if channels == 1 { 1 } else { 3 },
            data: data.into_iter().map(|b| b as f64 / 255.0).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartAnnotation {
    pub name: String,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: String,
    pub mask: BinaryMask,
    pub bbox: BBox,
    pub parts: Vec<PartAnnotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StuffRegion {
    pub class: String,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferringExpression {
    pub expression: String,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub instances: Vec<Instance>,
    pub stuff: Vec<StuffRegion>,
    pub referring: Vec<ReferringExpression>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    /// Checks disjointness, part containment and partition, and that stuff
    /// tiles exactly the pixels no instance covers.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut covered = BinaryMask::new(h, w)?;
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.mask.intersection_area(&covered)? != 0 {
                return Err(Error::Generator(format!("instance {i} overlaps another")));
            }
            covered = covered.or(&inst.mask)?;
            let mut union = BinaryMask::new(h, w)?;
            for p in &inst.parts {
                if !p.mask.is_subset_of(&inst.mask)? {
                    return Err(Error::Generator(format!("part `{}` escapes instance {i}", p.name)));
                }
                if p.mask.intersection_area(&union)? != 0 {
                    return Err(Error::Generator(format!("parts of instance {i} overlap")));
                }
                union = union.or(&p.mask)?;
            }
            if !inst.parts.is_empty() && union != inst.mask {
                return Err(Error::Generator(format!("parts of instance {i} do not cover it")));
            }
        }
        let mut stuff = BinaryMask::new(h, w)?;
        for s in &self.stuff {
            if s.mask.intersection_area(&stuff)? != 0 || s.mask.intersection_area(&covered)? != 0 {
                return Err(Error::Generator(format!("stuff `{}` overlaps", s.class)));
            }
            stuff = stuff.or(&s.mask)?;
        }
        if stuff != covered.complement() {
            return Err(Error::Generator("stuff does not tile the background".into()));
        }
        for r in &self.referring {
            if r.target >= self.instances.len() {
                return Err(Error::IndexOutOfRange(format!("referring target {}", r.target)));
            }
        }
        Ok(())
    }

    /// Per-pixel class name, things over stuff.
    pub fn semantic_map(&self) -> Vec<Option<String>> {
        let mut map = vec![None; self.height() * self.width()];
        for s in &self.stuff {
            for (i, &b) in s.mask.data().iter().enumerate() {
                if b {
                    map[i] = Some(s.class.clone());
                }
            }
        }
        for inst in &self.instances {
            for (i, &b) in inst.mask.data().iter().enumerate() {
                if b {
                    map[i] = Some(inst.class.clone());
                }
            }
        }
        map
    }
}

fn shape_contains(shape: Shape, cx: f64, cy: f64, r: f64, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        Shape::Disk => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Diamond => dx.abs() + dy.abs() <= r,
        Shape::Triangle => {
            if dy < -r || dy > r {
                return false;
            }
            let half = r * (dy + r) / (2.0 * r);
            dx.abs() <= half
        }
    }
}

fn lighten(c: [u8; 3], f: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in 0..3 {
        let v = c[k] as f64;
        out[k] = v + (255.0 - v) * f;
    }
    out
}

fn darken(c: [u8; 3], f: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = c[k] as f64 * f;
    }
    out
}

/// Shade of part band `k` out of `n`, top band lightest.
fn part_shade(color: [u8; 3], k: usize, n: usize) -> [f64; 3] {
    if n == 1 {
        return lighten(color, 0.0);
    }
    if k == 0 {
        lighten(color, 0.45)
    } else if k + 1 == n {
        darken(color, 0.6)
    } else {
        lighten(color, 0.0)
    }
}

fn cheap_hash(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ c;
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x
}

fn stuff_pixel(def: &StuffClassDef, r: usize, c: usize, h: usize, salt: u64, noise: f64) -> [f64; 3] {
    let base = [def.color[0] as f64, def.color[1] as f64, def.color[2] as f64];
    let delta = match def.texture {
        Texture::Gradient => 30.0 * (0.5 - r as f64 / h.max(1) as f64),
        Texture::Noise => 28.0 * noise,
        Texture::Dots => {
            if cheap_hash(r as u64 / 3, c as u64 / 3, salt) % 5 == 0 && r % 3 == 1 && c % 3 == 1 {
                -45.0
            } else {
                0.0
            }
        }
        Texture::Stripes => {
            if (r / 2) % 2 == 0 {
                18.0
            } else {
                -12.0
            }
        }
    };
    [base[0] + delta, base[1] + delta, base[2] + delta]
}

fn quantize(v: f64) -> f64 {
    (v.round().clamp(0.0, 255.0)) / 255.0
}

/// Builds one scene from `(config, seed)`. Equal inputs give bit-identical
/// scenes.
pub fn generate_scene(cfg: &GeneratorConfig, seed: u64) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_with_rng(cfg, &mut rng)
}

fn generate_with_rng(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<SceneSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let n_inst = rng.gen_range(cfg.min_instances..=cfg.max_instances);

    // class choice
    let mut class_ids: Vec<usize> = Vec::with_capacity(n_inst);
    if cfg.allow_duplicate_classes {
        for _ in 0..n_inst {
            class_ids.push(rng.gen_range(0..cfg.things.len()));
        }
    } else {
        let mut pool: Vec<usize> = (0..cfg.things.len()).collect();
        pool.shuffle(rng);
        class_ids.extend(pool.into_iter().take(n_inst));
    }

    // placement with a one-pixel gap so masks stay disjoint
    let mut occupied = BinaryMask::new(h, w)?;
    let mut instances = Vec::with_capacity(n_inst);
    for &cid in &class_ids {
        let def = &cfg.things[cid];
        let mut placed = None;
        for _ in 0..cfg.placement_attempts {
            let r = rng.gen_range(cfg.min_radius..=cfg.max_radius) as f64;
            if 2.0 * r + 2.0 > h.min(w) as f64 {
                continue;
            }
            let cx = rng.gen_range(r + 1.0..=w as f64 - r - 1.0);
            let cy = rng.gen_range(r + 1.0..=h as f64 - r - 1.0);
            let mask = BinaryMask::from_fn(h, w, |row, col| {
                shape_contains(def.shape, cx, cy, r, col as f64 + 0.5, row as f64 + 0.5)
            })?;
            if mask.area() == 0 {
                continue;
            }
            let grown = BinaryMask::from_fn(h, w, |row, col| {
                let r0 = row.saturating_sub(1);
                let c0 = col.saturating_sub(1);
                (r0..=(row + 1).min(h - 1)).any(|rr| (c0..=(col + 1).min(w - 1)).any(|cc| mask.get(rr, cc)))
            })?;
            if grown.intersection_area(&occupied)? == 0 {
                placed = Some(mask);
                break;
            }
        }
        let mask = placed.ok_or_else(|| {
            Error::Generator(format!(
                "could not place {n_inst} instances on a {h}x{w} image"
            ))
        })?;
        occupied = occupied.or(&mask)?;
        let bbox = mask_to_box(&mask);
        let (top, bottom) = (bbox.y0 as usize, bbox.y1 as usize);
        let n_parts = def.parts.len();
        let span = bottom - top;
        let mut parts = Vec::with_capacity(n_parts);
        for (k, name) in def.parts.iter().enumerate() {
            let pm = BinaryMask::from_fn(h, w, |row, col| {
                mask.get(row, col) && row >= top && ((row - top) * n_parts) / span == k
            })?;
            parts.push(PartAnnotation {
                name: name.clone(),
                mask: pm,
            });
        }
        instances.push((cid, Instance {
            class: def.name.clone(),
            mask,
            bbox,
            parts,
        }));
    }

    // stuff: warped Voronoi over a few seeds
    let n_classes = rng.gen_range(1..=cfg.max_stuff_classes.min(cfg.stuff.len()));
    let mut stuff_pool: Vec<usize> = (0..cfg.stuff.len()).collect();
    stuff_pool.shuffle(rng);
    let present: Vec<usize> = stuff_pool.into_iter().take(n_classes).collect();
    let n_seeds = cfg.stuff_seeds.max(n_classes);
    let mut seeds = Vec::with_capacity(n_seeds);
    for s in 0..n_seeds {
        let class = if s < n_classes { present[s] } else { present[rng.gen_range(0..n_classes)] };
        seeds.push((rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64), class));
    }
    let (fx, fy, px, py): (f64, f64, f64, f64) = (
        rng.gen_range(0.08..0.2),
        rng.gen_range(0.08..0.2),
        rng.gen_range(0.0..6.28),
        rng.gen_range(0.0..6.28),
    );
    let amp = 0.12 * h.min(w) as f64;
    let mut stuff_of_pixel = vec![0usize; h * w];
    for row in 0..h {
        for col in 0..w {
            let x = col as f64 + amp * (fy * row as f64 + py).sin();
            let y = row as f64 + amp * (fx * col as f64 + px).sin();
            let mut best = (f64::INFINITY, 0usize);
            for &(sx, sy, class) in &seeds {
                let d = (x - sx) * (x - sx) + (y - sy) * (y - sy);
                if d < best.0 {
                    best = (d, class);
                }
            }
            stuff_of_pixel[row * w + col] = best.1;
        }
    }
    let mut stuff = Vec::new();
    for &class in present.iter().collect::<BTreeSet<_>>() {
        let mask = BinaryMask::from_fn(h, w, |row, col| {
            stuff_of_pixel[row * w + col] == class && !occupied.get(row, col)
        })?;
        if mask.area() > 0 {
            stuff.push(StuffRegion {
                class: cfg.stuff[class].name.clone(),
                mask,
            });
        }
    }

    // raster
    let salt: u64 = rng.gen();
    let mut rgb = vec![[0.0f64; 3]; h * w];
    for row in 0..h {
        for col in 0..w {
            let noise: f64 = rng.gen_range(-1.0..1.0);
            let def = &cfg.stuff[stuff_of_pixel[row * w + col]];
            rgb[row * w + col] = stuff_pixel(def, row, col, h, salt, noise);
        }
    }
    for (cid, inst) in &instances {
        let def = &cfg.things[*cid];
        for (k, part) in inst.parts.iter().enumerate() {
            let shade = part_shade(def.color, k, inst.parts.len());
            for (i, &b) in part.mask.data().iter().enumerate() {
                if b {
                    rgb[i] = shade;
                }
            }
        }
    }
    let mut image = Image::zeros(h, w, cfg.channels);
    for (i, px) in rgb.iter().enumerate() {
        if cfg.channels == 1 {
            image.data[i] = quantize(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
        } else {
            for k in 0..3 {
                image.data[i * 3 + k] = quantize(px[k]);
            }
        }
    }

    let instances: Vec<Instance> = instances.into_iter().map(|(_, i)| i).collect();
    let referring = referring_expressions(&instances, w, rng);
    let sample = SceneSample {
        image,
        instances,
        stuff,
        referring,
    };
    sample.validate()?;
    Ok(sample)
}

/// One expression per instance whose (size, class, side) attributes are
/// unique in the scene.
fn referring_expressions(instances: &[Instance], width: usize, rng: &mut ChaCha8Rng) -> Vec<ReferringExpression> {
    if instances.is_empty() {
        return Vec::new();
    }
    let mut areas: Vec<usize> = instances.iter().map(|i| i.mask.area()).collect();
    areas.sort_unstable();
    let median = areas[areas.len() / 2];
    let attrs: Vec<(&str, &str, &str)> = instances
        .iter()
        .map(|inst| {
            let size = if inst.mask.area() >= median { "large" } else { "small" };
            let cx = 0.5 * (inst.bbox.x0 + inst.bbox.x1);
            let side = if cx < width as f64 / 2.0 { "left" } else { "right" };
            (size, inst.class.as_str(), side)
        })
        .collect();
    let mut out = Vec::new();
    for (i, a) in attrs.iter().enumerate() {
        if attrs.iter().filter(|b| *b == a).count() != 1 {
            continue;
        }
        let (size, class, side) = *a;
        let template = rng.gen_range(0..3);
        let expression = match template {
            0 => format!("the {size} {class} on the {side}"),
            1 => format!("{size} {class} at {side}"),
            _ => format!("the {class} on the {side} side"),
        };
        out.push(ReferringExpression { expression, target: i });
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PartRecord {
    name: String,
    mask: RleMask,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct InstanceRecord {
    class: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    mask: RleMask,
    parts: Vec<PartRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StuffRecord {
    class: String,
    mask: RleMask,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleRecord {
    image: String,
    height: usize,
    width: usize,
    channels: usize,
    instances: Vec<InstanceRecord>,
    stuff: Vec<StuffRecord>,
    referring: Vec<ReferringExpression>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub vocabulary: Vocabulary,
    samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    cheap_hash(seed, index as u64, 0x5EED)
}

/// The `index`-th scene of the dataset generated from `seed`.
pub fn dataset_scene(cfg: &GeneratorConfig, seed: u64, index: usize) -> Result<SceneSample> {
    generate_scene(cfg, sample_seed(seed, index))
}

pub fn generate_scenes(cfg: &GeneratorConfig, seed: u64, n: usize) -> Result<Vec<SceneSample>> {
    (0..n).map(|i| dataset_scene(cfg, seed, i)).collect()
}

/// Writes `n` scenes under `out_dir` (PNG rasters plus `manifest.json`) and
/// returns the manifest path.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64, n: usize, out_dir: &Path) -> Result<PathBuf> {
    let scenes = generate_scenes(cfg, seed, n)?;
    write_dataset(&scenes, &cfg.vocabulary()?, seed, out_dir)
}

pub fn write_dataset(scenes: &[SceneSample], vocab: &Vocabulary, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut samples = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let rel = format!("images/{i:05}.png");
        s.image.save_png(&out_dir.join(&rel))?;
        samples.push(SampleRecord {
            image: rel,
            height: s.height(),
            width: s.width(),
            channels: s.image.channels,
            instances: s
                .instances
                .iter()
                .map(|inst| InstanceRecord {
                    class: inst.class.clone(),
                    bbox: inst.bbox.to_array(),
                    mask: rle_encode(&inst.mask),
                    parts: inst
                        .parts
                        .iter()
                        .map(|p| PartRecord {
                            name: p.name.clone(),
                            mask: rle_encode(&p.mask),
                        })
                        .collect(),
                })
                .collect(),
            stuff: s
                .stuff
                .iter()
                .map(|r| StuffRecord {
                    class: r.class.clone(),
                    mask: rle_encode(&r.mask),
                })
                .collect(),
            referring: s.referring.clone(),
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        seed,
        vocabulary: vocab.clone(),
        samples,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported manifest version {}",
            m.format_version
        )));
    }
    Ok(m)
}

/// Loads and validates every scene listed in a manifest.
pub fn load_dataset(path: &Path) -> Result<(Vocabulary, Vec<SceneSample>)> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut scenes = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let image = Image::load_png(&base.join(&rec.image), rec.channels)?;
        if image.height != rec.height || image.width != rec.width {
            return Err(Error::ShapeMismatch(format!("image {} size", rec.image)));
        }
        let mut instances = Vec::with_capacity(rec.instances.len());
        for inst in &rec.instances {
            instances.push(Instance {
                class: inst.class.clone(),
                mask: rle_decode(&inst.mask)?,
                bbox: BBox::new(inst.bbox[0], inst.bbox[1], inst.bbox[2], inst.bbox[3])?,
                parts: inst
                    .parts
                    .iter()
                    .map(|p| {
                        Ok(PartAnnotation {
                            name: p.name.clone(),
                            mask: rle_decode(&p.mask)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            });
        }
        let stuff = rec
            .stuff
            .iter()
            .map(|s| {
                Ok(StuffRegion {
                    class: s.class.clone(),
                    mask: rle_decode(&s.mask)?,
                })
            })
            .collect::<Result<_>>()?;
        let sample = SceneSample {
            image,
            instances,
            stuff,
            referring: rec.referring.clone(),
        };
        sample.validate()?;
        scenes.push(sample);
    }
    Ok((manifest.vocabulary, scenes))
}

/// Class-agnostic masks (for example from an external segmenter) stored as
/// an RLE list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskList {
    pub masks: Vec<RleMask>,
}

pub fn read_mask_list(path: &Path) -> Result<Vec<BinaryMask>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let list: MaskList = serde_json::from_str(&text)?;
    list.masks.iter().map(rle_decode).collect()
}

pub fn write_mask_list(path: &Path, masks: &[BinaryMask]) -> Result<()> {
    let list = MaskList {
        masks: masks.iter().map(rle_encode).collect(),
    };
    let text = serde_json::to_string_pretty(&list)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
