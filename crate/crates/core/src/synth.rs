//! Synthetic referring-segmentation scenes: a few coloured shapes on a noisy
//! background and a `<color> <shape> <position>` expression that singles out
//! exactly one of them.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{Vocabulary, COLORS, POSITIONS, SHAPES};
use mafn_tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 1;

const PALETTE: [[f64; 3]; 4] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.15],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        SHAPES[self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Left,
    Right,
    Top,
    Bottom,
}

impl Position {
    pub const ALL: [Position; 4] = [Position::Left, Position::Right, Position::Top, Position::Bottom];

    pub fn word(self) -> &'static str {
        POSITIONS[self as usize]
    }
}

/// Which expression template to emit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    /// `<color> <shape> <position>`.
    Full,
    /// The shape word alone; only unambiguous in single-entity scenes.
    ShapeOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub shape: Shape,
    /// Index into the colour words.
    pub color: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    /// Rotation in radians (squares and triangles).
    pub orientation: f64,
    pub rgb: [f64; 3],
}

impl Entity {
    pub fn color_word(&self) -> &'static str {
        COLORS[self.color]
    }

    /// Whether pixel centre `(x + 0.5, y + 0.5)` lies inside the entity.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = (-self.orientation).sin_cos();
        let (u, v) = (c * px - s * py, s * px + c * py);
        match self.shape {
            Shape::Circle => px * px + py * py <= self.radius * self.radius,
            Shape::Square => {
                let h = self.radius * 0.8;
                u.abs() <= h && v.abs() <= h
            }
            Shape::Triangle => {
                // Equilateral triangle with circumradius `radius`, apex up.
                let r = self.radius;
                let inside = |ax: f64, ay: f64, bx: f64, by: f64| {
                    (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0.0
                };
                let h = 3f64.sqrt() / 2.0 * r;
                let (p0, p1, p2) = ((0.0, -r), (-h, r / 2.0), (h, r / 2.0));
                let a = inside(p0.0, p0.1, p1.0, p1.1);
                let b = inside(p1.0, p1.1, p2.0, p2.1);
                let c2 = inside(p2.0, p2.1, p0.0, p0.1);
                (a && b && c2) || (!a && !b && !c2)
            }
        }
    }

    /// Whether the entity satisfies a position word on a `size`-pixel image.
    pub fn at(&self, pos: Position, size: usize, margin: f64) -> bool {
        let mid = size as f64 / 2.0;
        match pos {
            Position::Left => self.cx < mid - margin,
            Position::Right => self.cx > mid + margin,
            Position::Top => self.cy < mid - margin,
            Position::Bottom => self.cy > mid + margin,
        }
    }

    pub fn mask(&self, size: usize) -> Vec<bool> {
        (0..size * size)
            .map(|i| self.contains(i % size, i / size))
            .collect()
    }
}

/// Scene parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Allowed colour indices.
    pub colors: Vec<usize>,
    pub shapes: Vec<Shape>,
    pub positions: Vec<Position>,
    /// Minimum distance of a centre from the image midline for a position word to apply.
    pub margin: f64,
    /// Probability of planting a same-colour, same-shape pair.
    pub twin_rate: f64,
    pub template: Template,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 48,
            min_entities: 2,
            max_entities: 4,
            min_radius: 6.0,
            max_radius: 9.0,
            colors: (0..COLORS.len()).collect(),
            shapes: Shape::ALL.to_vec(),
            positions: Position::ALL.to_vec(),
            margin: 3.0,
            twin_rate: 0.3,
            template: Template::Full,
        }
    }
}

impl SceneSpec {
    /// One entity per scene, described by its shape word.
    pub fn single_entity(size: usize) -> Self {
        SceneSpec {
            size,
            min_entities: 1,
            max_entities: 1,
            template: Template::ShapeOnly,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.colors.is_empty() || self.shapes.is_empty() {
            return Err(Error::Data("scene spec needs at least one colour and one shape".into()));
        }
        if self.template == Template::Full && self.positions.is_empty() {
            return Err(Error::Data("scene spec needs at least one position word".into()));
        }
        if self.colors.iter().any(|&c| c >= COLORS.len()) {
            return Err(Error::Data("scene spec colour index out of range".into()));
        }
        if self.min_entities == 0 || self.min_entities > self.max_entities {
            return Err(Error::Data(format!(
                "invalid entity count range {}..={}",
                self.min_entities, self.max_entities
            )));
        }
        if self.min_radius <= 1.0 || self.min_radius > self.max_radius {
            return Err(Error::Data("invalid radius range".into()));
        }
        if self.size < 4 * self.max_radius as usize {
            return Err(Error::Data(format!("image size {} too small", self.size)));
        }
        Ok(())
    }
}

/// Scene description stored alongside every sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub size: usize,
    pub entities: Vec<Entity>,
    pub target: usize,
    pub words: Vec<String>,
    /// Entities that some expression of the template could single out; the
    /// target is drawn uniformly from these.
    pub candidates: Vec<usize>,
    pub margin: f64,
}

impl SceneMeta {
    /// Entities satisfying every word of `words`.
    pub fn resolve(&self, words: &[String]) -> Vec<usize> {
        self.entities
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                words.iter().all(|w| {
                    if let Some(c) = COLORS.iter().position(|x| x == w) {
                        e.color == c
                    } else if let Some(s) = Shape::ALL.iter().find(|s| s.word() == w) {
                        e.shape == *s
                    } else if let Some(p) = Position::ALL.iter().find(|p| p.word() == w) {
                        e.at(*p, self.size, self.margin)
                    } else {
                        false
                    }
                })
            })
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionSample {
    /// Interleaved RGB bytes, row-major.
    pub pixels: Vec<u8>,
    /// One byte per pixel, 0 or 255.
    pub mask_bytes: Vec<u8>,
    pub tokens: Vec<u32>,
    pub meta: SceneMeta,
}

impl ExpressionSample {
    pub fn size(&self) -> usize {
        self.meta.size
    }

    /// `[3, H, W]` in `[0, 1]`.
    pub fn image(&self) -> Tensor<f32> {
        image_tensor(&self.pixels, self.size(), self.size())
    }

    /// `[H, W]` of 0/1.
    pub fn mask(&self) -> Tensor<f32> {
        mask_tensor(&self.mask_bytes, self.size(), self.size())
    }
}

pub fn image_tensor(pixels: &[u8], h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        pixels[p * 3 + c] as f32 / 255.0
    })
}

pub fn mask_tensor(bytes: &[u8], h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![h, w], |i| if bytes[i] > 127 { 1.0 } else { 0.0 })
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn place_entities(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<Vec<Entity>> {
    let n = rng.random_range(spec.min_entities..=spec.max_entities);
    let twin = n >= 2 && rng.random_bool(spec.twin_rate);
    let mut entities: Vec<Entity> = Vec::with_capacity(n);
    for k in 0..n {
        let (shape, color) = if twin && k == 1 {
            (entities[0].shape, entities[0].color)
        } else {
            (*spec.shapes.choose(rng)?, *spec.colors.choose(rng)?)
        };
        let mut placed = false;
        for _ in 0..50 {
            let radius = rng.random_range(spec.min_radius..=spec.max_radius);
            let lo = radius + 1.0;
            let hi = spec.size as f64 - radius - 1.0;
            let (cx, cy) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
            let clear = entities.iter().all(|e| {
                let (dx, dy) = (e.cx - cx, e.cy - cy);
                (dx * dx + dy * dy).sqrt() > e.radius + radius + 2.0
            });
            if !clear {
                continue;
            }
            let jitter = [
                rng.random_range(-0.08..0.08),
                rng.random_range(-0.08..0.08),
                rng.random_range(-0.08..0.08),
            ];
            let base = PALETTE[color];
            entities.push(Entity {
                shape,
                color,
                cx,
                cy,
                radius,
                orientation: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                rgb: [base[0] + jitter[0], base[1] + jitter[1], base[2] + jitter[2]],
            });
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(entities)
}

/// Position words under which `(color, shape, position)` resolves to `t` alone.
fn unique_positions(spec: &SceneSpec, entities: &[Entity], t: usize) -> Vec<Position> {
    let e = &entities[t];
    spec.positions
        .iter()
        .copied()
        .filter(|&p| {
            e.at(p, spec.size, spec.margin)
                && entities.iter().enumerate().all(|(j, o)| {
                    j == t || o.shape != e.shape || o.color != e.color || !o.at(p, spec.size, spec.margin)
                })
        })
        .collect()
}

fn shares_attribute(entities: &[Entity], t: usize) -> bool {
    let e = &entities[t];
    entities
        .iter()
        .enumerate()
        .any(|(j, o)| j != t && (o.shape == e.shape || o.color == e.color))
}

fn is_candidate(spec: &SceneSpec, entities: &[Entity], t: usize) -> bool {
    match spec.template {
        Template::ShapeOnly => entities
            .iter()
            .enumerate()
            .all(|(j, o)| j == t || o.shape != entities[t].shape),
        Template::Full => {
            (entities.len() == 1 || shares_attribute(entities, t))
                && !unique_positions(spec, entities, t).is_empty()
        }
    }
}

fn render(spec: &SceneSpec, entities: &[Entity], target: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let size = spec.size;
    let bg: f64 = rng.random_range(0.05..0.25);
    let tint = [
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
    ];
    let mut pixels = vec![0u8; size * size * 3];
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let owner = entities.iter().position(|e| e.contains(x, y));
            for ch in 0..3 {
                let noise: f64 = rng.random_range(-0.04..0.04);
                let v = match owner {
                    Some(k) => entities[k].rgb[ch] + noise * 0.75,
                    None => bg + tint[ch] + noise,
                };
                pixels[p * 3 + ch] = quantize(v);
            }
            if owner == Some(target) {
                mask[p] = 255;
            }
        }
    }
    (pixels, mask)
}

/// Deterministic sample for `seed`. Scenes are redrawn until some entity
/// can be singled out by the template; the target is then drawn uniformly
/// from all such entities, so the target carries no positional or count bias
/// a language-blind predictor could exploit.
pub fn generate_sample(seed: u64, spec: &SceneSpec, vocab: &Vocabulary) -> Result<ExpressionSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let Some(entities) = place_entities(spec, &mut rng) else {
            continue;
        };
        let candidates: Vec<usize> = (0..entities.len())
            .filter(|&t| is_candidate(spec, &entities, t))
            .collect();
        let Some(&target) = candidates.choose(&mut rng) else {
            continue;
        };
        let e = &entities[target];
        let words: Vec<String> = match spec.template {
            Template::ShapeOnly => vec![e.shape.word().to_string()],
            Template::Full => {
                let options = unique_positions(spec, &entities, target);
                let pos = *options.choose(&mut rng).expect("candidate has a position");
                vec![e.color_word().into(), e.shape.word().into(), pos.word().into()]
            }
        };
        let tokens = vocab.encode(&words.join(" "))?;
        let (pixels, mask_bytes) = render(spec, &entities, target, &mut rng);
        if !mask_bytes.contains(&255) {
            continue;
        }
        let meta = SceneMeta {
            size: spec.size,
            entities,
            target,
            words,
            candidates,
            margin: spec.margin,
        };
        return Ok(ExpressionSample {
            pixels,
            mask_bytes,
            tokens,
            meta,
        });
    }
    Err(Error::Data(format!("no valid scene found for seed {seed}")))
}

/// Best mean IoU any language-blind predictor can reach on one scene: the
/// target is uniform over the candidates, so the best image-only prediction
/// is the union of entity masks maximising the mean IoU over candidates.
pub fn blind_ceiling(meta: &SceneMeta) -> f64 {
    let masks: Vec<Vec<bool>> = meta.entities.iter().map(|e| e.mask(meta.size)).collect();
    let area: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
    let n = masks.len();
    let mut best = 0.0f64;
    for subset in 1u32..(1 << n) {
        let union_area: usize = (0..n).filter(|i| subset >> i & 1 == 1).map(|i| area[i]).sum();
        let score: f64 = meta
            .candidates
            .iter()
            .map(|&t| {
                if subset >> t & 1 == 1 {
                    area[t] as f64 / union_area as f64
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / meta.candidates.len() as f64;
        best = best.max(score);
    }
    best
}

/// Mixes a dataset seed, split and index into one sample seed.
pub fn sample_seed(seed: u64, split: &str, index: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in split.bytes().chain((index as u64).to_le_bytes()) {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        h ^= h >> 29;
    }
    h
}
