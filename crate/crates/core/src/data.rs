//! Synthetic referring-video clips: coloured shapes moving over a dark
//! background, each clip described by a query that names exactly one of
//! them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::encoders::tokenize;
use crate::error::{Error, Result};
use crate::losses::GroundTruth;
use crate::mask::Mask;
use crate::tensor::Tensor;

pub const BACKGROUND: [u8; 3] = [20, 20, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Still,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Magenta, Color::Cyan];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 240],
            Color::Yellow => [240, 220, 40],
            Color::Magenta => [220, 50, 220],
            Color::Cyan => [40, 220, 230],
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 5] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Still];

    pub fn word(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Still => "still",
        }
    }

    /// Unit displacement `(dy, dx)` per frame.
    pub fn delta(self) -> (f64, f64) {
        match self {
            Motion::Left => (0.0, -1.0),
            Motion::Right => (0.0, 1.0),
            Motion::Up => (-1.0, 0.0),
            Motion::Down => (1.0, 0.0),
            Motion::Still => (0.0, 0.0),
        }
    }

    pub fn mirrored(self) -> Motion {
        match self {
            Motion::Left => Motion::Right,
            Motion::Right => Motion::Left,
            m => m,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub color: Color,
    pub shape: Shape,
    pub motion: Motion,
}

impl Attributes {
    pub fn shared_with(&self, other: &Attributes) -> usize {
        (self.color == other.color) as usize + (self.shape == other.shape) as usize + (self.motion == other.motion) as usize
    }

    pub fn query(&self) -> String {
        format!("the {} {} moving {}", self.color.word(), self.shape.word(), self.motion.word())
    }
}

/// Recover the attributes named by a templated query.
pub fn parse_query(query: &str) -> Option<Attributes> {
    let toks = tokenize(query);
    let find = |w: &str| toks.iter().any(|t| t == w);
    let color = Color::ALL.into_iter().find(|c| find(c.word()))?;
    let shape = Shape::ALL.into_iter().find(|s| find(s.word()))?;
    let motion = Motion::ALL.into_iter().find(|m| find(m.word()))?;
    Some(Attributes { color, shape, motion })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub attributes: Attributes,
    /// Centre `(y, x)` in the first frame.
    pub center: (f64, f64),
    pub size: usize,
}

impl ObjectSpec {
    pub fn center_at(&self, t: usize, speed: usize) -> (f64, f64) {
        let (dy, dx) = self.attributes.motion.delta();
        let s = (t * speed) as f64;
        (self.center.0 + dy * s, self.center.1 + dx * s)
    }
}

/// Pixels whose centres fall inside the shape.
pub fn rasterize(shape: Shape, center: (f64, f64), size: usize, height: usize, width: usize) -> Mask {
    let (cy, cx) = center;
    let half = size as f64 / 2.0;
    Mask::from_fn(height, width, |y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match shape {
            Shape::Square => (py - cy).abs() < half && (px - cx).abs() < half,
            Shape::Circle => (py - cy).powi(2) + (px - cx).powi(2) <= half * half,
            Shape::Triangle => {
                let top = cy - half;
                py >= top && py <= cy + half && (px - cx).abs() <= (py - top) / 2.0
            }
        }
    })
}

/// Generator settings and vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub speed: usize,
    pub colors: Vec<Color>,
    pub shapes: Vec<Shape>,
    pub motions: Vec<Motion>,
}

impl SynthSpec {
    pub fn from_config(cfg: &Config) -> Self {
        SynthSpec {
            frames: cfg.model.frames,
            height: cfg.model.height,
            width: cfg.model.width,
            min_objects: cfg.data.min_objects,
            max_objects: cfg.data.max_objects,
            min_size: cfg.data.min_size,
            max_size: cfg.data.max_size,
            speed: cfg.data.speed,
            colors: Color::ALL.to_vec(),
            shapes: Shape::ALL.to_vec(),
            motions: Motion::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    /// `[T, H, W, 3]` in `[0, 1]`, multiples of `1/255`.
    pub frames: Tensor,
    pub query: String,
    pub objects: Vec<ObjectSpec>,
    /// Index of the referred object.
    pub target: usize,
    pub gt: GroundTruth,
}

impl Clip {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.query)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Ground-truth mask of object `n` in frame `t`.
    pub fn mask(&self, n: usize, t: usize) -> Mask {
        let (tt, h, w) = (self.frame_count(), self.height(), self.width());
        let px = h * w;
        let off = (n * tt + t) * px;
        let bits = self.gt.masks.data()[off..off + px].iter().map(|&v| v == 1.0).collect();
        Mask { height: h, width: w, bits }
    }

    pub fn target_masks(&self) -> Vec<Mask> {
        (0..self.frame_count()).map(|t| self.mask(self.target, t)).collect()
    }

    /// Mirror left-right: frames, masks, motions and the query's direction
    /// words.
    pub fn hflip(&self) -> Clip {
        let s = self.frames.shape().to_vec();
        let w = s[2];
        let frames = Tensor::from_fn(&s, |i| {
            let c = i % 3;
            let x = (i / 3) % w;
            let rest = i / (3 * w);
            self.frames.data()[(rest * w + (w - 1 - x)) * 3 + c]
        });
        let ms = self.gt.masks.shape().to_vec();
        let masks = Tensor::from_fn(&ms, |i| {
            let x = i % w;
            let rest = i / w;
            self.gt.masks.data()[rest * w + (w - 1 - x)]
        });
        let query = self
            .query
            .split(' ')
            .map(|word| match word {
                "left" => "right",
                "right" => "left",
                other => other,
            })
            .collect::<Vec<_>>()
            .join(" ");
        let objects = self
            .objects
            .iter()
            .map(|o| ObjectSpec {
                attributes: Attributes {
                    motion: o.attributes.motion.mirrored(),
                    ..o.attributes
                },
                center: (o.center.0, w as f64 - o.center.1),
                size: o.size,
            })
            .collect();
        Clip {
            id: self.id.clone(),
            frames,
            query,
            objects,
            target: self.target,
            gt: GroundTruth {
                masks,
                flags: self.gt.flags.clone(),
            },
        }
    }
}

/// Candidate distractor attribute triples for `target`: distinct from it and
/// sharing at most one attribute.
fn distractor_pool(spec: &SynthSpec, target: &Attributes) -> Vec<Attributes> {
    let mut out = Vec::new();
    for &color in &spec.colors {
        for &shape in &spec.shapes {
            for &motion in &spec.motions {
                let a = Attributes { color, shape, motion };
                if a.shared_with(target) <= 1 {
                    out.push(a);
                }
            }
        }
    }
    out
}

/// Render one clip from its own RNG stream `(seed, index)`.
pub fn generate_clip(spec: &SynthSpec, seed: u64, index: usize) -> Result<Clip> {
    if spec.min_objects == 0 || spec.min_objects > spec.max_objects {
        return Err(Error::Generation(format!(
            "object range {}..={} is empty",
            spec.min_objects, spec.max_objects
        )));
    }
    if spec.colors.is_empty() || spec.shapes.is_empty() || spec.motions.is_empty() {
        return Err(Error::Generation("empty vocabulary".into()));
    }
    if spec.min_size == 0 || spec.min_size > spec.max_size || spec.max_size > spec.height.min(spec.width) {
        return Err(Error::Generation(format!("object size {}..={} does not fit", spec.min_size, spec.max_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let target = Attributes {
        color: spec.colors[rng.random_range(0..spec.colors.len())],
        shape: spec.shapes[rng.random_range(0..spec.shapes.len())],
        motion: spec.motions[rng.random_range(0..spec.motions.len())],
    };
    let mut pool = distractor_pool(spec, &target);
    if pool.len() < n - 1 {
        return Err(Error::Generation(format!(
            "only {} distinct distractors available for {n} objects",
            pool.len()
        )));
    }
    pool.shuffle(&mut rng);
    let mut attrs = vec![target];
    attrs.extend_from_slice(&pool[..n - 1]);
    attrs.shuffle(&mut rng);
    let target_idx = attrs.iter().position(|a| *a == target).expect("target is present");

    let (h, w, t) = (spec.height, spec.width, spec.frames);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
    for a in attrs {
        let size = rng.random_range(spec.min_size..=spec.max_size);
        let half = size as f64 / 2.0;
        let mut placed = None;
        for _ in 0..100 {
            let c = (rng.random_range(half..=h as f64 - half), rng.random_range(half..=w as f64 - half));
            let clear = objects.iter().all(|o| {
                let gap = (o.size as f64 + size as f64) / 2.0 + 1.0;
                (o.center.0 - c.0).abs() >= gap || (o.center.1 - c.1).abs() >= gap
            });
            placed = Some(c);
            if clear {
                break;
            }
        }
        objects.push(ObjectSpec {
            attributes: a,
            center: placed.expect("at least one attempt"),
            size,
        });
    }

    let px = h * w;
    let mut rgb = vec![0u8; t * px * 3];
    let mut masks = vec![0.0; n * t * px];
    let mut flags = vec![0.0; n * t];
    for f in 0..t {
        let rasters: Vec<Mask> = objects
            .iter()
            .map(|o| rasterize(o.attributes.shape, o.center_at(f, spec.speed), o.size, h, w))
            .collect();
        let frame = &mut rgb[f * px * 3..(f + 1) * px * 3];
        for p in 0..px {
            // Later objects are drawn on top.
            let top = (0..n).rev().find(|&i| rasters[i].bits[p]);
            let color = top.map_or(BACKGROUND, |i| objects[i].attributes.color.rgb());
            frame[p * 3..p * 3 + 3].copy_from_slice(&color);
            if let Some(i) = top {
                masks[(i * t + f) * px + p] = 1.0;
            }
        }
        let visible = (0..px).any(|p| masks[(target_idx * t + f) * px + p] == 1.0);
        flags[target_idx * t + f] = visible as u8 as f64;
    }
    Ok(Clip {
        id: format!("clip_{index:05}"),
        frames: Tensor::new(&[t, h, w, 3], rgb.iter().map(|&v| v as f64 / 255.0).collect())?,
        query: target.query(),
        objects,
        target: target_idx,
        gt: GroundTruth::new(Tensor::new(&[n, t, h, w], masks)?, Tensor::new(&[n, t], flags)?)?,
    })
}

/// Clips `first .. first + count` of the stream for `seed`.
pub fn generate(spec: &SynthSpec, seed: u64, first: usize, count: usize) -> Result<Vec<Clip>> {
    (first..first + count).map(|i| generate_clip(spec, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec::from_config(&Config::desk())
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec(), 7, 0, 4).unwrap();
        let b = generate(&spec(), 7, 0, 4).unwrap();
        assert_eq!(a, b);
        let later = generate(&spec(), 7, 2, 2).unwrap();
        assert_eq!(&a[2..], &later[..]);
        assert_ne!(a[0], generate(&spec(), 8, 0, 1).unwrap()[0]);
    }

    #[test]
    fn disc_area_is_close_to_pi_r_squared() {
        for size in [6, 10, 13, 20] {
            let r = size as f64 / 2.0;
            let m = rasterize(Shape::Circle, (32.0, 32.0), size, 64, 64);
            assert!((m.area() as f64 - std::f64::consts::PI * r * r).abs() <= 4.0 * r, "size {size}");
        }
    }

    #[test]
    fn query_names_the_target_uniquely() {
        for clip in generate(&spec(), 3, 0, 30).unwrap() {
            let named = parse_query(&clip.query).unwrap();
            let target = clip.objects[clip.target].attributes;
            assert_eq!(named, target);
            for (i, o) in clip.objects.iter().enumerate() {
                if i != clip.target {
                    assert!(o.attributes.shared_with(&target) <= 1);
                }
            }
            assert!((2..=4).contains(&clip.objects.len()));
        }
    }

    #[test]
    fn flags_follow_target_visibility() {
        for clip in generate(&spec(), 5, 0, 20).unwrap() {
            for n in 0..clip.objects.len() {
                for t in 0..clip.frame_count() {
                    let flag = clip.gt.flags.at(&[n, t]);
                    let expected = n == clip.target && !clip.mask(n, t).is_empty();
                    assert_eq!(flag, expected as u8 as f64);
                }
            }
        }
    }

    #[test]
    fn masks_match_rendered_colours() {
        let clip = generate_clip(&spec(), 11, 0).unwrap();
        let (h, w) = (clip.height(), clip.width());
        for t in 0..clip.frame_count() {
            for p in 0..h * w {
                let pix: Vec<u8> = (0..3)
                    .map(|c| (clip.frames.data()[(t * h * w + p) * 3 + c] * 255.0).round() as u8)
                    .collect();
                let owner = (0..clip.objects.len()).find(|&n| clip.mask(n, t).bits[p]);
                let expected = owner.map_or(BACKGROUND, |n| clip.objects[n].attributes.color.rgb());
                assert_eq!(pix, expected.to_vec());
            }
        }
    }

    #[test]
    fn unsatisfiable_vocabulary_is_an_error() {
        let mut s = spec();
        s.colors = vec![Color::Red];
        s.shapes = vec![Shape::Square];
        s.motions = vec![Motion::Left];
        s.min_objects = 2;
        assert!(matches!(generate_clip(&s, 0, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn hflip_mirrors_everything() {
        let clip = generate(&spec(), 2, 0, 10)
            .unwrap()
            .into_iter()
            .find(|c| matches!(c.objects[c.target].attributes.motion, Motion::Left | Motion::Right))
            .expect("a horizontally moving target in ten clips");
        let f = clip.hflip();
        assert_eq!(parse_query(&f.query).unwrap(), f.objects[f.target].attributes);
        assert_ne!(f.query, clip.query);
        assert_eq!(f.mask(0, 0), clip.mask(0, 0).flip_horizontal());
        let back = f.hflip();
        assert_eq!((&back.frames, &back.gt, &back.query), (&clip.frames, &clip.gt, &clip.query));
        for (a, b) in back.objects.iter().zip(&clip.objects) {
            assert_eq!(a.attributes, b.attributes);
            assert!((a.center.1 - b.center.1).abs() < 1e-9);
        }
    }
}
