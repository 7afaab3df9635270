//! Synthetic driving scenes: images, oracle detections and QA records.
//!
//! Objects are flat-colored rectangles, circles and triangles drawn over a
//! road backdrop. Later objects overwrite earlier ones and masks are taken
//! after all drawing, so masks within a view are disjoint and exactly match
//! the painted pixels.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IMAGE_SIZE: usize = 448;
pub const MAX_OBJECTS: usize = 100;

/// Moving-status candidates for the perception multiple-choice question.
pub const MOVING_STATUS_OPTIONS: [&str; 7] = [
    "going ahead",
    "turning left",
    "turning right",
    "stopped",
    "backing up",
    "changing to the left lane",
    "changing to the right lane",
];

const STEERING: [&str; 3] = [
    "going straight",
    "steering to the left",
    "steering to the right",
];
const SPEED: [&str; 7] = [
    "driving fast",
    "driving with normal speed",
    "driving slowly",
    "driving very slowly",
    "accelerating",
    "slowing down",
    "not moving",
];

/// The 21 ego-behavior candidates (steering x speed).
pub fn behavior_options() -> Vec<String> {
    STEERING
        .iter()
        .flat_map(|st| SPEED.iter().map(move |sp| format!("{st} and {sp}")))
        .collect()
}

/// Options shown in a multiple-choice question: the correct answer plus
/// three distractors.
pub const SHOWN_OPTIONS: usize = 4;
const OPTION_LABELS: [&str; SHOWN_OPTIONS] = ["A", "B", "C", "D"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Truck,
    Bus,
    Pedestrian,
    Cone,
    Barrier,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 6] = [
        ObjectClass::Car,
        ObjectClass::Truck,
        ObjectClass::Bus,
        ObjectClass::Pedestrian,
        ObjectClass::Cone,
        ObjectClass::Barrier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Bus => "bus",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cone => "cone",
            ObjectClass::Barrier => "barrier",
        }
    }

    fn is_static(self) -> bool {
        matches!(self, ObjectClass::Cone | ObjectClass::Barrier)
    }
}

/// Named object colors; objects in one scene get distinct entries while
/// the palette lasts.
pub const PALETTE: [(&str, [u8; 3]); 12] = [
    ("red", [220, 30, 30]),
    ("green", [40, 170, 60]),
    ("blue", [30, 60, 220]),
    ("yellow", [240, 220, 30]),
    ("cyan", [40, 210, 220]),
    ("magenta", [210, 40, 200]),
    ("orange", [250, 140, 20]),
    ("purple", [120, 50, 160]),
    ("white", [245, 245, 245]),
    ("black", [15, 15, 15]),
    ("pink", [250, 160, 190]),
    ("brown", [130, 80, 40]),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default = "default_size")]
    pub image_height: usize,
    #[serde(default = "default_size")]
    pub image_width: usize,
    #[serde(default = "default_views")]
    pub num_views: usize,
    #[serde(default = "default_min_objects")]
    pub min_objects: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default = "default_classes")]
    pub object_classes: Vec<ObjectClass>,
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> usize {
    DEFAULT_IMAGE_SIZE
}
fn default_views() -> usize {
    1
}
fn default_min_objects() -> usize {
    3
}
fn default_max_objects() -> usize {
    6
}
fn default_classes() -> Vec<ObjectClass> {
    ObjectClass::ALL.to_vec()
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_height: default_size(),
            image_width: default_size(),
            num_views: default_views(),
            min_objects: default_min_objects(),
            max_objects: default_max_objects(),
            object_classes: default_classes(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.image_height < 64 || self.image_width < 64 {
            return bad("image sides must be at least 64 pixels");
        }
        if self.num_views == 0 {
            return bad("num_views must be >= 1");
        }
        if self.min_objects == 0
            || self.min_objects > self.max_objects
            || self.max_objects > MAX_OBJECTS
        {
            return bad("require 1 <= min_objects <= max_objects <= 100");
        }
        if self.object_classes.is_empty() {
            return bad("object_classes must not be empty");
        }
        Ok(())
    }
}

/// Packed RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf =
            image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer size matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        Ok(Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })
    }
}

/// Binary mask stored as a row-major bitset.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            words: vec![0; (width * height).div_ceil(64)],
        }
    }

    pub fn from_points(
        width: usize,
        height: usize,
        points: impl IntoIterator<Item = (usize, usize)>,
    ) -> Self {
        let mut m = Mask::new(width, height);
        for (x, y) in points {
            m.set(x, y, true);
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        let i = y * self.width + x;
        if on {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Set pixels as `(x, y)` in row-major order.
    pub fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.words.iter().enumerate().flat_map(move |(wi, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(wi * 64 + b)
            })
            .map(move |i| (i % w, i / w))
        })
    }

    /// Run lengths over the row-major pixel sequence, alternating unset/set
    /// and starting with unset (possibly a zero-length first run).
    pub fn to_rle(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for i in 0..self.width * self.height {
            let bit = self.words[i / 64] >> (i % 64) & 1 == 1;
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
        counts.push(run);
        counts
    }

    pub fn from_rle(
        width: usize,
        height: usize,
        counts: &[u32],
    ) -> std::result::Result<Self, String> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total != (width * height) as u64 {
            return Err(format!(
                "rle covers {total} pixels, expected {}",
                width * height
            ));
        }
        let mut m = Mask::new(width, height);
        let mut pos = 0usize;
        for (k, &c) in counts.iter().enumerate() {
            if k % 2 == 1 {
                for i in pos..pos + c as usize {
                    m.words[i / 64] |= 1 << (i % 64);
                }
            }
            pos += c as usize;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub object_id: usize,
    pub class_label: ObjectClass,
    /// Camera view the mask belongs to.
    pub view: usize,
    pub mask: Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaKind {
    MultiChoice,
    YesNo,
    Coordinate,
    Open,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaRecord {
    pub question: String,
    pub answer: String,
    pub answer_coords: Vec<Point>,
    pub question_coords: Vec<Point>,
    pub qa_kind: QaKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub images: Vec<Image>,
    pub detections: Vec<Detection>,
    pub qa: Vec<QaRecord>,
}

/// Coordinates are kept at two decimals so they survive the manifest.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Canonical "(x,y)" rendering used in question and answer text.
pub fn format_coord(p: Point) -> String {
    format!("({:.1},{:.1})", p.x, p.y)
}

fn centroid_of(mask: &Mask) -> Option<Point> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in mask.points() {
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    (n > 0).then(|| Point::new(sx / n as f64, sy / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Rect { cx: f64, cy: f64, w: f64, h: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
    Triangle { cx: f64, cy: f64, base: f64, h: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { cx, cy, w, h } => {
                x >= (cx - w / 2.0).floor()
                    && x < (cx + w / 2.0).floor()
                    && y >= (cy - h / 2.0).floor()
                    && y < (cy + h / 2.0).floor()
            }
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Triangle { cx, cy, base, h } => {
                let top = cy - h / 2.0;
                let bottom = cy + h / 2.0;
                if y < top || y > bottom {
                    return false;
                }
                let half = base / 2.0 * (y - top) / h;
                (x - cx).abs() <= half
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Rect { cx, cy, w, h } => {
                (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            }
            Shape::Circle { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Shape::Triangle { cx, cy, base, h } => {
                (cx - base / 2.0, cy - h / 2.0, cx + base / 2.0, cy + h / 2.0)
            }
        }
    }

    /// Every in-image pixel the shape covers, row-major.
    pub fn pixels(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let (x0, y0, x1, y1) = self.bounds();
        let xs = (x0.floor().max(0.0) as usize)..=((x1.ceil() as usize).min(width - 1));
        let ys = (y0.floor().max(0.0) as usize)..=((y1.ceil() as usize).min(height - 1));
        let mut out = Vec::new();
        for y in ys {
            for x in xs.clone() {
                if self.contains(x as f64, y as f64) {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// An object as drawn, before occlusion.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub class: ObjectClass,
    pub view: usize,
    pub color: usize,
    pub shape: Shape,
}

impl PlacedObject {
    pub fn color_name(&self) -> &'static str {
        PALETTE[self.color].0
    }

    fn describe(&self) -> String {
        format!("{} {}", self.color_name(), self.class.name())
    }
}

fn horizon(height: usize) -> usize {
    height * 2 / 5
}

fn draw_background(width: usize, height: usize) -> Image {
    let mut img = Image::filled(width, height, [0, 0, 0]);
    let hz = horizon(height);
    let vx = width as f64 / 2.0;
    for y in 0..height {
        for x in 0..width {
            let rgb = if y < hz {
                let t = y as f64 / hz as f64;
                [(120.0 + 60.0 * t) as u8, (170.0 + 40.0 * t) as u8, 230]
            } else {
                // road widens toward the bottom; grass outside it
                let t = (y - hz) as f64 / (height - hz) as f64;
                let half = width as f64 * (0.08 + 0.47 * t);
                if (x as f64 - vx).abs() > half {
                    [70, 120, 60]
                } else {
                    [88, 88, 92]
                }
            };
            img.set(x, y, rgb);
        }
    }
    // lane markings: solid edges and a dashed center line
    for y in hz..height {
        let t = (y - hz) as f64 / (height - hz) as f64;
        let half = width as f64 * (0.08 + 0.47 * t);
        let thick = 1.0 + 2.0 * t;
        for x in 0..width {
            let dx = x as f64 - vx;
            let edge = (dx.abs() - half * 0.92).abs() < thick;
            let center = dx.abs() < thick && (y / 12) % 2 == 0;
            if edge || center {
                img.set(x, y, [235, 235, 235]);
            }
        }
    }
    img
}

fn sample_shape<R: Rng>(rng: &mut R, class: ObjectClass, width: usize, height: usize) -> Shape {
    let s = width.min(height) as f64 / DEFAULT_IMAGE_SIZE as f64;
    let (w, h): (f64, f64) = match class {
        ObjectClass::Car => (rng.gen_range(40.0..80.0), rng.gen_range(25.0..45.0)),
        ObjectClass::Truck => (rng.gen_range(70.0..110.0), rng.gen_range(45.0..70.0)),
        ObjectClass::Bus => (rng.gen_range(100.0..140.0), rng.gen_range(40.0..60.0)),
        ObjectClass::Pedestrian => {
            let r: f64 = rng.gen_range(8.0..15.0);
            (2.0 * r, 2.0 * r)
        }
        ObjectClass::Cone => (rng.gen_range(16.0..30.0), rng.gen_range(20.0..35.0)),
        ObjectClass::Barrier => (rng.gen_range(50.0..90.0), rng.gen_range(8.0..14.0)),
    };
    let (w, h) = ((w * s).max(3.0), (h * s).max(3.0));
    let hz = horizon(height) as f64;
    let cx = rng.gen_range(w / 2.0 + 2.0..width as f64 - w / 2.0 - 2.0);
    let lo = (hz + h / 2.0).min(height as f64 - h / 2.0 - 3.0);
    let cy = rng.gen_range(lo..height as f64 - h / 2.0 - 2.0);
    match class {
        ObjectClass::Pedestrian => Shape::Circle { cx, cy, r: w / 2.0 },
        ObjectClass::Cone => Shape::Triangle { cx, cy, base: w, h },
        _ => Shape::Rect { cx, cy, w, h },
    }
}

fn scene_rng(config: &SceneConfig, scene_seed: u64) -> ChaCha8Rng {
    let mixed = config
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
        ^ scene_seed.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Renders objects over the backdrop and returns the images plus per-object
/// masks (post-occlusion). Objects whose mask ends up empty are dropped.
fn render_layout(
    config: &SceneConfig,
    objects: &[PlacedObject],
) -> (Vec<Image>, Vec<(usize, Mask)>) {
    let (w, h) = (config.image_width, config.image_height);
    let mut images: Vec<Image> = (0..config.num_views)
        .map(|_| draw_background(w, h))
        .collect();
    let mut owner: Vec<Vec<Option<usize>>> = vec![vec![None; w * h]; config.num_views];
    for (k, obj) in objects.iter().enumerate() {
        let rgb = PALETTE[obj.color].1;
        for (x, y) in obj.shape.pixels(w, h) {
            images[obj.view].set(x, y, rgb);
            owner[obj.view][y * w + x] = Some(k);
        }
    }
    let mut masks: Vec<Mask> = objects.iter().map(|_| Mask::new(w, h)).collect();
    for view_owner in &owner {
        for (i, o) in view_owner.iter().enumerate() {
            if let Some(k) = o {
                masks[*k].set(i % w, i / w, true);
            }
        }
    }
    let kept = masks
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .collect();
    (images, kept)
}

/// Object placement for a scene; exposed so tests can re-render objects
/// individually.
pub fn generate_layout(config: &SceneConfig, scene_seed: u64) -> Result<Vec<PlacedObject>> {
    config.validate()?;
    Ok(layout_and_render(config, scene_seed).0)
}

fn layout_and_render(
    config: &SceneConfig,
    scene_seed: u64,
) -> (
    Vec<PlacedObject>,
    Vec<Image>,
    Vec<(usize, Mask)>,
    ChaCha8Rng,
) {
    let mut rng = scene_rng(config, scene_seed);
    loop {
        let n = rng.gen_range(config.min_objects..=config.max_objects);
        let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
        colors.shuffle(&mut rng);
        let objects: Vec<PlacedObject> = (0..n)
            .map(|i| {
                let class = *config.object_classes.choose(&mut rng).unwrap();
                // the first object always lands in the front view so
                // coordinate questions have a referent there
                let view = if i == 0 {
                    0
                } else {
                    rng.gen_range(0..config.num_views)
                };
                let shape = sample_shape(&mut rng, class, config.image_width, config.image_height);
                PlacedObject {
                    class,
                    view,
                    color: colors[i % colors.len()],
                    shape,
                }
            })
            .collect();
        let (images, kept) = render_layout(config, &objects);
        let front_kept = kept.iter().any(|(k, _)| objects[*k].view == 0);
        if kept.len() >= config.min_objects && front_kept {
            let objects = kept.iter().map(|(k, _)| objects[*k].clone()).collect();
            let masks = kept
                .into_iter()
                .enumerate()
                .map(|(i, (_, m))| (i, m))
                .collect();
            return (objects, images, masks, rng);
        }
    }
}

/// Deterministically generates one scene from `(config, scene_seed)`.
pub fn generate_scene(config: &SceneConfig, scene_seed: u64) -> Result<Scene> {
    config.validate()?;
    let (objects, images, masks, mut rng) = layout_and_render(config, scene_seed);
    let detections: Vec<Detection> = masks
        .into_iter()
        .map(|(k, mask)| Detection {
            object_id: k,
            class_label: objects[k].class,
            view: objects[k].view,
            mask,
        })
        .collect();
    let qa = generate_qa(config, &objects, &detections, &mut rng);
    Ok(Scene {
        scene_id: format!("scene_{scene_seed:06}"),
        images,
        detections,
        qa,
    })
}

fn multi_choice<R: Rng>(
    rng: &mut R,
    stem: &str,
    pool: &[String],
    correct: usize,
) -> (String, String) {
    let mut wrong: Vec<usize> = (0..pool.len()).filter(|&i| i != correct).collect();
    wrong.shuffle(rng);
    let mut shown: Vec<usize> = wrong[..SHOWN_OPTIONS - 1].to_vec();
    shown.push(correct);
    shown.shuffle(rng);
    let mut q = stem.to_string();
    let mut answer = String::new();
    for (label, &opt) in OPTION_LABELS.iter().zip(&shown) {
        q.push_str(&format!(" {label}. {}.", pool[opt]));
        if opt == correct {
            answer = label.to_string();
        }
    }
    (q, answer)
}

fn moving_status(obj: &PlacedObject, centroid: Point, width: usize, height: usize) -> usize {
    if obj.class.is_static() {
        return 3;
    }
    let third = (centroid.x * 3.0 / width as f64).floor() as usize;
    let upper = centroid.y < horizon(height) as f64 + (height - horizon(height)) as f64 / 2.0;
    match (third.min(2), upper) {
        (0, true) => 5,
        (0, false) => 1,
        (1, true) => 0,
        (1, false) => 3,
        (_, true) => 6,
        (_, false) => 2,
    }
}

fn ego_behavior(front: &[(Point, &PlacedObject)], width: usize, height: usize) -> usize {
    let mean_x = front.iter().map(|(c, _)| c.x).sum::<f64>() / front.len() as f64;
    let steering = if mean_x < width as f64 * 0.4 {
        2
    } else if mean_x > width as f64 * 0.6 {
        1
    } else {
        0
    };
    let nearest = front.iter().map(|(c, _)| c.y).fold(0.0, f64::max);
    let depth = (nearest - horizon(height) as f64) / (height - horizon(height)) as f64;
    let speed = ((depth.clamp(0.0, 0.999)) * SPEED.len() as f64).floor() as usize;
    steering * SPEED.len() + speed
}

fn generate_qa<R: Rng>(
    config: &SceneConfig,
    objects: &[PlacedObject],
    detections: &[Detection],
    rng: &mut R,
) -> Vec<QaRecord> {
    let (w, h) = (config.image_width, config.image_height);
    let centroids: Vec<Point> = detections
        .iter()
        .map(|d| centroid_of(&d.mask).expect("nonempty mask"))
        .collect();
    let front: Vec<usize> = (0..objects.len())
        .filter(|&k| objects[k].view == 0)
        .collect();
    let mut qa = Vec::new();

    // coordinate: objects with a unique description
    let describe_count = |d: &str| objects.iter().filter(|o| o.describe() == d).count();
    let mut unique: Vec<usize> = front
        .iter()
        .copied()
        .filter(|&k| describe_count(&objects[k].describe()) == 1)
        .collect();
    if unique.is_empty() {
        unique.push(front[0]);
    }
    unique.shuffle(rng);
    for &k in unique.iter().take(2) {
        let c = Point::new(round2(centroids[k].x), round2(centroids[k].y));
        let d = objects[k].describe();
        qa.push(QaRecord {
            question: format!("Where is the {d}?"),
            answer: format!("The {d} is at {}.", format_coord(c)),
            answer_coords: vec![c],
            question_coords: vec![],
            qa_kind: QaKind::Coordinate,
        });
    }

    // yes/no on existence of a described object
    let present = rng.gen_bool(0.5);
    let (d, ans) = if present {
        (objects[*front.choose(rng).unwrap()].describe(), "yes")
    } else {
        let absent: Vec<String> = PALETTE
            .iter()
            .flat_map(|(c, _)| {
                config
                    .object_classes
                    .iter()
                    .map(move |cl| format!("{c} {}", cl.name()))
            })
            .filter(|d| describe_count(d) == 0)
            .collect();
        match absent.choose(rng) {
            Some(d) => (d.clone(), "no"),
            None => (objects[front[0]].describe(), "yes"),
        }
    };
    qa.push(QaRecord {
        question: format!("Is there a {d}?"),
        answer: ans.to_string(),
        answer_coords: vec![],
        question_coords: vec![],
        qa_kind: QaKind::YesNo,
    });

    // yes/no about a referenced location, either on an object or far away
    let near = rng.gen_bool(0.5);
    let p = if near {
        let c = centroids[*front.choose(rng).unwrap()];
        let jx = rng.gen_range(-6i32..=6) as f64;
        let jy = rng.gen_range(-6i32..=6) as f64;
        Point::new(
            (c.x.round() + jx).clamp(0.0, (w - 1) as f64),
            (c.y.round() + jy).clamp(0.0, (h - 1) as f64),
        )
    } else {
        let mut far = None;
        for _ in 0..200 {
            let cand = Point::new(rng.gen_range(0..w) as f64, rng.gen_range(0..h) as f64);
            if front.iter().all(|&k| centroids[k].dist(&cand) > 60.0) {
                far = Some(cand);
                break;
            }
        }
        far.unwrap_or(Point::new(0.0, 0.0))
    };
    let hit = detections
        .iter()
        .any(|d| d.view == 0 && d.mask.get(p.x as usize, p.y as usize));
    qa.push(QaRecord {
        question: format!("Is there an object at {}?", format_coord(p)),
        answer: if hit { "yes" } else { "no" }.to_string(),
        answer_coords: vec![],
        question_coords: vec![p],
        qa_kind: QaKind::YesNo,
    });

    // multiple choice: moving status of an object
    let k = *front.choose(rng).unwrap();
    let pool: Vec<String> = MOVING_STATUS_OPTIONS
        .iter()
        .map(|s| s.to_string())
        .collect();
    let correct = moving_status(&objects[k], centroids[k], w, h);
    let (question, answer) = multi_choice(
        rng,
        &format!(
            "What is the moving status of the {}?",
            objects[k].describe()
        ),
        &pool,
        correct,
    );
    qa.push(QaRecord {
        question,
        answer,
        answer_coords: vec![],
        question_coords: vec![],
        qa_kind: QaKind::MultiChoice,
    });

    // multiple choice: ego behavior
    let front_pts: Vec<(Point, &PlacedObject)> =
        front.iter().map(|&k| (centroids[k], &objects[k])).collect();
    let correct = ego_behavior(&front_pts, w, h);
    let (question, answer) = multi_choice(
        rng,
        "Predict the behavior of the ego vehicle.",
        &behavior_options(),
        correct,
    );
    qa.push(QaRecord {
        question,
        answer,
        answer_coords: vec![],
        question_coords: vec![],
        qa_kind: QaKind::MultiChoice,
    });

    // open description
    let n = detections.len();
    let largest = (0..n)
        .max_by_key(|&k| (detections[k].mask.count(), usize::MAX - k))
        .unwrap();
    let count = if n == 1 {
        "There is 1 object.".to_string()
    } else {
        format!("There are {n} objects.")
    };
    qa.push(QaRecord {
        question: "Describe the scene.".to_string(),
        answer: format!("{count} The largest is a {}.", objects[largest].describe()),
        answer_coords: vec![],
        question_coords: vec![],
        qa_kind: QaKind::Open,
    });
    qa
}

/// Every word the QA templates can produce, for vocabulary construction.
pub fn template_words() -> Vec<String> {
    let fixed = "Where is the at Is there a an object objects What moving status of Predict behavior ego vehicle \
                 Describe scene There are The largest yes no A B C D and"
        .split_whitespace();
    let mut words: Vec<String> = fixed.map(str::to_string).collect();
    let option_text: Vec<String> = MOVING_STATUS_OPTIONS
        .iter()
        .map(|s| s.to_string())
        .chain(behavior_options())
        .collect();
    for opt in &option_text {
        words.extend(opt.split_whitespace().map(str::to_string));
    }
    words.extend(PALETTE.iter().map(|(c, _)| c.to_string()));
    words.extend(ObjectClass::ALL.iter().map(|c| c.name().to_string()));
    let mut seen = HashSet::new();
    words.retain(|w| seen.insert(w.clone()));
    words
}

impl Scene {
    pub fn width(&self) -> usize {
        self.images[0].width
    }

    pub fn height(&self) -> usize {
        self.images[0].height
    }

    /// Re-checks every scene invariant.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Validation {
            record: self.scene_id.clone(),
            reason,
        };
        if self.images.is_empty() {
            return Err(fail("no images".into()));
        }
        let (w, h) = (self.width(), self.height());
        if self
            .images
            .iter()
            .any(|im| im.width != w || im.height != h || im.data.len() != w * h * 3)
        {
            return Err(fail("views differ in size".into()));
        }
        if self.detections.len() > MAX_OBJECTS {
            return Err(fail(format!(
                "{} detections exceed the cap",
                self.detections.len()
            )));
        }
        let mut seen = HashSet::new();
        for d in &self.detections {
            if d.mask.width() != w || d.mask.height() != h {
                return Err(fail(format!(
                    "mask of object {} has wrong size",
                    d.object_id
                )));
            }
            if d.mask.is_empty() {
                return Err(fail(format!("mask of object {} is empty", d.object_id)));
            }
            if d.view >= self.images.len() {
                return Err(fail(format!(
                    "object {} refers to missing view {}",
                    d.object_id, d.view
                )));
            }
            if !seen.insert(&d.mask) {
                return Err(fail(format!(
                    "mask of object {} duplicates another",
                    d.object_id
                )));
            }
        }
        let centroids: Vec<Point> = self
            .detections
            .iter()
            .filter(|d| d.view == 0)
            .map(|d| centroid_of(&d.mask).unwrap())
            .collect();
        for q in &self.qa {
            for p in q.answer_coords.iter().chain(&q.question_coords) {
                if !(p.x >= 0.0 && p.x < w as f64 && p.y >= 0.0 && p.y < h as f64) {
                    return Err(fail(format!("coordinate ({}, {}) out of bounds", p.x, p.y)));
                }
            }
            match q.qa_kind {
                QaKind::YesNo if q.answer != "yes" && q.answer != "no" => {
                    return Err(fail(format!("yes/no answer {:?}", q.answer)));
                }
                QaKind::MultiChoice => {
                    let listed = OPTION_LABELS
                        .iter()
                        .any(|l| q.answer == *l && q.question.contains(&format!(" {l}. ")));
                    if !listed {
                        return Err(fail(format!(
                            "answer {:?} is not a listed option",
                            q.answer
                        )));
                    }
                }
                QaKind::Coordinate => {
                    if q.answer_coords.is_empty() {
                        return Err(fail("coordinate answer without coordinates".into()));
                    }
                    for p in &q.answer_coords {
                        let ok = centroids.iter().any(|c| {
                            (c.x - p.x).abs() <= 0.005 + 1e-9 && (c.y - p.y).abs() <= 0.005 + 1e-9
                        });
                        if !ok {
                            return Err(fail(format!(
                                "answer coordinate ({}, {}) names no object",
                                p.x, p.y
                            )));
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// persistence

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskRecord {
    height: usize,
    width: usize,
    counts: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    object_id: usize,
    class_label: ObjectClass,
    view: usize,
    mask: MaskRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QaEntry {
    question: String,
    answer: String,
    #[serde(serialize_with = "ser_points")]
    answer_coords: Vec<Point>,
    #[serde(serialize_with = "ser_points")]
    question_coords: Vec<Point>,
    qa_kind: QaKind,
}

fn ser_points<S: serde::Serializer>(pts: &[Point], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(pts.len()))?;
    for p in pts {
        seq.serialize_element(&Point::new(round2(p.x), round2(p.y)))?;
    }
    seq.end()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    scene_id: String,
    images: Vec<String>,
    detections: Vec<DetectionRecord>,
    qa: Vec<QaEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Summary returned by [`save_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub scenes: usize,
    pub qa_records: usize,
}

pub fn save_dataset(scenes: &[Scene], dir: &Path) -> Result<DatasetManifest> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = BufWriter::new(file);
    let mut qa_records = 0;
    for scene in scenes {
        let mut images = Vec::new();
        for (v, img) in scene.images.iter().enumerate() {
            let rel = format!("images/{}_{v}.png", scene.scene_id);
            img.save_png(&dir.join(&rel))?;
            images.push(rel);
        }
        let record = ManifestRecord {
            scene_id: scene.scene_id.clone(),
            images,
            detections: scene
                .detections
                .iter()
                .map(|d| DetectionRecord {
                    object_id: d.object_id,
                    class_label: d.class_label,
                    view: d.view,
                    mask: MaskRecord {
                        height: d.mask.height(),
                        width: d.mask.width(),
                        counts: d.mask.to_rle(),
                    },
                })
                .collect(),
            qa: scene
                .qa
                .iter()
                .map(|q| QaEntry {
                    question: q.question.clone(),
                    answer: q.answer.clone(),
                    answer_coords: q.answer_coords.clone(),
                    question_coords: q.question_coords.clone(),
                    qa_kind: q.qa_kind,
                })
                .collect(),
        };
        qa_records += scene.qa.len();
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io(&manifest_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(DatasetManifest {
        path: manifest_path,
        scenes: scenes.len(),
        qa_records,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::Validation {
            record: MANIFEST_FILE.to_string(),
            reason: format!("no manifest in {}", dir.display()),
        });
    }
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut scenes = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = format!("{MANIFEST_FILE}:{}", lineno + 1);
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::Validation {
                record: at.clone(),
                reason: e.to_string(),
            })?;
        let images = record
            .images
            .iter()
            .map(|rel| Image::load_png(&dir.join(rel)))
            .collect::<Result<Vec<_>>>()?;
        let detections = record
            .detections
            .into_iter()
            .map(|d| {
                let mask = Mask::from_rle(d.mask.width, d.mask.height, &d.mask.counts).map_err(
                    |reason| Error::Validation {
                        record: format!("{} object {}", record.scene_id, d.object_id),
                        reason,
                    },
                )?;
                Ok(Detection {
                    object_id: d.object_id,
                    class_label: d.class_label,
                    view: d.view,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let qa = record
            .qa
            .into_iter()
            .map(|q| QaRecord {
                question: q.question,
                answer: q.answer,
                answer_coords: q.answer_coords,
                question_coords: q.question_coords,
                qa_kind: q.qa_kind,
            })
            .collect();
        let scene = Scene {
            scene_id: record.scene_id,
            images,
            detections,
            qa,
        };
        scene.validate()?;
        scenes.push(scene);
    }
    if scenes.is_empty() {
        return Err(Error::Validation {
            record: MANIFEST_FILE.to_string(),
            reason: "manifest holds no scenes".into(),
        });
    }
    Ok(scenes)
}

/// Deterministic train/validation split: every fifth scene is held out.
pub fn is_validation_scene(index: usize) -> bool {
    index % 5 == 4
}
