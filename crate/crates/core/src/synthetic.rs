//! Synthetic weakly-labelled shape images with pixel ground truth.
//!
//! Each image holds 1 to 3 non-overlapping shapes from distinct classes on a
//! smoothly varying noisy background. Classes differ by outline (disk,
//! square, triangle, ring, diamond, cross) and, unless `shared_color` is set,
//! by colour. With `discriminative_part` every shape carries a small bright
//! patch at a class-specific offset, so a classifier can succeed by looking
//! at the patch alone.
//!
//! Pixel values are quantised to multiples of 1/255 so that a dataset saved
//! to disk reloads bit-for-bit.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cam::{SeedLabel, SeedMap};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Disk,
        Shape::Square,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Ring,
        Shape::Cross,
    ];

    /// Whether offset `(dy, dx)` from the centre lies inside a shape of
    /// radius `r`.
    pub fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Shape::Disk => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= 0.8 * r && dx.abs() <= 0.8 * r,
            Shape::Triangle => {
                // apex up, base at dy = 0.8 r
                let t = (dy + r) / (1.8 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            Shape::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            Shape::Diamond => dy.abs() + dx.abs() <= r,
            Shape::Cross => {
                let arm = 0.35 * r;
                (dy.abs() <= r && dx.abs() <= arm) || (dx.abs() <= r && dy.abs() <= arm)
            }
        }
    }
}

const CLASS_COLORS: [[f64; 3]; 6] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.75, 0.3],
    [0.25, 0.35, 0.9],
    [0.9, 0.8, 0.2],
    [0.75, 0.3, 0.8],
    [0.2, 0.8, 0.85],
];
const SHARED_COLOR: [f64; 3] = [0.8, 0.8, 0.8];
const PART_COLOR: [f64; 3] = [1.0, 1.0, 1.0];
const BACKGROUND_LEVEL: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub noise_std: f64,
    /// Amplitude of the low-frequency background pattern.
    pub texture: f64,
    pub shared_color: bool,
    pub discriminative_part: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 4,
            min_objects: 1,
            max_objects: 3,
            min_radius: 12.0,
            max_radius: 20.0,
            noise_std: 0.04,
            texture: 0.08,
            shared_color: false,
            discriminative_part: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: format!("dataset.{key}"),
                message,
            })
        };
        if self.num_classes == 0 || self.num_classes > Shape::ALL.len() {
            return bad("num_classes", format!("must be in 1..={}", Shape::ALL.len()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("min_objects", "need 1 <= min_objects <= max_objects".into());
        }
        if self.max_objects > self.num_classes {
            return bad(
                "max_objects",
                format!("objects have distinct classes, so at most {}", self.num_classes),
            );
        }
        if !(self.min_radius >= 2.0 && self.min_radius <= self.max_radius) {
            return bad("min_radius", "need 2 <= min_radius <= max_radius".into());
        }
        if 2.0 * self.max_radius + 2.0 > self.image_size as f64 {
            return bad(
                "max_radius",
                format!("a shape of radius {} does not fit a {}px canvas", self.max_radius, self.image_size),
            );
        }
        let min_area = self.min_radius * self.min_radius;
        if min_area < 0.01 * (self.image_size * self.image_size) as f64 {
            return bad("min_radius", "smallest shapes would cover under 1% of the image".into());
        }
        if !(self.noise_std >= 0.0 && self.texture >= 0.0) {
            return bad("noise_std", "noise and texture must be nonnegative".into());
        }
        let contrast = if self.shared_color {
            SHARED_COLOR[0] - BACKGROUND_LEVEL
        } else {
            CLASS_COLORS
                .iter()
                .map(|c| c.iter().map(|v| (v - BACKGROUND_LEVEL).abs()).fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min)
        };
        if self.noise_std + self.texture >= contrast {
            return bad("noise_std", "noise plus texture must stay below the object contrast".into());
        }
        Ok(())
    }

    pub fn shape_of(&self, class: usize) -> Shape {
        Shape::ALL[class]
    }
}

/// Per-pixel labels: 0 background, `c + 1` for class `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl GroundTruthMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "GroundTruthMask",
                format!("{} labels for {height}x{width}", labels.len()),
            ));
        }
        if labels.contains(&SeedLabel::IGNORE_BYTE) {
            return Err(Error::Format("ground truth cannot contain the ignore label".into()));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_at(&self, p: usize) -> Option<usize> {
        match self.labels[p] {
            0 => None,
            c => Some(c as usize - 1),
        }
    }

    pub fn class_pixels(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == class + 1).count()
    }

    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen: Vec<usize> = self.labels.iter().filter(|&&l| l > 0).map(|&l| l as usize - 1).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Multi-hot over the foreground classes.
    pub image_labels: Vec<f64>,
    pub gt_mask: GroundTruthMask,
    pub gen_seed: u64,
}

impl SyntheticSample {
    pub fn present_classes(&self) -> Vec<usize> {
        self.image_labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn label_tensor(&self) -> Tensor {
        Tensor::new(&[self.image_labels.len()], self.image_labels.clone()).expect("nonempty labels")
    }
}

struct Placed {
    class: usize,
    cy: f64,
    cx: f64,
    radius: f64,
}

const PLACEMENT_ATTEMPTS: usize = 200;
const LAYOUT_ATTEMPTS: usize = 50;
/// Minimum clearance in pixels between the bounding circles of two objects.
const OBJECT_GAP: f64 = 2.0;

/// Non-overlapping centres and radii, restarting the whole layout when an
/// object cannot be fitted next to the ones already placed.
fn place_objects(config: &GeneratorConfig, classes: &[usize], rng: &mut impl Rng) -> Option<Vec<Placed>> {
    let size = config.image_size as f64;
    'layout: for _ in 0..LAYOUT_ATTEMPTS {
        let mut placed: Vec<Placed> = Vec::with_capacity(classes.len());
        for &class in classes {
            let fitted = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
                let radius = rng.random_range(config.min_radius..=config.max_radius);
                let cy = rng.random_range(radius + 1.0..=size - radius - 1.0);
                let cx = rng.random_range(radius + 1.0..=size - radius - 1.0);
                placed
                    .iter()
                    .all(|o| ((o.cy - cy).powi(2) + (o.cx - cx).powi(2)).sqrt() > o.radius + radius + OBJECT_GAP)
                    .then_some(Placed { class, cy, cx, radius })
            });
            match fitted {
                Some(p) => placed.push(p),
                None => continue 'layout,
            }
        }
        return Some(placed);
    }
    None
}

/// `n` samples; sample `i` is drawn from its own seed derived from
/// `(seed, i)`, so any subset can be regenerated independently.
pub fn generate(config: &GeneratorConfig, n: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    generate_split(config, n, seed, seed::Stream::TrainData)
}

/// Like [`generate`], drawing sample seeds from `stream` so that training
/// and held-out sets never share a sample.
pub fn generate_split(
    config: &GeneratorConfig,
    n: usize,
    seed: u64,
    stream: seed::Stream,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::invalid("cannot generate an empty dataset"));
    }
    config.validate()?;
    (0..n)
        .map(|i| generate_one(config, seed::derive_indexed(seed, stream, i as u64)))
        .collect()
}

pub fn generate_one(config: &GeneratorConfig, gen_seed: u64) -> Result<SyntheticSample> {
    config.validate()?;
    let mut rng = seed::rng(gen_seed);
    let size = config.image_size;
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let classes = index::sample(&mut rng, config.num_classes, count).into_vec();

    let placed = place_objects(config, &classes, &mut rng).ok_or_else(|| Error::Config {
        key: "dataset.max_radius".into(),
        message: format!("could not place {count} shapes without overlap on a {size}px canvas"),
    })?;

    let mut labels = vec![0u8; size * size];
    let mut part = vec![false; size * size];
    for o in &placed {
        let shape = config.shape_of(o.class);
        // class-specific direction for the discriminative patch
        let angle = std::f64::consts::TAU * o.class as f64 / config.num_classes as f64;
        let (py, px) = (o.cy + 0.4 * o.radius * angle.sin(), o.cx + 0.4 * o.radius * angle.cos());
        let pr = (0.3 * o.radius).max(1.5);
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                if shape.contains(fy - o.cy, fx - o.cx, o.radius) {
                    labels[y * size + x] = o.class as u8 + 1;
                    if config.discriminative_part && (fy - py).powi(2) + (fx - px).powi(2) <= pr * pr {
                        part[y * size + x] = true;
                    }
                }
            }
        }
    }
    for o in &placed {
        let covered = labels.iter().filter(|&&l| l as usize == o.class + 1).count();
        if covered * 100 < size * size {
            return Err(Error::Config {
                key: "dataset.min_radius".into(),
                message: format!("class {} covers only {covered} pixels", o.class),
            });
        }
    }

    let noise = Normal::new(0.0, config.noise_std.max(1e-12)).expect("finite std");
    let (fy, fx, phase) = (
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let mut image = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let base = match (labels[p], part[p]) {
                (_, true) => PART_COLOR,
                (0, _) => {
                    let t = BACKGROUND_LEVEL
                        + config.texture
                            * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / size as f64 + phase).sin();
                    [t, t, t]
                }
                (_, _) if config.shared_color => SHARED_COLOR,
                (l, _) => CLASS_COLORS[l as usize - 1],
            };
            for ch in 0..3 {
                let v = (base[ch] + noise.sample(&mut rng)).clamp(0.0, 1.0);
                image[ch * size * size + p] = (v * 255.0).round() / 255.0;
            }
        }
    }

    let mut image_labels = vec![0.0; config.num_classes];
    for o in &placed {
        image_labels[o.class] = 1.0;
    }
    Ok(SyntheticSample {
        image: Tensor::new(&[3, size, size], image)?,
        image_labels,
        gt_mask: GroundTruthMask::new(size, size, labels)?,
        gen_seed,
    })
}

/// Pixel counts for one class, summable across images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision_defined(&self) -> bool {
        self.tp + self.fp > 0
    }

    /// 0 when no pixel was predicted; see [`Self::precision_defined`].
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedScores {
    pub per_class: Vec<ConfusionCounts>,
    /// All foreground classes pooled: a labelled pixel is a hit only when
    /// its class matches the ground truth.
    pub foreground: ConfusionCounts,
    /// Fraction of pixels carrying a class label.
    pub foreground_area: f64,
    pub pixels: u64,
}

impl SeedScores {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            per_class: vec![ConfusionCounts::default(); num_classes],
            foreground: ConfusionCounts::default(),
            foreground_area: 0.0,
            pixels: 0,
        }
    }

    /// Pool counts (and pixel-weighted area) of another image.
    pub fn add(&mut self, other: &SeedScores) {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.add(b);
        }
        self.foreground.add(&other.foreground);
        let total = self.pixels + other.pixels;
        if total > 0 {
            self.foreground_area = (self.foreground_area * self.pixels as f64
                + other.foreground_area * other.pixels as f64)
                / total as f64;
        }
        self.pixels = total;
    }

    /// Mean over classes that occur in the ground truth or the prediction.
    pub fn mean_iou(&self) -> f64 {
        let active: Vec<&ConfusionCounts> = self
            .per_class
            .iter()
            .filter(|c| c.tp + c.fp + c.fn_ > 0)
            .collect();
        if active.is_empty() {
            return 0.0;
        }
        active.iter().map(|c| c.iou()).sum::<f64>() / active.len() as f64
    }
}

/// Compare a seed map with ground truth after nearest-neighbour upsampling
/// of the seed map to the mask resolution. Ignore pixels are never counted
/// as predictions; background predictions are treated as "no class".
pub fn score_seeds(seed_map: &SeedMap, gt: &GroundTruthMask, num_classes: usize) -> Result<SeedScores> {
    let seeds = if seed_map.height() == gt.height() && seed_map.width() == gt.width() {
        seed_map.clone()
    } else {
        if gt.height() % seed_map.height() != 0 || gt.height() / seed_map.height() * seed_map.width() != gt.width() {
            return Err(Error::shape(
                "score_seeds",
                format!(
                    "{}x{} seeds cannot be upsampled to {}x{} ground truth",
                    seed_map.height(),
                    seed_map.width(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        seed_map.upsample(gt.height() / seed_map.height())?
    };
    let mut scores = SeedScores::empty(num_classes);
    let mut labelled = 0u64;
    for (p, label) in seeds.labels().iter().enumerate() {
        let truth = gt.class_at(p);
        let pred = label.class();
        if let Some(c) = truth.filter(|&c| c >= num_classes).or(pred.filter(|&c| c >= num_classes)) {
            return Err(Error::invalid(format!("class {c} outside {num_classes} classes")));
        }
        if pred.is_some() {
            labelled += 1;
        }
        match (pred, truth) {
            (Some(a), Some(b)) if a == b => {
                scores.per_class[a].tp += 1;
                scores.foreground.tp += 1;
            }
            (Some(a), t) => {
                scores.per_class[a].fp += 1;
                scores.foreground.fp += 1;
                if let Some(b) = t {
                    scores.per_class[b].fn_ += 1;
                    scores.foreground.fn_ += 1;
                }
            }
            (None, Some(b)) => {
                scores.per_class[b].fn_ += 1;
                scores.foreground.fn_ += 1;
            }
            (None, None) => {}
        }
    }
    scores.pixels = seeds.labels().len() as u64;
    scores.foreground_area = labelled as f64 / scores.pixels as f64;
    Ok(scores)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    labels: String,
    gen_seed: u64,
}

/// Write `images/<id>.ppm`, `masks/<id>.pgm` and `manifest.csv`.
pub fn save_dataset(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:05}");
        let [_, h, w] = s.image.dims3("image")?;
        let d = s.image.data();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            Rgb([0, 1, 2].map(|ch| (d[ch * h * w + p] * 255.0).round() as u8))
        });
        img.save(dir.join("images").join(format!("{id}.ppm")))?;
        write_index_pgm(&dir.join("masks").join(format!("{id}.pgm")), w, h, s.gt_mask.labels())?;
        manifest.serialize(ManifestRow {
            id,
            labels: s.present_classes().iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
            gen_seed: s.gen_seed,
        })?;
    }
    manifest.flush()?;
    Ok(())
}

pub(crate) fn write_index_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, bytes.to_vec())
        .ok_or_else(|| Error::Format("index image size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn load_dataset(dir: &Path, num_classes: usize) -> Result<Vec<SyntheticSample>> {
    let mut reader = csv::Reader::from_path(dir.join("manifest.csv"))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: ManifestRow = row?;
        let img = image::open(dir.join("images").join(format!("{}.ppm", row.id)))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            let p = y as usize * w + x as usize;
            for ch in 0..3 {
                data[ch * h * w + p] = px[ch] as f64 / 255.0;
            }
        }
        let mask = image::open(dir.join("masks").join(format!("{}.pgm", row.id)))?.to_luma8();
        let labels: Vec<u8> = mask.pixels().map(|Luma([v])| *v).collect();
        let mut image_labels = vec![0.0; num_classes];
        for part in row.labels.split(';').filter(|s| !s.is_empty()) {
            let c: usize = part
                .parse()
                .map_err(|_| Error::Format(format!("bad label `{part}` for {}", row.id)))?;
            if c >= num_classes {
                return Err(Error::Format(format!("label {c} outside {num_classes} classes")));
            }
            image_labels[c] = 1.0;
        }
        out.push(SyntheticSample {
            image: Tensor::new(&[3, h, w], data)?,
            image_labels,
            gt_mask: GroundTruthMask::new(mask.height() as usize, mask.width() as usize, labels)?,
            gen_seed: row.gen_seed,
        });
    }
    Ok(out)
}
