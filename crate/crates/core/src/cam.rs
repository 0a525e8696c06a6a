//! Localization maps from stochastic passes and their aggregation into
//! seed labels.
//!
//! Each pass draws its own masks (seed `base_seed + i`), scores the image,
//! and for every present class takes the Grad-CAM map of that class score
//! with respect to the feature map *before* expansion, differentiating
//! through the masks that pass actually used. Maps are max-normalised so a
//! single threshold applies across images and classes.
//!
//! Aggregation labels a pixel with class `c` when any pass's map for `c`
//! exceeds `theta` there. A pixel claimed by several classes goes to the
//! class with the highest mean map value (lowest class index on exact
//! ties). Unclaimed pixels are background when every present class's mean
//! map is below the background threshold, otherwise ignore.

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fickle::{forward_with_mode, ClassifierHead, SelectionMode};
use crate::tensor::Tensor;

/// Per-class spatial activation from one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationMap {
    pub class_id: usize,
    /// `[h, w]`, nonnegative.
    pub scores: Tensor,
    pub pass_seed: u64,
    pub normalized: bool,
}

impl LocalizationMap {
    pub fn height(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn is_zero(&self) -> bool {
        self.scores.data().iter().all(|&v| v == 0.0)
    }
}

/// `ReLU(sum_k x_k * dS/dx_k)` for the scalar `score` recorded on `tape`,
/// where `x` is a `[k, h, w]` value on the same tape.
pub fn grad_cam(tape: &Tape, x: Var, score: Var, class_id: usize, pass_seed: u64) -> Result<LocalizationMap> {
    let [k, h, w] = tape.value(x).dims3("grad_cam features")?;
    let grads = tape.backward(score)?;
    let g = grads.get(x).ok_or_else(|| {
        Error::MissingGradient("feature map (was it registered as a constant?)".into())
    })?;
    let xv = tape.value(x).data();
    let mut cam = vec![0.0; h * w];
    for ch in 0..k {
        let plane = ch * h * w..(ch + 1) * h * w;
        for ((c, &xi), &gi) in cam.iter_mut().zip(&xv[plane.clone()]).zip(&g.data()[plane]) {
            *c += xi * gi;
        }
    }
    for c in &mut cam {
        *c = c.max(0.0);
    }
    Ok(LocalizationMap {
        class_id,
        scores: Tensor::new(&[h, w], cam)?,
        pass_seed,
        normalized: false,
    })
}

/// Divide by the maximum; an all-zero map is returned unchanged.
pub fn normalize_map(mut map: LocalizationMap) -> LocalizationMap {
    let max = map.scores.max();
    if max > 0.0 {
        for v in map.scores.data_mut() {
            *v /= max;
        }
    }
    map.normalized = true;
    map
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SeedLabel {
    Class(u8),
    Background,
    Ignore,
}

impl SeedLabel {
    pub const BACKGROUND_BYTE: u8 = 0;
    pub const IGNORE_BYTE: u8 = 255;

    /// Index-image encoding: background 0, class `c` as `c + 1`, ignore 255.
    pub fn to_byte(self) -> u8 {
        match self {
            SeedLabel::Background => Self::BACKGROUND_BYTE,
            SeedLabel::Class(c) => c + 1,
            SeedLabel::Ignore => Self::IGNORE_BYTE,
        }
    }

    pub fn from_byte(b: u8) -> Self {
        match b {
            Self::BACKGROUND_BYTE => SeedLabel::Background,
            Self::IGNORE_BYTE => SeedLabel::Ignore,
            c => SeedLabel::Class(c - 1),
        }
    }

    pub fn class(self) -> Option<usize> {
        match self {
            SeedLabel::Class(c) => Some(c as usize),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedMap {
    height: usize,
    width: usize,
    labels: Vec<SeedLabel>,
    pub theta: f64,
    pub n_passes: usize,
}

impl SeedMap {
    pub fn new(height: usize, width: usize, labels: Vec<SeedLabel>, theta: f64, n_passes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "SeedMap",
                format!("{} labels for a {height}x{width} map", labels.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            labels,
            theta,
            n_passes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[SeedLabel] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> SeedLabel {
        self.labels[row * self.width + col]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.to_byte()).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|l| l.class().is_some()).count()
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> Result<SeedMap> {
        if factor == 0 {
            return Err(Error::invalid("upsampling factor must be positive"));
        }
        let (h, w) = (self.height * factor, self.width * factor);
        let labels = (0..h * w)
            .map(|p| self.get(p / w / factor, (p % w) / factor))
            .collect();
        SeedMap::new(h, w, labels, self.theta, self.n_passes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    /// Foreground threshold on normalised maps.
    pub theta: f64,
    /// Mean-map level below which an unclaimed pixel counts as background;
    /// `None` leaves every unclaimed pixel as ignore.
    pub background: Option<f64>,
}

impl Thresholds {
    pub fn foreground_only(theta: f64) -> Self {
        Self {
            theta,
            background: None,
        }
    }
}

struct ClassStats {
    class: usize,
    max: Vec<f64>,
    mean: Vec<f64>,
    count: usize,
}

fn class_stats(maps: &[LocalizationMap], present: &[usize]) -> Result<(usize, usize, Vec<ClassStats>)> {
    let first = maps.first().ok_or_else(|| Error::invalid("no localization maps to aggregate"))?;
    let (h, w) = (first.height(), first.width());
    let mut stats: Vec<ClassStats> = present
        .iter()
        .map(|&class| ClassStats {
            class,
            max: vec![0.0; h * w],
            mean: vec![0.0; h * w],
            count: 0,
        })
        .collect();
    for m in maps {
        if m.scores.shape() != [h, w] {
            return Err(Error::shape(
                "aggregate",
                format!("map of shape {:?} among {h}x{w} maps", m.scores.shape()),
            ));
        }
        if !m.normalized {
            return Err(Error::invalid("aggregate expects normalized maps"));
        }
        let Some(s) = stats.iter_mut().find(|s| s.class == m.class_id) else {
            continue;
        };
        for ((mx, mean), &v) in s.max.iter_mut().zip(&mut s.mean).zip(m.scores.data()) {
            *mx = mx.max(v);
            *mean += v;
        }
        s.count += 1;
    }
    for s in &mut stats {
        if s.count == 0 {
            return Err(Error::invalid(format!("no maps for present class {}", s.class)));
        }
        for v in &mut s.mean {
            *v /= s.count as f64;
        }
    }
    Ok((h, w, stats))
}

/// Combine `N x |present|` normalised maps into one seed map.
pub fn aggregate(maps: &[LocalizationMap], present_classes: &[usize], thresholds: Thresholds) -> Result<SeedMap> {
    let mut present = present_classes.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.is_empty() {
        let first = maps.first().ok_or_else(|| Error::invalid("no localization maps to aggregate"))?;
        let (h, w) = (first.height(), first.width());
        let fill = if thresholds.background.is_some() {
            SeedLabel::Background
        } else {
            SeedLabel::Ignore
        };
        return SeedMap::new(h, w, vec![fill; h * w], thresholds.theta, 0);
    }
    let (h, w, stats) = class_stats(maps, &present)?;
    let n_passes = stats.iter().map(|s| s.count).max().unwrap_or(0);
    let labels = (0..h * w)
        .map(|p| {
            let mut winner: Option<&ClassStats> = None;
            for s in stats.iter().filter(|s| s.max[p] > thresholds.theta) {
                // strict comparison keeps the lowest class index on ties
                if winner.is_none_or(|best| s.mean[p] > best.mean[p]) {
                    winner = Some(s);
                }
            }
            match (winner, thresholds.background) {
                (Some(s), _) => SeedLabel::Class(s.class as u8),
                (None, Some(bg)) if stats.iter().all(|s| s.mean[p] < bg) => SeedLabel::Background,
                (None, _) => SeedLabel::Ignore,
            }
        })
        .collect();
    SeedMap::new(h, w, labels, thresholds.theta, n_passes)
}

/// Pixels some present class claims (`max_i M_c[i] > theta`), before
/// conflicts between classes are resolved.
pub fn claimed_pixels(maps: &[LocalizationMap], present_classes: &[usize], theta: f64) -> Result<Vec<bool>> {
    let (_, _, stats) = class_stats(maps, present_classes)?;
    let n = stats.first().map_or(0, |s| s.max.len());
    Ok((0..n).map(|p| stats.iter().any(|s| s.max[p] > theta)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceParams {
    pub mode: SelectionMode,
    pub rate: f64,
    pub rescale: bool,
    pub n_passes: usize,
    pub thresholds: Thresholds,
}

#[derive(Clone, Debug)]
pub struct InferenceOutput {
    pub seed_map: SeedMap,
    /// Normalised maps, pass-major, classes in `present` order within a pass.
    pub maps: Vec<LocalizationMap>,
}

/// One pass: forward under the selection mode, then a Grad-CAM map per
/// present class, all from a single tape.
pub fn inference_pass(
    features: &Tensor,
    head: &ClassifierHead,
    params: &InferenceParams,
    present: &[usize],
    pass_seed: u64,
) -> Result<Vec<LocalizationMap>> {
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let hv = head.register(&mut tape, false);
    let out = forward_with_mode(&mut tape, x, &hv, params.mode, params.rate, params.rescale, pass_seed)?;
    present
        .iter()
        .map(|&c| {
            let score = tape.select(out.scores, c)?;
            grad_cam(&tape, x, score, c, pass_seed).map(normalize_map)
        })
        .collect()
}

/// `N` passes with seeds `base_seed + i`, then [`aggregate`].
pub fn run_stochastic_inference(
    features: &Tensor,
    head: &ClassifierHead,
    params: &InferenceParams,
    present: &[usize],
    base_seed: u64,
) -> Result<InferenceOutput> {
    if params.n_passes == 0 {
        return Err(Error::invalid("at least one inference pass is required"));
    }
    if let Some(&c) = present.iter().find(|&&c| c >= head.num_classes()) {
        return Err(Error::invalid(format!(
            "class {c} is outside the classifier's {} classes",
            head.num_classes()
        )));
    }
    let per_pass: Vec<Vec<LocalizationMap>> = if params.mode == SelectionMode::Deterministic || params.rate == 0.0 {
        // every pass would be identical: compute one and relabel the copies
        let first = inference_pass(features, head, params, present, base_seed)?;
        (0..params.n_passes)
            .map(|i| {
                first
                    .iter()
                    .map(|m| LocalizationMap {
                        pass_seed: base_seed.wrapping_add(i as u64),
                        ..m.clone()
                    })
                    .collect()
            })
            .collect()
    } else {
        (0..params.n_passes)
            .into_par_iter()
            .map(|i| inference_pass(features, head, params, present, base_seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?
    };
    let maps: Vec<LocalizationMap> = per_pass.into_iter().flatten().collect();
    let seed_map = if maps.is_empty() {
        let [_, h, w] = features.dims3("features")?;
        let fill = if params.thresholds.background.is_some() {
            SeedLabel::Background
        } else {
            SeedLabel::Ignore
        };
        SeedMap::new(h, w, vec![fill; h * w], params.thresholds.theta, params.n_passes)?
    } else {
        aggregate(&maps, present, params.thresholds)?
    };
    Ok(InferenceOutput { seed_map, maps })
}

/// Mean over pixels of the across-pass variance of one class's maps.
pub fn pass_variance(maps: &[LocalizationMap], class_id: usize) -> Option<f64> {
    let selected: Vec<&LocalizationMap> = maps.iter().filter(|m| m.class_id == class_id).collect();
    let n = selected.len();
    if n < 2 {
        return None;
    }
    let len = selected[0].scores.numel();
    let mut total = 0.0;
    for p in 0..len {
        let mean = selected.iter().map(|m| m.scores.data()[p]).sum::<f64>() / n as f64;
        let var = selected
            .iter()
            .map(|m| (m.scores.data()[p] - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        total += var;
    }
    Some(total / len as f64)
}
