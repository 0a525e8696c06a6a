//! Stochastic hidden-unit selection.
//!
//! For every sliding-window position of an `s x s` classifier kernel a fresh
//! binary keep/drop mask is drawn (centre always kept, the same mask for all
//! channels). Two interchangeable realisations compute the resulting class
//! scores:
//!
//! * [`forward_naive`] visits each window position, masks that window and
//!   runs the kernel on it, one position at a time;
//! * [`forward_expanded`] copies every zero-padded window into its own
//!   non-overlapping block of an `s`-times larger map, masks that map once
//!   and runs a single stride-`s` convolution.
//!
//! Given the same [`DropoutMaskSet`] both produce the same scores and
//! gradients up to floating-point summation order.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

const MASK_MAGIC: &[u8; 4] = b"FKMS";
const MASK_VERSION: u8 = 1;

/// Index of the centre tap along one axis of an odd kernel.
pub fn center(kernel: usize) -> usize {
    kernel / 2
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::invalid(format!(
            "kernel size must be odd so the centre is unique, got {kernel}"
        )));
    }
    Ok(())
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Multiplier applied to surviving units.
pub fn keep_scale(rate: f64, rescale: bool) -> f64 {
    if rescale {
        1.0 / (1.0 - rate)
    } else {
        1.0
    }
}

/// One `s x s` keep(true)/drop(false) grid with the centre kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowMask {
    kernel: usize,
    keep: Vec<bool>,
}

impl WindowMask {
    pub fn all(kernel: usize) -> Result<Self> {
        check_kernel(kernel)?;
        Ok(Self {
            kernel,
            keep: vec![true; kernel * kernel],
        })
    }

    pub fn center_only(kernel: usize) -> Result<Self> {
        check_kernel(kernel)?;
        let mut keep = vec![false; kernel * kernel];
        let c = center(kernel);
        keep[c * kernel + c] = true;
        Ok(Self { kernel, keep })
    }

    pub fn from_keep(kernel: usize, keep: Vec<bool>) -> Result<Self> {
        check_kernel(kernel)?;
        if keep.len() != kernel * kernel {
            return Err(Error::shape(
                "WindowMask",
                format!("{} entries for a {kernel}x{kernel} window", keep.len()),
            ));
        }
        let c = center(kernel);
        if !keep[c * kernel + c] {
            return Err(Error::invalid("window masks must keep the centre unit"));
        }
        Ok(Self { kernel, keep })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, a: usize, b: usize) -> bool {
        self.keep[a * self.kernel + b]
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// The window mask keeping exactly the taps of a 3x3 kernel with dilation
/// `dilation`, centred in an `s x s` window: offsets `{-d, 0, d}^2`.
pub fn dilated_kernel_mask(kernel: usize, dilation: usize) -> Result<WindowMask> {
    check_kernel(kernel)?;
    if dilation == 0 || 2 * dilation > kernel - 1 {
        return Err(Error::invalid(format!(
            "a 3x3 kernel with dilation {dilation} does not fit in a {kernel}x{kernel} window"
        )));
    }
    let c = center(kernel);
    let mut keep = vec![false; kernel * kernel];
    for a in [c - dilation, c, c + dilation] {
        for b in [c - dilation, c, c + dilation] {
            keep[a * kernel + b] = true;
        }
    }
    WindowMask::from_keep(kernel, keep)
}

/// Per-window masks for every position of an `h x w` map.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMaskSet {
    kernel: usize,
    rate: f64,
    height: usize,
    width: usize,
    seed: u64,
    /// Window-major (row-major over positions), row-major within a window.
    keep: Vec<bool>,
}

impl DropoutMaskSet {
    /// Draw masks: each non-centre entry is dropped independently with
    /// probability `rate`, the centre is always kept.
    pub fn sample(height: usize, width: usize, kernel: usize, rate: f64, seed: u64) -> Result<Self> {
        check_kernel(kernel)?;
        check_rate(rate)?;
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask grid must be non-empty"));
        }
        let taps = kernel * kernel;
        let mid = center(kernel) * kernel + center(kernel);
        let mut keep = vec![true; height * width * taps];
        if rate > 0.0 {
            let mut rng = seed::rng(seed);
            for window in keep.chunks_mut(taps) {
                for (t, k) in window.iter_mut().enumerate() {
                    if t != mid {
                        *k = rng.random::<f64>() >= rate;
                    }
                }
            }
        }
        Ok(Self {
            kernel,
            rate,
            height,
            width,
            seed,
            keep,
        })
    }

    /// The same window mask at every position.
    pub fn uniform(height: usize, width: usize, window: &WindowMask) -> Self {
        let mut keep = Vec::with_capacity(height * width * window.keep.len());
        for _ in 0..height * width {
            keep.extend_from_slice(&window.keep);
        }
        let dropped = window.keep.len() - window.kept_count();
        let rate = if window.keep.len() > 1 {
            dropped as f64 / (window.keep.len() - 1) as f64
        } else {
            0.0
        };
        Self {
            kernel: window.kernel,
            rate: rate.min(0.999_999),
            height,
            width,
            seed: 0,
            keep,
        }
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn window(&self, row: usize, col: usize) -> &[bool] {
        let taps = self.kernel * self.kernel;
        let w = row * self.width + col;
        &self.keep[w * taps..(w + 1) * taps]
    }

    pub fn window_mask(&self, row: usize, col: usize) -> WindowMask {
        WindowMask {
            kernel: self.kernel,
            keep: self.window(row, col).to_vec(),
        }
    }

    pub fn is_kept(&self, row: usize, col: usize, a: usize, b: usize) -> bool {
        self.window(row, col)[a * self.kernel + b]
    }

    /// Fraction of dropped entries among all non-centre entries.
    pub fn drop_fraction(&self) -> f64 {
        let taps = self.kernel * self.kernel;
        if taps == 1 {
            return 0.0;
        }
        let dropped = self.keep.iter().filter(|&&k| !k).count();
        dropped as f64 / (self.height * self.width * (taps - 1)) as f64
    }

    /// Factor plane for the `[s*h, s*w]` expanded map: block `(i, j)` holds
    /// window `(i, j)` scaled by `scale`.
    pub fn expanded_plane(&self, scale: f64) -> Vec<f64> {
        let s = self.kernel;
        let ew = s * self.width;
        let mut plane = vec![0.0; s * self.height * ew];
        for i in 0..self.height {
            for j in 0..self.width {
                let win = self.window(i, j);
                for a in 0..s {
                    let row = &mut plane[(i * s + a) * ew + j * s..(i * s + a) * ew + (j + 1) * s];
                    for (b, v) in row.iter_mut().enumerate() {
                        if win[a * s + b] {
                            *v = scale;
                        }
                    }
                }
            }
        }
        plane
    }

    pub fn window_plane(&self, row: usize, col: usize, scale: f64) -> Vec<f64> {
        self.window(row, col)
            .iter()
            .map(|&k| if k { scale } else { 0.0 })
            .collect()
    }

    /// Header (magic, version, kernel, rate, height, width, seed) followed
    /// by the masks bit-packed LSB-first in window-major order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MASK_MAGIC)?;
        w.write_all(&[MASK_VERSION])?;
        w.write_all(&(self.kernel as u32).to_le_bytes())?;
        w.write_all(&self.rate.to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut packed = vec![0u8; self.keep.len().div_ceil(8)];
        for (i, &k) in self.keep.iter().enumerate() {
            if k {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&packed)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MASK_MAGIC {
            return Err(Error::Format("not a mask-set file (bad magic)".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != MASK_VERSION {
            return Err(Error::Format(format!("unsupported mask-set version {}", version[0])));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let kernel = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let rate = f64::from_le_bytes(b8);
        r.read_exact(&mut b4)?;
        let height = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let width = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        check_kernel(kernel)?;
        check_rate(rate)?;
        let n = height * width * kernel * kernel;
        let mut packed = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut packed)?;
        let keep: Vec<bool> = (0..n).map(|i| packed[i / 8] & (1 << (i % 8)) != 0).collect();
        let mid = center(kernel) * kernel + center(kernel);
        if keep.chunks(kernel * kernel).any(|w| !w[mid]) {
            return Err(Error::Format("mask set drops a window centre".into()));
        }
        Ok(Self {
            kernel,
            rate,
            height,
            width,
            seed,
            keep,
        })
    }
}

/// Ordinary spatial dropout: one keep/drop decision per feature-map
/// location for the whole forward pass, shared across channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialDropout {
    height: usize,
    width: usize,
    rate: f64,
    keep: Vec<bool>,
}

impl SpatialDropout {
    pub fn sample(height: usize, width: usize, rate: f64, seed: u64) -> Result<Self> {
        check_rate(rate)?;
        let mut rng = seed::rng(seed);
        let keep = (0..height * width)
            .map(|_| rate == 0.0 || rng.random::<f64>() >= rate)
            .collect();
        Ok(Self {
            height,
            width,
            rate,
            keep,
        })
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn plane(&self, scale: f64) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { scale } else { 0.0 }).collect()
    }
}

/// How hidden units are selected in one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// One dropout mask for the whole feature map per pass.
    General,
    /// A fresh centre-preserving mask at every window position.
    Stochastic,
    /// Every unit kept.
    Deterministic,
}

impl SelectionMode {
    pub fn letter(self) -> char {
        match self {
            SelectionMode::General => 'G',
            SelectionMode::Stochastic => 'S',
            SelectionMode::Deterministic => 'D',
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionMode::General => "general",
            SelectionMode::Stochastic => "stochastic",
            SelectionMode::Deterministic => "deterministic",
        })
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "general" | "g" => Ok(SelectionMode::General),
            "stochastic" | "s" => Ok(SelectionMode::Stochastic),
            "deterministic" | "d" => Ok(SelectionMode::Deterministic),
            other => Err(Error::invalid(format!("unknown selection mode {other:?}"))),
        }
    }
}

/// The `s x s`, stride-`s` convolution that turns the (expanded) feature map
/// into per-position class evidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    weight: Tensor,
    bias: Tensor,
}

/// A head registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// Logits (pooled evidence) and sigmoid scores of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub scores: Var,
}

impl ClassifierHead {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let &[c, _, s, s2] = weight.shape() else {
            return Err(Error::shape("ClassifierHead", "weight must be [c, k, s, s]"));
        };
        if s != s2 {
            return Err(Error::shape("ClassifierHead", "kernel must be square"));
        }
        check_kernel(s)?;
        if bias.shape() != [c] {
            return Err(Error::shape(
                "ClassifierHead",
                format!("bias must be [{c}], got {:?}", bias.shape()),
            ));
        }
        if !weight.all_finite() || !bias.all_finite() {
            return Err(Error::Numerical("classifier head has non-finite parameters".into()));
        }
        Ok(Self { weight, bias })
    }

    /// Gaussian initialisation with fan-in variance, zero bias.
    pub fn init(classes: usize, channels: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        check_kernel(kernel)?;
        let std = (1.0 / (channels * kernel * kernel) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = Tensor::from_fn(&[classes, channels, kernel, kernel], |_| normal.sample(rng));
        Self::new(weight, Tensor::zeros(&[classes]))
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    /// `c * k * s^2 + c`, independent of which forward path is used.
    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    /// Put the parameters on `tape`, as leaves when `trainable`, otherwise
    /// as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let (weight, bias) = if trainable {
            (tape.leaf(self.weight.clone()), tape.leaf(self.bias.clone()))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        };
        HeadVars { weight, bias }
    }
}

fn head_dims(tape: &Tape, x: Var, head: &HeadVars) -> Result<(usize, usize, usize, usize)> {
    let [k, h, w] = tape.value(x).dims3("classifier input")?;
    let ws = tape.value(head.weight).shape();
    if ws.len() != 4 || ws[1] != k {
        return Err(Error::shape(
            "classifier",
            format!("head weight {ws:?} does not match a {k}-channel feature map"),
        ));
    }
    Ok((k, h, w, ws[2]))
}

fn check_masks(masks: &DropoutMaskSet, h: usize, w: usize, s: usize) -> Result<()> {
    if masks.height != h || masks.width != w || masks.kernel != s {
        return Err(Error::shape(
            "dropout masks",
            format!(
                "mask grid {}x{} (s = {}) does not match window grid {h}x{w} (s = {s})",
                masks.height, masks.width, masks.kernel
            ),
        ));
    }
    Ok(())
}

fn pool_and_score(tape: &mut Tape, evidence: Var) -> Result<HeadOutput> {
    let logits = tape.global_average_pool(evidence)?;
    let scores = tape.sigmoid(logits);
    Ok(HeadOutput { logits, scores })
}

/// `[k, h, w] -> [k, s*h, s*w]`; see [`Tape::expand`].
pub fn expand_feature_map(tape: &mut Tape, x: Var, kernel: usize) -> Result<Var> {
    tape.expand(x, kernel)
}

/// Multiply each `s x s` block of an expanded map by its window mask, the
/// same for every channel.
pub fn apply_masks_expanded(tape: &mut Tape, x_expand: Var, masks: &DropoutMaskSet, rescale: bool) -> Result<Var> {
    let [_, eh, ew] = tape.value(x_expand).dims3("apply_masks_expanded")?;
    let s = masks.kernel;
    if eh != s * masks.height || ew != s * masks.width {
        return Err(Error::shape(
            "apply_masks_expanded",
            format!(
                "expanded map {eh}x{ew} is not {s} x ({}x{})",
                masks.height, masks.width
            ),
        ));
    }
    let plane = masks.expanded_plane(keep_scale(masks.rate, rescale));
    tape.channel_mask(x_expand, Arc::new(plane))
}

/// Expand, mask once, one stride-`s` convolution, pool, sigmoid.
pub fn forward_expanded(tape: &mut Tape, x: Var, head: &HeadVars, masks: &DropoutMaskSet, rescale: bool) -> Result<HeadOutput> {
    let (_, h, w, s) = head_dims(tape, x, head)?;
    check_masks(masks, h, w, s)?;
    let expanded = expand_feature_map(tape, x, s)?;
    let masked = apply_masks_expanded(tape, expanded, masks, rescale)?;
    let evidence = tape.conv2d(masked, head.weight, head.bias, s, 0)?;
    pool_and_score(tape, evidence)
}

/// Reference realisation: one masked window and one kernel application per
/// position.
pub fn forward_naive(tape: &mut Tape, x: Var, head: &HeadVars, masks: &DropoutMaskSet, rescale: bool) -> Result<HeadOutput> {
    let (_, h, w, s) = head_dims(tape, x, head)?;
    check_masks(masks, h, w, s)?;
    let scale = keep_scale(masks.rate, rescale);
    let mut parts = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let window = tape.window(x, i, j, s)?;
            let masked = tape.channel_mask(window, Arc::new(masks.window_plane(i, j, scale)))?;
            parts.push(tape.conv2d(masked, head.weight, head.bias, 1, 0)?);
        }
    }
    let evidence = tape.assemble(parts, h, w)?;
    pool_and_score(tape, evidence)
}

/// All units kept: a padded stride-1 convolution.
pub fn forward_deterministic(tape: &mut Tape, x: Var, head: &HeadVars) -> Result<HeadOutput> {
    let (_, _, _, s) = head_dims(tape, x, head)?;
    let evidence = tape.conv2d(x, head.weight, head.bias, 1, center(s))?;
    pool_and_score(tape, evidence)
}

/// Spatial dropout on the feature map, then the padded stride-1 convolution.
pub fn forward_general(tape: &mut Tape, x: Var, head: &HeadVars, dropout: &SpatialDropout, rescale: bool) -> Result<HeadOutput> {
    let (_, h, w, s) = head_dims(tape, x, head)?;
    if dropout.height != h || dropout.width != w {
        return Err(Error::shape(
            "forward_general",
            format!("dropout grid {}x{} vs map {h}x{w}", dropout.height, dropout.width),
        ));
    }
    let plane = dropout.plane(keep_scale(dropout.rate, rescale));
    let dropped = tape.channel_mask(x, Arc::new(plane))?;
    let evidence = tape.conv2d(dropped, head.weight, head.bias, 1, center(s))?;
    pool_and_score(tape, evidence)
}

/// One forward pass under `mode`, drawing whatever masks the mode needs
/// from `seed`.
pub fn forward_with_mode(
    tape: &mut Tape,
    x: Var,
    head: &HeadVars,
    mode: SelectionMode,
    rate: f64,
    rescale: bool,
    seed: u64,
) -> Result<HeadOutput> {
    let (_, h, w, s) = head_dims(tape, x, head)?;
    match mode {
        SelectionMode::Deterministic => forward_deterministic(tape, x, head),
        SelectionMode::Stochastic => {
            let masks = DropoutMaskSet::sample(h, w, s, rate, seed)?;
            forward_expanded(tape, x, head, &masks, rescale)
        }
        SelectionMode::General => {
            let dropout = SpatialDropout::sample(h, w, rate, seed)?;
            forward_general(tape, x, head, &dropout, rescale)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let m = DropoutMaskSet::sample(4, 5, 5, 0.0, 9).unwrap();
        assert!(m.keep.iter().all(|&k| k));
    }

    #[test]
    fn centre_survives_high_rate() {
        for seed in 0..5 {
            let m = DropoutMaskSet::sample(6, 7, 9, 0.9, seed).unwrap();
            for i in 0..6 {
                for j in 0..7 {
                    assert!(m.is_kept(i, j, 4, 4));
                }
            }
        }
    }

    #[test]
    fn empirical_drop_fraction() {
        // 40 * 40 windows * 63 non-centre taps > 1e5 draws; the binomial
        // standard deviation is below 0.002, so 0.01 is a > 5 sigma band.
        let m = DropoutMaskSet::sample(40, 40, 9, 0.5, 1234).unwrap();
        assert!((m.drop_fraction() - 0.5).abs() < 0.01, "{}", m.drop_fraction());
    }

    #[test]
    fn sampling_validates_arguments() {
        assert!(DropoutMaskSet::sample(3, 3, 4, 0.5, 0).is_err());
        assert!(DropoutMaskSet::sample(3, 3, 3, 1.0, 0).is_err());
        assert!(DropoutMaskSet::sample(3, 3, 3, -0.1, 0).is_err());
    }

    #[test]
    fn masks_are_deterministic_across_threads() {
        let a = DropoutMaskSet::sample(8, 8, 7, 0.7, 99).unwrap();
        let handles: Vec<_> = (0..4)
            .map(|_| std::thread::spawn(|| DropoutMaskSet::sample(8, 8, 7, 0.7, 99).unwrap()))
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), a);
        }
        assert_ne!(DropoutMaskSet::sample(8, 8, 7, 0.7, 100).unwrap(), a);
    }

    #[test]
    fn mask_file_round_trip() {
        let m = DropoutMaskSet::sample(5, 3, 5, 0.6, 77).unwrap();
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 4 + 8 + 4 + 4 + 8 + (5 * 3 * 25usize).div_ceil(8));
        assert_eq!(DropoutMaskSet::read_from(bytes.as_slice()).unwrap(), m);
        bytes[0] = b'X';
        assert!(DropoutMaskSet::read_from(bytes.as_slice()).is_err());
    }

    #[test]
    fn expand_identity_for_unit_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4, 5], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let e = expand_feature_map(&mut tape, xv, 1).unwrap();
        assert_eq!(tape.value(e), &x);
    }

    #[test]
    fn expand_hand_unrolled_windows() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let e = expand_feature_map(&mut tape, x, 3).unwrap();
        let v = tape.value(e);
        assert_eq!(v.shape(), &[1, 6, 6]);
        #[rustfmt::skip]
        let want = [
            0.0, 0.0, 0.0,  0.0, 0.0, 0.0,
            0.0, 1.0, 2.0,  1.0, 2.0, 0.0,
            0.0, 3.0, 4.0,  3.0, 4.0, 0.0,

            0.0, 1.0, 2.0,  1.0, 2.0, 0.0,
            0.0, 3.0, 4.0,  3.0, 4.0, 0.0,
            0.0, 0.0, 0.0,  0.0, 0.0, 0.0,
        ];
        assert_eq!(v.data(), &want);
    }

    #[test]
    fn expand_full_scale_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[512, 41, 41]));
        let e = expand_feature_map(&mut tape, x, 9).unwrap();
        assert_eq!(tape.value(e).shape(), &[512, 369, 369]);
    }

    #[test]
    fn masking_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let e = expand_feature_map(&mut tape, xv, 3).unwrap();

        let ones = DropoutMaskSet::uniform(3, 3, &WindowMask::all(3).unwrap());
        let m = apply_masks_expanded(&mut tape, e, &ones, false).unwrap();
        assert_eq!(tape.value(m), tape.value(e));

        let centre = DropoutMaskSet::uniform(3, 3, &WindowMask::center_only(3).unwrap());
        let m = apply_masks_expanded(&mut tape, e, &centre, false).unwrap();
        let (ev, mv) = (tape.value(e).clone(), tape.value(m).clone());
        for ch in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    for a in 0..3 {
                        for b in 0..3 {
                            let idx = (ch * 9 + i * 3 + a) * 9 + j * 3 + b;
                            let want = if a == 1 && b == 1 { ev.data()[idx] } else { 0.0 };
                            assert_eq!(mv.data()[idx], want);
                        }
                    }
                }
            }
        }

        let rand_masks = DropoutMaskSet::sample(3, 3, 3, 0.5, 5).unwrap();
        let m = apply_masks_expanded(&mut tape, e, &rand_masks, false).unwrap();
        let mv = tape.value(m).clone();
        for ch in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    for a in 0..3 {
                        for b in 0..3 {
                            let idx = (ch * 9 + i * 3 + a) * 9 + j * 3 + b;
                            let k = if rand_masks.is_kept(i, j, a, b) { 1.0 } else { 0.0 };
                            assert_eq!(mv.data()[idx], ev.data()[idx] * k);
                        }
                    }
                }
            }
        }

        let wrong = DropoutMaskSet::sample(4, 3, 3, 0.5, 5).unwrap();
        assert!(apply_masks_expanded(&mut tape, e, &wrong, false).is_err());
    }

    #[test]
    fn channel_uniform_dropping() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // strictly positive features, so a zero can only come from a mask
        let x = random(&[5, 4, 4], &mut rng).map(|v| v.abs() + 0.1);
        let masks = DropoutMaskSet::sample(4, 4, 5, 0.5, 8).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let e = expand_feature_map(&mut tape, xv, 5).unwrap();
        let m = apply_masks_expanded(&mut tape, e, &masks, false).unwrap();
        let (ev, mv) = (tape.value(e), tape.value(m));
        let plane = 20 * 20;
        for p in 0..plane {
            // positions where the expanded map is non-zero in every channel
            let live: Vec<bool> = (0..5).map(|ch| ev.data()[ch * plane + p] != 0.0).collect();
            if live.iter().all(|&l| l) {
                let zeroed: Vec<bool> = (0..5).map(|ch| mv.data()[ch * plane + p] == 0.0).collect();
                assert!(zeroed.iter().all(|&z| z) || zeroed.iter().all(|&z| !z));
            }
        }
    }

    #[test]
    fn dilated_masks() {
        let m = dilated_kernel_mask(7, 1).unwrap();
        assert_eq!(m.kept_count(), 9);
        for a in 0..7 {
            for b in 0..7 {
                assert_eq!(m.is_kept(a, b), (2..=4).contains(&a) && (2..=4).contains(&b));
            }
        }
        let m = dilated_kernel_mask(7, 3).unwrap();
        assert_eq!(m.kept_count(), 9);
        for a in [0, 3, 6] {
            for b in [0, 3, 6] {
                assert!(m.is_kept(a, b));
            }
        }
        let m = dilated_kernel_mask(9, 4).unwrap();
        let kept: Vec<(isize, isize)> = (0..9)
            .flat_map(|a| (0..9).map(move |b| (a, b)))
            .filter(|&(a, b)| m.is_kept(a, b))
            .map(|(a, b)| (a as isize - 4, b as isize - 4))
            .collect();
        let mut want = Vec::new();
        for da in [-4, 0, 4] {
            for db in [-4, 0, 4] {
                want.push((da, db));
            }
        }
        assert_eq!(kept, want);
        assert!(dilated_kernel_mask(7, 4).is_err());
        assert!(dilated_kernel_mask(7, 0).is_err());
        // a realisable member of a mask set
        let set = DropoutMaskSet::uniform(3, 3, &dilated_kernel_mask(9, 2).unwrap());
        assert!(set.is_kept(1, 1, 4, 4));
    }

    fn setup(k: usize, h: usize, w: usize, s: usize, c: usize, seed: u64) -> (Tensor, ClassifierHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[k, h, w], &mut rng);
        let head = ClassifierHead::new(random(&[c, k, s, s], &mut rng), random(&[c], &mut rng)).unwrap();
        (x, head)
    }

    #[test]
    fn zero_rate_reduces_to_padded_convolution_exactly() {
        let (x, head) = setup(3, 6, 5, 5, 2, 4);
        let masks = DropoutMaskSet::sample(6, 5, 5, 0.0, 1).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let hv = head.register(&mut tape, true);
        let a = forward_expanded(&mut tape, xv, &hv, &masks, false).unwrap();
        let b = forward_deterministic(&mut tape, xv, &hv).unwrap();
        assert_eq!(tape.value(a.scores), tape.value(b.scores));
    }

    #[test]
    fn naive_and_expanded_agree() {
        let (x, head) = setup(4, 5, 5, 3, 3, 5);
        let masks = DropoutMaskSet::sample(5, 5, 3, 0.5, 17).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let hv = head.register(&mut tape, true);
        let e = forward_expanded(&mut tape, xv, &hv, &masks, false).unwrap();
        let n = forward_naive(&mut tape, xv, &hv, &masks, false).unwrap();
        let se = tape.value(e.scores).clone();
        assert!(se.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(se.max_abs_diff(tape.value(n.scores)).unwrap() <= 1e-10);
    }

    #[test]
    fn head_parameter_count_is_path_independent() {
        let (x, head) = setup(3, 4, 4, 5, 2, 6);
        assert_eq!(head.param_count(), 2 * 3 * 25 + 2);
        let masks = DropoutMaskSet::sample(4, 4, 5, 0.3, 2).unwrap();
        for naive in [false, true] {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let hv = head.register(&mut tape, true);
            let out = if naive {
                forward_naive(&mut tape, xv, &hv, &masks, false).unwrap()
            } else {
                forward_expanded(&mut tape, xv, &hv, &masks, false).unwrap()
            };
            let loss = tape.select(out.scores, 0).unwrap();
            let g = tape.backward(loss).unwrap();
            let n = g.wrt(hv.weight).unwrap().numel() + g.wrt(hv.bias).unwrap().numel();
            assert_eq!(n, head.param_count());
        }
    }

    #[test]
    fn rescaling_multiplies_survivors() {
        let (x, head) = setup(2, 3, 3, 3, 1, 7);
        let masks = DropoutMaskSet::sample(3, 3, 3, 0.5, 3).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let hv = head.register(&mut tape, false);
        let plain = forward_expanded(&mut tape, xv, &hv, &masks, false).unwrap();
        let scaled = forward_expanded(&mut tape, xv, &hv, &masks, true).unwrap();
        let b = head.bias().data()[0];
        let lp = tape.value(plain.logits).data()[0] - b;
        let ls = tape.value(scaled.logits).data()[0] - b;
        assert!((ls - 2.0 * lp).abs() < 1e-12);
    }

    #[test]
    fn general_dropout_is_shared_across_windows() {
        let d = SpatialDropout::sample(6, 6, 0.5, 3).unwrap();
        let dropped = d.keep().iter().filter(|&&k| !k).count();
        assert!(dropped > 0 && dropped < 36);
        assert_eq!(SpatialDropout::sample(6, 6, 0.5, 3).unwrap(), d);
    }

    #[test]
    fn selection_mode_parsing() {
        assert_eq!("S".parse::<SelectionMode>().unwrap(), SelectionMode::Stochastic);
        assert_eq!("general".parse::<SelectionMode>().unwrap(), SelectionMode::General);
        assert!("x".parse::<SelectionMode>().is_err());
    }
}
