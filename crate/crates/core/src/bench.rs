//! Timing harness for the per-window and expanded forward paths.
//!
//! Both paths replay the same mask set. A row is only timed after the two
//! agree on scores and on every gradient to within [`EQUIVALENCE_TOL`].
//! Times are medians over the timed repetitions after warmup; memory is the
//! number of bytes held by the tape and gradients after one forward+backward
//! (an estimate of peak tensor memory, not process RSS).

use std::fmt;
use std::time::Instant;

use crate::autodiff::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::fickle::{forward_expanded, forward_naive, ClassifierHead, DropoutMaskSet};
use crate::seed;
use crate::tensor::Tensor;
use rand::Rng;

pub const EQUIVALENCE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub classes: usize,
    pub rate: f64,
}

impl BenchShape {
    pub fn new(channels: usize, size: usize, kernel: usize, rate: f64) -> Self {
        Self {
            channels,
            height: size,
            width: size,
            kernel,
            classes: 20,
            rate,
        }
    }

    /// Rough bytes needed by the expanded forward+backward: the expanded
    /// map, its masked copy, the column buffer, and their gradients.
    pub fn expanded_bytes_estimate(&self) -> usize {
        let expanded = self.channels * self.kernel * self.kernel * self.height * self.width;
        6 * expanded * std::mem::size_of::<f64>()
    }
}

impl fmt::Display for BenchShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "k={} h={} w={} s={} c={} p={}",
            self.channels, self.height, self.width, self.kernel, self.classes, self.rate
        )
    }
}

/// Shapes timed when none are given.
pub fn default_matrix() -> Vec<BenchShape> {
    vec![
        BenchShape::new(64, 41, 9, 0.9),
        BenchShape::new(64, 41, 3, 0.9),
        BenchShape::new(64, 41, 1, 0.9),
        BenchShape::new(16, 20, 9, 0.9),
        BenchShape::new(512, 41, 9, 0.9),
    ]
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub median: f64,
    pub min: f64,
    pub runs: usize,
}

impl Timing {
    fn from_samples(mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        let median = if n % 2 == 1 {
            samples[n / 2]
        } else {
            0.5 * (samples[n / 2 - 1] + samples[n / 2])
        };
        Self {
            median,
            min: samples[0],
            runs: n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathTiming {
    pub forward: Timing,
    pub forward_backward: Timing,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RowOutcome {
    Timed { naive: PathTiming, expanded: PathTiming },
    /// The paths disagreed; no timing is reported.
    EquivalenceFailure,
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub shape: BenchShape,
    /// Largest elementwise difference over scores and gradients.
    pub max_diff: Option<f64>,
    pub outcome: RowOutcome,
}

impl BenchRow {
    pub fn speedup_forward(&self) -> Option<f64> {
        match &self.outcome {
            RowOutcome::Timed { naive, expanded } => Some(naive.forward.median / expanded.forward.median),
            _ => None,
        }
    }

    pub fn speedup_forward_backward(&self) -> Option<f64> {
        match &self.outcome {
            RowOutcome::Timed { naive, expanded } => {
                Some(naive.forward_backward.median / expanded.forward_backward.median)
            }
            _ => None,
        }
    }

    pub fn memory_ratio(&self) -> Option<f64> {
        match &self.outcome {
            RowOutcome::Timed { naive, expanded } => Some(expanded.bytes as f64 / naive.bytes as f64),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BenchOptions {
    pub repetitions: usize,
    pub warmups: usize,
    pub seed: u64,
    /// Rows whose estimated footprint exceeds this are skipped.
    pub memory_budget: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repetitions: 10,
            warmups: 2,
            seed: 0,
            memory_budget: 1536 << 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Implementation {
    Naive,
    Expanded,
}

struct Problem {
    x: Tensor,
    head: ClassifierHead,
    masks: DropoutMaskSet,
    targets: Tensor,
}

impl Problem {
    fn new(shape: &BenchShape, seed_value: u64) -> Result<Self> {
        let mut rng = seed::rng(seed_value);
        let x = Tensor::from_fn(&[shape.channels, shape.height, shape.width], |_| rng.random_range(0.0..1.0));
        let head = ClassifierHead::init(shape.classes, shape.channels, shape.kernel, &mut rng)?;
        let masks = DropoutMaskSet::sample(shape.height, shape.width, shape.kernel, shape.rate, rng.random())?;
        let targets = Tensor::from_fn(&[shape.classes], |i| (i % 3 == 0) as u8 as f64);
        Ok(Self { x, head, masks, targets })
    }

    /// One pass; returns the tape, scores, and (with `backward`) gradients
    /// for x, weight and bias.
    fn run(&self, path: Implementation, backward: bool) -> Result<(Tape, Tensor, Option<[Tensor; 3]>, usize)> {
        let mut tape = Tape::new();
        let x = tape.leaf(self.x.clone());
        let hv = self.head.register(&mut tape, true);
        let out = match path {
            Implementation::Naive => forward_naive(&mut tape, x, &hv, &self.masks, false)?,
            Implementation::Expanded => forward_expanded(&mut tape, x, &hv, &self.masks, false)?,
        };
        let scores = tape.value(out.scores).clone();
        if !backward {
            let bytes = tape.size_bytes();
            return Ok((tape, scores, None, bytes));
        }
        let loss = tape.sigmoid_cross_entropy(out.logits, &self.targets)?;
        let grads: Gradients = tape.backward(loss)?;
        let bytes = tape.size_bytes() + grads.size_bytes();
        let g = [grads.wrt(x)?.clone(), grads.wrt(hv.weight)?.clone(), grads.wrt(hv.bias)?.clone()];
        Ok((tape, scores, Some(g), bytes))
    }
}

fn time(reps: usize, warmups: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    for _ in 0..warmups {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(Timing::from_samples(samples))
}

/// Largest difference between the two paths over scores and gradients.
pub fn equivalence_gap(shape: &BenchShape, seed_value: u64) -> Result<f64> {
    let problem = Problem::new(shape, seed_value)?;
    gap(&problem)
}

fn gap(problem: &Problem) -> Result<f64> {
    let (_, sn, gn, _) = problem.run(Implementation::Naive, true)?;
    let (_, se, ge, _) = problem.run(Implementation::Expanded, true)?;
    let mut worst = sn.max_abs_diff(&se)?;
    for (a, b) in gn.iter().flatten().zip(ge.iter().flatten()) {
        worst = worst.max(a.max_abs_diff(b)?);
    }
    Ok(worst)
}

pub fn bench_shape(shape: &BenchShape, opts: &BenchOptions) -> Result<BenchRow> {
    if opts.repetitions == 0 {
        return Err(Error::invalid("at least one timed repetition is required"));
    }
    let estimate = shape.expanded_bytes_estimate();
    if estimate > opts.memory_budget {
        return Ok(BenchRow {
            shape: *shape,
            max_diff: None,
            outcome: RowOutcome::Skipped(format!(
                "estimated {} MiB exceeds the {} MiB budget",
                estimate >> 20,
                opts.memory_budget >> 20
            )),
        });
    }
    let problem = Problem::new(shape, opts.seed)?;
    let diff = gap(&problem)?;
    if !(diff <= EQUIVALENCE_TOL) {
        return Ok(BenchRow {
            shape: *shape,
            max_diff: Some(diff),
            outcome: RowOutcome::EquivalenceFailure,
        });
    }
    let measure = |path: Implementation| -> Result<PathTiming> {
        let forward = time(opts.repetitions, opts.warmups, || problem.run(path, false).map(drop))?;
        let forward_backward = time(opts.repetitions, opts.warmups, || problem.run(path, true).map(drop))?;
        let bytes = problem.run(path, true)?.3;
        Ok(PathTiming {
            forward,
            forward_backward,
            bytes,
        })
    };
    let naive = measure(Implementation::Naive)?;
    let expanded = measure(Implementation::Expanded)?;
    Ok(BenchRow {
        shape: *shape,
        max_diff: Some(diff),
        outcome: RowOutcome::Timed { naive, expanded },
    })
}

/// CPU model, logical core count and OS, for report headers.
pub fn machine_info() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {cores} logical cores; {} {}", std::env::consts::OS, std::env::consts::ARCH)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_samples() {
        let t = Timing::from_samples(vec![3.0, 1.0, 2.0]);
        assert_eq!((t.median, t.min, t.runs), (2.0, 1.0, 3));
        assert_eq!(Timing::from_samples(vec![4.0, 1.0, 2.0, 3.0]).median, 2.5);
    }

    #[test]
    fn small_row_is_timed_after_the_gate() {
        let opts = BenchOptions {
            repetitions: 3,
            warmups: 1,
            ..BenchOptions::default()
        };
        let row = bench_shape(&BenchShape::new(3, 6, 3, 0.5), &opts).unwrap();
        assert!(row.max_diff.unwrap() <= EQUIVALENCE_TOL);
        assert!(row.speedup_forward().unwrap() > 0.0);
        assert!(row.memory_ratio().unwrap() > 0.0);
    }

    #[test]
    fn oversized_rows_are_skipped() {
        let opts = BenchOptions {
            memory_budget: 1 << 20,
            ..BenchOptions::default()
        };
        let row = bench_shape(&BenchShape::new(64, 41, 9, 0.9), &opts).unwrap();
        assert!(matches!(row.outcome, RowOutcome::Skipped(_)));
    }
}
