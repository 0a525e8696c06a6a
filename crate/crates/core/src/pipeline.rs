//! Dataset-level seed generation and evaluation: inference over many
//! images, the train/infer selection-mode matrix, and parameter sweeps.

use rayon::prelude::*;

use crate::cam::{pass_variance, run_stochastic_inference, InferenceOutput, InferenceParams};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fickle::SelectionMode;
use crate::model::Model;
use crate::seed::{self, Stream};
use crate::synthetic::{generate_split, score_seeds, SeedScores, SyntheticSample};
use crate::training::{train_classifier, TrainState};

/// The configured training set.
pub fn training_set(cfg: &ExperimentConfig) -> Result<Vec<SyntheticSample>> {
    generate_split(&cfg.dataset.generator, cfg.dataset.train_size, cfg.seeds.experiment, Stream::TrainData)
}

/// The configured held-out set, disjoint from [`training_set`].
pub fn evaluation_set(cfg: &ExperimentConfig) -> Result<Vec<SyntheticSample>> {
    generate_split(&cfg.dataset.generator, cfg.dataset.eval_size, cfg.seeds.experiment, Stream::EvalData)
}

/// Seed for the passes over image `index` of a run rooted at `base_seed`;
/// pass `i` then uses this value plus `i`.
pub fn image_seed(base_seed: u64, index: usize) -> u64 {
    seed::derive_indexed(base_seed, Stream::Inference, index as u64)
}

#[derive(Clone, Debug)]
pub struct ImageEval {
    pub scores: SeedScores,
    /// Mean over present classes of the across-pass map variance.
    pub pass_variance: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Counts pooled over all images.
    pub pooled: SeedScores,
    pub images: Vec<ImageEval>,
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        self.pooled.foreground.precision()
    }

    pub fn recall(&self) -> f64 {
        self.pooled.foreground.recall()
    }

    pub fn iou(&self) -> f64 {
        self.pooled.foreground.iou()
    }

    pub fn foreground_area(&self) -> f64 {
        self.pooled.foreground_area
    }

    pub fn mean_pass_variance(&self) -> f64 {
        if self.images.is_empty() {
            return 0.0;
        }
        self.images.iter().map(|i| i.pass_variance).sum::<f64>() / self.images.len() as f64
    }
}

/// Seeds for one image from its ground-truth image-level labels.
pub fn infer_sample(
    model: &Model,
    sample: &SyntheticSample,
    params: &InferenceParams,
    base_seed: u64,
) -> Result<InferenceOutput> {
    let features = model.feature_tensor(&sample.image)?;
    run_stochastic_inference(&features, &model.head, params, &sample.present_classes(), base_seed)
}

pub fn evaluate(
    model: &Model,
    samples: &[SyntheticSample],
    params: &InferenceParams,
    base_seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let classes = model.num_classes();
    let images = samples
        .par_iter()
        .enumerate()
        .map(|(j, sample)| {
            let out = infer_sample(model, sample, params, image_seed(base_seed, j))?;
            let scores = score_seeds(&out.seed_map, &sample.gt_mask, classes)?;
            let present = sample.present_classes();
            let variance = present
                .iter()
                .map(|&c| pass_variance(&out.maps, c).unwrap_or(0.0))
                .sum::<f64>()
                / present.len().max(1) as f64;
            Ok(ImageEval {
                scores,
                pass_variance: variance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pooled = SeedScores::empty(classes);
    for i in &images {
        pooled.add(&i.scores);
    }
    Ok(EvalReport { pooled, images })
}

/// The train/infer combinations compared in the mode matrix.
pub const MODE_CELLS: [(SelectionMode, SelectionMode); 6] = [
    (SelectionMode::General, SelectionMode::General),
    (SelectionMode::General, SelectionMode::Stochastic),
    (SelectionMode::General, SelectionMode::Deterministic),
    (SelectionMode::Stochastic, SelectionMode::Stochastic),
    (SelectionMode::Stochastic, SelectionMode::Deterministic),
    (SelectionMode::Deterministic, SelectionMode::Deterministic),
];

#[derive(Clone, Debug)]
pub struct ModeCell {
    pub train: SelectionMode,
    pub infer: SelectionMode,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub foreground_area: f64,
    pub pass_variance: f64,
}

impl ModeCell {
    pub fn label(&self) -> String {
        format!("{}/{}", self.train.letter(), self.infer.letter())
    }
}

/// Evaluate every cell whose training mode has a model in `models`.
pub fn mode_matrix(
    models: &[(SelectionMode, &Model)],
    eval: &[SyntheticSample],
    cfg: &ExperimentConfig,
) -> Result<Vec<ModeCell>> {
    let base = seed::derive(cfg.seeds.experiment, Stream::Inference);
    MODE_CELLS
        .iter()
        .filter_map(|&(train, infer)| {
            models
                .iter()
                .find(|(m, _)| *m == train)
                .map(|&(_, model)| (train, infer, model))
        })
        .map(|(train, infer, model)| {
            let params = InferenceParams {
                mode: infer,
                ..cfg.inference_params()
            };
            let r = evaluate(model, eval, &params, base)?;
            Ok(ModeCell {
                train,
                infer,
                precision: r.precision(),
                recall: r.recall(),
                iou: r.iou(),
                foreground_area: r.foreground_area(),
                pass_variance: r.mean_pass_variance(),
            })
        })
        .collect()
}

/// Train one classifier per training mode, then evaluate the six cells.
pub fn mode_matrix_experiment(
    train: &[SyntheticSample],
    eval: &[SyntheticSample],
    cfg: &ExperimentConfig,
) -> Result<(Vec<TrainState>, Vec<ModeCell>)> {
    let modes = [SelectionMode::General, SelectionMode::Stochastic, SelectionMode::Deterministic];
    let states = modes
        .iter()
        .map(|&mode| {
            let mut c = cfg.clone();
            c.fickle.train_mode = mode;
            train_classifier(train, &c)
        })
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<(SelectionMode, &Model)> = modes.iter().copied().zip(states.iter().map(|s| &s.model)).collect();
    let cells = mode_matrix(&models, eval, cfg)?;
    Ok((states, cells))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    DropoutRate,
    Passes,
    Theta,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" | "rate" | "dropout_rate" => Ok(SweepParam::DropoutRate),
            "n" | "N" | "passes" | "n_passes" => Ok(SweepParam::Passes),
            "theta" => Ok(SweepParam::Theta),
            other => Err(Error::invalid(format!("cannot sweep {other:?}; use p, N or theta"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::DropoutRate => "p",
            SweepParam::Passes => "N",
            SweepParam::Theta => "theta",
        }
    }

    pub fn apply(self, params: &InferenceParams, value: f64) -> Result<InferenceParams> {
        let mut p = *params;
        match self {
            SweepParam::DropoutRate => {
                if !(0.0..1.0).contains(&value) {
                    return Err(Error::invalid(format!("dropout rate {value} outside [0, 1)")));
                }
                p.rate = value;
            }
            SweepParam::Passes => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::invalid(format!("pass count {value} is not a positive integer")));
                }
                p.n_passes = value as usize;
            }
            SweepParam::Theta => {
                if !(0.0..1.0).contains(&value) {
                    return Err(Error::invalid(format!("theta {value} outside [0, 1)")));
                }
                p.thresholds.theta = value;
            }
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero for a single repeat.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: f64,
    pub precision: Summary,
    pub recall: Summary,
    pub iou: Summary,
    pub foreground_area: Summary,
    pub repeats: usize,
}

/// Base seed of repeat `r` in a sweep.
pub fn repeat_seed(root: u64, r: usize) -> u64 {
    seed::derive_indexed(seed::derive(root, Stream::Inference), Stream::Inference, r as u64)
}

/// For every value: `repeats` evaluations with independent base seeds.
pub fn sweep(
    model: &Model,
    eval: &[SyntheticSample],
    params: &InferenceParams,
    param: SweepParam,
    values: &[f64],
    repeats: usize,
    root_seed: u64,
) -> Result<Vec<SweepRow>> {
    if repeats == 0 {
        return Err(Error::invalid("a sweep needs at least one repeat"));
    }
    values
        .iter()
        .map(|&value| {
            let p = param.apply(params, value)?;
            let runs = (0..repeats)
                .map(|r| evaluate(model, eval, &p, repeat_seed(root_seed, r)))
                .collect::<Result<Vec<_>>>()?;
            let pick = |f: fn(&EvalReport) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
            Ok(SweepRow {
                value,
                precision: pick(EvalReport::precision),
                recall: pick(EvalReport::recall),
                iou: pick(EvalReport::iou),
                foreground_area: pick(EvalReport::foreground_area),
                repeats,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(w: W, param: SweepParam, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        param.name(),
        "precision",
        "recall",
        "iou",
        "foreground_area",
        "std_precision",
        "std_recall",
        "std_iou",
        "std_foreground_area",
        "repeats",
    ])?;
    for r in rows {
        out.write_record([
            r.value.to_string(),
            format!("{:.6}", r.precision.mean),
            format!("{:.6}", r.recall.mean),
            format!("{:.6}", r.iou.mean),
            format!("{:.6}", r.foreground_area.mean),
            format!("{:.6}", r.precision.std),
            format!("{:.6}", r.recall.std),
            format!("{:.6}", r.iou.std),
            format!("{:.6}", r.foreground_area.std),
            r.repeats.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneConfig;
    use crate::synthetic::{generate, GeneratorConfig};
    use crate::training::TrainState;

    fn tiny() -> (ExperimentConfig, Vec<SyntheticSample>) {
        let mut cfg = ExperimentConfig::default();
        cfg.fickle.kernel_size = 3;
        cfg.inference.n_passes = 4;
        cfg.backbone = BackboneConfig {
            channels: vec![4, 4],
            kernel_sizes: vec![3, 3],
            strides: vec![2, 2],
            ..BackboneConfig::default()
        };
        cfg.dataset.generator = GeneratorConfig {
            image_size: 24,
            num_classes: 2,
            max_objects: 2,
            min_radius: 3.0,
            max_radius: 5.0,
            ..GeneratorConfig::default()
        };
        let samples = generate(&cfg.dataset.generator, 3, 1).unwrap();
        (cfg, samples)
    }

    #[test]
    fn evaluation_is_deterministic_and_pooled() {
        let (cfg, samples) = tiny();
        let model = TrainState::init(&cfg).unwrap().model;
        let a = evaluate(&model, &samples, &cfg.inference_params(), 5).unwrap();
        let b = evaluate(&model, &samples, &cfg.inference_params(), 5).unwrap();
        assert_eq!(a.pooled, b.pooled);
        let tp: u64 = a.images.iter().map(|i| i.scores.foreground.tp).sum();
        assert_eq!(a.pooled.foreground.tp, tp);
    }

    #[test]
    fn deterministic_cells_have_no_pass_variance() {
        let (cfg, samples) = tiny();
        let model = TrainState::init(&cfg).unwrap().model;
        let cells = mode_matrix(&[(SelectionMode::Deterministic, &model)], &samples, &cfg).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].label(), "D/D");
        assert_eq!(cells[0].pass_variance, 0.0);
    }

    #[test]
    fn single_value_sweep_matches_direct_evaluation() {
        let (cfg, samples) = tiny();
        let model = TrainState::init(&cfg).unwrap().model;
        let params = cfg.inference_params();
        let rows = sweep(&model, &samples, &params, SweepParam::Theta, &[0.35], 1, 9).unwrap();
        let direct = evaluate(&model, &samples, &params, repeat_seed(9, 0)).unwrap();
        assert_eq!(rows[0].recall.mean, direct.recall());
        assert_eq!(rows[0].precision.mean, direct.precision());
        assert_eq!(rows[0].recall.std, 0.0);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(SweepParam::Passes.apply(&tiny().0.inference_params(), 2.5).is_err());
    }
}
