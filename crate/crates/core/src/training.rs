//! Classifier training with image-level labels, checkpoints, and the
//! semi-supervised loss assembly.

use std::io::{Read, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{adam_step, AdamState};
use crate::seed::{self, Stream};
use crate::synthetic::{GroundTruthMask, SyntheticSample};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    /// Mean loss over the minibatch.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    /// Forward passes so far; indexes the per-pass mask seeds.
    pub forwards: u64,
    pub history: Vec<LogRow>,
}

impl TrainState {
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed::derive(cfg.seeds.experiment, Stream::Init));
        let model = Model::init(
            &cfg.backbone,
            cfg.dataset.generator.image_size,
            cfg.dataset.generator.num_classes,
            cfg.fickle.kernel_size,
            &mut rng,
        )?;
        let adam = AdamState::new(&model.params());
        Ok(Self {
            model,
            adam,
            epoch: 0,
            step: 0,
            forwards: 0,
            history: Vec::new(),
        })
    }
}

/// Loss of one sample and its gradient for every model parameter, with
/// masks drawn from `mask_seed`.
pub fn sample_loss_and_grads(
    model: &Model,
    sample: &SyntheticSample,
    cfg: &ExperimentConfig,
    mask_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let image = tape.constant(sample.image.clone());
    let out = model.forward(
        &mut tape,
        &vars,
        image,
        cfg.fickle.train_mode,
        cfg.fickle.dropout_rate,
        cfg.fickle.dropout_rescale,
        mask_seed,
    )?;
    let loss = tape.sigmoid_cross_entropy(out.logits, &sample.label_tensor())?;
    let grads = tape.backward(loss)?;
    let per_param = vars
        .all()
        .into_iter()
        .map(|v| grads.wrt(v).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.value(loss).data()[0], per_param))
}

/// Run `cfg.optimizer.epochs` epochs from a fresh initialisation.
pub fn train_classifier(samples: &[SyntheticSample], cfg: &ExperimentConfig) -> Result<TrainState> {
    let mut state = TrainState::init(cfg)?;
    train_epochs(&mut state, samples, cfg, cfg.optimizer.epochs)?;
    Ok(state)
}

/// Continue training for `epochs` more epochs.
pub fn train_epochs(
    state: &mut TrainState,
    samples: &[SyntheticSample],
    cfg: &ExperimentConfig,
    epochs: usize,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    let classes = state.model.num_classes();
    if let Some(s) = samples.iter().find(|s| s.image_labels.len() != classes) {
        return Err(Error::invalid(format!(
            "sample with {} labels for a {classes}-class model",
            s.image_labels.len()
        )));
    }
    let adam_cfg = cfg.adam();
    let root = cfg.seeds.experiment;
    for _ in 0..epochs {
        let epoch = state.epoch;
        let lr = cfg.learning_rate(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_indexed(root, Stream::Shuffle, epoch as u64)));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.optimizer.batch_size) {
            let mut sum: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let mask_seed = seed::derive_indexed(root, Stream::TrainMasks, state.forwards);
                state.forwards += 1;
                let (loss, grads) = sample_loss_and_grads(&state.model, &samples[i], cfg, mask_seed)?;
                batch_loss += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_assign(g)?;
                        }
                    }
                }
            }
            let n = batch.len() as f64;
            batch_loss /= n;
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training loss became {batch_loss} at step {} (epoch {epoch}, lr {lr})",
                    state.step
                )));
            }
            let grads: Vec<Tensor> = sum
                .expect("batches are nonempty")
                .into_iter()
                .map(|g| g.map(|v| v / n))
                .collect();
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient at step {}", state.step)));
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam_step(&mut state.model.params_mut(), &grad_refs, &mut state.adam, lr, &adam_cfg)?;
            state.step += 1;
            epoch_loss += batch_loss * n;
            state.history.push(LogRow {
                step: state.step,
                epoch,
                loss: batch_loss,
                lr,
            });
        }
        state.epoch += 1;
        info!(
            "epoch {epoch}: mean loss {:.5}, lr {lr}",
            epoch_loss / samples.len() as f64
        );
    }
    Ok(())
}

pub fn write_log_csv(path: &Path, history: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "epoch", "loss", "lr"])?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            format!("{:.10}", r.loss),
            r.lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean over supervised pixels of `-log H[label, u]`.
///
/// `probs` is `[c_total, h, w]` with a per-pixel probability simplex along
/// the first axis; `labels` holds one channel index per pixel, with 255
/// marking unsupervised pixels. Zero probabilities are clamped to 1e-12.
pub fn full_supervision_loss(probs: &Tensor, labels: &[u8]) -> Result<f64> {
    const FLOOR: f64 = 1e-12;
    let [c, h, w] = probs.dims3("full_supervision_loss")?;
    if labels.len() != h * w {
        return Err(Error::shape(
            "full_supervision_loss",
            format!("{} labels for a {h}x{w} map", labels.len()),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut clamped = 0usize;
    for (u, &l) in labels.iter().enumerate() {
        if l == 255 {
            continue;
        }
        if l as usize >= c {
            return Err(Error::invalid(format!("label {l} has no probability channel (c = {c})")));
        }
        let p = probs.data()[l as usize * h * w + u];
        if p < FLOOR {
            clamped += 1;
        }
        total -= p.max(FLOOR).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("no supervised pixels in the mask"));
    }
    if clamped > 0 {
        warn!("{clamped} supervised pixels had probability below {FLOOR:e}; clamped");
    }
    Ok(total / count as f64)
}

/// `seed_loss + boundary_loss + alpha * L_full` with channel 0 of `probs`
/// for background and channel `c + 1` for class `c`.
pub fn semi_supervised_loss(
    seed_loss: f64,
    boundary_loss: f64,
    probs: &Tensor,
    mask: &GroundTruthMask,
    alpha: f64,
) -> Result<f64> {
    Ok(seed_loss + boundary_loss + alpha * full_supervision_loss(probs, mask.labels())?)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FKCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Versioned binary checkpoint: magic, version, SHA-256 of the config text,
/// the config text, epoch/step counters, then each parameter tensor.
pub fn save_checkpoint<W: Write>(mut w: W, state: &TrainState, cfg: &ExperimentConfig) -> Result<()> {
    let text = cfg.to_toml();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&Sha256::digest(text.as_bytes()))?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&(state.epoch as u64).to_le_bytes())?;
    w.write_all(&state.step.to_le_bytes())?;
    let params = state.model.params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        p.write_binary(&mut w)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: Model,
    pub epoch: usize,
    pub step: u64,
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hash: [u8; 32] = read_array(&mut r)?;
    let len = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)?;
    if Sha256::digest(&text).as_slice() != hash {
        return Err(Error::Format("checkpoint config hash mismatch".into()));
    }
    let text = String::from_utf8(text).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config = ExperimentConfig::from_toml(&text)?;
    let epoch = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let step = u64::from_le_bytes(read_array(&mut r)?);
    let n = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let params = (0..n).map(|_| Tensor::read_binary(&mut r)).collect::<Result<Vec<_>>>()?;
    let model = Model::from_parts(config.backbone.clone(), params)?;
    Ok(Checkpoint {
        config,
        model,
        epoch,
        step,
    })
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fickle::SelectionMode;
    use crate::gradcheck::{check_tape_gradients_at, check_tape_gradients_where, spread_indices};
    use crate::model::BackboneConfig;
    use crate::synthetic::{generate, GeneratorConfig};

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.fickle.kernel_size = 3;
        cfg.fickle.dropout_rate = 0.5;
        cfg.backbone = BackboneConfig {
            channels: vec![3, 4],
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
        cfg
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = small_config();
        let sample = generate(&cfg.dataset.generator, 1, 4).unwrap().remove(0);
        let state = TrainState::init(&cfg).unwrap();
        let params: Vec<Tensor> = state.model.params().into_iter().cloned().collect();
        let model = state.model.clone();
        let labels = sample.label_tensor();
        let indices: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
        let r = check_tape_gradients_at(&params, &indices, 1e-4, |tape, vars| {
            let m = Model::from_parts(model.config.clone(), params.clone()).unwrap();
            let mv = crate::model::ModelVars {
                layers: vars[..vars.len() - 2].chunks(2).map(|c| (c[0], c[1])).collect(),
                head: crate::fickle::HeadVars {
                    weight: vars[vars.len() - 2],
                    bias: vars[vars.len() - 1],
                },
            };
            let image = tape.constant(sample.image.clone());
            let out = m
                .forward(tape, &mv, image, SelectionMode::Stochastic, 0.5, false, 77)
                .unwrap();
            tape.sigmoid_cross_entropy(out.logits, &labels).unwrap()
        });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert_eq!(r.checked, model.param_count());
    }

    #[test]
    fn default_model_gradients_match_on_sampled_entries() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.generator.num_classes = 2;
        cfg.dataset.generator.max_objects = 2;
        let sample = generate(&cfg.dataset.generator, 1, 9).unwrap().remove(0);
        let state = TrainState::init(&cfg).unwrap();
        let params: Vec<Tensor> = state.model.params().into_iter().cloned().collect();
        let cfg_backbone = state.model.config.clone();
        let labels = sample.label_tensor();
        let indices: Vec<Vec<usize>> = params.iter().map(|p| spread_indices(p.numel(), 8)).collect();
        let probe = state.model.clone();
        let smooth = |a: &[Tensor], b: &[Tensor]| {
            probe
                .same_activation_pattern(&sample.image, a.to_vec(), b.to_vec())
                .unwrap()
        };
        let r = check_tape_gradients_where(&params, &indices, 1e-4, |tape, vars| {
            let m = Model::from_parts(cfg_backbone.clone(), params.clone()).unwrap();
            let mv = crate::model::ModelVars {
                layers: vars[..vars.len() - 2].chunks(2).map(|c| (c[0], c[1])).collect(),
                head: crate::fickle::HeadVars {
                    weight: vars[vars.len() - 2],
                    bias: vars[vars.len() - 1],
                },
            };
            let image = tape.constant(sample.image.clone());
            let out = m
                .forward(tape, &mv, image, SelectionMode::Stochastic, 0.9, false, 5)
                .unwrap();
            tape.sigmoid_cross_entropy(out.logits, &labels).unwrap()
        }, smooth);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.checked >= 30, "{r:?}");
    }

    #[test]
    fn overfits_a_single_image() {
        let mut cfg = small_config();
        cfg.optimizer.lr = 0.01;
        cfg.optimizer.epochs = 50;
        let samples = generate(&cfg.dataset.generator, 1, 2).unwrap();
        let state = train_classifier(&samples, &cfg).unwrap();
        let last = state.history.last().unwrap().loss;
        assert!(last < 0.05, "final loss {last}");
        assert_eq!(state.step, 50);
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let mut cfg = small_config();
        cfg.optimizer.epochs = 0;
        let samples = generate(&cfg.dataset.generator, 3, 2).unwrap();
        let state = train_classifier(&samples, &cfg).unwrap();
        assert_eq!(state.model, TrainState::init(&cfg).unwrap().model);
        assert!(state.history.is_empty());
    }

    #[test]
    fn dropout_rate_changes_the_first_step() {
        let mut cfg = small_config();
        cfg.optimizer.epochs = 1;
        cfg.optimizer.batch_size = 1;
        let samples = generate(&cfg.dataset.generator, 1, 2).unwrap();
        let mut det = cfg.clone();
        det.fickle.dropout_rate = 0.0;
        let a = train_classifier(&samples, &cfg).unwrap();
        let b = train_classifier(&samples, &det).unwrap();
        assert_ne!(a.model, b.model);
    }

    #[test]
    fn training_is_reproducible() {
        let mut cfg = small_config();
        cfg.optimizer.epochs = 2;
        let samples = generate(&cfg.dataset.generator, 6, 2).unwrap();
        let a = train_classifier(&samples, &cfg).unwrap();
        let b = train_classifier(&samples, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_config();
        let state = TrainState::init(&cfg).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &state, &cfg).unwrap();
        let ck = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(ck.model, state.model);
        assert_eq!(ck.config, cfg);

        let pos = buf.windows(6).position(|w| w == b"epochs").unwrap();
        buf[pos + 10] ^= 1;
        assert!(load_checkpoint(buf.as_slice()).is_err());
    }

    fn one_hot(labels: &[u8], c: usize) -> Tensor {
        let n = labels.len();
        Tensor::from_fn(&[c, 1, n], |i| f64::from(labels[i % n] as usize == i / n))
    }

    #[test]
    fn full_loss_closed_forms() {
        let labels = [0u8, 1, 2, 2, 1];
        let mask = GroundTruthMask::new(1, 5, labels.to_vec()).unwrap();
        let perfect = one_hot(&labels, 3);
        assert_eq!(semi_supervised_loss(0.3, 0.2, &perfect, &mask, 2.0).unwrap(), 0.5);

        let uniform = Tensor::full(&[4, 1, 5], 0.25);
        let l = full_supervision_loss(&uniform, &labels).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let total = semi_supervised_loss(1.0, 0.0, &uniform, &mask, 2.0).unwrap();
        assert!((total - (1.0 + 2.0 * 4f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn full_loss_is_normalised_by_supervised_pixels() {
        let probs = Tensor::new(&[2, 1, 4], vec![0.9, 0.2, 0.6, 0.5, 0.1, 0.8, 0.4, 0.5]).unwrap();
        let labels = [0u8, 1, 255, 0];
        let single = full_supervision_loss(&probs, &labels).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln() + 0.5f64.ln()) / 3.0;
        assert!((single - want).abs() < 1e-15);

        // duplicate every pixel: same value
        let mut dup = vec![0.0; 16];
        for c in 0..2 {
            for u in 0..4 {
                dup[c * 8 + u] = probs.data()[c * 4 + u];
                dup[c * 8 + 4 + u] = probs.data()[c * 4 + u];
            }
        }
        let labels2: Vec<u8> = labels.iter().chain(&labels).copied().collect();
        let d = full_supervision_loss(&Tensor::new(&[2, 1, 8], dup).unwrap(), &labels2).unwrap();
        assert!((d - single).abs() < 1e-15);

        // reordering pixels within a class changes nothing
        let swapped = Tensor::new(&[2, 1, 4], vec![0.5, 0.2, 0.6, 0.9, 0.5, 0.8, 0.4, 0.1]).unwrap();
        let s = full_supervision_loss(&swapped, &labels).unwrap();
        assert!((s - single).abs() < 1e-15);
    }

    #[test]
    fn full_loss_errors_and_clamping() {
        let probs = Tensor::full(&[2, 1, 2], 0.5);
        assert!(full_supervision_loss(&probs, &[255, 255]).is_err());
        assert!(full_supervision_loss(&probs, &[3, 0]).is_err());
        let zero = Tensor::new(&[2, 1, 1], vec![0.0, 1.0]).unwrap();
        let l = full_supervision_loss(&zero, &[0]).unwrap();
        assert!((l + 1e-12f64.ln()).abs() < 1e-9);
    }
}
