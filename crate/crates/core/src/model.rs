//! The small convolutional backbone and the full classifier built on it.
//!
//! Each backbone block is a same-padded stride-1 convolution, the
//! activation, and (for block stride 2, 4, ...) non-overlapping average
//! pooling. Pooling rather than strided convolution keeps every layer's
//! geometry exact for even input sizes. The default turns a 3x64x64 image
//! into a 64x16x16 feature map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fickle::{forward_with_mode, ClassifierHead, HeadOutput, HeadVars, SelectionMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            kernel_sizes: vec![3, 3, 1],
            strides: vec![2, 1, 2],
            activation: Activation::Relu,
        }
    }
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(3)
    }

    /// Feature-map side for a square input, checking every block tiles.
    pub fn feature_size(&self, image_size: usize) -> Result<usize> {
        let bad = |key: &str, message: String| Error::Config {
            key: format!("backbone.{key}"),
            message,
        };
        if self.channels.is_empty() {
            return Err(bad("channels", "at least one block is required".into()));
        }
        if self.kernel_sizes.len() != self.channels.len() || self.strides.len() != self.channels.len() {
            return Err(bad(
                "kernel_sizes",
                "channels, kernel_sizes and strides must have equal length".into(),
            ));
        }
        if let Some(&k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(bad("kernel_sizes", format!("kernel {k} is even; same padding needs odd kernels")));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(bad("channels", "widths and strides must be positive".into()));
        }
        let mut size = image_size;
        for &s in &self.strides {
            if size % s != 0 {
                return Err(bad("strides", format!("stride {s} does not tile a {size}px map")));
            }
            size /= s;
        }
        Ok(size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Backbone plus classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: BackboneConfig,
    pub layers: Vec<ConvLayer>,
    pub head: ClassifierHead,
}

/// A model registered on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub layers: Vec<(Var, Var)>,
    pub head: HeadVars,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.extend([self.head.weight, self.head.bias]);
        v
    }
}

impl Model {
    /// He-style Gaussian weights for the backbone, zero biases.
    pub fn init(
        config: &BackboneConfig,
        image_size: usize,
        num_classes: usize,
        head_kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let feature = config.feature_size(image_size)?;
        if feature < head_kernel {
            return Err(Error::Config {
                key: "backbone.strides".into(),
                message: format!("feature map {feature}x{feature} is smaller than the {head_kernel}x{head_kernel} head kernel"),
            });
        }
        let mut c_in = 3;
        let mut layers = Vec::with_capacity(config.channels.len());
        for (&c_out, &k) in config.channels.iter().zip(&config.kernel_sizes) {
            let std = (2.0 / (c_in * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            layers.push(ConvLayer {
                weight: Tensor::from_fn(&[c_out, c_in, k, k], |_| normal.sample(rng)),
                bias: Tensor::zeros(&[c_out]),
            });
            c_in = c_out;
        }
        let head = ClassifierHead::init(num_classes, c_in, head_kernel, rng)?;
        Ok(Self {
            config: config.clone(),
            layers,
            head,
        })
    }

    pub fn from_parts(config: BackboneConfig, params: Vec<Tensor>) -> Result<Self> {
        let n = config.channels.len();
        if params.len() != 2 * n + 2 {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                2 * n + 2,
                params.len()
            )));
        }
        let mut it = params.into_iter();
        let mut layers = Vec::with_capacity(n);
        let mut c_in = 3;
        for (&c_out, &k) in config.channels.iter().zip(&config.kernel_sizes) {
            let weight = it.next().expect("counted");
            let bias = it.next().expect("counted");
            if weight.shape() != [c_out, c_in, k, k] || bias.shape() != [c_out] {
                return Err(Error::Format(format!(
                    "layer parameters {:?}/{:?} do not match the backbone config",
                    weight.shape(),
                    bias.shape()
                )));
            }
            layers.push(ConvLayer { weight, bias });
            c_in = c_out;
        }
        let head = ClassifierHead::new(it.next().expect("counted"), it.next().expect("counted"))?;
        if head.channels() != c_in {
            return Err(Error::Format("head width does not match the backbone".into()));
        }
        Ok(Self { config, layers, head })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Backbone weights and biases in order, then head weight and bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        v.extend([self.head.weight(), self.head.bias()]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        v.extend(self.head.params_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let put = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| (put(tape, &l.weight), put(tape, &l.bias)))
            .collect();
        ModelVars {
            layers,
            head: self.head.register(tape, trainable),
        }
    }

    /// Backbone feature map of a `[3, H, W]` image on the tape.
    pub fn features(&self, tape: &mut Tape, vars: &ModelVars, image: Var) -> Result<Var> {
        let mut x = image;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let k = self.config.kernel_sizes[i];
            x = tape.conv2d(x, w, b, 1, k / 2)?;
            if self.config.activation == Activation::Relu {
                x = tape.relu(x);
            }
            let s = self.config.strides[i];
            if s > 1 {
                x = tape.avg_pool2d(x, s)?;
            }
        }
        Ok(x)
    }

    /// Feature map of an image as a plain tensor (no gradients kept).
    pub fn feature_tensor(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(image.clone());
        let f = self.features(&mut tape, &vars, x)?;
        Ok(tape.value(f).clone())
    }

    /// Inputs of every backbone activation for one image, in layer order.
    pub fn preactivations(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let mut x = tape.constant(image.clone());
        let mut out = Vec::with_capacity(vars.layers.len());
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            x = tape.conv2d(x, w, b, 1, self.config.kernel_sizes[i] / 2)?;
            out.push(tape.value(x).clone());
            if self.config.activation == Activation::Relu {
                x = tape.relu(x);
            }
            if self.config.strides[i] > 1 {
                x = tape.avg_pool2d(x, self.config.strides[i])?;
            }
        }
        Ok(out)
    }

    /// Whether no activation input changes sign between the parameter sets
    /// `a` and `b`, i.e. the loss is smooth along the segment between them
    /// as far as the backbone is concerned.
    pub fn same_activation_pattern(&self, image: &Tensor, a: Vec<Tensor>, b: Vec<Tensor>) -> Result<bool> {
        if self.config.activation == Activation::Identity {
            return Ok(true);
        }
        let pa = Model::from_parts(self.config.clone(), a)?.preactivations(image)?;
        let pb = Model::from_parts(self.config.clone(), b)?.preactivations(image)?;
        Ok(pa
            .iter()
            .zip(&pb)
            .all(|(x, y)| x.data().iter().zip(y.data()).all(|(u, v)| (*u > 0.0) == (*v > 0.0))))
    }

    /// Image to class scores under one selection mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        image: Var,
        mode: SelectionMode,
        rate: f64,
        rescale: bool,
        mask_seed: u64,
    ) -> Result<HeadOutput> {
        let f = self.features(tape, vars, image)?;
        forward_with_mode(tape, f, &vars.head, mode, rate, rescale, mask_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_backbone_geometry() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.feature_size(64).unwrap(), 16);
        let model = Model::init(&cfg, 64, 4, 9, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f = model.feature_tensor(&Tensor::full(&[3, 64, 64], 0.5)).unwrap();
        assert_eq!(f.shape(), &[64, 16, 16]);
        assert_eq!(model.head.param_count(), 4 * 64 * 81 + 4);
    }

    #[test]
    fn feature_map_must_fit_the_head() {
        let cfg = BackboneConfig {
            strides: vec![2, 2, 2],
            ..BackboneConfig::default()
        };
        assert!(Model::init(&cfg, 64, 4, 9, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let odd = BackboneConfig {
            strides: vec![3, 1, 1],
            ..BackboneConfig::default()
        };
        assert!(odd.feature_size(64).is_err());
    }

    #[test]
    fn parts_round_trip() {
        let cfg = BackboneConfig::default();
        let model = Model::init(&cfg, 64, 4, 9, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
        assert_eq!(Model::from_parts(cfg.clone(), params.clone()).unwrap(), model);
        assert!(Model::from_parts(cfg, params[1..].to_vec()).is_err());
    }
}
