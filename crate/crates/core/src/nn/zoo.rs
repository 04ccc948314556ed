use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Model};
use crate::error::{Error, Result};
use crate::norm::{NormKind, NormState, DEFAULT_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Mlp2x256,
    CnnSmall,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Mlp2x256 => "mlp-2x256",
            Arch::CnnSmall => "cnn-small",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-2x256" => Ok(Arch::Mlp2x256),
            "cnn-small" => Ok(Arch::CnnSmall),
            other => Err(Error::Unknown {
                kind: "arch",
                value: other.to_string(),
            }),
        }
    }
}

/// Per-sample input layout and label count of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub name: String,
    /// `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl DatasetSpec {
    /// Built-in datasets: `mnist` and `fashion-mnist` (1x28x28, 10 classes).
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "mnist" | "fashion-mnist" => Ok(DatasetSpec {
                name: id.to_string(),
                input_shape: vec![1, 28, 28],
                num_classes: 10,
            }),
            other => Err(Error::Unknown {
                kind: "dataset",
                value: other.to_string(),
            }),
        }
    }

    pub fn input_rank_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend_from_slice(&self.input_shape);
        s
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// Kaiming-uniform: U(-b, b) with `b = sqrt(6 / fan_in)`.
    fn kaiming(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }
}

fn norm_layer(name: &str, kind: NormKind, channels: usize, p: f64, tau: f64) -> Result<Layer> {
    let state = NormState::new(kind, channels).with_power(p).with_tau(tau);
    state.validate()?;
    Ok(Layer::Norm {
        name: name.to_string(),
        state,
    })
}

fn linear(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Layer {
    Layer::Linear {
        name: name.to_string(),
        weight: init.kaiming(vec![fan_in, fan_out], fan_in),
        bias: Tensor::zeros(vec![fan_out]),
    }
}

fn conv3x3(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Layer {
    Layer::Conv2d {
        name: name.to_string(),
        weight: init.kaiming(vec![c_out, c_in, 3, 3], c_in * 9),
        bias: Tensor::zeros(vec![c_out]),
        stride: 1,
        padding: 1,
    }
}

/// Builds one of the model-zoo architectures with freshly initialised
/// parameters. Identical arguments give bit-identical models.
///
/// * `mlp-2x256`: flatten, then two `linear(256) -> norm -> relu` blocks and
///   a linear classifier.
/// * `cnn-small`: two `conv3x3 -> norm -> relu -> maxpool2` blocks with 16
///   and 32 filters, then flatten and a linear classifier.
pub fn build_zoo(arch: Arch, data: &DatasetSpec, norm: NormKind, p: f64, tau: f64, seed: u64) -> Result<Model> {
    if data.input_shape.len() != 3 || data.input_shape.contains(&0) || data.num_classes < 2 {
        return Err(Error::InvalidParameter(format!(
            "dataset {} needs a [C, H, W] input and at least two classes",
            data.name
        )));
    }
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let k = data.num_classes;
    let layers = match arch {
        Arch::Mlp2x256 => {
            let d = data.input_len();
            vec![
                Layer::Flatten,
                linear(&mut init, "fc1", d, 256),
                norm_layer("norm1", norm, 256, p, tau)?,
                Layer::Relu,
                linear(&mut init, "fc2", 256, 256),
                norm_layer("norm2", norm, 256, p, tau)?,
                Layer::Relu,
                linear(&mut init, "fc3", 256, k),
            ]
        }
        Arch::CnnSmall => {
            let (c, h, w) = (data.input_shape[0], data.input_shape[1], data.input_shape[2]);
            if h < 4 || w < 4 {
                return Err(Error::InvalidParameter(format!(
                    "cnn-small needs inputs of at least 4x4, got {h}x{w}"
                )));
            }
            let flat = 32 * (h / 2 / 2) * (w / 2 / 2);
            vec![
                conv3x3(&mut init, "conv1", c, 16),
                norm_layer("norm1", norm, 16, p, tau)?,
                Layer::Relu,
                Layer::MaxPool2d { kernel: 2, stride: 2 },
                conv3x3(&mut init, "conv2", 16, 32),
                norm_layer("norm2", norm, 32, p, tau)?,
                Layer::Relu,
                Layer::MaxPool2d { kernel: 2, stride: 2 },
                Layer::Flatten,
                linear(&mut init, "fc", flat, k),
            ]
        }
    };
    Ok(Model {
        arch,
        dataset: data.clone(),
        norm,
        p,
        tau,
        eps: DEFAULT_EPS,
        seed,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist() -> DatasetSpec {
        DatasetSpec::from_id("mnist").unwrap()
    }

    #[test]
    fn mlp_has_two_hidden_norm_layers() {
        let m = build_zoo(Arch::Mlp2x256, &mnist(), NormKind::BatchNorm, 0.2, 0.1, 0).unwrap();
        let norms: Vec<_> = m.norm_states().collect();
        assert_eq!(norms.len(), 2);
        assert!(norms.iter().all(|(_, _, s)| s.kind == NormKind::BatchNorm && s.channels() == 256));
    }

    #[test]
    fn cnn_robustnorm_layers_carry_power() {
        let m = build_zoo(Arch::CnnSmall, &mnist(), NormKind::RobustNorm, 0.2, 0.1, 0).unwrap();
        let norms: Vec<_> = m.norm_states().map(|(_, _, s)| (s.p, s.tau, s.channels())).collect();
        assert_eq!(norms, vec![(0.2, 0.1, 16), (0.2, 0.1, 32)]);
    }

    #[test]
    fn cnn_logits_shape() {
        let m = build_zoo(Arch::CnnSmall, &mnist(), NormKind::BatchNorm, 0.2, 0.1, 0).unwrap();
        let x = Tensor::full(vec![2, 1, 28, 28], 0.5);
        let z = m.logits(&x, crate::norm::StatsMode::Population).unwrap();
        assert_eq!(z.shape(), &[2, 10]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_zoo(Arch::CnnSmall, &mnist(), NormKind::BatchNorm, 0.2, 0.1, 42).unwrap();
        let b = build_zoo(Arch::CnnSmall, &mnist(), NormKind::BatchNorm, 0.2, 0.1, 42).unwrap();
        let c = build_zoo(Arch::CnnSmall, &mnist(), NormKind::BatchNorm, 0.2, 0.1, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn weights_within_kaiming_bound_and_biases_zero() {
        let m = build_zoo(Arch::CnnSmall, &mnist(), NormKind::BatchNorm, 0.2, 0.1, 1).unwrap();
        for layer in &m.layers {
            if let Layer::Conv2d { weight, bias, .. } = layer {
                let fan_in: usize = weight.shape()[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                assert!(weight.data().iter().all(|v| v.abs() <= bound));
                assert!(bias.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn unknown_ids() {
        assert!(matches!("resnet".parse::<Arch>(), Err(Error::Unknown { kind: "arch", .. })));
        assert!(DatasetSpec::from_id("cifar").is_err());
    }
}
