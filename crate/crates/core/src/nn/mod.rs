//! Layers, models and the model zoo.

mod checkpoint;
mod zoo;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use zoo::{build_zoo, Arch, DatasetSpec};

use crate::error::{Error, Result};
use crate::norm::{norm_forward, AffineVars, ForwardMode, NormKind, NormState, StatsMode, StatsSnapshot};
use crate::tensor::{BinaryOp, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = x W + b` with `W: [in, out]`.
    Linear { name: String, weight: Tensor, bias: Tensor },
    /// `weight: [F, C, kh, kw]`, `bias: [F]`.
    Conv2d {
        name: String,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    AvgPool2d { kernel: usize, stride: usize },
    Flatten,
    Norm { name: String, state: NormState },
}

impl Layer {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Linear { name, .. } | Layer::Conv2d { name, .. } | Layer::Norm { name, .. } => Some(name),
            _ => None,
        }
    }

    /// Output shape for a given input shape (batch axis included).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |reason: String| Error::InvalidShape { op: "layer", reason };
        match self {
            Layer::Linear { weight, .. } => {
                let (i, o) = (weight.shape()[0], weight.shape()[1]);
                if input.len() != 2 || input[1] != i {
                    return Err(mismatch(format!("linear expects [N, {i}], got {input:?}")));
                }
                Ok(vec![input[0], o])
            }
            Layer::Conv2d { weight, stride, padding, .. } => {
                let w = weight.shape();
                if input.len() != 4 || input[1] != w[1] {
                    return Err(mismatch(format!("conv2d expects [N, {}, H, W], got {input:?}", w[1])));
                }
                if input[2] + 2 * padding < w[2] || input[3] + 2 * padding < w[3] {
                    return Err(mismatch(format!("conv2d kernel larger than input {input:?}")));
                }
                Ok(vec![
                    input[0],
                    w[0],
                    (input[2] + 2 * padding - w[2]) / stride + 1,
                    (input[3] + 2 * padding - w[3]) / stride + 1,
                ])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d { kernel, stride } | Layer::AvgPool2d { kernel, stride } => {
                if input.len() != 4 || input[2] < *kernel || input[3] < *kernel {
                    return Err(mismatch(format!("pool expects [N, C, H>={kernel}, W>={kernel}], got {input:?}")));
                }
                Ok(vec![
                    input[0],
                    input[1],
                    (input[2] - kernel) / stride + 1,
                    (input[3] - kernel) / stride + 1,
                ])
            }
            Layer::Flatten => {
                if input.is_empty() {
                    return Err(mismatch("cannot flatten a scalar".into()));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            Layer::Norm { state, .. } => {
                if !(input.len() == 2 || input.len() == 4) || input[1] != state.channels() {
                    return Err(mismatch(format!(
                        "norm with {} channels got {input:?}",
                        state.channels()
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Everything recorded by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Tape handles of trainable parameters, in [`Model::param_names`] order.
    pub params: Vec<Var>,
    /// Batch statistics seen by each normalization layer, keyed by layer
    /// index. Filled in train mode, or in any mode when requested.
    pub snapshots: Vec<(usize, StatsSnapshot)>,
}

/// Extra forward behaviour.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Record parameters as differentiable leaves.
    pub trainable: bool,
    /// Capture per-layer batch statistics of normalization inputs even at
    /// inference.
    pub collect_stats: bool,
}

/// An ordered stack of layers plus the metadata needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub dataset: DatasetSpec,
    pub norm: NormKind,
    pub p: f64,
    pub tau: f64,
    pub eps: f64,
    /// Initialisation seed.
    pub seed: u64,
    pub layers: Vec<Layer>,
}

impl Model {
    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes
    }

    /// Trainable parameter names, unique and in a fixed order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear { name, .. } | Layer::Conv2d { name, .. } => {
                    names.push(format!("{name}.weight"));
                    names.push(format!("{name}.bias"));
                }
                Layer::Norm { name, state } if has_affine(state) => {
                    names.push(format!("{name}.gamma"));
                    names.push(format!("{name}.beta"));
                }
                _ => {}
            }
        }
        names
    }

    /// Every serialisable tensor: trainable parameters followed, per layer,
    /// by tracked statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear { name, weight, bias } | Layer::Conv2d { name, weight, bias, .. } => {
                    out.push((format!("{name}.weight"), weight.clone()));
                    out.push((format!("{name}.bias"), bias.clone()));
                }
                Layer::Norm { name, state } => {
                    if has_affine(state) {
                        out.push((format!("{name}.gamma"), Tensor::from_vec(state.gamma.clone())));
                        out.push((format!("{name}.beta"), Tensor::from_vec(state.beta.clone())));
                    }
                    if state.kind.tracks_statistics() {
                        out.push((format!("{name}.mu_hat_P"), Tensor::from_vec(state.mu_hat_p.clone())));
                        out.push((format!("{name}.sigma2_hat_P"), Tensor::from_vec(state.sigma2_hat_p.clone())));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Overwrites a named tensor (parameter or tracked statistic).
    pub fn set_named(&mut self, key: &str, values: &[f64], shape: &[usize]) -> Result<()> {
        let (layer_name, field) = key.rsplit_once('.').ok_or_else(|| Error::Unknown {
            kind: "tensor name",
            value: key.to_string(),
        })?;
        let unknown = || Error::Unknown {
            kind: "tensor name",
            value: key.to_string(),
        };
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.name() == Some(layer_name))
            .ok_or_else(unknown)?;
        let target: &mut [f64] = match (layer, field) {
            (Layer::Linear { weight, .. } | Layer::Conv2d { weight, .. }, "weight") => {
                check_shape(key, weight.shape(), shape)?;
                weight.data_mut()
            }
            (Layer::Linear { bias, .. } | Layer::Conv2d { bias, .. }, "bias") => {
                check_shape(key, bias.shape(), shape)?;
                bias.data_mut()
            }
            (Layer::Norm { state, .. }, f) => {
                let c = state.channels();
                check_shape(key, &[c], shape)?;
                match f {
                    "gamma" if has_affine(state) => &mut state.gamma,
                    "beta" if has_affine(state) => &mut state.beta,
                    "mu_hat_P" if state.kind.tracks_statistics() => &mut state.mu_hat_p,
                    "sigma2_hat_P" if state.kind.tracks_statistics() => {
                        if values.iter().any(|&v| v < 0.0) {
                            return Err(Error::InvalidParameter(format!("{key}: negative variance")));
                        }
                        &mut state.sigma2_hat_p
                    }
                    _ => return Err(unknown()),
                }
            }
            _ => return Err(unknown()),
        };
        if target.len() != values.len() {
            return Err(Error::ShapeMismatch {
                op: "set_named",
                lhs: vec![target.len()],
                rhs: vec![values.len()],
            });
        }
        target.copy_from_slice(values);
        Ok(())
    }

    /// Visits trainable parameters mutably, in [`Model::param_names`] order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut [f64]) -> Result<()>) -> Result<()> {
        for layer in &mut self.layers {
            match layer {
                Layer::Linear { name, weight, bias } | Layer::Conv2d { name, weight, bias, .. } => {
                    f(&format!("{name}.weight"), weight.data_mut())?;
                    f(&format!("{name}.bias"), bias.data_mut())?;
                }
                Layer::Norm { name, state } if has_affine(state) => {
                    f(&format!("{name}.gamma"), &mut state.gamma)?;
                    f(&format!("{name}.beta"), &mut state.beta)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Sets the stabilising `eps` of the model and every norm layer.
    pub fn set_norm_eps(&mut self, eps: f64) -> Result<()> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidParameter(format!("norm eps {eps} must be finite and >= 0")));
        }
        self.eps = eps;
        for layer in &mut self.layers {
            if let Layer::Norm { state, .. } = layer {
                state.eps = eps;
            }
        }
        Ok(())
    }

    pub fn norm_states(&self) -> impl Iterator<Item = (usize, &str, &NormState)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Norm { name, state } => Some((i, name.as_str(), state)),
            _ => None,
        })
    }

    /// Records the network on `tape`. Never mutates the model; in train mode
    /// the batch statistics come back in [`ForwardPass::snapshots`].
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: ForwardMode, opts: ForwardOptions) -> Result<ForwardPass> {
        let mut shape = tape.shape(x).to_vec();
        let expected = self.dataset.input_rank_shape(shape.first().copied().unwrap_or(0));
        if shape != expected {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: expected,
                rhs: shape,
            });
        }
        let mut h = x;
        let mut params = Vec::new();
        let mut snapshots = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let next_shape = layer.output_shape(&shape)?;
            h = match layer {
                Layer::Linear { weight, bias, .. } => {
                    let w = tape.leaf(weight.clone().with_requires_grad(opts.trainable));
                    let b = tape.leaf(bias.clone().with_requires_grad(opts.trainable));
                    params.extend([w, b]);
                    let y = tape.matmul(h, w)?;
                    tape.axis_binary(BinaryOp::Add, y, b, 1)?
                }
                Layer::Conv2d { weight, bias, stride, padding, .. } => {
                    let w = tape.leaf(weight.clone().with_requires_grad(opts.trainable));
                    let b = tape.leaf(bias.clone().with_requires_grad(opts.trainable));
                    params.extend([w, b]);
                    let y = tape.conv2d(h, w, *stride, *padding)?;
                    tape.axis_binary(BinaryOp::Add, y, b, 1)?
                }
                Layer::Relu => tape.relu(h)?,
                Layer::MaxPool2d { kernel, stride } => tape.max_pool2d(h, *kernel, *stride)?,
                Layer::AvgPool2d { kernel, stride } => tape.avg_pool2d(h, *kernel, *stride)?,
                Layer::Flatten => tape.reshape(h, &next_shape)?,
                Layer::Norm { state, .. } if state.kind == NormKind::Identity => h,
                Layer::Norm { state, .. } => {
                    let affine = AffineVars::record(tape, state, opts.trainable);
                    if has_affine(state) {
                        params.extend([affine.gamma, affine.beta]);
                    }
                    let out = norm_forward(tape, h, state, affine, mode)?;
                    match out.snapshot {
                        Some(s) => snapshots.push((idx, s)),
                        None if opts.collect_stats && state.kind.tracks_statistics() => {
                            snapshots.push((idx, crate::norm::compute_stats(tape.value(h))?));
                        }
                        None => {}
                    }
                    out.y
                }
            };
            shape = next_shape;
        }
        Ok(ForwardPass {
            logits: h,
            params,
            snapshots,
        })
    }

    /// Train-mode forward that also folds the batch statistics into the
    /// tracked estimates.
    pub fn forward_train(&mut self, tape: &mut Tape, x: Var) -> Result<ForwardPass> {
        let pass = self.forward(
            tape,
            x,
            ForwardMode::Train,
            ForwardOptions {
                trainable: true,
                collect_stats: false,
            },
        )?;
        for (idx, snapshot) in &pass.snapshots {
            if let Layer::Norm { state, .. } = &mut self.layers[*idx] {
                if state.kind.tracks_statistics() {
                    state.track(snapshot)?;
                }
            }
        }
        Ok(pass)
    }

    /// Inference logits for a batch.
    pub fn logits(&self, x: &Tensor, stats: StatsMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = self.forward(&mut tape, xv, ForwardMode::Eval(stats), ForwardOptions::default())?;
        Ok(tape.value(pass.logits).clone())
    }

    pub fn predict(&self, x: &Tensor, stats: StatsMode) -> Result<Vec<usize>> {
        self.logits(x, stats)?.argmax_rows()
    }

    pub fn has_norm(&self, kind: NormKind) -> bool {
        self.norm_states().any(|(_, _, s)| s.kind == kind)
    }
}

fn has_affine(state: &NormState) -> bool {
    state.affine && state.kind != NormKind::Identity
}

fn check_shape(key: &str, expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(Error::Checkpoint(format!(
            "{key}: expected shape {expected:?}, found {got:?}"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of `logits: [N, K]` against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn synth_spec(shape: [usize; 3]) -> DatasetSpec {
        DatasetSpec {
            name: "synth".into(),
            input_shape: shape.to_vec(),
            num_classes: 3,
        }
    }

    #[test]
    fn zero_weight_mlp_gives_zero_logits() {
        let mut m = build_zoo(Arch::Mlp2x256, &synth_spec([1, 4, 4]), NormKind::Identity, 0.2, 0.1, 3).unwrap();
        m.for_each_param_mut(|_, v| {
            v.fill(0.0);
            Ok(())
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[5, 1, 4, 4]);
        let z = m.logits(&x, StatsMode::Population).unwrap();
        assert_eq!(z.shape(), &[5, 3]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_pure() {
        let m = build_zoo(Arch::CnnSmall, &synth_spec([1, 8, 8]), NormKind::BatchNorm, 0.2, 0.1, 3).unwrap();
        let before = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[4, 1, 8, 8]);
        for stats in [StatsMode::Population, StatsMode::Batch] {
            let a = m.logits(&x, stats).unwrap();
            let b = m.logits(&x, stats).unwrap();
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(m, before);
    }

    #[test]
    fn train_forward_updates_tracking() {
        let mut m = build_zoo(Arch::Mlp2x256, &synth_spec([1, 2, 2]), NormKind::BatchNorm, 0.2, 0.1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[6, 1, 2, 2]);
        let before: Vec<f64> = m.norm_states().next().unwrap().2.mu_hat_p.clone();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        m.forward_train(&mut tape, xv).unwrap();
        let after = &m.norm_states().next().unwrap().2.mu_hat_p;
        assert_ne!(&before, after);
    }

    #[test]
    fn input_shape_mismatch() {
        let m = build_zoo(Arch::CnnSmall, &synth_spec([1, 8, 8]), NormKind::BatchNorm, 0.2, 0.1, 3).unwrap();
        let x = Tensor::zeros(vec![2, 1, 6, 6]);
        assert!(matches!(m.logits(&x, StatsMode::Population), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn param_names_are_unique() {
        for arch in [Arch::Mlp2x256, Arch::CnnSmall] {
            let m = build_zoo(arch, &synth_spec([1, 8, 8]), NormKind::RobustNorm, 0.2, 0.1, 1).unwrap();
            let names = m.param_names();
            let mut dedup = names.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(names.len(), dedup.len());
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels = [0usize, 2, 1, 1];
        for _ in 0..5 {
            let z = random(&mut rng, &[4, 3]);
            let r = grad_check(|t, v| cross_entropy(t, v, &labels), &z, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
        }
    }

    /// Gradient of a whole small network with respect to its input.
    #[test]
    fn model_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for norm in [NormKind::BatchNorm, NormKind::RobustNorm, NormKind::LayerNorm, NormKind::Identity] {
            let m = build_zoo(Arch::CnnSmall, &synth_spec([1, 4, 4]), norm, 0.5, 0.1, 9).unwrap();
            let x = random(&mut rng, &[3, 1, 4, 4]);
            let labels = [0usize, 1, 2];
            for mode in [ForwardMode::Train, ForwardMode::Eval(StatsMode::Population)] {
                let r = grad_check(
                    |t, v| {
                        let pass = m.forward(t, v, mode, ForwardOptions::default())?;
                        cross_entropy(t, pass.logits, &labels)
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(r.max_rel_error < 1e-4, "{norm:?} {mode:?}: {}", r.max_rel_error);
            }
        }
    }
}
