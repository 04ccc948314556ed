//! Central-difference checks of every differentiable op over ten seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnlab_core::attacks::{cw_init, cw_objective};
use rnlab_core::nn::{build_zoo, cross_entropy, Arch, DatasetSpec};
use rnlab_core::norm::{norm_forward, AffineVars, ForwardMode, NormKind, NormState, StatsMode};
use rnlab_core::tensor::{grad_check, BinaryOp, NormCenter, NormScale, ReduceKind, Tape, Tensor, UnaryOp, Var};
use rnlab_core::Result;

const SEEDS: u64 = 10;
const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `sum(out * w)` for a fixed random `w`, so every output coordinate carries
/// a distinct weight.
fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = rand_tensor(tape.shape(out), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check<F>(name: &str, shape: &[usize], lo: f64, hi: f64, f: F)
where
    F: Fn(&mut Tape, Var, u64) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(shape, lo, hi, &mut rng);
        let r = grad_check(
            |tape, v| {
                let out = f(tape, v, seed)?;
                weighted(tape, out, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(
            r.max_rel_error < TOL,
            "{name} seed {seed}: rel error {} at {}",
            r.max_rel_error,
            r.worst_index
        );
    }
}

#[test]
fn unary_ops() {
    check("neg", &[3, 4], -2.0, 2.0, |t, x, _| t.unary(UnaryOp::Neg, x));
    check("tanh", &[3, 4], -2.0, 2.0, |t, x, _| t.tanh(x));
    check("exp", &[3, 4], -2.0, 2.0, |t, x, _| t.exp(x));
    check("log", &[3, 4], 0.5, 3.0, |t, x, _| t.log(x));
    check("relu", &[3, 4], 0.1, 2.0, |t, x, _| t.relu(x));
    check("relu-neg", &[3, 4], -2.0, -0.1, |t, x, _| t.relu(x));
    check("abs", &[3, 4], 0.1, 2.0, |t, x, _| t.abs(x));
    check("clamp", &[3, 4], 0.1, 0.4, |t, x, _| t.clamp(x, 0.0, 0.5));
}

#[test]
fn binary_ops() {
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div, BinaryOp::Pow] {
        check(&format!("{op:?}"), &[2, 5], 0.5, 2.0, |t, x, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let y = t.constant(rand_tensor(&[2, 5], 0.5, 2.0, &mut rng));
            let a = t.binary(op, x, y)?;
            let b = t.binary(op, y, x)?;
            t.add(a, b)
        });
        check(&format!("{op:?}-scalar"), &[2, 5], 0.5, 2.0, |t, x, _| t.binary(op, x, 1.7));
    }
}

#[test]
fn matmul() {
    check("matmul", &[3, 4], -1.0, 1.0, |t, x, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let w = t.constant(rand_tensor(&[4, 5], -1.0, 1.0, &mut rng));
        let a = t.matmul(x, w)?;
        let v = t.constant(rand_tensor(&[2, 3], -1.0, 1.0, &mut rng));
        let b = t.matmul(v, x)?;
        let sa = t.sum(a)?;
        let sb = t.sum(b)?;
        t.add(sa, sb)
    });
}

/// A shuffled grid with spacing 0.1, free of near-ties.
fn spaced_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - 1.0).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn check_spaced<F>(name: &str, shape: &[usize], f: F)
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let x = spaced_tensor(shape, &mut ChaCha8Rng::seed_from_u64(seed));
        let r = grad_check(
            |t, v| {
                let out = f(t, v)?;
                weighted(t, out, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{name} seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn reductions() {
    for axes in [vec![0], vec![1], vec![0, 2], vec![0, 1, 2]] {
        for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::VarBiased] {
            check(&format!("{kind:?}{axes:?}"), &[3, 4, 2], -1.0, 1.0, |t, x, _| t.reduce(kind, x, &axes));
        }
        for kind in [ReduceKind::Min, ReduceKind::Max] {
            check_spaced(&format!("{kind:?}{axes:?}"), &[3, 4, 2], |t, x| t.reduce(kind, x, &axes));
        }
    }
}

#[test]
fn axis_broadcast_and_reshape() {
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        check(&format!("axis {op:?}"), &[2, 3, 2, 2], 0.5, 1.5, |t, x, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
            let v = t.param(rand_tensor(&[3], 0.5, 1.5, &mut rng));
            t.axis_binary(op, x, v, 1)
        });
    }
    check("reshape", &[2, 6], -1.0, 1.0, |t, x, _| t.reshape(x, &[3, 4]));
}

#[test]
fn convolution_and_pooling() {
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        check(&format!("conv s{stride} p{padding}"), &[2, 2, 5, 5], -1.0, 1.0, |t, x, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 11);
            let w = t.param(rand_tensor(&[3, 2, 3, 3], -1.0, 1.0, &mut rng));
            t.conv2d(x, w, stride, padding)
        });
    }
    check("conv weight", &[3, 2, 3, 3], -1.0, 1.0, |t, w, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 12);
        let x = t.constant(rand_tensor(&[2, 2, 5, 5], -1.0, 1.0, &mut rng));
        t.conv2d(x, w, 1, 1)
    });
    check_spaced("maxpool", &[2, 1, 4, 4], |t, x| t.max_pool2d(x, 2, 2));
    check("avgpool", &[2, 2, 4, 4], -1.0, 1.0, |t, x, _| t.avg_pool2d(x, 2, 2));
}

#[test]
fn losses() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[4, 5], -2.0, 2.0, &mut rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let r = grad_check(|t, v| cross_entropy(t, v, &labels), &x, H).unwrap();
        assert!(r.max_rel_error < TOL, "cross entropy seed {seed}");
        let r = grad_check(
            |t, v| {
                let m = t.margin(v, &labels)?;
                weighted(t, m, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "margin seed {seed}");
    }
}

#[test]
fn fused_channel_normalization() {
    for shape in [vec![6, 3], vec![3, 2, 2, 2]] {
        let c = shape[1];
        check("bn batch", &shape, -1.0, 1.0, |t, x, _| {
            t.channel_normalize(x, NormCenter::Batch, NormScale::BatchStd { eps: 1e-5 })
        });
        for power in [0.2, 1.0] {
            check("rn batch", &shape, -1.0, 1.0, |t, x, _| {
                t.channel_normalize(x, NormCenter::Batch, NormScale::BatchRange { eps: 1e-5, power })
            });
            check("rn fixed centre", &shape, -1.0, 1.0, |t, x, _| {
                t.channel_normalize(x, NormCenter::Fixed(vec![0.1; c]), NormScale::BatchRange { eps: 1e-5, power })
            });
        }
        check("fixed", &shape, -1.0, 1.0, |t, x, _| {
            t.channel_normalize(x, NormCenter::Fixed(vec![0.2; c]), NormScale::Fixed(vec![1.5; c]))
        });
    }
}

#[test]
fn normalization_layers() {
    let kinds = [NormKind::BatchNorm, NormKind::RobustNorm, NormKind::RobustNormPopMean, NormKind::LayerNorm];
    let modes = [
        ForwardMode::Train,
        ForwardMode::Eval(StatsMode::Batch),
        ForwardMode::Eval(StatsMode::Population),
    ];
    for kind in kinds {
        for mode in modes {
            for shape in [vec![5, 3], vec![2, 3, 2, 2]] {
                check(&format!("{kind} {mode:?}"), &shape, -1.0, 1.0, |t, x, seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
                    let mut state = NormState::new(kind, 3);
                    state.gamma = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
                    state.beta = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
                    state.mu_hat_p = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
                    state.sigma2_hat_p = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
                    let affine = AffineVars::record(t, &state, true);
                    Ok(norm_forward(t, x, &state, affine, mode)?.y)
                });
            }
        }
    }
}

#[test]
fn cw_objective_gradient() {
    let spec = DatasetSpec {
        name: "synth".into(),
        input_shape: vec![1, 4, 4],
        num_classes: 3,
    };
    for seed in 0..SEEDS {
        let model = build_zoo(Arch::CnnSmall, &spec, NormKind::BatchNorm, 0.2, 0.1, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, 1, 4, 4], 0.05, 0.95, &mut rng);
        let y = vec![0, 2];
        let mut theta = cw_init(&x);
        for v in theta.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let r = grad_check(
            |t, th| Ok(cw_objective(t, &model, th, &x, &y, 10.0, 0.0, StatsMode::Population)?.0),
            &theta,
            H,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "cw seed {seed}: {}", r.max_rel_error);
    }
}
