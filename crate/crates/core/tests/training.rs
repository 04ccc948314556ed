use std::path::Path;

use rnlab_core::data::{load_idx_split, DATA_DIR_ENV, resolve_data_dir, synth_blobs, Split};
use rnlab_core::nn::{build_zoo, write_checkpoint, Arch};
use rnlab_core::norm::NormKind;
use rnlab_core::train::{fit, TrainConfig};

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 16,
        lr: 0.01,
        schedule: Vec::new(),
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn training_loss_mostly_decreases() {
    let mut transitions = 0;
    let mut non_increasing = 0;
    for seed in 0..5 {
        let data = synth_blobs(4, 30, [1, 8, 8], seed).unwrap();
        let mut model = build_zoo(Arch::CnnSmall, &data.spec(), NormKind::BatchNorm, 0.2, 0.1, seed).unwrap();
        let history = fit(&mut model, &data, &config(seed), |_, _| Ok(())).unwrap();
        for w in history.windows(2) {
            transitions += 1;
            if w[1].loss <= w[0].loss {
                non_increasing += 1;
            }
        }
    }
    assert!(non_increasing as f64 >= 0.8 * transitions as f64, "{non_increasing}/{transitions}");
}

#[test]
fn training_is_bit_reproducible() {
    for norm in [NormKind::BatchNorm, NormKind::RobustNorm] {
        let data = synth_blobs(3, 20, [1, 8, 8], 4).unwrap();
        let run = || {
            let mut model = build_zoo(Arch::CnnSmall, &data.spec(), norm, 0.2, 0.1, 9).unwrap();
            let cfg = TrainConfig {
                adversarial: true,
                ..config(9)
            };
            let h = fit(&mut model, &data, &cfg, |_, _| Ok(())).unwrap();
            (h, write_checkpoint(&model))
        };
        assert_eq!(run(), run());
    }
}

/// Runs only when MNIST files are available.
#[test]
fn mnist_counts_match_published_histograms() {
    let dir = match std::env::var_os(DATA_DIR_ENV) {
        Some(_) => resolve_data_dir("mnist"),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    };
    if !dir.join("train-images-idx3-ubyte").exists() {
        eprintln!("skipping: no MNIST files under {}", dir.display());
        return;
    }
    let train = load_idx_split(&dir, "mnist", Split::Train).unwrap();
    let val = load_idx_split(&dir, "mnist", Split::Val).unwrap();
    assert_eq!((train.len(), val.len()), (60000, 10000));
    assert_eq!(
        train.label_histogram(),
        [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
    );
    assert_eq!(val.label_histogram(), [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]);
}
