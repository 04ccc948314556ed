use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnlab_core::attacks::{attack, batch_rng, bim, fgsm, mim, pgd, AttackConfig, AttackFamily};
use rnlab_core::data::synth_blobs;
use rnlab_core::experiments::count_inversions;
use rnlab_core::nn::{build_zoo, Arch, DatasetSpec, Model};
use rnlab_core::norm::{compute_stats, nagy_check, NormKind, StatsMode};
use rnlab_core::tensor::Tensor;
use rnlab_core::train::{fit, TrainConfig};

fn spec() -> DatasetSpec {
    DatasetSpec {
        name: "synth".into(),
        input_shape: vec![1, 8, 8],
        num_classes: 3,
    }
}

fn batch(seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let x = (0..n * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0..3)).collect();
    (Tensor::new(vec![n, 1, 8, 8], x).unwrap(), y)
}

fn linf(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn in_box(t: &Tensor) -> bool {
    t.data().iter().all(|v| (0.0..=1.0).contains(v))
}

#[test]
fn linf_attacks_respect_budget_and_box_over_100_batches() {
    let kinds = [NormKind::BatchNorm, NormKind::RobustNorm];
    for seed in 0..100u64 {
        let model = build_zoo(Arch::CnnSmall, &spec(), kinds[seed as usize % 2], 0.2, 0.1, seed).unwrap();
        let (x, y) = batch(seed);
        let eps = [0.0, 0.03, 0.1, 0.3][seed as usize % 4];
        for family in [AttackFamily::Fgsm, AttackFamily::Bim, AttackFamily::Pgd, AttackFamily::Mim] {
            let cfg = AttackConfig {
                random_start: seed % 3 == 0,
                steps: 5,
                stats_mode: if seed % 5 == 0 { StatsMode::Batch } else { StatsMode::Population },
                ..AttackConfig::new(family, eps)
            };
            let adv = attack(&cfg, &model, &x, &y, &mut batch_rng(seed, 0)).unwrap();
            assert!(linf(&adv.x_adv, &x) <= eps + 1e-6, "{family} seed {seed}");
            assert!(in_box(&adv.x_adv), "{family} seed {seed}");
            assert!(adv.linf_dist.iter().all(|&d| d <= eps + 1e-6));
        }
    }
}

#[test]
fn single_step_pgd_is_fgsm_and_zero_decay_mim_is_bim() {
    for seed in 0..20u64 {
        let model = build_zoo(Arch::CnnSmall, &spec(), NormKind::BatchNorm, 0.2, 0.1, seed).unwrap();
        let (x, y) = batch(seed + 1000);
        let one = AttackConfig {
            steps: 1,
            alpha: Some(0.1),
            ..AttackConfig::new(AttackFamily::Pgd, 0.1)
        };
        let a = pgd(&model, &x, &y, &one, &mut batch_rng(0, 0)).unwrap();
        let b = fgsm(&model, &x, &y, &one).unwrap();
        assert_eq!(a.x_adv.data(), b.x_adv.data());

        let cfg = AttackConfig {
            decay: 0.0,
            ..AttackConfig::new(AttackFamily::Mim, 0.1)
        };
        let m = mim(&model, &x, &y, &cfg).unwrap();
        let i = bim(&model, &x, &y, &cfg).unwrap();
        for (p, q) in m.x_adv.data().iter().zip(i.x_adv.data()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }
}

#[test]
fn cw_stays_in_box() {
    for seed in 0..10u64 {
        let model = build_zoo(Arch::CnnSmall, &spec(), NormKind::BatchNorm, 0.2, 0.1, seed).unwrap();
        let (x, y) = batch(seed + 2000);
        let cfg = AttackConfig {
            cw_steps: 10,
            cw_lr: 0.1,
            ..AttackConfig::new(AttackFamily::Cw, 0.0)
        };
        let adv = attack(&cfg, &model, &x, &y, &mut batch_rng(0, 0)).unwrap();
        assert!(in_box(&adv.x_adv));
    }
}

fn trained() -> (Model, rnlab_core::data::Dataset) {
    let data = synth_blobs(3, 40, [1, 8, 8], 7).unwrap();
    let mut model = build_zoo(Arch::CnnSmall, &data.spec(), NormKind::BatchNorm, 0.2, 0.1, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr: 0.05,
        schedule: Vec::new(),
        ..TrainConfig::default()
    };
    fit(&mut model, &data, &cfg, |_, _| Ok(())).unwrap();
    (model, data)
}

#[test]
fn pgd_accuracy_does_not_rise_with_more_steps() {
    let (model, data) = trained();
    let steps = [1, 2, 4, 8];
    let mut curves = Vec::new();
    for seed in 0..5u64 {
        let idx: Vec<usize> = (0..24).map(|i| (i * 5 + seed as usize) % data.len()).collect();
        let sub = data.select(&idx).unwrap();
        let acc: Vec<f64> = steps
            .iter()
            .map(|&n| {
                let cfg = AttackConfig {
                    steps: n,
                    alpha: Some(0.3 / n as f64 * 1.5),
                    random_start: true,
                    seed,
                    ..AttackConfig::new(AttackFamily::Pgd, 0.3)
                };
                let adv = pgd(&model, &sub.images, &sub.labels, &cfg, &mut batch_rng(seed, 0)).unwrap();
                let pred = model.predict(&adv.x_adv, StatsMode::Population).unwrap();
                pred.iter().zip(&sub.labels).filter(|(p, t)| p == t).count() as f64 / sub.len() as f64
            })
            .collect();
        curves.push(acc);
    }
    let mean: Vec<f64> = (0..steps.len())
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
        .collect();
    assert!(count_inversions(&mean) <= 1, "{curves:?}");
}

#[test]
fn nagy_bound_on_1000_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1000 {
        let n = rng.random_range(1..64);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let s = compute_stats(&Tensor::new(vec![n, 1], data).unwrap()).unwrap();
        assert!(nagy_check(&s, n));
    }
    let s = compute_stats(&Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap()).unwrap();
    assert_eq!(s.range()[0].powi(2), 2.0 * 2.0 * s.var[0]);
}
