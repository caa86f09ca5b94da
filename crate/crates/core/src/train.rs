//! The seeded training loop shared by the CLI and the test suites: epoch
//! shuffling, optional augmentation, the stepped learning-rate schedule,
//! and per-iteration reporting.

use crate::cascade::{train_step, CascadeConfig, LossReport};
use crate::data::{augment, make_batch, AugmentConfig, Scene};
use crate::error::Result;
use crate::network::Bpn;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::SgdConfig;

/// Learning-rate drop points as fractions of the run.
pub const LR_DROP_FRACTIONS: [f64; 2] = [2.0 / 3.0, 5.0 / 6.0];

/// Stepped schedule: base rate, then x0.1 from 2/3 of the run and x0.01
/// from 5/6.
pub fn lr_at(iter: usize, total_iterations: usize, base_lr: f64) -> f64 {
    let t = iter as f64 / total_iterations.max(1) as f64;
    if t >= LR_DROP_FRACTIONS[1] {
        base_lr * 0.01
    } else if t >= LR_DROP_FRACTIONS[0] {
        base_lr * 0.1
    } else {
        base_lr
    }
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub total_iterations: usize,
    pub start_iteration: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    pub augment_cfg: AugmentConfig,
    pub cascade: CascadeConfig,
}

impl TrainSettings {
    pub fn new(total_iterations: usize, seed: u64, cascade: CascadeConfig) -> Self {
        TrainSettings {
            batch_size: 8,
            total_iterations,
            start_iteration: 0,
            base_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.005,
            seed,
            augment: false,
            augment_cfg: AugmentConfig::default(),
            cascade,
        }
    }
}

/// Runs `total_iterations - start_iteration` steps over the scene list.
///
/// Epoch boundaries, shuffles, and augmentation draws are pure functions of
/// `(seed, iteration)`, so a resumed run walks the same batch sequence the
/// uninterrupted run would have. `on_iter` sees the 1-based iteration
/// index, the step's report, and the updated network (for periodic
/// checkpoints); returning an error aborts training.
pub fn run_training<F: Scalar>(
    net: &mut Bpn<F>,
    scenes: &[Scene],
    settings: &TrainSettings,
    mut on_iter: impl FnMut(usize, &LossReport, &Bpn<F>) -> Result<()>,
) -> Result<()> {
    assert!(!scenes.is_empty(), "training needs at least one scene");
    let root = RngState::new(settings.seed);
    let batches_per_epoch = scenes.len().div_ceil(settings.batch_size);

    let mut iter = settings.start_iteration;
    while iter < settings.total_iterations {
        let epoch = iter / batches_per_epoch;
        let order = crate::data::batch_order(
            scenes.len(),
            settings.batch_size,
            &mut root.split(epoch_shuffle_tag(epoch)),
        );
        let first_batch = iter % batches_per_epoch;
        for (bi, batch_idx) in order.iter().enumerate().skip(first_batch) {
            if iter >= settings.total_iterations {
                break;
            }
            let step_tag = (epoch as u64) << 24 | bi as u64;
            let augmented: Vec<Scene>;
            let views: Vec<&Scene> = if settings.augment {
                augmented = batch_idx
                    .iter()
                    .map(|i| {
                        let mut arng = root.split(0xA06_0000_0000u64 ^ (step_tag << 12) ^ *i as u64);
                        augment(&scenes[*i], &settings.augment_cfg, &mut arng)
                    })
                    .collect();
                augmented.iter().collect()
            } else {
                batch_idx.iter().map(|i| &scenes[*i]).collect()
            };
            let batch = make_batch::<F>(&views)?;
            let sgd = SgdConfig {
                lr: lr_at(iter, settings.total_iterations, settings.base_lr),
                momentum: settings.momentum,
                weight_decay: settings.weight_decay,
            };
            let report = train_step(
                net,
                &batch.images,
                &batch.annotations,
                &settings.cascade,
                &sgd,
            )?;
            iter += 1;
            on_iter(iter, &report, net)?;
        }
    }
    Ok(())
}

// Tag for per-epoch shuffle substreams.
fn epoch_shuffle_tag(epoch: usize) -> u64 {
    0x5511_0000_0000u64 ^ epoch as u64
}
