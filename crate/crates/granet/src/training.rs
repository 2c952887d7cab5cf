//! Loss, Adam optimizer, learning-rate schedule, and the epoch loop with
//! validation and best-checkpoint saving.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Phase;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::network::{argmax_rows, Block, GraNetModel};

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    pub step: u64,
}

/// One bias-corrected Adam update on a flat parameter buffer.
/// `step` counts from 1.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert!(step >= 1);
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one optimizer step to every model parameter. `grads` must come
/// from `GraNetModel::collect_grads` (same order and names).
pub fn adam_step(
    model: &mut GraNetModel,
    grads: &[(String, Vec<f64>)],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let step = state.step;
    let mut idx = 0;
    let mut error = None;
    model.for_each_param(&mut |name, t| {
        if error.is_some() {
            return;
        }
        let Some((gname, grad)) = grads.get(idx) else {
            error = Some(Error::Contract("fewer gradients than parameters".into()));
            return;
        };
        idx += 1;
        if *gname != name || grad.len() != t.numel() {
            error = Some(Error::Contract(format!(
                "gradient '{gname}' ({}) does not match parameter '{name}' ({})",
                grad.len(),
                t.numel()
            )));
            return;
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        adam_update(
            t.values_mut(),
            grad,
            m,
            v,
            step,
            lr,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        );
    });
    if let Some(e) = error {
        return Err(e);
    }
    if idx != grads.len() {
        return Err(Error::Contract("more gradients than parameters".into()));
    }
    Ok(())
}

/// Step schedule: lr0 · factor^⌊epoch / decay_step⌋, epochs counted from 0.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = (epoch / cfg.decay_step_epochs) as i32;
    cfg.learning_rate * cfg.decay_factor.powi(steps)
}

/// One line of the epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_oa: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.epoch, self.lr, self.train_loss, self.val_loss, self.val_oa
        )
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLog>,
    /// (epoch, validation loss) at each saved best checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
}

/// Runs the model over labeled blocks in inference mode; returns the mean
/// loss and the full metrics report.
pub fn validate(
    model: &mut GraNetModel,
    blocks: &[Block],
) -> Result<(f64, crate::metrics::MetricsReport)> {
    if blocks.is_empty() {
        return Err(Error::Contract(
            "validation requires at least one block".into(),
        ));
    }
    let mut cm = ConfusionMatrix::new(model.config.class_count);
    let mut loss_sum = 0.0;
    for block in blocks {
        let labels = block
            .labels
            .as_ref()
            .ok_or_else(|| Error::Contract("evaluation requires labeled blocks".into()))?;
        let (mut tape, scores) = model.forward(block, Phase::Eval)?;
        let loss = tape.cross_entropy(scores, labels, None)?;
        loss_sum += tape.value(loss).item();
        let predicted = argmax_rows(tape.value(scores));
        cm.accumulate(labels, &predicted)?;
    }
    let report = crate::metrics::report(&cm)?;
    Ok((loss_sum / blocks.len() as f64, report))
}

/// Mean validation loss and overall accuracy of a block set.
pub fn evaluate_blocks(model: &mut GraNetModel, blocks: &[Block]) -> Result<(f64, f64)> {
    let (loss, report) = validate(model, blocks)?;
    Ok((loss, report.oa))
}

/// The full epoch loop. Each epoch visits every training block exactly
/// once in a seeded random order, in batches of `cfg.batch_size`; after
/// the epoch the model is validated and a checkpoint is written whenever
/// the validation loss reaches a new minimum.
pub fn train(
    model: &mut GraNetModel,
    train_blocks: &[Block],
    val_blocks: &[Block],
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_blocks.is_empty() {
        return Err(Error::Contract("no training blocks".into()));
    }
    if val_blocks.is_empty() {
        return Err(Error::Contract("no validation blocks".into()));
    }
    for b in train_blocks.iter().chain(val_blocks) {
        if b.labels.is_none() {
            return Err(Error::Contract(
                "training requires labels on every block".into(),
            ));
        }
    }
    if let Some(w) = &cfg.class_weights {
        if w.len() != model.config.class_count {
            return Err(Error::Contract(format!(
                "{} class weights for {} classes",
                w.len(),
                model.config.class_count
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::default();
    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;

    let mut order: Vec<usize> = (0..train_blocks.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut summed: Vec<(String, Vec<f64>)> = Vec::new();
            let mut batch_loss = 0.0;
            for &bi in batch {
                let block = &train_blocks[bi];
                let labels = block.labels.as_ref().unwrap();
                let (mut tape, scores) = model.forward(block, Phase::Train)?;
                let loss = tape.cross_entropy(scores, labels, cfg.class_weights.as_deref())?;
                batch_loss += tape.value(loss).item();
                tape.backward(loss)?;
                let grads = model.collect_grads(&tape);
                if summed.is_empty() {
                    summed = grads;
                } else {
                    for (acc, g) in summed.iter_mut().zip(grads) {
                        debug_assert_eq!(acc.0, g.0);
                        for (a, b) in acc.1.iter_mut().zip(g.1) {
                            *a += b;
                        }
                    }
                }
            }
            // average over the batch
            let scale = 1.0 / batch.len() as f64;
            for (_, g) in &mut summed {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            epoch_loss += batch_loss;
            adam_step(model, &summed, &mut state, lr, cfg)?;
        }
        let train_loss = epoch_loss / train_blocks.len() as f64;
        let (val_loss, val_oa) = evaluate_blocks(model, val_blocks)?;
        let log = EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_oa,
        };
        on_epoch(&log);
        history.epochs.push(log);
        if val_loss < best_val {
            best_val = val_loss;
            if let Some(path) = checkpoint_path {
                crate::checkpoint::save(model, path)?;
            }
            history.checkpoints.push((epoch, val_loss));
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetworkConfig;
    use rand::Rng;

    #[test]
    fn lr_schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.001);
        assert_eq!(lr_schedule(99, &cfg), 0.001);
        assert!((lr_schedule(100, &cfg) - 0.0007).abs() < 1e-15);
        assert!((lr_schedule(200, &cfg) - 0.00049).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // g = 1 everywhere: bias correction gives a step of lr/(1+eps)
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![1.0; 3];
        let mut m = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        adam_update(&mut p, &g, &mut m, &mut v, 1, 0.001, 0.9, 0.999, 1e-8);
        for (new, old) in p.iter().zip(&[1.0, -2.0, 0.5]) {
            let delta = old - new;
            assert!((delta - 0.001).abs() < 1e-9, "delta = {delta}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = vec![3.0, 4.0];
        let g = vec![0.0; 2];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_update(&mut p, &g, &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8);
        assert_eq!(p, vec![3.0, 4.0]);
    }

    #[test]
    fn adam_reduces_convex_quadratic() {
        // f(p) = (p-3)^2/2, gradient p-3
        let mut p = vec![10.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let f = |p: f64| (p - 3.0) * (p - 3.0) / 2.0;
        let before = f(p[0]);
        let g = vec![p[0] - 3.0];
        adam_update(&mut p, &g, &mut m, &mut v, 1, 0.05, 0.9, 0.999, 1e-8);
        assert!(f(p[0]) < before);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.4, -0.3];
            let mut m = vec![0.0; 2];
            let mut v = vec![0.0; 2];
            for step in 1..=25u64 {
                let g: Vec<f64> = p.iter().map(|x| x * 0.7 - 0.1).collect();
                adam_update(&mut p, &g, &mut m, &mut v, step, 0.01, 0.9, 0.999, 1e-8);
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    fn tiny_blocks(n_blocks: usize, n: usize, seed: u64) -> Vec<Block> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_blocks)
            .map(|_| {
                let xyz: Vec<[f64; 3]> = (0..n)
                    .map(|_| {
                        [
                            rng.random_range(-5.0..5.0),
                            rng.random_range(-5.0..5.0),
                            rng.random_range(0.0..6.0),
                        ]
                    })
                    .collect();
                // labels follow elevation bands so the task is learnable
                let labels: Vec<usize> = xyz
                    .iter()
                    .map(|p| {
                        if p[2] < 2.0 {
                            0
                        } else if p[2] < 4.0 {
                            1
                        } else {
                            2
                        }
                    })
                    .collect();
                let attributes: Vec<f64> = xyz.iter().flat_map(|p| [p[2] * 0.5, 1.0]).collect();
                Block {
                    xyz,
                    attributes,
                    labels: Some(labels),
                }
            })
            .collect()
    }

    fn tiny_model(seed: u64) -> GraNetModel {
        GraNetModel::init(&NetworkConfig {
            class_count: 3,
            points_per_block: 32,
            k: 4,
            encoder_widths: vec![8, 16, 32],
            initial_lift_width: 8,
            use_batch_norm: false,
            gra_mode: crate::gra::GraMode::Off,
            seed,
            ..NetworkConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn loss_descends_on_one_block() {
        let blocks = tiny_blocks(1, 32, 5);
        let mut model = tiny_model(2);
        let cfg = TrainConfig {
            max_epochs: 60,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &blocks, &blocks, &cfg, None, |_| {}).unwrap();
        let first = history.epochs.first().unwrap().train_loss;
        let last = history.epochs.last().unwrap().train_loss;
        assert!(last < first, "loss did not descend: {first} -> {last}");
        assert!(first.is_finite());
    }

    #[test]
    fn training_is_reproducible() {
        let blocks = tiny_blocks(3, 32, 6);
        let cfg = TrainConfig {
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let mut m1 = tiny_model(4);
        let h1 = train(&mut m1, &blocks, &blocks, &cfg, None, |_| {}).unwrap();
        let mut m2 = tiny_model(4);
        let h2 = train(&mut m2, &blocks, &blocks, &cfg, None, |_| {}).unwrap();
        assert_eq!(h1.epochs, h2.epochs);
        // parameters bitwise identical
        let mut p1 = Vec::new();
        m1.for_each_param(&mut |_, t| p1.extend(t.values().iter().map(|v| v.to_bits())));
        let mut p2 = Vec::new();
        m2.for_each_param(&mut |_, t| p2.extend(t.values().iter().map(|v| v.to_bits())));
        assert_eq!(p1, p2);
    }

    #[test]
    fn checkpoints_only_on_new_minima() {
        let blocks = tiny_blocks(2, 32, 7);
        let mut model = tiny_model(5);
        let cfg = TrainConfig {
            max_epochs: 12,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &blocks, &blocks, &cfg, None, |_| {}).unwrap();
        assert!(history.checkpoints.len() <= history.epochs.len());
        for pair in history.checkpoints.windows(2) {
            assert!(pair[1].1 < pair[0].1, "checkpoint losses must decrease");
        }
    }

    #[test]
    fn epoch_visits_every_block_once() {
        // mirror of the epoch loop structure: a fresh shuffle of the block
        // indices, then batches that partition it
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut order: Vec<usize> = (0..13).collect();
        for _ in 0..5 {
            order.shuffle(&mut rng);
            let mut seen = vec![false; 13];
            for batch in order.chunks(4) {
                for &i in batch {
                    assert!(!seen[i], "block {i} visited twice in an epoch");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "some block skipped");
        }
    }

    #[test]
    fn unlabeled_blocks_are_rejected() {
        let mut blocks = tiny_blocks(1, 32, 8);
        blocks[0].labels = None;
        let mut model = tiny_model(6);
        let cfg = TrainConfig::default();
        assert!(train(&mut model, &blocks, &blocks, &cfg, None, |_| {}).is_err());
    }
}
