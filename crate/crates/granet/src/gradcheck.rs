//! Finite-difference gradient checks on miniature module instances,
//! shared by the `gradcheck` CLI command and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, max_rel_error, Phase, Tensor};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::gra::{GraMode, GraParams};
use crate::losda::{LosdaFlags, LosdaParams};
use crate::network::{Block, GraNetModel};
use crate::spatial::knn_search;

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckModule {
    Losda,
    Sra,
    Cra,
    Mode1,
    Mode2,
    Mode3,
    Full,
}

impl CheckModule {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "losda" => CheckModule::Losda,
            "sra" => CheckModule::Sra,
            "cra" => CheckModule::Cra,
            "mode1" => CheckModule::Mode1,
            "mode2" => CheckModule::Mode2,
            "mode3" => CheckModule::Mode3,
            "full" => CheckModule::Full,
            other => {
                return Err(Error::Config(format!(
                    "unknown gradcheck module '{other}' \
                     (expected losda|sra|cra|mode1|mode2|mode3|full)"
                )))
            }
        })
    }

    pub fn all() -> [CheckModule; 7] {
        [
            CheckModule::Losda,
            CheckModule::Sra,
            CheckModule::Cra,
            CheckModule::Mode1,
            CheckModule::Mode2,
            CheckModule::Mode3,
            CheckModule::Full,
        ]
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn losda_check(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 10;
    let k = 5;
    let xyz: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(0.0..4.0),
            ]
        })
        .collect();
    let neighbors = knn_search(&xyz, &xyz, k)?;
    let centers: Vec<usize> = (0..n).collect();
    let params = LosdaParams::init(&mut rng, 3, 4, 6, LosdaFlags::all(), true)?;
    let x = random_tensor(&mut rng, &[n, 3], -1.0, 1.0);
    let err = finite_diff_check(
        |tape, xid| {
            let mut p = params.clone();
            let out = p.forward(tape, &xyz, &centers, &neighbors, xid, Phase::Check)?;
            tape.sum_all(out)
        },
        &x,
        EPS,
    )?;
    Ok(vec![("losda".into(), err)])
}

fn gra_check(mode: GraMode, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (8, 6);
    let gra = GraParams::init(&mut rng, mode, n, c, true);
    let x = random_tensor(&mut rng, &[n, c], -1.5, 1.5);
    let err = finite_diff_check(
        |tape, xid| {
            let mut g = gra.clone();
            let y = g.forward(tape, xid, Phase::Check)?;
            tape.sum_all(y)
        },
        &x,
        EPS,
    )?;
    Ok(vec![(mode.as_str().to_string(), err)])
}

/// A deterministic miniature block over the standard gradient-check
/// geometry (64 points, K=4, widths [8, 16, 32]).
pub fn miniature_block(seed: u64) -> (NetworkConfig, Block) {
    let cfg = NetworkConfig {
        gra_mode: GraMode::Mode3,
        seed: seed.wrapping_add(1),
        ..NetworkConfig::miniature()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.points_per_block;
    let xyz: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(-8.0..8.0),
                rng.random_range(-8.0..8.0),
                rng.random_range(0.0..6.0),
            ]
        })
        .collect();
    let labels: Vec<usize> = xyz.iter().map(|p| (p[2] / 2.0) as usize % 3).collect();
    let attributes: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    (
        cfg,
        Block {
            xyz,
            attributes,
            labels: Some(labels),
        },
    )
}

fn model_loss(model: &GraNetModel, block: &Block) -> f64 {
    let mut m = model.clone();
    let (mut tape, scores) = m.forward(block, Phase::Check).expect("forward");
    let loss = tape
        .cross_entropy(scores, block.labels.as_ref().unwrap(), None)
        .expect("loss");
    tape.value(loss).item()
}

/// End-to-end check of the miniature network: the cross-entropy loss is
/// differentiated against a sampled prefix of every parameter tensor.
/// The earliest parameters (the initial lift) only receive correct
/// gradients if every downstream backward rule is correct, so this covers
/// the whole chain.
fn full_check(seed: u64) -> Result<Vec<(String, f64)>> {
    let (cfg, block) = miniature_block(seed);
    let model = GraNetModel::init(&cfg)?;
    let labels = block.labels.clone().unwrap();

    let mut m0 = model.clone();
    let (mut tape0, scores0) = m0.forward(&block, Phase::Check)?;
    let loss0 = tape0.cross_entropy(scores0, &labels, None)?;
    tape0.backward(loss0)?;
    let analytic = m0.collect_grads(&tape0);

    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        let coords = grad.len().min(8);
        let mut analytic_sub = Vec::with_capacity(coords);
        let mut numeric_sub = Vec::with_capacity(coords);
        for ci in 0..coords {
            analytic_sub.push(grad[ci]);
            let probe = |delta: f64| -> f64 {
                let mut m = model.clone();
                m.for_each_param(&mut |n, t| {
                    if n == *name {
                        t.values_mut()[ci] += delta;
                    }
                });
                model_loss(&m, &block)
            };
            let plus = probe(EPS);
            let minus = probe(-EPS);
            numeric_sub.push((plus - minus) / (2.0 * EPS));
        }
        worst = worst.max(max_rel_error(&analytic_sub, &numeric_sub));
    }
    Ok(vec![("full".into(), worst)])
}

/// Runs the selected check and returns (name, max relative error) pairs.
pub fn run(module: CheckModule) -> Result<Vec<(String, f64)>> {
    match module {
        CheckModule::Losda => losda_check(1105),
        CheckModule::Sra => gra_check(GraMode::SraOnly, 2205),
        CheckModule::Cra => gra_check(GraMode::CraOnly, 3305),
        CheckModule::Mode1 => gra_check(GraMode::Mode1, 4405),
        CheckModule::Mode2 => gra_check(GraMode::Mode2, 5505),
        CheckModule::Mode3 => gra_check(GraMode::Mode3, 6605),
        CheckModule::Full => full_check(7705),
    }
}
