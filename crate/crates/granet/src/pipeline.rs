//! Dataset preparation and whole-cloud inference: tiling, fixed-size
//! resampling, train/validation splits, coverage-complete prediction with
//! overlap fusion, and the bundled synthetic scene.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Phase;
use crate::config::{DataConfig, NetworkConfig};
use crate::error::Result;
use crate::network::{argmax_rows, Block, GraNetModel};
use crate::pointcloud::{ClassMap, Point, PointCloud};
use crate::spatial::{resample_fixed, tile_blocks, TilePlan};

/// Mixes a base seed with a subblock id into an independent stream seed.
fn subblock_seed(base: u64, subblock: usize) -> u64 {
    base ^ (subblock as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Tiles the cloud and resamples every subblock to a fixed-size block.
/// Returns the plan alongside the blocks (one per kept subblock).
pub fn prepare_blocks(
    cloud: &PointCloud,
    net: &NetworkConfig,
    data: &DataConfig,
    seed: u64,
) -> Result<(TilePlan, Vec<Block>)> {
    let plan = tile_blocks(cloud, data.block, data.sub, data.stride)?;
    let mut blocks = Vec::with_capacity(plan.subblock_count());
    for (si, members) in plan.members.iter().enumerate() {
        let sample = resample_fixed(members, si, net.points_per_block, subblock_seed(seed, si))?;
        blocks.push(Block::from_cloud(cloud, &sample.indices));
    }
    Ok((plan, blocks))
}

/// Splits block indices into (train, validation) by a seeded shuffle.
/// With `fraction == 0` or fewer than two blocks, validation reuses the
/// training set.
pub fn split_train_val(count: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..count).collect();
    if fraction <= 0.0 || count < 2 {
        return (all.clone(), all);
    }
    let mut shuffled = all;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let val_count = ((count as f64 * fraction).round() as usize).clamp(1, count - 1);
    let val = shuffled[..val_count].to_vec();
    let train = shuffled[val_count..].to_vec();
    (train, val)
}

/// Per-point prediction over a whole cloud.
///
/// Every subblock's member list is covered by consecutive fixed-size
/// chunks (the last chunk wraps around), so each point receives at least
/// one vote; points in overlapping subblocks receive several. Votes are
/// fused by majority, ties resolved by the vote from the subblock whose
/// center lies nearest the point.
pub fn predict_cloud(
    model: &mut GraNetModel,
    cloud: &PointCloud,
    data: &DataConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    let n_block = model.config.points_per_block;
    let plan = tile_blocks(cloud, data.block, data.sub, data.stride)?;
    // votes[point] = list of (class, subblock)
    let mut votes: Vec<Vec<(usize, usize)>> = vec![Vec::new(); cloud.len()];
    for (si, members) in plan.members.iter().enumerate() {
        let mut order = members.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(subblock_seed(seed, si));
        order.shuffle(&mut rng);
        let chunks = members.len().div_ceil(n_block);
        for c in 0..chunks {
            let indices: Vec<usize> = (0..n_block)
                .map(|j| order[(c * n_block + j) % order.len()])
                .collect();
            let block = Block::from_cloud(cloud, &indices);
            let (tape, scores) = model.forward(&block, Phase::Eval)?;
            let predicted = argmax_rows(tape.value(scores));
            for (&pi, &cls) in indices.iter().zip(&predicted) {
                votes[pi].push((cls, si));
            }
        }
    }
    let mut out = Vec::with_capacity(cloud.len());
    for (pi, vs) in votes.iter().enumerate() {
        debug_assert!(!vs.is_empty(), "tiling left point {pi} unpredicted");
        out.push(fuse_votes(
            vs,
            &plan,
            [cloud.points[pi].x, cloud.points[pi].y],
        ));
    }
    Ok(out)
}

/// Majority vote; on a tie, the vote cast by the subblock whose center is
/// nearest the point wins (lower subblock id on equal distances).
fn fuse_votes(votes: &[(usize, usize)], plan: &TilePlan, xy: [f64; 2]) -> usize {
    let max_class = votes.iter().map(|&(c, _)| c).max().unwrap_or(0);
    let mut counts = vec![0usize; max_class + 1];
    for &(c, _) in votes {
        counts[c] += 1;
    }
    let top = *counts.iter().max().unwrap();
    let tied: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == top).collect();
    if tied.len() == 1 {
        return tied[0];
    }
    // nearest subblock center among the votes for tied classes
    let mut best: Option<(f64, usize, usize)> = None; // (dist2, subblock, class)
    for &(cls, si) in votes {
        if !tied.contains(&cls) {
            continue;
        }
        let center = plan.subblock_center(si);
        let d2 = (center[0] - xy[0]).powi(2) + (center[1] - xy[1]).powi(2);
        match best {
            Some((bd, bs, _)) if (bd, bs) <= (d2, si) => {}
            _ => best = Some((d2, si, cls)),
        }
    }
    best.map(|(_, _, c)| c).unwrap_or(tied[0])
}

/// The bundled synthetic labeled scene: planar ground at z=0 (class 0),
/// planar roof patches at z=8 (class 1), and vertically scattered
/// canopy-like clusters (class 2). 4096 points over roughly 40 m x 40 m.
pub fn synthetic_scene(seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = ClassMap::new(vec![
        "ground".to_string(),
        "roof".to_string(),
        "canopy".to_string(),
    ])
    .unwrap();
    let mut points = Vec::with_capacity(4096);
    // 2048 ground points across the whole extent
    for _ in 0..2048 {
        let x = rng.random_range(0.0..40.0);
        let y = rng.random_range(0.0..40.0);
        let z = rng.random_range(-0.05..0.05);
        let intensity = rng.random_range(20.0..40.0);
        points.push(Point::new(x, y, z, intensity, 1).with_label(0));
    }
    // 1024 roof points on three rectangular patches at z = 8
    let patches = [
        (4.0, 6.0, 10.0, 8.0),
        (22.0, 5.0, 12.0, 10.0),
        (10.0, 24.0, 14.0, 9.0),
    ];
    for i in 0..1024 {
        let (px, py, w, h) = patches[i % patches.len()];
        let x = px + rng.random_range(0.0..w);
        let y = py + rng.random_range(0.0..h);
        let z = 8.0 + rng.random_range(-0.05..0.05);
        let intensity = rng.random_range(60.0..90.0);
        points.push(Point::new(x, y, z, intensity, 1).with_label(1));
    }
    // 1024 canopy points in vertically scattered clusters with multiple
    // returns and a high-reflectance band
    let clusters = [(33.0, 30.0), (6.0, 33.0), (30.0, 18.0), (18.0, 16.0)];
    for i in 0..1024 {
        let (cx, cy) = clusters[i % clusters.len()];
        let x = cx + rng.random_range(-2.5..2.5);
        let y = cy + rng.random_range(-2.5..2.5);
        let z = rng.random_range(1.5..7.0);
        let intensity = rng.random_range(95.0..130.0);
        let returns = rng.random_range(1..=3);
        points.push(Point::new(x, y, z, intensity, returns).with_label(2));
    }
    PointCloud::new(points, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::metrics::ConfusionMatrix;
    use crate::training::train;

    #[test]
    fn scene_shape_and_determinism() {
        let a = synthetic_scene(11);
        assert_eq!(a.len(), 4096);
        assert_eq!(a.class_map.count(), 3);
        let b = synthetic_scene(11);
        for (p, q) in a.points.iter().zip(&b.points) {
            assert_eq!(p, q);
        }
        let labels = a.labels().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 2048);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 1024);
        assert_eq!(labels.iter().filter(|&&l| l == 2).count(), 1024);
    }

    #[test]
    fn prepared_blocks_have_fixed_size_and_labels() {
        let cloud = synthetic_scene(3);
        let net = NetworkConfig {
            points_per_block: 128,
            ..NetworkConfig::miniature()
        };
        let data = DataConfig::default();
        let (plan, blocks) = prepare_blocks(&cloud, &net, &data, 9).unwrap();
        assert_eq!(plan.subblock_count(), blocks.len());
        assert!(!blocks.is_empty());
        for b in &blocks {
            assert_eq!(b.len(), 128);
            assert!(b.labels.is_some());
        }
    }

    #[test]
    fn split_fraction_behaviour() {
        let (train, val) = split_train_val(10, 0.2, 4);
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
        for v in &val {
            assert!(!train.contains(v));
        }
        let (t0, v0) = split_train_val(10, 0.0, 4);
        assert_eq!(t0, v0);
    }

    #[test]
    fn prediction_covers_every_point_and_learns_the_scene() {
        let cloud = synthetic_scene(5);
        let net = NetworkConfig {
            class_count: 3,
            points_per_block: 256,
            k: 8,
            encoder_widths: vec![8, 16, 32],
            initial_lift_width: 8,
            use_batch_norm: false,
            gra_mode: crate::gra::GraMode::Off,
            seed: 2,
            ..NetworkConfig::default()
        };
        let data = DataConfig {
            sub: 25.0,
            stride: 12.5,
            ..DataConfig::default()
        };
        let mut model = GraNetModel::init(&net).unwrap();
        let (_, blocks) = prepare_blocks(&cloud, &net, &data, 13).unwrap();
        let cfg = TrainConfig {
            max_epochs: 12,
            ..TrainConfig::default()
        };
        train(&mut model, &blocks, &blocks, &cfg, None, |_| {}).unwrap();
        let predicted = predict_cloud(&mut model, &cloud, &data, 13).unwrap();
        assert_eq!(predicted.len(), cloud.len());
        let truth = cloud.labels().unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&truth, &predicted).unwrap();
        let oa = crate::metrics::report(&cm).unwrap().oa;
        // 12 epochs is a smoke check, not the overfit gate
        assert!(oa > 0.5, "prediction OA after a short run: {oa}");
    }
}
