//! Local spatial discrepancy attention convolution.
//!
//! Per neighbor, a point's local context is encoded by a spatial
//! distribution embedding (relative positions), an elevation difference
//! embedding, and the neighbor's running feature; the per-neighbor stack is
//! pooled with attention scores (or max), joined with a per-point
//! eight-octant orientation convolution, and fused into one output feature.

use rand::Rng;

use crate::autodiff::{MlpLayer, Phase, Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::spatial::{octant_select, NeighborIndex};

/// Which encodings participate in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LosdaFlags {
    pub use_sde: bool,
    pub use_dfe: bool,
    pub use_ede: bool,
    pub use_attention_pool: bool,
    /// Encode neighbor z relative to the center instead of raw z.
    pub ede_relative_z: bool,
}

impl LosdaFlags {
    pub fn all() -> Self {
        LosdaFlags {
            use_sde: true,
            use_dfe: true,
            use_ede: true,
            use_attention_pool: true,
            ede_relative_z: false,
        }
    }
}

/// The three-stage orientation convolution: axis-wise kernels of extent 2
/// with full channel mixing, ReLU after each stage.
#[derive(Debug, Clone)]
pub struct DfeParams {
    /// Projects running input features to the cube feature width d.
    pub input_proj: MlpLayer,
    /// X stage: 2x2x2xd cube -> 1x2x2xd.
    pub stage_x: MlpLayer,
    /// Y stage: 1x2x2xd -> 1x1x2xd.
    pub stage_y: MlpLayer,
    /// Z stage: 1x1x2xd -> 1x1x1xd.
    pub stage_z: MlpLayer,
}

impl DfeParams {
    pub fn init<R: Rng>(rng: &mut R, d_in: usize, d: usize, use_norm: bool) -> Self {
        DfeParams {
            input_proj: MlpLayer::init(rng, d_in, d, use_norm, true),
            stage_x: MlpLayer::init(rng, 2 * d, d, false, true),
            stage_y: MlpLayer::init(rng, 2 * d, d, false, true),
            stage_z: MlpLayer::init(rng, 2 * d, d, false, true),
        }
    }

    pub fn d(&self) -> usize {
        self.input_proj.d_out()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.input_proj.for_each_param(&format!("{prefix}.proj"), f);
        self.stage_x.for_each_param(&format!("{prefix}.conv_x"), f);
        self.stage_y.for_each_param(&format!("{prefix}.conv_y"), f);
        self.stage_z.for_each_param(&format!("{prefix}.conv_z"), f);
    }

    pub fn for_each_stat(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        self.input_proj.for_each_stat(&format!("{prefix}.proj"), f);
        self.stage_x.for_each_stat(&format!("{prefix}.conv_x"), f);
        self.stage_y.for_each_stat(&format!("{prefix}.conv_y"), f);
        self.stage_z.for_each_stat(&format!("{prefix}.conv_z"), f);
    }

    pub fn param_count(&self) -> usize {
        self.input_proj.param_count()
            + self.stage_x.param_count()
            + self.stage_y.param_count()
            + self.stage_z.param_count()
    }
}

/// Parameters of one LoSDA layer.
#[derive(Debug, Clone)]
pub struct LosdaParams {
    pub flags: LosdaFlags,
    pub sde_mlp: Option<MlpLayer>,
    pub ede_mlp: Option<MlpLayer>,
    pub attention_mlp: Option<MlpLayer>,
    pub dfe: Option<DfeParams>,
    pub fusion_mlp: MlpLayer,
    d_in: usize,
}

/// Width of the spatial distribution pre-embedding
/// [center, neighbor, center-neighbor, distance].
pub const SDE_PRE_WIDTH: usize = 10;

/// Pre-embedding vector for one center/neighbor pair.
pub fn sde_pre_embedding(center: [f64; 3], neighbor: [f64; 3]) -> [f64; SDE_PRE_WIDTH] {
    let rel = [
        center[0] - neighbor[0],
        center[1] - neighbor[1],
        center[2] - neighbor[2],
    ];
    let dist = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
    [
        center[0],
        center[1],
        center[2],
        neighbor[0],
        neighbor[1],
        neighbor[2],
        rel[0],
        rel[1],
        rel[2],
        dist,
    ]
}

/// Spatial distribution encoding of center/neighbor pairs: the 10-wide
/// pre-embeddings pushed through the shared MLP. Output is pairs×d.
pub fn sde_encode(
    tape: &mut Tape,
    pairs: &[([f64; 3], [f64; 3])],
    mlp: &mut MlpLayer,
    phase: Phase,
) -> Result<TensorId> {
    let mut values = Vec::with_capacity(pairs.len() * SDE_PRE_WIDTH);
    for &(c, n) in pairs {
        values.extend_from_slice(&sde_pre_embedding(c, n));
    }
    let pre = tape.constant(Tensor::new(vec![pairs.len(), SDE_PRE_WIDTH], values)?);
    mlp.apply(tape, pre, phase)
}

/// Elevation difference encoding: one z value per neighbor through the
/// shared MLP. Output is len×d.
pub fn ede_encode(
    tape: &mut Tape,
    zs: &[f64],
    mlp: &mut MlpLayer,
    phase: Phase,
) -> Result<TensorId> {
    let pre = tape.constant(Tensor::new(vec![zs.len(), 1], zs.to_vec())?);
    mlp.apply(tape, pre, phase)
}

/// Three-stage axis-wise convolution over per-point octant cubes.
/// `cube` is N×8×d with slot order 4x+2y+z; the result is N×d.
pub fn orientation_conv(
    tape: &mut Tape,
    cube: TensorId,
    dfe: &mut DfeParams,
    phase: Phase,
) -> Result<TensorId> {
    let shape = tape.value(cube).shape().to_vec();
    let (n, d) = match shape.as_slice() {
        [n, 8, d] => (*n, *d),
        s => {
            return Err(Error::Dimension(format!(
                "orientation_conv expects N x 8 x d cubes, got {s:?}"
            )))
        }
    };
    let stage =
        |tape: &mut Tape, x: TensorId, slots: usize, mlp: &mut MlpLayer| -> Result<TensorId> {
            // combine slot pairs (i, i + slots/2): kernel of extent 2 along one axis
            let half = slots / 2;
            let a = tape.slice(x, 1, 0, half)?;
            let b = tape.slice(x, 1, half, half)?;
            let a = tape.reshape(a, vec![n * half, d])?;
            let b = tape.reshape(b, vec![n * half, d])?;
            let ab = tape.concat(&[a, b], 1)?;
            let y = mlp.apply(tape, ab, phase)?;
            tape.reshape(y, vec![n, half, d])
        };
    let vx = stage(tape, cube, 8, &mut dfe.stage_x)?; // N x 4 x d
    let vxy = stage(tape, vx, 4, &mut dfe.stage_y)?; // N x 2 x d
    let vxyz = stage(tape, vxy, 2, &mut dfe.stage_z)?; // N x 1 x d
    tape.reshape(vxyz, vec![n, d])
}

/// Attention pooling over the K axis: per-channel scores from a shared
/// linear map, softmax over neighbors, weighted sum. `fhat` is N×K×D.
pub fn attention_pool(
    tape: &mut Tape,
    fhat: TensorId,
    score_mlp: &mut MlpLayer,
    phase: Phase,
) -> Result<TensorId> {
    let shape = tape.value(fhat).shape().to_vec();
    let (_n, k, _d) = match shape.as_slice() {
        [n, k, d] => (*n, *k, *d),
        s => {
            return Err(Error::Dimension(format!(
                "attention_pool expects N x K x D, got {s:?}"
            )))
        }
    };
    if k == 0 {
        return Err(Error::Contract("attention_pool requires K >= 1".into()));
    }
    let logits = score_mlp.apply(tape, fhat, phase)?;
    let scores = tape.softmax(logits, 1)?;
    let weighted = tape.mul(fhat, scores)?;
    tape.reduce_sum(weighted, 1)
}

impl LosdaParams {
    /// Builds a layer taking d_in-wide features to d_out, with d-wide
    /// internal encodings.
    pub fn init<R: Rng>(
        rng: &mut R,
        d_in: usize,
        d: usize,
        d_out: usize,
        flags: LosdaFlags,
        use_norm: bool,
    ) -> Result<Self> {
        if !(flags.use_sde || flags.use_dfe) {
            return Err(Error::Config(
                "LoSDA needs at least one of the spatial encodings (SDE or DFE) enabled".into(),
            ));
        }
        let pooled_width = Self::pooled_width_for(d_in, d, flags);
        let fusion_in = pooled_width + if flags.use_dfe { d } else { 0 };
        Ok(LosdaParams {
            flags,
            sde_mlp: flags
                .use_sde
                .then(|| MlpLayer::init(rng, SDE_PRE_WIDTH, d, use_norm, true)),
            ede_mlp: flags
                .use_ede
                .then(|| MlpLayer::init(rng, 1, d, use_norm, true)),
            attention_mlp: flags
                .use_attention_pool
                .then(|| MlpLayer::linear(rng, pooled_width, pooled_width)),
            dfe: flags
                .use_dfe
                .then(|| DfeParams::init(rng, d_in, d, use_norm)),
            fusion_mlp: MlpLayer::init(rng, fusion_in, d_out, use_norm, true),
            d_in,
        })
    }

    fn pooled_width_for(d_in: usize, d: usize, flags: LosdaFlags) -> usize {
        d_in + if flags.use_sde { d } else { 0 } + if flags.use_ede { d } else { 0 }
    }

    /// Width of the per-neighbor concatenated feature.
    pub fn pooled_width(&self) -> usize {
        let d = self.encoding_width();
        Self::pooled_width_for(self.d_in, d, self.flags)
    }

    pub fn encoding_width(&self) -> usize {
        self.sde_mlp
            .as_ref()
            .map(MlpLayer::d_out)
            .or_else(|| self.ede_mlp.as_ref().map(MlpLayer::d_out))
            .or_else(|| self.dfe.as_ref().map(DfeParams::d))
            .unwrap_or(0)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.fusion_mlp.d_out()
    }

    /// Per-center forward pass.
    ///
    /// `support_xyz` are the coordinates of the points carrying `features`
    /// (M×d_in); `center_idx` maps each output row to its support point;
    /// `neighbors` holds one row per center over the support set.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        support_xyz: &[[f64; 3]],
        center_idx: &[usize],
        neighbors: &NeighborIndex,
        features: TensorId,
        phase: Phase,
    ) -> Result<TensorId> {
        let n = center_idx.len();
        let k = neighbors.k();
        if neighbors.len() != n {
            return Err(Error::Contract(format!(
                "{} neighbor rows for {n} centers",
                neighbors.len()
            )));
        }
        if tape.value(features).shape() != [support_xyz.len(), self.d_in] {
            return Err(Error::Dimension(format!(
                "feature tensor {:?} does not match {} support points of width {}",
                tape.value(features).shape(),
                support_xyz.len(),
                self.d_in
            )));
        }

        // Canonical neighbor order (distance, then index) makes the output
        // independent of the incoming row order.
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        for i in 0..n {
            let (idx, dist) = neighbors.row(i);
            let mut row: Vec<(usize, f64)> =
                idx.iter().cloned().zip(dist.iter().cloned()).collect();
            row.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            rows.push(row);
        }
        let flat_idx: Vec<usize> = rows.iter().flatten().map(|&(i, _)| i).collect();

        // Per-neighbor feature stack.
        let mut parts: Vec<TensorId> = Vec::new();
        if let Some(sde) = &mut self.sde_mlp {
            let pairs: Vec<([f64; 3], [f64; 3])> = center_idx
                .iter()
                .zip(&rows)
                .flat_map(|(&ci, row)| {
                    let c = support_xyz[ci];
                    row.iter().map(move |&(ni, _)| (c, support_xyz[ni]))
                })
                .collect();
            parts.push(sde_encode(tape, &pairs, sde, phase)?);
        }
        if let Some(ede) = &mut self.ede_mlp {
            let zs: Vec<f64> = center_idx
                .iter()
                .zip(&rows)
                .flat_map(|(&ci, row)| {
                    let cz = support_xyz[ci][2];
                    let relative = self.flags.ede_relative_z;
                    row.iter().map(move |&(ni, _)| {
                        let nz = support_xyz[ni][2];
                        if relative {
                            nz - cz
                        } else {
                            nz
                        }
                    })
                })
                .collect();
            parts.push(ede_encode(tape, &zs, ede, phase)?);
        }
        parts.push(tape.gather_rows(features, &flat_idx)?);
        let fhat_flat = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, 1)?
        };
        let pooled_width = self.pooled_width();
        let fhat = tape.reshape(fhat_flat, vec![n, k, pooled_width])?;

        let pooled = match &mut self.attention_mlp {
            Some(att) => attention_pool(tape, fhat, att, phase)?,
            None => tape.reduce_max(fhat, 1)?,
        };

        let fused_in = if let Some(dfe) = &mut self.dfe {
            let proj = dfe.input_proj.apply(tape, features, phase)?;
            let mut slots = Vec::with_capacity(n * 8);
            for (i, &ci) in center_idx.iter().enumerate() {
                let (idx, dist) = neighbors.row(i);
                let picks = octant_select(support_xyz[ci], ci, idx, dist, support_xyz);
                slots.extend_from_slice(&picks);
            }
            let cube_flat = tape.gather_rows(proj, &slots)?;
            let cube = tape.reshape(cube_flat, vec![n, 8, dfe.d()])?;
            let oriented = orientation_conv(tape, cube, dfe, phase)?;
            tape.concat(&[pooled, oriented], 1)?
        } else {
            pooled
        };
        self.fusion_mlp.apply(tape, fused_in, phase)
    }

    /// Visits parameters in the same order `forward` pushes them.
    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(m) = &mut self.sde_mlp {
            m.for_each_param(&format!("{prefix}.sde"), f);
        }
        if let Some(m) = &mut self.ede_mlp {
            m.for_each_param(&format!("{prefix}.ede"), f);
        }
        if let Some(m) = &mut self.attention_mlp {
            m.for_each_param(&format!("{prefix}.attention"), f);
        }
        if let Some(m) = &mut self.dfe {
            m.for_each_param(&format!("{prefix}.dfe"), f);
        }
        self.fusion_mlp
            .for_each_param(&format!("{prefix}.fusion"), f);
    }

    pub fn for_each_stat(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        if let Some(m) = &mut self.sde_mlp {
            m.for_each_stat(&format!("{prefix}.sde"), f);
        }
        if let Some(m) = &mut self.ede_mlp {
            m.for_each_stat(&format!("{prefix}.ede"), f);
        }
        if let Some(m) = &mut self.attention_mlp {
            m.for_each_stat(&format!("{prefix}.attention"), f);
        }
        if let Some(m) = &mut self.dfe {
            m.for_each_stat(&format!("{prefix}.dfe"), f);
        }
        self.fusion_mlp
            .for_each_stat(&format!("{prefix}.fusion"), f);
    }

    pub fn param_count(&self) -> usize {
        self.sde_mlp.as_ref().map_or(0, MlpLayer::param_count)
            + self.ede_mlp.as_ref().map_or(0, MlpLayer::param_count)
            + self.attention_mlp.as_ref().map_or(0, MlpLayer::param_count)
            + self.dfe.as_ref().map_or(0, DfeParams::param_count)
            + self.fusion_mlp.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::spatial::knn_search;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pre_embedding_layout() {
        let v = sde_pre_embedding([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        assert_eq!(v, [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pre_embedding_self_neighbor() {
        let v = sde_pre_embedding([2.0, 3.0, 4.0], [2.0, 3.0, 4.0]);
        assert_eq!(&v[6..], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pre_embedding_relative_slots_are_translation_invariant() {
        // integer-friendly coordinates keep the subtraction exact
        let a = sde_pre_embedding([1.0, 2.0, 3.0], [4.0, 6.0, 3.0]);
        let b = sde_pre_embedding([1.0 + 10.0, 2.0 - 7.0, 3.0 + 3.0], [14.0, -1.0, 6.0]);
        assert_eq!(&a[6..], &b[6..]);
        assert_ne!(&a[..6], &b[..6]);
    }

    #[test]
    fn sde_identity_like_mlp_recovers_prefix() {
        // 10 -> 12 weight [I | 0], no bias, no relu
        let mut w = Tensor::zeros(&[10, 12]);
        for i in 0..10 {
            w.values_mut()[i * 12 + i] = 1.0;
        }
        let mut mlp = MlpLayer::from_weight(w, None, false);
        let mut tape = Tape::new();
        let center = [0.0, 0.0, 0.0];
        let neighbor = [1.0, 0.0, 0.0];
        let out = sde_encode(&mut tape, &[(center, neighbor)], &mut mlp, Phase::Check).unwrap();
        let pre = sde_pre_embedding(center, neighbor);
        assert_eq!(&tape.value(out).values()[..10], &pre);
        assert_eq!(&tape.value(out).values()[10..], &[0.0, 0.0]);
    }

    #[test]
    fn ede_zero_and_hand_weights() {
        let mut zero =
            MlpLayer::from_weight(Tensor::zeros(&[1, 4]), Some(Tensor::zeros(&[4])), true);
        let mut tape = Tape::new();
        let out = ede_encode(&mut tape, &[5.0], &mut zero, Phase::Check).unwrap();
        assert_eq!(tape.value(out).values(), &[0.0; 4]);

        let mut ones =
            MlpLayer::from_weight(Tensor::ones(&[1, 4]), Some(Tensor::zeros(&[4])), true);
        let mut tape = Tape::new();
        let out = ede_encode(&mut tape, &[2.0], &mut ones, Phase::Check).unwrap();
        assert_eq!(tape.value(out).values(), &[2.0; 4]);
    }

    #[test]
    fn ede_depends_only_on_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mlp = MlpLayer::init(&mut rng, 1, 4, false, true);
        let mut tape = Tape::new();
        let out = ede_encode(&mut tape, &[3.5, 3.5], &mut mlp, Phase::Check).unwrap();
        let v = tape.value(out).values();
        assert_eq!(&v[..4], &v[4..]);
    }

    fn zero_dfe(d_in: usize, d: usize) -> DfeParams {
        let stage =
            || MlpLayer::from_weight(Tensor::zeros(&[2 * d, d]), Some(Tensor::zeros(&[d])), true);
        DfeParams {
            input_proj: MlpLayer::from_weight(
                Tensor::zeros(&[d_in, d]),
                Some(Tensor::zeros(&[d])),
                true,
            ),
            stage_x: stage(),
            stage_y: stage(),
            stage_z: stage(),
        }
    }

    #[test]
    fn orientation_conv_shape_trace_and_zero_case() {
        let d = 3;
        let mut dfe = zero_dfe(2, d);
        let mut tape = Tape::new();
        let cube = tape.constant(Tensor::ones(&[5, 8, d]));
        let out = orientation_conv(&mut tape, cube, &mut dfe, Phase::Check).unwrap();
        assert_eq!(tape.value(out).shape(), &[5, d]);
        assert!(tape.value(out).values().iter().all(|&v| v == 0.0));
    }

    /// Plain-loop reimplementation of the three-stage convolution.
    fn naive_orientation_conv(cube: &[f64], n: usize, d: usize, dfe: &DfeParams) -> Vec<f64> {
        let apply_stage = |input: &[f64], slots: usize, mlp: &MlpLayer| -> Vec<f64> {
            let half = slots / 2;
            let w = mlp.weight.values();
            let b = mlp.bias.as_ref().unwrap().values();
            let mut out = vec![0.0; n * half * d];
            for p in 0..n {
                for r in 0..half {
                    for co in 0..d {
                        let mut acc = b[co];
                        for ci in 0..d {
                            let lo = input[(p * slots + r) * d + ci];
                            let hi = input[(p * slots + r + half) * d + ci];
                            acc += lo * w[ci * d + co] + hi * w[(d + ci) * d + co];
                        }
                        out[(p * half + r) * d + co] = acc.max(0.0);
                    }
                }
            }
            out
        };
        let vx = apply_stage(cube, 8, &dfe.stage_x);
        let vxy = apply_stage(&vx, 4, &dfe.stage_y);
        apply_stage(&vxy, 2, &dfe.stage_z)
    }

    #[test]
    fn orientation_conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, d) = (4, 2);
        let mut dfe = DfeParams::init(&mut rng, 2, d, false);
        let cube_vals: Vec<f64> = (0..n * 8 * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut tape = Tape::new();
        let cube = tape.constant(Tensor::new(vec![n, 8, d], cube_vals.clone()).unwrap());
        let out = orientation_conv(&mut tape, cube, &mut dfe, Phase::Check).unwrap();
        let expect = naive_orientation_conv(&cube_vals, n, d, &dfe);
        for (a, b) in tape.value(out).values().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_pool_uniform_for_identical_neighbors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, k, d) = (2, 5, 3);
        let mut mlp = MlpLayer::linear(&mut rng, d, d);
        let mut vals = Vec::new();
        for i in 0..n {
            for _ in 0..k {
                for c in 0..d {
                    vals.push((i * d + c) as f64 * 0.25 - 0.5);
                }
            }
        }
        let mut tape = Tape::new();
        let fhat = tape.constant(Tensor::new(vec![n, k, d], vals.clone()).unwrap());
        let out = attention_pool(&mut tape, fhat, &mut mlp, Phase::Check).unwrap();
        // identical neighbors -> output equals the common feature
        for i in 0..n {
            for c in 0..d {
                let expect = vals[(i * k) * d + c];
                let got = tape.value(out).values()[i * d + c];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_pool_k1_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = MlpLayer::linear(&mut rng, 4, 4);
        let vals = vec![0.3, -0.7, 1.1, 0.0];
        let mut tape = Tape::new();
        let fhat = tape.constant(Tensor::new(vec![1, 1, 4], vals.clone()).unwrap());
        let out = attention_pool(&mut tape, fhat, &mut mlp, Phase::Check).unwrap();
        assert_eq!(tape.value(out).values(), vals.as_slice());
    }

    #[test]
    fn attention_pool_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, k, d) = (2, 3, 4);
        let mlp = MlpLayer::linear(&mut rng, d, d);
        let vals: Vec<f64> = (0..n * k * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut tape = Tape::new();
        let fhat = tape.constant(Tensor::new(vec![n, k, d], vals.clone()).unwrap());
        let out = attention_pool(&mut tape, fhat, &mut mlp.clone(), Phase::Check).unwrap();

        // naive: logits, per-channel softmax over k, weighted sum
        let w = mlp.weight.values();
        for i in 0..n {
            for c in 0..d {
                let mut logits = vec![0.0; k];
                for j in 0..k {
                    for ci in 0..d {
                        logits[j] += vals[(i * k + j) * d + ci] * w[ci * d + c];
                    }
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let mut expect = 0.0;
                for j in 0..k {
                    expect += vals[(i * k + j) * d + c] * exps[j] / sum;
                }
                let got = tape.value(out).values()[i * d + c];
                assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn flags_must_enable_a_spatial_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flags = LosdaFlags {
            use_sde: false,
            use_dfe: false,
            use_ede: true,
            use_attention_pool: false,
            ede_relative_z: false,
        };
        assert!(LosdaParams::init(&mut rng, 4, 8, 16, flags, false).is_err());
    }

    fn demo_cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(0.0..3.0),
                ]
            })
            .collect()
    }

    #[test]
    fn forward_is_invariant_to_neighbor_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xyz = demo_cloud(12, 40);
        let k = 5;
        let neighbors = knn_search(&xyz, &xyz, k).unwrap();
        let centers: Vec<usize> = (0..xyz.len()).collect();
        let feats = Tensor::new(
            vec![12, 3],
            (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let params = LosdaParams::init(&mut rng, 3, 4, 6, LosdaFlags::all(), false).unwrap();

        let run = |ni: &NeighborIndex| {
            let mut p = params.clone();
            let mut tape = Tape::new();
            let f = tape.constant(feats.clone());
            let out = p
                .forward(&mut tape, &xyz, &centers, ni, f, Phase::Check)
                .unwrap();
            tape.value(out).values().to_vec()
        };
        let base = run(&neighbors);

        // reverse every row
        let mut rows = Vec::new();
        for i in 0..neighbors.len() {
            let (idx, dist) = neighbors.row(i);
            let row: Vec<(usize, f64)> = idx
                .iter()
                .rev()
                .cloned()
                .zip(dist.iter().rev().cloned())
                .collect();
            rows.push(row);
        }
        let permuted = NeighborIndex::from_rows(rows, k);
        let perm_out = run(&permuted);
        for (a, b) in base.iter().zip(&perm_out) {
            assert_eq!(a.to_bits(), b.to_bits(), "outputs differ bitwise");
        }
    }

    #[test]
    fn forward_with_only_sde_k1_reduces_to_self_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xyz = demo_cloud(4, 41);
        let neighbors = knn_search(&xyz, &xyz, 1).unwrap();
        let centers: Vec<usize> = (0..xyz.len()).collect();
        let flags = LosdaFlags {
            use_sde: true,
            use_dfe: false,
            use_ede: false,
            use_attention_pool: false,
            ede_relative_z: false,
        };
        let mut params = LosdaParams::init(&mut rng, 2, 4, 5, flags, false).unwrap();
        let feats = Tensor::new(vec![4, 2], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();

        let mut tape = Tape::new();
        let f = tape.constant(feats.clone());
        let out = params
            .forward(&mut tape, &xyz, &centers, &neighbors, f, Phase::Check)
            .unwrap();

        // by hand: fusion(concat(sde(self pair), self feature))
        let mut tape2 = Tape::new();
        let pairs: Vec<_> = xyz.iter().map(|&p| (p, p)).collect();
        let sde = sde_encode(
            &mut tape2,
            &pairs,
            params.sde_mlp.as_mut().unwrap(),
            Phase::Check,
        )
        .unwrap();
        let f2 = tape2.constant(feats);
        let cat = tape2.concat(&[sde, f2], 1).unwrap();
        let expect = params
            .fusion_mlp
            .apply(&mut tape2, cat, Phase::Check)
            .unwrap();
        assert_eq!(tape.value(out).values(), tape2.value(expect).values());
    }

    #[test]
    fn ablation_param_counts_are_monotone() {
        let mk = |sde: bool, dfe: bool, ede: bool, att: bool| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            LosdaParams::init(
                &mut rng,
                6,
                8,
                16,
                LosdaFlags {
                    use_sde: sde,
                    use_dfe: dfe,
                    use_ede: ede,
                    use_attention_pool: att,
                    ede_relative_z: false,
                },
                true,
            )
            .unwrap()
            .param_count()
        };
        let a = mk(true, false, false, false);
        let c = mk(true, true, false, false);
        let d = mk(true, true, true, false);
        let e = mk(true, true, true, true);
        assert!(a <= c && c <= d && d <= e, "{a} {c} {d} {e}");
    }

    #[test]
    fn forward_gradient_check_across_flag_combinations() {
        // attention-pool, max-pool, DFE-only, and relative-z paths
        let combos = [
            LosdaFlags::all(),
            LosdaFlags {
                use_sde: true,
                use_dfe: true,
                use_ede: true,
                use_attention_pool: false,
                ede_relative_z: false,
            },
            LosdaFlags {
                use_sde: false,
                use_dfe: true,
                use_ede: false,
                use_attention_pool: false,
                ede_relative_z: false,
            },
            LosdaFlags {
                use_sde: true,
                use_dfe: false,
                use_ede: true,
                use_attention_pool: true,
                ede_relative_z: true,
            },
        ];
        for (i, flags) in combos.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(105 + i as u64);
            let xyz = demo_cloud(8, 42 + i as u64);
            let k = 4;
            let neighbors = knn_search(&xyz, &xyz, k).unwrap();
            let centers: Vec<usize> = (0..xyz.len()).collect();
            let params = LosdaParams::init(&mut rng, 3, 4, 5, flags, true).unwrap();
            let x = Tensor::new(
                vec![8, 3],
                (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let err = finite_diff_check(
                |tape, xid| {
                    let mut p = params.clone();
                    let out = p.forward(tape, &xyz, &centers, &neighbors, xid, Phase::Check)?;
                    tape.sum_all(out)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "losda combo {i} gradient error {err}");
        }
    }

    use rand::Rng;
}
