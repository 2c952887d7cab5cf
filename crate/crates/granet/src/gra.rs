//! Global relation-aware attention.
//!
//! Nodes (points for the spatial module, feature channels for the channel
//! module) are compared pairwise through embedded dot products; each node's
//! affinity row and column, together with a pooled summary of its own
//! embedding, drive a per-node attention scalar in (0,1) that rescales the
//! input. Three integration modes combine the two submodules.
//!
//! The affinity matrix is materialized densely, so memory grows as O(N²)
//! in the node count; the 4096-point block size caps it.

use rand::Rng;

use crate::autodiff::{MlpLayer, Phase, Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// How the spatial and channel submodules are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraMode {
    Off,
    SraOnly,
    CraOnly,
    /// Serial, SRA after CRA.
    Mode1,
    /// Serial, CRA after SRA.
    Mode2,
    /// Parallel branches concatenated, then fused back to the input width.
    Mode3,
}

impl GraMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "off" => GraMode::Off,
            "sra" => GraMode::SraOnly,
            "cra" => GraMode::CraOnly,
            "mode1" => GraMode::Mode1,
            "mode2" => GraMode::Mode2,
            "mode3" => GraMode::Mode3,
            other => {
                return Err(Error::Config(format!(
                    "unknown gra_mode '{other}' (expected off|sra|cra|mode1|mode2|mode3)"
                )))
            }
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GraMode::Off => "off",
            GraMode::SraOnly => "sra",
            GraMode::CraOnly => "cra",
            GraMode::Mode1 => "mode1",
            GraMode::Mode2 => "mode2",
            GraMode::Mode3 => "mode3",
        }
    }
}

/// One relation-attention unit over a nodes×feat tensor (SRA when nodes are
/// points, CRA when nodes are channels of the transposed tensor).
#[derive(Debug, Clone)]
pub struct RelationParams {
    /// Embedding of the node features (shared by the affinity and the
    /// pooled branch).
    pub alpha: MlpLayer,
    pub beta: MlpLayer,
    /// Embedding of the 2·nodes-wide affinity row/column vector.
    pub rel: MlpLayer,
    /// Score head: sigmoid(score2(relu(score1(y)))).
    pub score1: MlpLayer,
    pub score2: MlpLayer,
}

impl RelationParams {
    /// Builds a unit for `node_count` nodes carrying `feat`-wide vectors.
    pub fn init<R: Rng>(rng: &mut R, node_count: usize, feat: usize, use_norm: bool) -> Self {
        let d_e = (feat / 2).max(4);
        let d_r = (feat / 4).max(4);
        let hidden = (d_r / 2).max(4);
        RelationParams {
            alpha: MlpLayer::init(rng, feat, d_e, use_norm, true),
            beta: MlpLayer::init(rng, feat, d_e, use_norm, true),
            rel: MlpLayer::init(rng, 2 * node_count, d_r, use_norm, true),
            score1: MlpLayer::init(rng, 1 + d_r, hidden, false, true),
            score2: MlpLayer::init(rng, hidden, 1, false, false),
        }
    }

    pub fn node_count(&self) -> usize {
        self.rel.d_in() / 2
    }

    /// Per-node attention scalars in (0,1). Input is nodes×feat.
    pub fn node_scores(&mut self, tape: &mut Tape, x: TensorId, phase: Phase) -> Result<TensorId> {
        let nodes = tape.value(x).shape()[0];
        if nodes != self.node_count() {
            return Err(Error::Dimension(format!(
                "relation unit built for {} nodes applied to {nodes}",
                self.node_count()
            )));
        }
        let emb_a = self.alpha.apply(tape, x, phase)?;
        let emb_b = self.beta.apply(tape, x, phase)?;
        let aff = affinity_from_embeddings(tape, emb_a, emb_b)?;
        let augmented = self.relation_augment(tape, emb_a, aff, phase)?;
        self.attention_scores(tape, augmented, phase)
    }

    /// Relation-augmented vectors, one row per node: the max-pooled node
    /// embedding joined with the embedded affinity row/column vector.
    pub fn relation_augment(
        &mut self,
        tape: &mut Tape,
        emb_a: TensorId,
        aff: TensorId,
        phase: Phase,
    ) -> Result<TensorId> {
        let nodes = tape.value(aff).shape()[0];
        let pooled = tape.reduce_max(emb_a, 1)?;
        let pooled = tape.reshape(pooled, vec![nodes, 1])?;
        let rel_vec = relation_vectors(tape, aff)?;
        let rel_emb = self.rel.apply(tape, rel_vec, phase)?;
        tape.concat(&[pooled, rel_emb], 1)
    }

    /// Per-node attention scalars from the augmented vectors:
    /// sigmoid(score2(relu(score1(y)))), each strictly inside (0,1).
    pub fn attention_scores(
        &mut self,
        tape: &mut Tape,
        augmented: TensorId,
        phase: Phase,
    ) -> Result<TensorId> {
        let nodes = tape.value(augmented).shape()[0];
        let h = self.score1.apply(tape, augmented, phase)?;
        let s = self.score2.apply(tape, h, phase)?;
        let s = tape.sigmoid(s)?;
        tape.reshape(s, vec![nodes])
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.alpha.for_each_param(&format!("{prefix}.alpha"), f);
        self.beta.for_each_param(&format!("{prefix}.beta"), f);
        self.rel.for_each_param(&format!("{prefix}.rel"), f);
        self.score1.for_each_param(&format!("{prefix}.score1"), f);
        self.score2.for_each_param(&format!("{prefix}.score2"), f);
    }

    pub fn for_each_stat(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        self.alpha.for_each_stat(&format!("{prefix}.alpha"), f);
        self.beta.for_each_stat(&format!("{prefix}.beta"), f);
        self.rel.for_each_stat(&format!("{prefix}.rel"), f);
        self.score1.for_each_stat(&format!("{prefix}.score1"), f);
        self.score2.for_each_stat(&format!("{prefix}.score2"), f);
    }

    pub fn param_count(&self) -> usize {
        self.alpha.param_count()
            + self.beta.param_count()
            + self.rel.param_count()
            + self.score1.param_count()
            + self.score2.param_count()
    }
}

/// Pairwise affinity A[i][j] = alpha(x_i)·beta(x_j) over embedded nodes.
pub fn affinity(
    tape: &mut Tape,
    x: TensorId,
    alpha: &mut MlpLayer,
    beta: &mut MlpLayer,
    phase: Phase,
) -> Result<TensorId> {
    let emb_a = alpha.apply(tape, x, phase)?;
    let emb_b = beta.apply(tape, x, phase)?;
    affinity_from_embeddings(tape, emb_a, emb_b)
}

fn affinity_from_embeddings(tape: &mut Tape, emb_a: TensorId, emb_b: TensorId) -> Result<TensorId> {
    let bt = tape.transpose(emb_b)?;
    tape.matmul(emb_a, bt)
}

/// Per-node relation vectors: row i and column i of the affinity matrix
/// concatenated, giving nodes×2·nodes.
pub fn relation_vectors(tape: &mut Tape, aff: TensorId) -> Result<TensorId> {
    let at = tape.transpose(aff)?;
    tape.concat(&[aff, at], 1)
}

/// Spatial relation-aware attention: rows of X scaled by their attention
/// scalars (no residual).
pub fn sra_forward(
    tape: &mut Tape,
    x: TensorId,
    params: &mut RelationParams,
    phase: Phase,
) -> Result<TensorId> {
    let scores = params.node_scores(tape, x, phase)?;
    tape.scale_rows(x, scores)
}

/// Channel relation-aware attention: columns of X scaled by per-channel
/// attention scalars, computed over the transposed tensor.
pub fn cra_forward(
    tape: &mut Tape,
    x: TensorId,
    params: &mut RelationParams,
    phase: Phase,
) -> Result<TensorId> {
    let xt = tape.transpose(x)?;
    let scores = params.node_scores(tape, xt, phase)?;
    let yt = tape.scale_rows(xt, scores)?;
    tape.transpose(yt)
}

/// A full GRA block for one decoder level.
#[derive(Debug, Clone)]
pub struct GraParams {
    pub mode: GraMode,
    pub sra: Option<RelationParams>,
    pub cra: Option<RelationParams>,
    /// Mode 3 only: restores the input width after branch concatenation.
    pub fusion: Option<MlpLayer>,
}

impl GraParams {
    /// Builds the block for an n_points × width tensor.
    pub fn init<R: Rng>(
        rng: &mut R,
        mode: GraMode,
        n_points: usize,
        width: usize,
        use_norm: bool,
    ) -> Self {
        let needs_sra = matches!(
            mode,
            GraMode::SraOnly | GraMode::Mode1 | GraMode::Mode2 | GraMode::Mode3
        );
        let needs_cra = matches!(
            mode,
            GraMode::CraOnly | GraMode::Mode1 | GraMode::Mode2 | GraMode::Mode3
        );
        GraParams {
            mode,
            sra: needs_sra.then(|| RelationParams::init(rng, n_points, width, use_norm)),
            cra: needs_cra.then(|| RelationParams::init(rng, width, n_points, use_norm)),
            fusion: (mode == GraMode::Mode3)
                .then(|| MlpLayer::init(rng, 2 * width, width, use_norm, true)),
        }
    }

    /// Applies the configured mode; the output always has the input shape.
    pub fn forward(&mut self, tape: &mut Tape, x: TensorId, phase: Phase) -> Result<TensorId> {
        match self.mode {
            GraMode::Off => Ok(x),
            GraMode::SraOnly => sra_forward(tape, x, self.sra.as_mut().unwrap(), phase),
            GraMode::CraOnly => cra_forward(tape, x, self.cra.as_mut().unwrap(), phase),
            GraMode::Mode1 => {
                let y = cra_forward(tape, x, self.cra.as_mut().unwrap(), phase)?;
                sra_forward(tape, y, self.sra.as_mut().unwrap(), phase)
            }
            GraMode::Mode2 => {
                let y = sra_forward(tape, x, self.sra.as_mut().unwrap(), phase)?;
                cra_forward(tape, y, self.cra.as_mut().unwrap(), phase)
            }
            GraMode::Mode3 => {
                let s = sra_forward(tape, x, self.sra.as_mut().unwrap(), phase)?;
                let c = cra_forward(tape, x, self.cra.as_mut().unwrap(), phase)?;
                let cat = tape.concat(&[s, c], 1)?;
                self.fusion.as_mut().unwrap().apply(tape, cat, phase)
            }
        }
    }

    /// Visits parameters in the order `forward` pushes them for this mode.
    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        let sra_first = !matches!(self.mode, GraMode::Mode1);
        if sra_first {
            if let Some(s) = &mut self.sra {
                s.for_each_param(&format!("{prefix}.sra"), f);
            }
            if let Some(c) = &mut self.cra {
                c.for_each_param(&format!("{prefix}.cra"), f);
            }
        } else {
            if let Some(c) = &mut self.cra {
                c.for_each_param(&format!("{prefix}.cra"), f);
            }
            if let Some(s) = &mut self.sra {
                s.for_each_param(&format!("{prefix}.sra"), f);
            }
        }
        if let Some(fu) = &mut self.fusion {
            fu.for_each_param(&format!("{prefix}.fusion"), f);
        }
    }

    pub fn for_each_stat(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        if let Some(s) = &mut self.sra {
            s.for_each_stat(&format!("{prefix}.sra"), f);
        }
        if let Some(c) = &mut self.cra {
            c.for_each_stat(&format!("{prefix}.cra"), f);
        }
        if let Some(fu) = &mut self.fusion {
            fu.for_each_stat(&format!("{prefix}.fusion"), f);
        }
    }

    pub fn param_count(&self) -> usize {
        self.sra.as_ref().map_or(0, RelationParams::param_count)
            + self.cra.as_ref().map_or(0, RelationParams::param_count)
            + self.fusion.as_ref().map_or(0, MlpLayer::param_count)
    }
}
