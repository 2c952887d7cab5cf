//! Shared MLP and batch normalization, the building blocks every encoding
//! module is assembled from.

use rand::Rng;

use super::{Tape, Tensor, TensorId};
use crate::error::Result;

/// How a forward pass treats batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics without touching running state (gradient checks).
    Check,
    /// Stored running statistics.
    Eval,
}

/// Glorot-uniform weight matrix: entries in ±sqrt(6/(fan_in+fan_out)).
pub fn glorot_init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], values).expect("glorot shape")
}

/// Batch normalization state: learnable scale/shift plus running statistics
/// (momentum 0.9, biased variance) used at inference.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Normalizes a P×C tensor. Pushes gamma then beta onto the tape.
    pub fn apply(&mut self, tape: &mut Tape, x: TensorId, phase: Phase) -> Result<TensorId> {
        let gamma = tape.param(self.gamma.clone());
        let beta = tape.param(self.beta.clone());
        match phase {
            Phase::Train | Phase::Check => {
                let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                if phase == Phase::Train {
                    for (r, m) in self.running_mean.iter_mut().zip(&mean) {
                        *r = self.momentum * *r + (1.0 - self.momentum) * m;
                    }
                    for (r, v) in self.running_var.iter_mut().zip(&var) {
                        *r = self.momentum * *r + (1.0 - self.momentum) * v;
                    }
                }
                Ok(y)
            }
            Phase::Eval => {
                // y = x * (gamma/std) + (beta - gamma*mean/std)
                let inv_std: Vec<f64> = self
                    .running_var
                    .iter()
                    .map(|&v| 1.0 / (v + self.eps).sqrt())
                    .collect();
                let mean_over_std: Vec<f64> = self
                    .running_mean
                    .iter()
                    .zip(&inv_std)
                    .map(|(m, is)| m * is)
                    .collect();
                let is_id = tape.constant(Tensor::vector(inv_std));
                let mos_id = tape.constant(Tensor::vector(mean_over_std));
                let eff_scale = tape.mul(gamma, is_id)?;
                let scaled = tape.scale_cols(x, eff_scale)?;
                let gm = tape.mul(gamma, mos_id)?;
                let neg_gm = tape.scale_const(gm, -1.0)?;
                let shift = tape.add(beta, neg_gm)?;
                tape.add_bias(scaled, shift)
            }
        }
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    /// Visits the non-learnable running statistics.
    pub fn for_each_stat(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }
}

/// Shared MLP: the same affine map applied at every position, optionally
/// followed by batch normalization over positions and a ReLU.
#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

impl MlpLayer {
    pub fn init<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, norm: bool, relu: bool) -> Self {
        // Non-zero bias init keeps stacked ReLU layers away from exact
        // all-zero activations, which sit on the kink and defeat both
        // learning signals and finite-difference checks.
        let bound = 1.0 / (d_in as f64).sqrt();
        let bias = Tensor::vector(
            (0..d_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        );
        MlpLayer {
            weight: glorot_init(rng, d_in, d_out),
            bias: Some(bias),
            norm: norm.then(|| BatchNorm::new(d_out)),
            relu,
        }
    }

    /// Bias-free affine map without normalization or activation.
    pub fn linear<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        MlpLayer {
            weight: glorot_init(rng, d_in, d_out),
            bias: None,
            norm: None,
            relu: false,
        }
    }

    pub fn from_weight(weight: Tensor, bias: Option<Tensor>, relu: bool) -> Self {
        MlpLayer {
            weight,
            bias,
            norm: None,
            relu,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Applies the layer to a tensor whose last extent equals `d_in`.
    /// Leading extents are preserved.
    pub fn apply(&mut self, tape: &mut Tape, x: TensorId, phase: Phase) -> Result<TensorId> {
        let in_shape = tape.value(x).shape().to_vec();
        let d_in = self.d_in();
        if in_shape.last() != Some(&d_in) {
            return Err(crate::error::Error::Dimension(format!(
                "mlp expects last extent {d_in}, got shape {in_shape:?}"
            )));
        }
        let positions = tape.value(x).numel() / d_in;
        let flat = if in_shape.len() == 2 {
            x
        } else {
            tape.reshape(x, vec![positions, d_in])?
        };
        let w = tape.param(self.weight.clone());
        let mut y = tape.matmul(flat, w)?;
        if let Some(b) = &self.bias {
            let b_id = tape.param(b.clone());
            y = tape.add_bias(y, b_id)?;
        }
        if let Some(norm) = &mut self.norm {
            y = norm.apply(tape, y, phase)?;
        }
        if self.relu {
            y = tape.relu(y)?;
        }
        let mut out_shape = in_shape;
        *out_shape.last_mut().unwrap() = self.d_out();
        if out_shape.len() != 2 {
            y = tape.reshape(y, out_shape)?;
        }
        Ok(y)
    }

    /// Visits weight, bias, then the normalization parameters, matching the
    /// order `apply` pushes them onto a tape.
    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b);
        }
        if let Some(n) = &mut self.norm {
            n.for_each_param(prefix, f);
        }
    }

    pub fn for_each_stat(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        if let Some(n) = &mut self.norm {
            n.for_each_stat(prefix, f);
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel()
            + self.bias.as_ref().map_or(0, Tensor::numel)
            + self.norm.as_ref().map_or(0, |n| 2 * n.channels())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_zero_output() {
        let mut mlp =
            MlpLayer::from_weight(Tensor::zeros(&[3, 4]), Some(Tensor::zeros(&[4])), false);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 3]));
        let y = mlp.apply(&mut tape, x, Phase::Check).unwrap();
        assert!(tape.value(y).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weights_pass_positive_inputs() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut mlp = MlpLayer::from_weight(eye, None, true);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.5, 2.0], vec![1.5, 3.0]]).unwrap());
        let y = mlp.apply(&mut tape, x, Phase::Check).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, 2.0, 1.5, 3.0]);
    }

    #[test]
    fn norm_single_position_errors_in_training() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut mlp = MlpLayer::init(&mut rng, 3, 4, true, true);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3]));
        assert!(mlp.apply(&mut tape, x, Phase::Train).is_err());
        // inference mode is fine with one position
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3]));
        assert!(mlp.apply(&mut tape, x, Phase::Eval).is_ok());
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut bn = BatchNorm::new(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap());
        bn.apply(&mut tape, x, Phase::Train).unwrap();
        assert!((bn.running_mean[0] - 0.3).abs() < 1e-12); // 0.9*0 + 0.1*3
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap());
        bn.apply(&mut tape, x, Phase::Check).unwrap();
        assert!((bn.running_mean[0] - 0.3).abs() < 1e-12); // unchanged by Check
    }

    use rand::SeedableRng;
}
