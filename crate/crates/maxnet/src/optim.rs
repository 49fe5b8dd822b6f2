//! Minibatch SGD with classical momentum, exponential learning-rate decay,
//! a linear momentum ramp, and a per-column max-norm constraint on weight
//! matrices.
//!
//! The update for each parameter block is
//!
//! ```text
//! v <- momentum * v - lr * grad
//! p <- p + v
//! ```
//!
//! followed, for weight matrices only, by projecting any column whose L2
//! norm exceeds `max_norm` back onto the ball of that radius. Gradients are
//! cleared after the step so the next minibatch starts from zero.

use crate::error::{Error, Result};
use crate::layers::AffineLayer;
use crate::tensor::{Matrix, Scalar};

/// Hyperparameters of the optimizer and its schedules.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    /// Examples per minibatch.
    pub batch_size: usize,
    /// Learning rate at epoch 0.
    pub base_lr: f64,
    /// Per-epoch multiplicative decay: `lr(t) = base_lr * lr_decay^t`.
    pub lr_decay: f64,
    /// Momentum at epoch 0.
    pub momentum_start: f64,
    /// Momentum reached at the end of the ramp and held afterwards.
    pub momentum_end: f64,
    /// Epochs over which momentum ramps linearly from start to end. Zero
    /// means `momentum_end` applies from the first epoch.
    pub momentum_ramp_epochs: usize,
    /// Maximum L2 norm of any weight column; `None` disables the constraint.
    pub max_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            batch_size: 100,
            base_lr: 0.1,
            lr_decay: 0.998,
            momentum_start: 0.5,
            momentum_end: 0.99,
            momentum_ramp_epochs: 20,
            max_norm: Some(3.5),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        for (name, m) in [
            ("momentum_start", self.momentum_start),
            ("momentum_end", self.momentum_end),
        ] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1), got {m}"
                )));
            }
        }
        if self.momentum_end < self.momentum_start {
            return Err(Error::Config(format!(
                "momentum_end {} is below momentum_start {}",
                self.momentum_end, self.momentum_start
            )));
        }
        if let Some(c) = self.max_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!(
                    "max_norm must be positive and finite, got {c}"
                )));
            }
        }
        Ok(())
    }

    /// Learning rate and momentum in effect at the given epoch.
    pub fn schedule(&self, epoch: usize) -> (f64, f64) {
        let lr = self.base_lr * self.lr_decay.powi(epoch as i32);
        let momentum = if self.momentum_ramp_epochs == 0 || epoch >= self.momentum_ramp_epochs {
            self.momentum_end
        } else {
            self.momentum_start
                + (self.momentum_end - self.momentum_start)
                    * (epoch as f64 / self.momentum_ramp_epochs as f64)
        };
        (lr, momentum)
    }
}

fn apply_update<S: Scalar>(
    params: &mut [S],
    velocity: &mut [S],
    grads: &[S],
    lr: S,
    momentum: S,
    what: &str,
) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{what} gradient (element {i})"),
            });
        }
    }
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v - lr * g;
        *p = *p + *v;
    }
    Ok(())
}

/// One momentum-SGD step on a layer's weights and bias, including the
/// max-norm projection on weight columns. Gradients are checked for
/// finiteness first and zeroed after the update.
pub fn sgd_step<S: Scalar>(
    layer: &mut AffineLayer<S>,
    cfg: &OptimizerConfig,
    epoch: usize,
) -> Result<()> {
    let (lr, momentum) = cfg.schedule(epoch);
    let (lr, momentum) = (S::from_f64(lr), S::from_f64(momentum));
    apply_update(
        layer.w.as_mut_slice(),
        layer.vel_w.as_mut_slice(),
        layer.grad_w.as_slice(),
        lr,
        momentum,
        "weight",
    )?;
    apply_update(
        layer.b.as_mut_slice(),
        layer.vel_b.as_mut_slice(),
        layer.grad_b.as_slice(),
        lr,
        momentum,
        "bias",
    )?;
    if let Some(c) = cfg.max_norm {
        max_norm_project(&mut layer.w, c);
    }
    layer.zero_grads();
    Ok(())
}

/// Scale every column of `w` whose L2 norm exceeds `c` down to norm `c`.
/// Columns at or below the bound are left untouched (not renormalized up).
pub fn max_norm_project<S: Scalar>(w: &mut Matrix<S>, c: f64) {
    debug_assert!(c > 0.0);
    let (rows, cols) = w.shape();
    for j in 0..cols {
        let mut sq = 0.0f64;
        for p in 0..rows {
            let v = w.get(p, j).to_f64();
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm > c {
            let scale = S::from_f64(c / norm);
            for p in 0..rows {
                let v = w.get(p, j);
                w.set(p, j, v * scale);
            }
        }
    }
}
