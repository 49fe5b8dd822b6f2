//! Finite-difference gradient checking.
//!
//! The oracle is the central difference `(f(t + eps e_i) - f(t - eps e_i)) /
//! (2 eps)` evaluated coordinate by coordinate in f64. For the network check
//! the loss is made a deterministic function of the parameters by freezing
//! the dropout masks of one training forward; parameter points that land too
//! close to a grouped-max tie (where the loss is not differentiable) are
//! rejected and re-randomized rather than skipped, so the check always runs
//! at a clean point.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::mean_log_likelihood;
use crate::network::MaxoutNetwork;
use crate::tensor::Matrix;

/// Relative error between an analytic and a numeric derivative, guarded for
/// near-zero pairs.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference gradient of `f` at `theta`. Fails loudly if any probe
/// evaluation comes back non-finite, naming the coordinate.
pub fn central_difference<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let up = f(&probe);
        probe[i] = theta[i] - eps;
        let down = f(&probe);
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite-difference probe at coordinate {i}"),
            });
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Worst coordinate found by a network check.
#[derive(Clone, Debug)]
pub struct WorstCoordinate {
    pub block: String,
    /// Index within the flat parameter vector.
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Per-block outcome of a network check.
#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
}

/// Everything a network gradient check produced.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub max_rel_error: f64,
    pub eps: f64,
    /// Parameter points rejected for sitting within `tie_tolerance` of a
    /// grouped-max tie before one was accepted.
    pub tie_rejections: usize,
    pub worst: Option<WorstCoordinate>,
}

impl GradCheckReport {
    /// Plain-text table, one line per parameter block.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .blocks
            .iter()
            .map(|b| b.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        out.push_str(&format!(
            "{:<width$}  {:>10}  {:>12}\n",
            "block", "params", "max rel err"
        ));
        for b in &self.blocks {
            out.push_str(&format!(
                "{:<width$}  {:>10}  {:>12.3e}\n",
                b.name, b.params, b.max_rel_error
            ));
        }
        out.push_str(&format!(
            "{:<width$}  {:>10}  {:>12.3e}\n",
            "overall",
            self.blocks.iter().map(|b| b.params).sum::<usize>(),
            self.max_rel_error
        ));
        if self.tie_rejections > 0 {
            out.push_str(&format!(
                "({} parameter draw(s) rejected near grouped-max ties)\n",
                self.tie_rejections
            ));
        }
        out
    }
}

const MAX_TIE_ATTEMPTS: usize = 200;

/// Compare the network's analytic gradient against central differences on
/// one batch, with dropout masks frozen. `net` must be an f64 network; the
/// check re-randomizes its parameters (drawing from `rng`) until the batch
/// is at least `tie_tolerance` away from every grouped-max tie, then leaves
/// it at the checked point.
pub fn check_network(
    net: &mut MaxoutNetwork<f64>,
    x: &Matrix<f64>,
    labels: &[u8],
    eps: f64,
    tie_tolerance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let mut tie_rejections = 0;
    let mut logits;
    loop {
        logits = net.train_forward(x, rng)?;
        let gap = net.min_tie_gap().unwrap_or(f64::INFINITY);
        if gap >= tie_tolerance {
            break;
        }
        tie_rejections += 1;
        if tie_rejections >= MAX_TIE_ATTEMPTS {
            return Err(Error::State(format!(
                "no tie-free parameter point found in {MAX_TIE_ATTEMPTS} draws \
                 (tie tolerance {tie_tolerance})"
            )));
        }
        net.init_params(rng);
    }

    let (_, dlogits) = crate::layers::softmax_cross_entropy(&logits, labels)?;
    net.zero_grads();
    net.backward(&dlogits)?;
    let analytic = net.flatten_grads();

    let theta = net.flatten_params();
    let numeric = central_difference(
        |t| {
            if net.set_params(t).is_err() {
                return f64::NAN;
            }
            match net.frozen_logits(x) {
                Ok(l) => match mean_log_likelihood(&l, labels) {
                    Ok(ll) => -ll,
                    Err(_) => f64::NAN,
                },
                Err(_) => f64::NAN,
            }
        },
        &theta,
        eps,
    )?;
    net.set_params(&theta)?;

    let mut blocks = Vec::new();
    let mut max_rel_error = 0.0f64;
    let mut worst: Option<WorstCoordinate> = None;
    for (name, range) in net.param_block_ranges() {
        let mut block_max = 0.0f64;
        for i in range.clone() {
            let rel = relative_error(analytic[i], numeric[i]);
            if rel > block_max {
                block_max = rel;
            }
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = Some(WorstCoordinate {
                    block: name.clone(),
                    flat_index: i,
                    analytic: analytic[i],
                    numeric: numeric[i],
                    rel_error: rel,
                });
            }
        }
        blocks.push(BlockReport {
            name,
            params: range.len(),
            max_rel_error: block_max,
        });
    }
    Ok(GradCheckReport {
        blocks,
        max_rel_error,
        eps,
        tie_rejections,
        worst,
    })
}
