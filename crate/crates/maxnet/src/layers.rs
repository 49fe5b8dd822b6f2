//! Layer forward/backward operations: the affine map, the grouped-max
//! activation with argmax routing, dropout, and the softmax cross-entropy
//! loss. Layers own their parameter, gradient, and velocity buffers;
//! backward passes accumulate into the gradient buffers so that a later
//! optimizer step can consume and clear them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{add_transposed_matmul, Matrix, Scalar};

/// Affine map `z = x W + b`.
///
/// `W` is `d_in x width`, `b` is a single row of length `width`. Gradient
/// and momentum-velocity buffers share those shapes.
#[derive(Clone, Debug)]
pub struct AffineLayer<S> {
    pub(crate) w: Matrix<S>,
    pub(crate) b: Matrix<S>,
    pub(crate) grad_w: Matrix<S>,
    pub(crate) grad_b: Matrix<S>,
    pub(crate) vel_w: Matrix<S>,
    pub(crate) vel_b: Matrix<S>,
}

impl<S: Scalar> AffineLayer<S> {
    /// All-zero layer of the given shape.
    pub fn new(d_in: usize, width: usize) -> Self {
        AffineLayer {
            w: Matrix::zeros(d_in, width),
            b: Matrix::zeros(1, width),
            grad_w: Matrix::zeros(d_in, width),
            grad_b: Matrix::zeros(1, width),
            vel_w: Matrix::zeros(d_in, width),
            vel_b: Matrix::zeros(1, width),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn width(&self) -> usize {
        self.w.cols()
    }

    pub fn w(&self) -> &Matrix<S> {
        &self.w
    }

    pub fn w_mut(&mut self) -> &mut Matrix<S> {
        &mut self.w
    }

    pub fn b(&self) -> &Matrix<S> {
        &self.b
    }

    pub fn b_mut(&mut self) -> &mut Matrix<S> {
        &mut self.b
    }

    pub fn grad_w(&self) -> &Matrix<S> {
        &self.grad_w
    }

    pub fn grad_b(&self) -> &Matrix<S> {
        &self.grad_b
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Uniform Glorot initialization on the weights: each entry is drawn
    /// from `U(-l, l)` with `l = sqrt(6 / (d_in + width))`. Biases start at
    /// zero, and gradient/velocity buffers are cleared.
    pub fn init_glorot(&mut self, rng: &mut ChaCha8Rng) {
        let limit = (6.0 / (self.d_in() + self.width()) as f64).sqrt();
        for v in self.w.as_mut_slice() {
            *v = S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * limit);
        }
        self.b.fill(S::zero());
        self.zero_grads();
        self.reset_velocity();
    }

    /// `x W + b` for a batch of rows.
    pub fn forward(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        if x.cols() != self.d_in() {
            return Err(Error::dimension("affine forward", x.shape(), self.w.shape()));
        }
        x.matmul(&self.w)?.add_row_broadcast(self.b.row(0))
    }

    /// Accumulate parameter gradients for the batch that produced `dz` and
    /// return the gradient with respect to the layer input.
    ///
    /// `x` must be the same matrix that was fed forward: `grad_w += x^T dz`,
    /// `grad_b += column sums of dz`, and the returned `dx = dz W^T`.
    pub fn backward(&mut self, x: &Matrix<S>, dz: &Matrix<S>) -> Result<Matrix<S>> {
        if x.rows() != dz.rows() {
            return Err(Error::dimension("affine backward", x.shape(), dz.shape()));
        }
        if dz.cols() != self.width() || x.cols() != self.d_in() {
            return Err(Error::dimension("affine backward", x.shape(), dz.shape()));
        }
        add_transposed_matmul(x, dz, &mut self.grad_w)?;
        let col_sums = dz.column_sums();
        for (g, c) in self.grad_b.as_mut_slice().iter_mut().zip(col_sums) {
            *g = *g + c;
        }
        dz.matmul_transpose_b(&self.w)
    }

    pub fn zero_grads(&mut self) {
        self.grad_w.fill(S::zero());
        self.grad_b.fill(S::zero());
    }

    pub fn reset_velocity(&mut self) {
        self.vel_w.fill(S::zero());
        self.vel_b.fill(S::zero());
    }
}

/// Winning presynaptic indices from a grouped-max forward pass, kept so the
/// backward pass can route gradients. `winners[row * groups + group]` is the
/// absolute column index of the group maximum for that example.
#[derive(Clone, Debug)]
pub struct ArgmaxCache {
    batch: usize,
    groups: usize,
    winners: Vec<u32>,
    min_gap: f64,
}

impl ArgmaxCache {
    /// Smallest observed margin between a group's best and second-best
    /// presynaptic values, across the whole batch. Infinite when every
    /// group has a single member.
    pub fn min_gap(&self) -> f64 {
        self.min_gap
    }
}

/// Grouped-max activation.
///
/// The input width `N` is split into `N / k` non-overlapping groups of `k`
/// consecutive columns; group `i` covers columns `k*i .. k*i + k` and emits
/// the maximum of its members. Ties go to the lowest column index, so the
/// backward pass always routes through exactly one slot per group.
#[derive(Clone, Debug)]
pub struct MaxoutPool {
    pool_size: usize,
    width: usize,
    cache: Option<ArgmaxCache>,
}

impl MaxoutPool {
    pub fn new(width: usize, pool_size: usize) -> Result<Self> {
        if pool_size == 0 {
            return Err(Error::Config("pool size must be at least 1".into()));
        }
        if width == 0 || width % pool_size != 0 {
            return Err(Error::Config(format!(
                "presynaptic width {width} is not divisible by pool size {pool_size}"
            )));
        }
        Ok(MaxoutPool {
            pool_size,
            width,
            cache: None,
        })
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn groups(&self) -> usize {
        self.width / self.pool_size
    }

    fn scan<S: Scalar>(&self, z: &Matrix<S>) -> Result<(Matrix<S>, ArgmaxCache)> {
        if z.cols() != self.width {
            return Err(Error::dimension(
                "grouped max forward",
                z.shape(),
                (1, self.width),
            ));
        }
        let (batch, k, groups) = (z.rows(), self.pool_size, self.groups());
        let mut h = Matrix::zeros(batch, groups);
        let mut winners = vec![0u32; batch * groups];
        let mut min_gap = f64::INFINITY;
        for r in 0..batch {
            let row = z.row(r);
            for g in 0..groups {
                let base = g * k;
                let mut best = row[base];
                let mut best_idx = base;
                let mut second = S::neg_infinity();
                for (off, &v) in row[base + 1..base + k].iter().enumerate() {
                    if v > best {
                        second = best;
                        best = v;
                        best_idx = base + 1 + off;
                    } else if v > second {
                        second = v;
                    }
                }
                if k > 1 {
                    let gap = best.to_f64() - second.to_f64();
                    if gap < min_gap {
                        min_gap = gap;
                    }
                }
                h.set(r, g, best);
                winners[r * groups + g] = best_idx as u32;
            }
        }
        Ok((
            h,
            ArgmaxCache {
                batch,
                groups,
                winners,
                min_gap,
            },
        ))
    }

    /// Max over each group, caching the winning indices for backward.
    pub fn forward<S: Scalar>(&mut self, z: &Matrix<S>) -> Result<Matrix<S>> {
        let (h, cache) = self.scan(z)?;
        self.cache = Some(cache);
        Ok(h)
    }

    /// Max over each group without touching the cache. Used on paths that
    /// must not disturb the routing state of a prior training forward.
    pub fn forward_detached<S: Scalar>(&self, z: &Matrix<S>) -> Result<Matrix<S>> {
        Ok(self.scan(z)?.0)
    }

    /// Route `dh` back to the winning presynaptic slots: the output is zero
    /// everywhere except that `dz[r][winner(r, g)] = dh[r][g]`.
    pub fn backward<S: Scalar>(&self, dh: &Matrix<S>) -> Result<Matrix<S>> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            Error::State("grouped max backward called before any forward".into())
        })?;
        if dh.rows() != cache.batch || dh.cols() != cache.groups {
            return Err(Error::State(format!(
                "argmax cache is stale: cached batch {}x{} groups, gradient is {}x{}",
                cache.batch,
                cache.groups,
                dh.rows(),
                dh.cols()
            )));
        }
        let mut dz = Matrix::zeros(cache.batch, self.width);
        for r in 0..cache.batch {
            for g in 0..cache.groups {
                let w = cache.winners[r * cache.groups + g] as usize;
                dz.set(r, w, dh.get(r, g));
            }
        }
        Ok(dz)
    }

    pub fn cache(&self) -> Option<&ArgmaxCache> {
        self.cache.as_ref()
    }

    pub fn min_gap(&self) -> Option<f64> {
        self.cache.as_ref().map(|c| c.min_gap)
    }
}

/// Multiplicative binary-mask regularizer for one activation site.
///
/// Training samples a Bernoulli keep mask per element. At inference the
/// classic rule multiplies activations by the keep probability instead of
/// sampling, approximating the average of all masked subnetworks. The
/// inverted variant divides kept activations by `keep` during training and
/// leaves inference untouched; the two parameterizations agree up to a
/// constant factor absorbed by downstream weights.
#[derive(Clone, Debug)]
pub struct Dropout<S> {
    keep: f64,
    inverted: bool,
    mask: Option<Matrix<S>>,
}

impl<S: Scalar> Dropout<S> {
    pub fn new(keep: f64, inverted: bool) -> Result<Self> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep probability must lie in (0, 1], got {keep}"
            )));
        }
        Ok(Dropout {
            keep,
            inverted,
            mask: None,
        })
    }

    pub fn keep(&self) -> f64 {
        self.keep
    }

    pub fn inverted(&self) -> bool {
        self.inverted
    }

    fn scale_by_mask(&self, h: &Matrix<S>, mask: &Matrix<S>) -> Matrix<S> {
        let masked = h.hadamard(mask).expect("mask shape verified by caller");
        if self.inverted && self.keep < 1.0 {
            let inv = S::from_f64(1.0 / self.keep);
            masked.map(|v| v * inv)
        } else {
            masked
        }
    }

    /// Training pass: samples a fresh keep mask, caches it, and returns the
    /// masked activations. With `keep == 1` no randomness is consumed.
    pub fn apply_train(&mut self, h: &Matrix<S>, rng: &mut ChaCha8Rng) -> Matrix<S> {
        let mut mask = Matrix::filled(h.rows(), h.cols(), S::one());
        if self.keep < 1.0 {
            for m in mask.as_mut_slice() {
                if rng.gen::<f64>() >= self.keep {
                    *m = S::zero();
                }
            }
        }
        let out = self.scale_by_mask(h, &mask);
        self.mask = Some(mask);
        out
    }

    /// Re-apply the cached mask without sampling. Gradient checking relies
    /// on this to keep the loss a deterministic function of the parameters.
    pub fn apply_frozen(&self, h: &Matrix<S>) -> Result<Matrix<S>> {
        let mask = self.mask.as_ref().ok_or_else(|| {
            Error::State("no cached dropout mask; run a training forward first".into())
        })?;
        if mask.shape() != h.shape() {
            return Err(Error::State(format!(
                "cached dropout mask is {}x{} but activations are {}x{}",
                mask.rows(),
                mask.cols(),
                h.rows(),
                h.cols()
            )));
        }
        Ok(self.scale_by_mask(h, mask))
    }

    /// Deterministic inference pass: no sampling, expectation rescaling.
    pub fn apply_inference(&self, h: &Matrix<S>) -> Matrix<S> {
        if self.inverted || self.keep >= 1.0 {
            h.clone()
        } else {
            let k = S::from_f64(self.keep);
            h.map(|v| v * k)
        }
    }

    /// Gradient of the training pass: the same mask (and inverted-mode
    /// rescale) applied to the upstream gradient.
    pub fn backward(&self, dout: &Matrix<S>) -> Result<Matrix<S>> {
        self.apply_frozen(dout)
    }

    pub fn mask(&self) -> Option<&Matrix<S>> {
        self.mask.as_ref()
    }
}

fn row_log_sum_exp<S: Scalar>(row: &[S]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        let v = v.to_f64();
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for &v in row {
        sum += (v.to_f64() - max).exp();
    }
    max + sum.ln()
}

/// Softmax cross-entropy over logit rows.
///
/// Returns the mean negative log-likelihood of the true classes in nats and
/// the gradient with respect to the logits, `(softmax - onehot) / batch`.
/// The log-sum-exp is shifted by the row maximum, so adding a constant to a
/// row changes nothing and large logits do not overflow.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Matrix<S>,
    labels: &[u8],
) -> Result<(f64, Matrix<S>)> {
    if logits.rows() != labels.len() {
        return Err(Error::dimension(
            "softmax_cross_entropy",
            logits.shape(),
            (labels.len(), 1),
        ));
    }
    let (batch, classes) = logits.shape();
    if batch == 0 {
        return Err(Error::Data("softmax cross-entropy over an empty batch".into()));
    }
    let mut dlogits = Matrix::zeros(batch, classes);
    let mut total_nll = 0.0f64;
    let inv_batch = 1.0 / batch as f64;
    for r in 0..batch {
        let label = labels[r] as usize;
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {classes} classes (row {r})"
            )));
        }
        let row = logits.row(r);
        let lse = row_log_sum_exp(row);
        total_nll -= row[label].to_f64() - lse;
        for (j, &v) in row.iter().enumerate() {
            let p = (v.to_f64() - lse).exp();
            let delta = if j == label { 1.0 } else { 0.0 };
            dlogits.set(r, j, S::from_f64((p - delta) * inv_batch));
        }
    }
    Ok((total_nll * inv_batch, dlogits))
}

/// Log-likelihood in nats of one class under the softmax of a single logit
/// row. Evaluation streams call this per example and accumulate in f64.
pub fn row_log_likelihood<S: Scalar>(row: &[S], label: u8) -> Result<f64> {
    let idx = label as usize;
    if idx >= row.len() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            row.len()
        )));
    }
    Ok(row[idx].to_f64() - row_log_sum_exp(row))
}

/// Mean log-likelihood of the true classes in nats: the negation of the
/// cross-entropy above, without building the gradient. Accumulation is f64
/// in row order regardless of the scalar type.
pub fn mean_log_likelihood<S: Scalar>(logits: &Matrix<S>, labels: &[u8]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::dimension(
            "mean_log_likelihood",
            logits.shape(),
            (labels.len(), 1),
        ));
    }
    let (batch, classes) = logits.shape();
    if batch == 0 {
        return Err(Error::Data("mean log-likelihood over an empty batch".into()));
    }
    let mut total = 0.0f64;
    for r in 0..batch {
        let label = labels[r] as usize;
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {classes} classes (row {r})"
            )));
        }
        let row = logits.row(r);
        total += row[label].to_f64() - row_log_sum_exp(row);
    }
    Ok(total / batch as f64)
}
