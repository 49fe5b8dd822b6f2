//! The full network: input dropout, a stack of hidden blocks (affine map,
//! grouped max, dropout), and an affine output layer producing class logits.
//!
//! Three forward paths exist with different state behavior:
//!
//! * [`MaxoutNetwork::train_forward`] samples dropout masks and caches the
//!   affine inputs and argmax routes that [`MaxoutNetwork::backward`] needs;
//! * [`MaxoutNetwork::frozen_logits`] reuses the cached masks without
//!   mutating anything, so the loss is a deterministic function of the
//!   parameters (this is what the gradient checker differentiates);
//! * [`MaxoutNetwork::infer_logits`] is the deterministic inference path:
//!   no masks, activations rescaled by the keep probabilities.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{softmax_cross_entropy, AffineLayer, Dropout, MaxoutPool};
use crate::optim::{sgd_step, OptimizerConfig};
use crate::tensor::{Matrix, Scalar};

/// Architecture and dropout settings for a [`MaxoutNetwork`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Number of input features.
    pub input_width: usize,
    /// Presynaptic width of each hidden layer; each must be divisible by
    /// `pool_size`. The layer's output width is `width / pool_size`.
    pub hidden_widths: Vec<usize>,
    /// Group size `k` of the grouped-max activation.
    pub pool_size: usize,
    /// Number of output classes.
    pub output_classes: usize,
    /// Keep probability for input dropout.
    pub input_keep: f64,
    /// Keep probability for dropout on each pooled hidden output.
    pub hidden_keep: f64,
    /// Use inverted dropout (rescale during training) instead of the classic
    /// mean-network rescale at inference.
    pub inverted_dropout: bool,
}

impl NetworkConfig {
    /// 28x28 grayscale digits flattened to 784 inputs, two hidden layers of
    /// 1200 presynaptic units pooled in groups of 5, ten classes.
    pub fn mnist_default() -> Self {
        NetworkConfig {
            input_width: 784,
            hidden_widths: vec![1200, 1200],
            pool_size: 5,
            output_classes: 10,
            input_keep: 0.8,
            hidden_keep: 0.5,
            inverted_dropout: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 {
            return Err(Error::Config("input_width must be at least 1".into()));
        }
        if self.output_classes == 0 {
            return Err(Error::Config("output_classes must be at least 1".into()));
        }
        if self.pool_size == 0 {
            return Err(Error::Config("pool_size must be at least 1".into()));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::Config(
                "hidden_widths must name at least one hidden layer".into(),
            ));
        }
        for (i, &w) in self.hidden_widths.iter().enumerate() {
            if w == 0 || w % self.pool_size != 0 {
                return Err(Error::Config(format!(
                    "hidden_widths[{i}] = {w} is not divisible by pool_size = {}",
                    self.pool_size
                )));
            }
        }
        for (name, keep) in [("input_keep", self.input_keep), ("hidden_keep", self.hidden_keep)] {
            if !(keep > 0.0 && keep <= 1.0) {
                return Err(Error::Config(format!(
                    "{name} must lie in (0, 1], got {keep}"
                )));
            }
        }
        Ok(())
    }

    /// Canonical one-line description of the architecture. Checkpoints store
    /// a hash of this string to detect config/weight mismatches.
    pub fn arch_string(&self, precision: &str) -> String {
        let widths: Vec<String> = self.hidden_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "precision={};input={};hidden={};pool={};classes={};input_keep={};hidden_keep={};inverted={}",
            precision,
            self.input_width,
            widths.join(","),
            self.pool_size,
            self.output_classes,
            self.input_keep,
            self.hidden_keep,
            self.inverted_dropout
        )
    }
}

#[derive(Clone, Debug)]
struct HiddenBlock<S> {
    affine: AffineLayer<S>,
    pool: MaxoutPool,
    dropout: Dropout<S>,
}

/// Saved copy of every parameter matrix, restorable bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSnapshot<S> {
    params: Vec<(Matrix<S>, Matrix<S>)>,
}

/// Multilayer perceptron with grouped-max hidden activations.
#[derive(Clone, Debug)]
pub struct MaxoutNetwork<S> {
    cfg: NetworkConfig,
    input_dropout: Dropout<S>,
    blocks: Vec<HiddenBlock<S>>,
    output: AffineLayer<S>,
    affine_inputs: Vec<Matrix<S>>,
}

impl<S: Scalar> MaxoutNetwork<S> {
    /// Build a zero-initialized network; call [`Self::init_params`] before
    /// training.
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.hidden_widths.len());
        let mut d_in = cfg.input_width;
        for &width in &cfg.hidden_widths {
            blocks.push(HiddenBlock {
                affine: AffineLayer::new(d_in, width),
                pool: MaxoutPool::new(width, cfg.pool_size)?,
                dropout: Dropout::new(cfg.hidden_keep, cfg.inverted_dropout)?,
            });
            d_in = width / cfg.pool_size;
        }
        let output = AffineLayer::new(d_in, cfg.output_classes);
        let input_dropout = Dropout::new(cfg.input_keep, cfg.inverted_dropout)?;
        Ok(MaxoutNetwork {
            cfg,
            input_dropout,
            blocks,
            output,
            affine_inputs: Vec::new(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Glorot-uniform weights everywhere, zero biases, cleared velocities.
    pub fn init_params(&mut self, rng: &mut ChaCha8Rng) {
        for block in &mut self.blocks {
            block.affine.init_glorot(rng);
        }
        self.output.init_glorot(rng);
    }

    /// Number of affine layers (hidden layers plus the output layer).
    pub fn num_affine_layers(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn affine_layer(&self, idx: usize) -> &AffineLayer<S> {
        if idx < self.blocks.len() {
            &self.blocks[idx].affine
        } else {
            &self.output
        }
    }

    pub fn affine_layer_mut(&mut self, idx: usize) -> &mut AffineLayer<S> {
        if idx < self.blocks.len() {
            &mut self.blocks[idx].affine
        } else {
            &mut self.output
        }
    }

    /// Stable name for an affine layer: `hidden0`, `hidden1`, ..., `output`.
    pub fn layer_name(&self, idx: usize) -> String {
        if idx < self.blocks.len() {
            format!("hidden{idx}")
        } else {
            "output".into()
        }
    }

    /// Total learnable parameter count.
    pub fn param_count(&self) -> usize {
        (0..self.num_affine_layers())
            .map(|i| self.affine_layer(i).param_count())
            .sum()
    }

    /// Training forward pass: samples dropout masks from `rng` and caches
    /// everything the backward pass needs. Returns logits.
    pub fn train_forward(&mut self, x: &Matrix<S>, rng: &mut ChaCha8Rng) -> Result<Matrix<S>> {
        if x.cols() != self.cfg.input_width {
            return Err(Error::dimension(
                "network forward",
                x.shape(),
                (x.rows(), self.cfg.input_width),
            ));
        }
        self.affine_inputs.clear();
        let mut cur = self.input_dropout.apply_train(x, rng);
        for block in &mut self.blocks {
            self.affine_inputs.push(cur.clone());
            let z = block.affine.forward(&cur)?;
            let h = block.pool.forward(&z)?;
            cur = block.dropout.apply_train(&h, rng);
        }
        self.affine_inputs.push(cur.clone());
        self.output.forward(&cur)
    }

    /// Forward pass that reuses the dropout masks of the last training
    /// forward and leaves all caches untouched.
    pub fn frozen_logits(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        if x.cols() != self.cfg.input_width {
            return Err(Error::dimension(
                "network forward",
                x.shape(),
                (x.rows(), self.cfg.input_width),
            ));
        }
        let mut cur = self.input_dropout.apply_frozen(x)?;
        for block in &self.blocks {
            let z = block.affine.forward(&cur)?;
            let h = block.pool.forward_detached(&z)?;
            cur = block.dropout.apply_frozen(&h)?;
        }
        self.output.forward(&cur)
    }

    /// Deterministic inference pass. Takes `&self`, mutates nothing, and is
    /// safe to call from concurrent readers.
    pub fn infer_logits(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        if x.cols() != self.cfg.input_width {
            return Err(Error::dimension(
                "network forward",
                x.shape(),
                (x.rows(), self.cfg.input_width),
            ));
        }
        let mut cur = self.input_dropout.apply_inference(x);
        for block in &self.blocks {
            let z = block.affine.forward(&cur)?;
            let h = block.pool.forward_detached(&z)?;
            cur = block.dropout.apply_inference(&h);
        }
        self.output.forward(&cur)
    }

    /// Backpropagate from a logit gradient, accumulating parameter gradients
    /// in every affine layer. Input dropout has no parameters upstream, so
    /// its backward step is skipped.
    pub fn backward(&mut self, dlogits: &Matrix<S>) -> Result<()> {
        if self.affine_inputs.len() != self.blocks.len() + 1 {
            return Err(Error::State(
                "backward called before a training forward".into(),
            ));
        }
        let mut dx = self
            .output
            .backward(self.affine_inputs.last().expect("cached above"), dlogits)?;
        for i in (0..self.blocks.len()).rev() {
            let dh = self.blocks[i].dropout.backward(&dx)?;
            let dz = self.blocks[i].pool.backward(&dh)?;
            dx = self.blocks[i].affine.backward(&self.affine_inputs[i], &dz)?;
        }
        Ok(())
    }

    /// One training step on a minibatch: forward, loss, backward. Returns
    /// the batch mean negative log-likelihood. Gradients are accumulated;
    /// the caller is expected to follow with an optimizer step.
    pub fn train_step(
        &mut self,
        x: &Matrix<S>,
        labels: &[u8],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let logits = self.train_forward(x, rng)?;
        let (nll, dlogits) = softmax_cross_entropy(&logits, labels)?;
        if !nll.is_finite() {
            return Err(Error::NonFinite {
                context: "minibatch loss".into(),
            });
        }
        self.backward(&dlogits)?;
        Ok(nll)
    }

    /// Momentum-SGD update on every affine layer, with layer names attached
    /// to any non-finite-gradient diagnostics.
    pub fn sgd_step_all(&mut self, cfg: &OptimizerConfig, epoch: usize) -> Result<()> {
        for i in 0..self.num_affine_layers() {
            let name = self.layer_name(i);
            sgd_step(self.affine_layer_mut(i), cfg, epoch).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("layer {name} {context}"),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for i in 0..self.num_affine_layers() {
            self.affine_layer_mut(i).zero_grads();
        }
    }

    pub fn reset_velocity(&mut self) {
        for i in 0..self.num_affine_layers() {
            self.affine_layer_mut(i).reset_velocity();
        }
    }

    /// Smallest best-versus-second-best margin seen by any pool in the last
    /// training forward. `None` before any forward.
    pub fn min_tie_gap(&self) -> Option<f64> {
        let mut gap = f64::INFINITY;
        for block in &self.blocks {
            match block.pool.min_gap() {
                Some(g) => gap = gap.min(g),
                None => return None,
            }
        }
        Some(gap)
    }

    /// Copy of all parameters, restorable bit for bit via [`Self::restore`].
    pub fn snapshot(&self) -> NetworkSnapshot<S> {
        let params = (0..self.num_affine_layers())
            .map(|i| {
                let layer = self.affine_layer(i);
                (layer.w().clone(), layer.b().clone())
            })
            .collect();
        NetworkSnapshot { params }
    }

    pub fn restore(&mut self, snap: &NetworkSnapshot<S>) -> Result<()> {
        if snap.params.len() != self.num_affine_layers() {
            return Err(Error::State(format!(
                "snapshot holds {} layers, network has {}",
                snap.params.len(),
                self.num_affine_layers()
            )));
        }
        for (i, (w, b)) in snap.params.iter().enumerate() {
            let layer = self.affine_layer_mut(i);
            if layer.w().shape() != w.shape() || layer.b().shape() != b.shape() {
                return Err(Error::State(format!(
                    "snapshot layer {i} shape {:?} does not match network {:?}",
                    w.shape(),
                    layer.w().shape()
                )));
            }
            *layer.w_mut() = w.clone();
            *layer.b_mut() = b.clone();
        }
        Ok(())
    }

    /// All parameters as one f64 vector: for each layer, weights in row-major
    /// order followed by the bias row.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for i in 0..self.num_affine_layers() {
            let layer = self.affine_layer(i);
            out.extend(layer.w().as_slice().iter().map(|&v| Scalar::to_f64(v)));
            out.extend(layer.b().as_slice().iter().map(|&v| Scalar::to_f64(v)));
        }
        out
    }

    /// All accumulated gradients, flattened in the same order as
    /// [`Self::flatten_params`].
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for i in 0..self.num_affine_layers() {
            let layer = self.affine_layer(i);
            out.extend(layer.grad_w().as_slice().iter().map(|&v| Scalar::to_f64(v)));
            out.extend(layer.grad_b().as_slice().iter().map(|&v| Scalar::to_f64(v)));
        }
        out
    }

    /// Overwrite all parameters from a flat f64 vector laid out as in
    /// [`Self::flatten_params`].
    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::State(format!(
                "parameter vector holds {} values, network needs {}",
                theta.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for i in 0..self.num_affine_layers() {
            let layer = self.affine_layer_mut(i);
            for v in layer.w_mut().as_mut_slice() {
                *v = S::from_f64(theta[offset]);
                offset += 1;
            }
            for v in layer.b_mut().as_mut_slice() {
                *v = S::from_f64(theta[offset]);
                offset += 1;
            }
        }
        Ok(())
    }

    /// Named half-open ranges into the flat parameter vector, one per
    /// weight or bias block: `hidden0.w`, `hidden0.b`, ..., `output.b`.
    pub fn param_block_ranges(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for i in 0..self.num_affine_layers() {
            let name = self.layer_name(i);
            let layer = self.affine_layer(i);
            out.push((format!("{name}.w"), offset..offset + layer.w().len()));
            offset += layer.w().len();
            out.push((format!("{name}.b"), offset..offset + layer.b().len()));
            offset += layer.b().len();
        }
        out
    }
}
