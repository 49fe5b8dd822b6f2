//! The two-phase training protocol, evaluation, and metrics logging.
//!
//! Phase 1 trains on the train split, early-stopping when validation
//! misclassifications have not improved for `patience` epochs. The best
//! parameters are restored and their mean train log-likelihood is recorded.
//! Phase 2 then continues training on the union of train and validation
//! data until the validation mean log-likelihood first reaches the recorded
//! value (or a hard epoch cap intervenes, which is reported as its own
//! status rather than an error).
//!
//! Misclassification counts drive the phase-1 stopper; log-likelihoods
//! drive the phase-2 crossing rule. Both are computed in inference mode.
//! All evaluation sums accumulate in f64 in example order, so reported
//! metrics are deterministic for a given model and dataset.

use std::io::Write;
use std::time::Instant;

use crate::data::{minibatches, Dataset};
use crate::error::{Error, Result};
use crate::layers::row_log_likelihood;
use crate::network::{MaxoutNetwork, NetworkSnapshot};
use crate::optim::OptimizerConfig;
use crate::seeding::TrainRngs;
use crate::tensor::{Matrix, Scalar};

/// Knobs of the protocol itself (everything except the optimizer).
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    /// Epochs without a new best validation error count before phase 1
    /// stops. A patience of 0 stops at the first epoch that fails to
    /// improve.
    pub patience: usize,
    /// Hard epoch cap for phase 1.
    pub max_epochs_phase1: usize,
    /// Hard epoch cap for phase 2.
    pub max_epochs_phase2: usize,
    /// Stop phase 2 only when validation log-likelihood strictly exceeds
    /// the recorded value, instead of the default meets-or-exceeds.
    pub strict_crossing: bool,
    /// Zero the optimizer's velocity buffers when phase 2 begins.
    pub reset_velocity_at_phase2: bool,
    /// Examples per forward pass during evaluation.
    pub eval_chunk: usize,
    /// Record wall-clock seconds per epoch in the metrics. Disable to make
    /// metrics files byte-identical across reruns.
    pub log_wall_time: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            patience: 20,
            max_epochs_phase1: 500,
            max_epochs_phase2: 500,
            strict_crossing: false,
            reset_velocity_at_phase2: true,
            eval_chunk: 1000,
            log_wall_time: true,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs_phase1 == 0 || self.max_epochs_phase2 == 0 {
            return Err(Error::Config(
                "max epochs must be at least 1 in both phases".into(),
            ));
        }
        if self.eval_chunk == 0 {
            return Err(Error::Config("eval_chunk must be at least 1".into()));
        }
        Ok(())
    }
}

/// Early stopping on a stream of validation error counts.
///
/// An epoch improves if its error count is strictly lower than every count
/// seen before it; the first epoch always improves. After
/// `max(patience, 1)` consecutive non-improving epochs the stopper fires.
#[derive(Clone, Debug)]
pub struct PatienceStopper {
    patience: usize,
    epoch: usize,
    best: Option<usize>,
    best_epoch: usize,
    since_improvement: usize,
}

/// What a [`PatienceStopper`] concluded from one observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// New best; training continues.
    Improved,
    /// No improvement, but patience is not exhausted.
    Continue,
    /// Patience exhausted; stop after this epoch.
    Stop,
}

impl PatienceStopper {
    pub fn new(patience: usize) -> Self {
        PatienceStopper {
            patience,
            epoch: 0,
            best: None,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    pub fn best(&self) -> Option<usize> {
        self.best
    }

    /// Epoch index of the current best (first achiever on equal counts).
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn observe(&mut self, errors: usize) -> StopDecision {
        let improved = self.best.map_or(true, |b| errors < b);
        let decision = if improved {
            self.best = Some(errors);
            self.best_epoch = self.epoch;
            self.since_improvement = 0;
            StopDecision::Improved
        } else {
            self.since_improvement += 1;
            if self.since_improvement >= self.patience.max(1) {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        };
        self.epoch += 1;
        decision
    }
}

/// Drive a [`PatienceStopper`] over a scripted error sequence, honoring a
/// hard epoch cap. Returns `(best_epoch, epochs_run)`.
pub fn run_patience(errors: &[usize], patience: usize, max_epochs: usize) -> (usize, usize) {
    let mut stopper = PatienceStopper::new(patience);
    let mut epochs_run = 0;
    for &e in errors.iter().take(max_epochs) {
        epochs_run += 1;
        if stopper.observe(e) == StopDecision::Stop {
            break;
        }
    }
    (stopper.best_epoch(), epochs_run)
}

/// Phase-2 stopping rule: has the validation log-likelihood reached the
/// recorded value?
pub fn crossing_met(recorded: f64, valid_mean_ll: f64, strict: bool) -> bool {
    if strict {
        valid_mean_ll > recorded
    } else {
        valid_mean_ll >= recorded
    }
}

/// First index of a scripted log-likelihood sequence that satisfies the
/// crossing rule.
pub fn scripted_first_crossing(recorded: f64, seq: &[f64], strict: bool) -> Option<usize> {
    seq.iter()
        .position(|&ll| crossing_met(recorded, ll, strict))
}

/// Evaluation summary over one dataset.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub n: usize,
    pub errors: usize,
    pub error_rate: f64,
    /// Mean log-likelihood of the true labels, nats per example.
    pub mean_ll: f64,
}

/// Inference-mode evaluation: misclassification count and mean
/// log-likelihood, streamed in chunks of `chunk` examples. Class
/// predictions break logit ties toward the lowest class index.
pub fn evaluate<S: Scalar>(
    net: &MaxoutNetwork<S>,
    ds: &Dataset<S>,
    chunk: usize,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Data(format!(
            "cannot evaluate an empty {:?} dataset",
            ds.split()
        )));
    }
    let chunk = chunk.max(1);
    let mut errors = 0usize;
    let mut total_ll = 0.0f64;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let x = ds.images().rows_range(start, end);
        let logits = net.infer_logits(&x)?;
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let mut pred = 0usize;
            let mut best = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    pred = j;
                }
            }
            let label = ds.labels()[start + r];
            if pred != label as usize {
                errors += 1;
            }
            total_ll += row_log_likelihood(row, label)?;
        }
        start = end;
    }
    Ok(EvalReport {
        n: ds.len(),
        errors,
        error_rate: errors as f64 / ds.len() as f64,
        mean_ll: total_ll / ds.len() as f64,
    })
}

/// One metrics row, emitted after every epoch of either phase.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub phase: u8,
    /// Epoch index within the phase, starting at 0.
    pub epoch: usize,
    /// Mean training log-likelihood over the epoch's minibatch losses
    /// (nats per example, masks active).
    pub train_mean_ll: f64,
    pub valid_errors: usize,
    pub valid_mean_ll: f64,
    pub lr: f64,
    pub momentum: f64,
    pub wall_seconds: f64,
}

/// Consumer of metrics rows.
pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
}

/// Keeps rows in memory; handy in tests.
#[derive(Default)]
pub struct VecSink {
    pub rows: Vec<MetricsRow>,
}

impl MetricsSink for VecSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
}

pub const CSV_HEADER: &str =
    "phase,epoch,train_mean_ll,valid_errors,valid_mean_ll,lr,momentum,wall_seconds";

/// Format one row exactly as the CSV writer emits it (no trailing newline).
pub fn format_csv_row(row: &MetricsRow) -> String {
    format!(
        "{},{},{:.6},{},{:.6},{:.6},{:.6},{:.3}",
        row.phase,
        row.epoch,
        row.train_mean_ll,
        row.valid_errors,
        row.valid_mean_ll,
        row.lr,
        row.momentum,
        row.wall_seconds
    )
}

/// Writes the schema header once, then one line per row.
pub struct CsvMetricsWriter<W: Write> {
    out: W,
    wrote_header: bool,
}

impl<W: Write> CsvMetricsWriter<W> {
    pub fn new(out: W) -> Self {
        CsvMetricsWriter {
            out,
            wrote_header: false,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }

    fn io_err(e: std::io::Error) -> Error {
        Error::Io {
            path: "<metrics stream>".into(),
            source: e,
        }
    }
}

impl<W: Write> MetricsSink for CsvMetricsWriter<W> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        if !self.wrote_header {
            writeln!(self.out, "{CSV_HEADER}").map_err(Self::io_err)?;
            self.wrote_header = true;
        }
        writeln!(self.out, "{}", format_csv_row(row)).map_err(Self::io_err)?;
        self.out.flush().map_err(Self::io_err)
    }
}

/// Where a run currently stands. Guards phase ordering and the
/// write-once recorded log-likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolState {
    phase: Phase,
    recorded_train_mean_ll: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_valid_errors: Option<usize>,
    pub total_updates: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
    Done,
}

impl Default for ProtocolState {
    fn default() -> Self {
        Self::new()
    }
}

impl ProtocolState {
    pub fn new() -> Self {
        ProtocolState {
            phase: Phase::One,
            recorded_train_mean_ll: None,
            best_epoch: None,
            best_valid_errors: None,
            total_updates: 0,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn recorded_train_mean_ll(&self) -> Option<f64> {
        self.recorded_train_mean_ll
    }

    /// Record the phase-1 checkpoint's train log-likelihood. Setting it
    /// twice is a state error: the value is the phase-2 target and must not
    /// drift.
    pub fn record_train_mean_ll(&mut self, value: f64) -> Result<()> {
        if self.recorded_train_mean_ll.is_some() {
            return Err(Error::State(
                "train mean log-likelihood was already recorded".into(),
            ));
        }
        self.recorded_train_mean_ll = Some(value);
        Ok(())
    }
}

/// One epoch of minibatch training. Returns the epoch's mean training
/// log-likelihood (weighted by batch size) and the number of updates made.
fn train_epoch<S: Scalar>(
    net: &mut MaxoutNetwork<S>,
    opt: &OptimizerConfig,
    ds: &Dataset<S>,
    schedule_epoch: usize,
    rngs: &mut TrainRngs,
    phase: u8,
    epoch_in_phase: usize,
) -> Result<(f64, usize)> {
    let mut total_nll = 0.0f64;
    let mut updates = 0usize;
    let mut batch_index = 0usize;
    let order_rng = &mut rngs.shuffle;
    let batches: Vec<(Matrix<S>, Vec<u8>)> = minibatches(ds, opt.batch_size, order_rng).collect();
    for (x, labels) in batches {
        let diagnose = |e: Error| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!(
                    "{context} (phase {phase}, epoch {epoch_in_phase}, batch {batch_index})"
                ),
            },
            other => other,
        };
        let nll = net
            .train_step(&x, &labels, &mut rngs.dropout)
            .map_err(diagnose)?;
        net.sgd_step_all(opt, schedule_epoch).map_err(diagnose)?;
        total_nll += nll * x.rows() as f64;
        updates += 1;
        batch_index += 1;
    }
    Ok((-(total_nll / ds.len() as f64), updates))
}

/// Everything phase 1 produced.
#[derive(Clone, Debug)]
pub struct Phase1Outcome<S> {
    pub best_epoch: usize,
    pub best_valid_errors: usize,
    /// Mean train log-likelihood of the restored best checkpoint,
    /// inference mode, nats per example.
    pub recorded_train_mean_ll: f64,
    pub epochs_run: usize,
    pub updates: usize,
    pub best_snapshot: NetworkSnapshot<S>,
}

/// Train with early stopping on validation errors; restore the best
/// checkpoint into `net` before returning.
pub fn phase1<S: Scalar>(
    net: &mut MaxoutNetwork<S>,
    opt: &OptimizerConfig,
    train: &Dataset<S>,
    valid: &Dataset<S>,
    pcfg: &ProtocolConfig,
    state: &mut ProtocolState,
    rngs: &mut TrainRngs,
    sink: &mut dyn MetricsSink,
) -> Result<Phase1Outcome<S>> {
    if state.phase != Phase::One {
        return Err(Error::State(format!(
            "phase 1 cannot start from {:?}",
            state.phase
        )));
    }
    opt.validate()?;
    pcfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data(
            "phase 1 needs non-empty train and validation sets".into(),
        ));
    }
    let mut stopper = PatienceStopper::new(pcfg.patience);
    let mut best_snapshot = net.snapshot();
    let mut epochs_run = 0usize;
    let mut updates = 0usize;
    for epoch in 0..pcfg.max_epochs_phase1 {
        let t0 = Instant::now();
        let (train_mean_ll, epoch_updates) =
            train_epoch(net, opt, train, epoch, rngs, 1, epoch)?;
        updates += epoch_updates;
        let report = evaluate(net, valid, pcfg.eval_chunk)?;
        let decision = stopper.observe(report.errors);
        if decision == StopDecision::Improved {
            best_snapshot = net.snapshot();
        }
        let (lr, momentum) = opt.schedule(epoch);
        sink.record(&MetricsRow {
            phase: 1,
            epoch,
            train_mean_ll,
            valid_errors: report.errors,
            valid_mean_ll: report.mean_ll,
            lr,
            momentum,
            wall_seconds: if pcfg.log_wall_time {
                t0.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })?;
        epochs_run += 1;
        if decision == StopDecision::Stop {
            break;
        }
    }
    net.restore(&best_snapshot)?;
    let recorded = evaluate(net, train, pcfg.eval_chunk)?.mean_ll;
    state.record_train_mean_ll(recorded)?;
    state.best_epoch = Some(stopper.best_epoch());
    state.best_valid_errors = stopper.best();
    state.total_updates += updates;
    state.phase = Phase::Two;
    Ok(Phase1Outcome {
        best_epoch: stopper.best_epoch(),
        best_valid_errors: stopper.best().expect("at least one epoch ran"),
        recorded_train_mean_ll: recorded,
        epochs_run,
        updates,
        best_snapshot,
    })
}

/// How phase 2 ended.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase2Status {
    /// Validation log-likelihood reached the recorded value at this phase-2
    /// epoch.
    Crossed { epoch: usize },
    /// The epoch cap ran out first; the criterion was never met. The model
    /// at the cap is still returned in `net`.
    CapReached,
}

/// Everything phase 2 produced.
#[derive(Clone, Debug)]
pub struct Phase2Outcome {
    pub status: Phase2Status,
    pub epochs_run: usize,
    pub updates: usize,
    pub final_valid_mean_ll: f64,
}

/// Continue training on the combined train+validation data until the
/// validation mean log-likelihood first reaches the value recorded in
/// phase 1. The optimizer schedule picks up where the phase-1 best epoch
/// left off.
pub fn phase2<S: Scalar>(
    net: &mut MaxoutNetwork<S>,
    opt: &OptimizerConfig,
    full: &Dataset<S>,
    valid: &Dataset<S>,
    pcfg: &ProtocolConfig,
    state: &mut ProtocolState,
    rngs: &mut TrainRngs,
    sink: &mut dyn MetricsSink,
) -> Result<Phase2Outcome> {
    if state.phase != Phase::Two {
        return Err(Error::State(format!(
            "phase 2 cannot start from {:?}; run phase 1 first",
            state.phase
        )));
    }
    let recorded = state
        .recorded_train_mean_ll
        .ok_or_else(|| Error::State("no recorded train log-likelihood".into()))?;
    if full.is_empty() || valid.is_empty() {
        return Err(Error::Data(
            "phase 2 needs non-empty full and validation sets".into(),
        ));
    }
    let schedule_base = state.best_epoch.unwrap_or(0) + 1;
    if pcfg.reset_velocity_at_phase2 {
        net.reset_velocity();
    }
    let mut updates = 0usize;
    let mut epochs_run = 0usize;
    let mut last_valid_ll = f64::NEG_INFINITY;
    let mut status = Phase2Status::CapReached;
    for epoch in 0..pcfg.max_epochs_phase2 {
        let t0 = Instant::now();
        let schedule_epoch = schedule_base + epoch;
        let (train_mean_ll, epoch_updates) =
            train_epoch(net, opt, full, schedule_epoch, rngs, 2, epoch)?;
        updates += epoch_updates;
        let report = evaluate(net, valid, pcfg.eval_chunk)?;
        last_valid_ll = report.mean_ll;
        let (lr, momentum) = opt.schedule(schedule_epoch);
        sink.record(&MetricsRow {
            phase: 2,
            epoch,
            train_mean_ll,
            valid_errors: report.errors,
            valid_mean_ll: report.mean_ll,
            lr,
            momentum,
            wall_seconds: if pcfg.log_wall_time {
                t0.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })?;
        epochs_run += 1;
        if crossing_met(recorded, report.mean_ll, pcfg.strict_crossing) {
            status = Phase2Status::Crossed { epoch };
            break;
        }
    }
    state.total_updates += updates;
    state.phase = Phase::Done;
    Ok(Phase2Outcome {
        status,
        epochs_run,
        updates,
        final_valid_mean_ll: last_valid_ll,
    })
}

/// The datasets a full run needs.
#[derive(Clone, Debug)]
pub struct DataBundle<S> {
    pub train: Dataset<S>,
    pub valid: Dataset<S>,
    /// Train and validation combined; what phase 2 trains on.
    pub full: Dataset<S>,
    pub test: Dataset<S>,
}

/// Outcome of both phases plus the final test evaluation.
#[derive(Clone, Debug)]
pub struct RunOutcome<S> {
    pub phase1: Phase1Outcome<S>,
    pub phase2: Phase2Outcome,
    pub test_report: EvalReport,
    pub state: ProtocolState,
}

/// Run phase 1, phase 2, and a final test-set evaluation.
pub fn run_full_protocol<S: Scalar>(
    net: &mut MaxoutNetwork<S>,
    data: &DataBundle<S>,
    opt: &OptimizerConfig,
    pcfg: &ProtocolConfig,
    rngs: &mut TrainRngs,
    sink: &mut dyn MetricsSink,
) -> Result<RunOutcome<S>> {
    let mut state = ProtocolState::new();
    let p1 = phase1(
        net, opt, &data.train, &data.valid, pcfg, &mut state, rngs, sink,
    )?;
    let p2 = phase2(
        net, opt, &data.full, &data.valid, pcfg, &mut state, rngs, sink,
    )?;
    let test_report = evaluate(net, &data.test, pcfg.eval_chunk)?;
    Ok(RunOutcome {
        phase1: p1,
        phase2: p2,
        test_report,
        state,
    })
}
