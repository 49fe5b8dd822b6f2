//! TOML run configuration: parsing, defaults, validation, and conversion
//! into the library's config types. Every validation message names the
//! offending field so a bad config is fixable from the error alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use maxnet::network::NetworkConfig;
use maxnet::optim::OptimizerConfig;
use maxnet::protocol::ProtocolConfig;
use maxnet::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// IDX image/label files on disk.
    Mnist,
    /// The four XOR corners, cycled to `toy_n` examples.
    Xor,
    /// Two separable Gaussian blobs of `toy_n` examples.
    Blobs,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Training examples for toy sources; validation and test sets get half
    /// each.
    pub toy_n: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Mnist,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            toy_n: 4,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_width: usize,
    pub hidden_widths: Vec<usize>,
    pub pool_size: usize,
    pub output_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            input_width: 784,
            hidden_widths: vec![1200, 1200],
            pool_size: 5,
            output_classes: 10,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutSection {
    pub input_keep: f64,
    pub hidden_keep: f64,
    pub inverted: bool,
}

impl Default for DropoutSection {
    fn default() -> Self {
        DropoutSection {
            input_keep: 0.8,
            hidden_keep: 0.5,
            inverted: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    pub momentum_ramp_epochs: usize,
    /// Per-column weight norm bound; 0 disables the constraint.
    pub max_norm: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        OptimizerSection {
            batch_size: d.batch_size,
            base_lr: d.base_lr,
            lr_decay: d.lr_decay,
            momentum_start: d.momentum_start,
            momentum_end: d.momentum_end,
            momentum_ramp_epochs: d.momentum_ramp_epochs,
            max_norm: d.max_norm.unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub patience: usize,
    pub max_epochs_phase1: usize,
    pub max_epochs_phase2: usize,
    pub strict_crossing: bool,
    pub reset_velocity_at_phase2: bool,
    pub eval_chunk: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let d = ProtocolConfig::default();
        ProtocolSection {
            patience: d.patience,
            max_epochs_phase1: d.max_epochs_phase1,
            max_epochs_phase2: d.max_epochs_phase2,
            strict_crossing: d.strict_crossing,
            reset_velocity_at_phase2: d.reset_velocity_at_phase2,
            eval_chunk: d.eval_chunk,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub input_width: usize,
    pub hidden_widths: Vec<usize>,
    pub pool_size: usize,
    pub output_classes: usize,
    pub batch: usize,
    pub eps: f64,
    pub tie_tolerance: f64,
    /// Pass/fail bound on the max relative error. When absent the bound is
    /// 1e-7 for pool_size 1 and 1e-4 otherwise.
    pub threshold: Option<f64>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            input_width: 8,
            hidden_widths: vec![12, 12],
            pool_size: 3,
            output_classes: 4,
            batch: 4,
            eps: 1e-5,
            tie_tolerance: 1e-3,
            threshold: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for every random stream of the run. Required (here or via
    /// --seed): there is no wall-clock fallback, so nothing is random by
    /// accident.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub precision: Precision,
    /// Record wall-clock seconds in metrics.csv. Turn off to make the file
    /// byte-identical across reruns of the same seed.
    pub log_wall_time: bool,
    pub data: DataSection,
    pub model: ModelSection,
    pub dropout: DropoutSection,
    pub optimizer: OptimizerSection,
    pub protocol: ProtocolSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out_dir: "runs".into(),
            precision: Precision::F32,
            log_wall_time: true,
            data: DataSection::default(),
            model: ModelSection::default(),
            dropout: DropoutSection::default(),
            optimizer: OptimizerSection::default(),
            protocol: ProtocolSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

impl RunConfig {
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            input_width: self.model.input_width,
            hidden_widths: self.model.hidden_widths.clone(),
            pool_size: self.model.pool_size,
            output_classes: self.model.output_classes,
            input_keep: self.dropout.input_keep,
            hidden_keep: self.dropout.hidden_keep,
            inverted_dropout: self.dropout.inverted,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            batch_size: self.optimizer.batch_size,
            base_lr: self.optimizer.base_lr,
            lr_decay: self.optimizer.lr_decay,
            momentum_start: self.optimizer.momentum_start,
            momentum_end: self.optimizer.momentum_end,
            momentum_ramp_epochs: self.optimizer.momentum_ramp_epochs,
            max_norm: if self.optimizer.max_norm > 0.0 {
                Some(self.optimizer.max_norm)
            } else {
                None
            },
        }
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            patience: self.protocol.patience,
            max_epochs_phase1: self.protocol.max_epochs_phase1,
            max_epochs_phase2: self.protocol.max_epochs_phase2,
            strict_crossing: self.protocol.strict_crossing,
            reset_velocity_at_phase2: self.protocol.reset_velocity_at_phase2,
            eval_chunk: self.protocol.eval_chunk,
            log_wall_time: self.log_wall_time,
        }
    }

    pub fn gradcheck_network_config(&self) -> NetworkConfig {
        NetworkConfig {
            input_width: self.gradcheck.input_width,
            hidden_widths: self.gradcheck.hidden_widths.clone(),
            pool_size: self.gradcheck.pool_size,
            output_classes: self.gradcheck.output_classes,
            input_keep: self.dropout.input_keep,
            hidden_keep: self.dropout.hidden_keep,
            inverted_dropout: self.dropout.inverted,
        }
    }

    pub fn gradcheck_threshold(&self) -> f64 {
        self.gradcheck.threshold.unwrap_or(if self.gradcheck.pool_size == 1 {
            1e-7
        } else {
            1e-4
        })
    }

    /// Full validation of the merged config. The `seed` must be set by the
    /// time this runs.
    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(Error::Config(
                "seed is required: set `seed` in the config file or pass --seed".into(),
            ));
        }
        self.network_config()
            .validate()
            .map_err(section("model/dropout"))?;
        self.optimizer_config()
            .validate()
            .map_err(section("optimizer"))?;
        self.protocol_config()
            .validate()
            .map_err(section("protocol"))?;
        match self.data.source {
            DataSource::Mnist => {
                for (name, path) in [
                    ("data.train_images", &self.data.train_images),
                    ("data.train_labels", &self.data.train_labels),
                    ("data.test_images", &self.data.test_images),
                    ("data.test_labels", &self.data.test_labels),
                ] {
                    if path.is_none() {
                        return Err(Error::Config(format!(
                            "{name} is required when data.source = \"mnist\""
                        )));
                    }
                }
            }
            DataSource::Xor | DataSource::Blobs => {
                if self.model.input_width != 2 {
                    return Err(Error::Config(format!(
                        "model.input_width must be 2 for toy data, got {}",
                        self.model.input_width
                    )));
                }
                if self.model.output_classes < 2 {
                    return Err(Error::Config(
                        "model.output_classes must be at least 2 for toy data".into(),
                    ));
                }
                let min_n = if self.data.source == DataSource::Blobs { 2 } else { 1 };
                if self.data.toy_n < min_n {
                    return Err(Error::Config(format!(
                        "data.toy_n must be at least {min_n} for this source, got {}",
                        self.data.toy_n
                    )));
                }
            }
        }
        self.validate_gradcheck()
    }

    /// The subset of validation a `gradcheck` run needs: seed, the
    /// [gradcheck] section, and the dropout keeps it borrows. Data and
    /// optimizer settings are irrelevant there.
    pub fn validate_gradcheck(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(Error::Config(
                "seed is required: set `seed` in the config file or pass --seed".into(),
            ));
        }
        self.gradcheck_network_config()
            .validate()
            .map_err(section("gradcheck"))?;
        if self.gradcheck.batch == 0 {
            return Err(Error::Config("gradcheck.batch must be at least 1".into()));
        }
        if !(self.gradcheck.eps > 0.0) {
            return Err(Error::Config(format!(
                "gradcheck.eps must be positive, got {}",
                self.gradcheck.eps
            )));
        }
        if !(self.gradcheck.tie_tolerance > 0.0) {
            return Err(Error::Config(format!(
                "gradcheck.tie_tolerance must be positive, got {}",
                self.gradcheck.tie_tolerance
            )));
        }
        Ok(())
    }

    /// Serialize the effective config so the run is exactly reproducible
    /// from its own output directory.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("could not serialize config: {e}")))
    }
}

fn section(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(msg) => Error::Config(format!("in [{name}]: {msg}")),
        other => other,
    }
}

/// Read and parse a config file. Unknown or ill-typed fields surface as
/// config errors with the TOML location.
pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| {
        Error::Config(format!("could not parse {}: {e}", path.display()))
    })
}
