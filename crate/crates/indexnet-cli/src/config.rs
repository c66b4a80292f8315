//! The run configuration, read from TOML.
//!
//! Paths inside a config file are relative to the file's directory. Loading
//! resolves them, so a parsed config no longer depends on the working directory.

use std::path::{Path, PathBuf};

use indexnet::cnn::{CnnLayerSpec, ConvPath, PoolLayer};
use indexnet::data::{CenterMode, TargetEncoding};
use indexnet::fnn::Skip;
use indexnet::nn_math::{ActivationKind, InitLaw, LossKind};
use indexnet::optim::{OptimizerConfig, RegularizerConfig};
use indexnet::rnn::LstmMode;
use indexnet::tensor::ConvGeometry;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub epochs: u64,
    pub batch_size: usize,
    #[serde(default = "yes")]
    pub shuffle: bool,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseConfig {
    pub width: usize,
    pub activation: ActivationKind,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub dropout: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Fnn {
        input: usize,
        hidden: Vec<DenseConfig>,
        outputs: usize,
        loss: LossKind,
        #[serde(default)]
        init: InitLaw,
        #[serde(default)]
        input_dropout: Option<f64>,
        #[serde(default)]
        skips: Vec<Skip>,
    },
    Cnn {
        /// `[F, N, T]`: channels, width, height.
        input_shape: [usize; 3],
        layers: Vec<CnnLayerSpec>,
        outputs: usize,
        loss: LossKind,
        #[serde(default)]
        init: InitLaw,
        #[serde(default)]
        conv_path: ConvPath,
    },
    Rnn {
        input: usize,
        hidden: Vec<usize>,
        outputs: usize,
        /// Unrolled length; a batch-normalized net keeps one BN per step.
        steps: usize,
        loss: LossKind,
        #[serde(default)]
        init: InitLaw,
        #[serde(default)]
        batch_norm: bool,
    },
    Lstm {
        input: usize,
        hidden: Vec<usize>,
        outputs: usize,
        steps: usize,
        loss: LossKind,
        #[serde(default)]
        init: InitLaw,
        #[serde(default)]
        batch_norm: bool,
        #[serde(default = "yes")]
        diagonal_init: bool,
        #[serde(default)]
        mode: LstmMode,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// The last `eval_samples` samples form the evaluation split.
    #[serde(default)]
    pub eval_samples: usize,
    /// Caps the training split to its first `train_samples` samples.
    #[serde(default)]
    pub train_samples: Option<usize>,
    /// Ignored for regression (MSE) models.
    #[serde(default)]
    pub center: Option<CenterMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// One sample per line, comma-separated, the last `target_columns` columns
    /// being targets. With `targets` set, the single target column holds a
    /// class index or a value to bin.
    Delimited {
        path: PathBuf,
        #[serde(default = "one")]
        target_columns: usize,
        #[serde(default)]
        targets: Option<TargetEncoding>,
    },
    /// IDX images (`[count, width, height]`, optionally gzipped) with IDX labels.
    Idx { images: PathBuf, labels: PathBuf, classes: usize },
    /// `sin(2πτ/period + φ)` windows; the target is the next value.
    Sine {
        sequences: usize,
        steps: usize,
        period: f64,
        /// Free-running steps scored after the teacher-forced prefix.
        #[serde(default = "continuation")]
        continuation: usize,
    },
    /// Windows over an endlessly repeated text; the target is the next character.
    CharLoop { text: String, sequences: usize, steps: usize },
}

fn one() -> usize {
    1
}

fn continuation() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Defaults to `runs/<name>` under the working directory.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "metrics_file")]
    pub metrics: String,
    #[serde(default = "checkpoint_file")]
    pub checkpoint: String,
}

fn metrics_file() -> String {
    "metrics.csv".into()
}

fn checkpoint_file() -> String {
    "checkpoint.ckpt".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: None, metrics: metrics_file(), checkpoint: checkpoint_file() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data.source {
            DataSource::Delimited { path, .. } => fix(path),
            DataSource::Idx { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            DataSource::Sine { .. } | DataSource::CharLoop { .. } => {}
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn out_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    /// Everything checked here is checked before any tensor is allocated.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.model.uses_batch_norm() && self.batch_size < 2 {
            return bad("batch normalization needs batch_size >= 2".into());
        }
        self.optimizer.validate().map_err(CliError::config)?;
        self.regularizer.validate().map_err(CliError::config)?;
        self.model.validate()?;
        self.data.validate(&self.model)
    }
}

impl ModelConfig {
    pub fn loss(&self) -> LossKind {
        match self {
            ModelConfig::Fnn { loss, .. }
            | ModelConfig::Cnn { loss, .. }
            | ModelConfig::Rnn { loss, .. }
            | ModelConfig::Lstm { loss, .. } => *loss,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            ModelConfig::Fnn { outputs, .. }
            | ModelConfig::Cnn { outputs, .. }
            | ModelConfig::Rnn { outputs, .. }
            | ModelConfig::Lstm { outputs, .. } => *outputs,
        }
    }

    /// Shape of one input sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            ModelConfig::Fnn { input, .. } => vec![*input],
            ModelConfig::Cnn { input_shape, .. } => input_shape.to_vec(),
            ModelConfig::Rnn { input, steps, .. } | ModelConfig::Lstm { input, steps, .. } => vec![*input, *steps],
        }
    }

    pub fn uses_batch_norm(&self) -> bool {
        match self {
            ModelConfig::Fnn { hidden, .. } => hidden.iter().any(|h| h.batch_norm),
            ModelConfig::Cnn { layers, .. } => layers.iter().any(|l| match l {
                CnnLayerSpec::Conv { batch_norm, .. }
                | CnnLayerSpec::Residual { batch_norm, .. }
                | CnnLayerSpec::TowardsFc { batch_norm, .. }
                | CnnLayerSpec::Fc { batch_norm, .. } => *batch_norm,
                CnnLayerSpec::Pool { .. } => false,
            }),
            ModelConfig::Rnn { batch_norm, .. } | ModelConfig::Lstm { batch_norm, .. } => *batch_norm,
        }
    }

    /// Hex SHA-256 of the canonical TOML of this section; checkpoints carry it.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("model config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let loss = self.loss();
        loss.validate().map_err(CliError::config)?;
        if self.outputs() == 0 {
            return bad("outputs must be positive".into());
        }
        if let LossKind::BinnedCrossEntropy { bins } = loss {
            if self.outputs() % bins != 0 {
                return bad(format!("{} outputs do not split into groups of {bins} bins", self.outputs()));
            }
        }
        match self {
            ModelConfig::Fnn { input, hidden, input_dropout, .. } => {
                if *input == 0 || hidden.iter().any(|h| h.width == 0) {
                    return bad("layer widths must be positive".into());
                }
                for h in hidden {
                    h.activation.validate().map_err(CliError::config)?;
                }
                let drops = hidden.iter().filter_map(|h| h.dropout).chain(*input_dropout);
                for p in drops {
                    if !(0.0..1.0).contains(&p) {
                        return bad(format!("drop probability {p} outside [0, 1)"));
                    }
                }
                Ok(())
            }
            ModelConfig::Cnn { input_shape, layers, .. } => validate_cnn(*input_shape, layers),
            ModelConfig::Rnn { input, hidden, steps, .. } | ModelConfig::Lstm { input, hidden, steps, .. } => {
                if *input == 0 || *steps == 0 || hidden.is_empty() || hidden.contains(&0) {
                    return bad("recurrent input, steps and hidden widths must be positive".into());
                }
                Ok(())
            }
        }
    }
}

/// Walks the stack's shapes without building it.
fn validate_cnn(input_shape: [usize; 3], layers: &[CnnLayerSpec]) -> CliResult<()> {
    let bad = |m: String| Err(CliError::Config(m));
    if input_shape.contains(&0) {
        return bad(format!("input shape {input_shape:?} has an empty axis"));
    }
    let mut shape = input_shape;
    let mut flat = false;
    let mut after_pool = false;
    for (i, spec) in layers.iter().enumerate() {
        let spatial = !matches!(spec, CnnLayerSpec::Fc { .. } | CnnLayerSpec::TowardsFc { .. });
        if flat && (spatial || matches!(spec, CnnLayerSpec::TowardsFc { .. })) {
            return bad(format!("layer {i}: only fc layers may follow the towards-fc layer"));
        }
        match *spec {
            CnnLayerSpec::Conv { features, receptive_field, stride, padding, activation, .. } => {
                activation.validate().map_err(CliError::config)?;
                if features == 0 {
                    return bad(format!("layer {i}: conv needs at least one feature map"));
                }
                if after_pool && stride != 1 {
                    return bad(format!("layer {i}: a conv reading a pool must have stride 1, got {stride}"));
                }
                let g = ConvGeometry::new(shape[1], shape[2], receptive_field, stride, padding)
                    .map_err(|e| CliError::Config(format!("layer {i}: {e}")))?;
                shape = [features, g.out_width, g.out_height];
            }
            CnnLayerSpec::Pool { receptive_field, stride, pool } => {
                let g = PoolLayer::new(receptive_field, stride, pool)
                    .geometry(shape[1], shape[2])
                    .map_err(|e| CliError::Config(format!("layer {i}: {e}")))?;
                shape = [shape[0], g.out_width, g.out_height];
            }
            CnnLayerSpec::Residual { bottleneck, activation, .. } => {
                activation.validate().map_err(CliError::config)?;
                if bottleneck == 0 {
                    return bad(format!("layer {i}: residual bottleneck must be positive"));
                }
                ConvGeometry::same(shape[1], shape[2], 3).map_err(|e| CliError::Config(format!("layer {i}: {e}")))?;
            }
            CnnLayerSpec::TowardsFc { features, activation, .. } | CnnLayerSpec::Fc { features, activation, .. } => {
                activation.validate().map_err(CliError::config)?;
                if features == 0 {
                    return bad(format!("layer {i}: fc width must be positive"));
                }
                if matches!(spec, CnnLayerSpec::Fc { .. }) && !flat {
                    return bad(format!("layer {i}: fc layer before the towards-fc layer"));
                }
                flat = true;
            }
        }
        after_pool = matches!(spec, CnnLayerSpec::Pool { .. });
    }
    if !flat {
        return bad("a convolutional stack needs a towards-fc layer".into());
    }
    Ok(())
}

impl DataConfig {
    fn validate(&self, model: &ModelConfig) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let classes = model.loss().is_classification();
        match &self.source {
            DataSource::Delimited { target_columns, targets, .. } => {
                if *target_columns == 0 {
                    return bad("delimited data needs at least one target column".into());
                }
                if targets.is_some() && *target_columns != 1 {
                    return bad("encoded targets read a single target column".into());
                }
                if !matches!(model, ModelConfig::Fnn { .. }) {
                    return bad("delimited data feeds feedforward models".into());
                }
            }
            DataSource::Idx { classes: c, .. } => {
                if !matches!(model, ModelConfig::Cnn { .. } | ModelConfig::Fnn { .. }) {
                    return bad("IDX images feed feedforward or convolutional models".into());
                }
                if *c != model.outputs() || !classes {
                    return bad(format!("IDX labels need a classification model with {c} outputs"));
                }
            }
            DataSource::Sine { sequences, steps, period, .. } => {
                if *sequences == 0 || *steps == 0 || !(*period > 0.0) {
                    return bad("sine data needs positive sequences, steps and period".into());
                }
                self.check_sequences(model, 1, *steps)?;
            }
            DataSource::CharLoop { text, sequences, steps } => {
                if text.is_empty() || *sequences == 0 || *steps == 0 {
                    return bad("char-loop data needs text, sequences and steps".into());
                }
                let alphabet = crate::data::alphabet(text).len();
                self.check_sequences(model, alphabet, *steps)?;
                if !classes || model.outputs() != alphabet {
                    return bad(format!("char-loop data needs a classification model with {alphabet} outputs"));
                }
            }
        }
        Ok(())
    }

    fn check_sequences(&self, model: &ModelConfig, width: usize, data_steps: usize) -> CliResult<()> {
        match model {
            ModelConfig::Rnn { input, steps, batch_norm, .. } | ModelConfig::Lstm { input, steps, batch_norm, .. } => {
                if *input != width {
                    return Err(CliError::Config(format!("model reads {input} features, the sequences carry {width}")));
                }
                if *batch_norm && data_steps != *steps {
                    return Err(CliError::Config(format!(
                        "a batch-normalized recurrent net unrolls exactly {steps} steps, the data has {data_steps}"
                    )));
                }
                Ok(())
            }
            _ => Err(CliError::Config("sequence data feeds recurrent models".into())),
        }
    }
}
