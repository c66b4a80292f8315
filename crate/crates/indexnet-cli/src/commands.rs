//! The four subcommands. Each writes its human-readable output to `out`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexnet::gradcheck::{GradCheckConfig, GradCheckReport};
use indexnet::nn_math::{init_tensor, rng_from_seed, InitLaw, LossKind};
use indexnet::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, ModelConfig, RunConfig};
use crate::data::{load_file, load_source, sine_continuation_mse, Splits};
use crate::error::{CliError, CliResult};
use crate::model::Model;
use crate::trainer::{EpochMetrics, Evaluation, Trainer, METRICS_HEADER};

const SYNTHETIC_SALT: u64 = 0x5151_0003;

/// Samples in the synthetic gradient-check batch.
pub const GRADCHECK_BATCH: usize = 4;

/// Longest unroll checked for recurrent nets without batch norm. Over long
/// unrolls the central difference's truncation error alone nears the threshold.
pub const GRADCHECK_STEPS: usize = 4;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub epochs: Option<u64>,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub out_dir: PathBuf,
    pub last: Option<EpochMetrics>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Metrics rows of a previous run up to and including `epoch`.
fn kept_rows(path: &Path, epoch: u64) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(CliError::Data(format!("{} does not start with the metrics header", path.display())));
    }
    Ok(lines
        .take_while(|l| l.split(',').next().and_then(|e| e.parse::<u64>().ok()).is_some_and(|e| e <= epoch))
        .map(str::to_string)
        .collect())
}

pub fn train(opts: &TrainOptions, log: &mut dyn Write) -> CliResult<TrainOutcome> {
    let mut config = RunConfig::load(&opts.config)?;
    if let Some(s) = opts.seed {
        config.seed = s;
    }
    if let Some(e) = opts.epochs {
        config.epochs = e;
    }
    if let Some(d) = &opts.out {
        config.output.dir = Some(d.clone());
    }
    config.validate()?;
    let data = load_source(&config.data.source, &config.model)?;
    let (splits, center) = Splits::prepare(&config, data)?;

    let mut trainer = Trainer::new(config.clone(), center.clone())?;
    if let Some(path) = &opts.resume {
        Checkpoint::load(path)?.restore(&mut trainer)?;
        if trainer.center != center {
            return Err(CliError::Checkpoint("the checkpoint's centering differs from this data".into()));
        }
    }

    let out_dir = config.out_dir();
    fs::create_dir_all(&out_dir).map_err(io(&out_dir))?;
    let metrics_path = out_dir.join(&config.output.metrics);
    let ckpt_path = out_dir.join(&config.output.checkpoint);
    let mut rows = if opts.resume.is_some() && metrics_path.exists() { kept_rows(&metrics_path, trainer.epoch)? } else { Vec::new() };
    let mut metrics = fs::File::create(&metrics_path).map_err(io(&metrics_path))?;
    rows.insert(0, METRICS_HEADER.to_string());
    for r in &rows {
        writeln!(metrics, "{r}")?;
    }

    let _ = writeln!(log, "training {} from epoch {} to {}", config.name, trainer.epoch, config.epochs);
    let every = config.checkpoint_every;
    let report_every = (config.epochs / 20).max(1);
    let mut last = None;
    trainer.train(&splits, config.epochs, |t, m| {
        writeln!(metrics, "{}", m.csv_row())?;
        metrics.flush()?;
        if every > 0 && m.epoch % every == 0 {
            Checkpoint::capture(t).save(&ckpt_path)?;
        }
        if m.epoch % report_every == 0 || m.epoch == config.epochs {
            let _ = writeln!(log, "epoch {:>5}  train loss {:.6}{}", m.epoch, m.train.loss, accuracy_note(m));
        }
        last = Some(*m);
        Ok(())
    })?;
    Checkpoint::capture(&trainer).save(&ckpt_path)?;
    let _ = writeln!(log, "wrote {} and {}", metrics_path.display(), ckpt_path.display());
    Ok(TrainOutcome { trainer, out_dir, last })
}

fn accuracy_note(m: &EpochMetrics) -> String {
    let mut s = String::new();
    if let Some(a) = m.train.accuracy {
        s += &format!("  train acc {a:.4}");
    }
    if let Some(e) = m.eval {
        s += &format!("  eval loss {:.6}", e.loss);
        if let Some(a) = e.accuracy {
            s += &format!("  eval acc {a:.4}");
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOutcome {
    pub samples: usize,
    pub evaluation: Evaluation,
    pub continuation_mse: Option<f64>,
}

/// `data` is a file in the training source's format, or `train` / `eval` for
/// the splits the checkpoint's config describes.
pub fn eval(checkpoint: &Path, data: &str, labels: Option<&Path>, out: &mut dyn Write) -> CliResult<EvalOutcome> {
    let mut trainer = Checkpoint::load(checkpoint)?.into_trainer()?;
    let config = trainer.config.clone();
    let mut set = match data {
        "train" | "eval" => {
            let splits = Splits::split(&config, load_source(&config.data.source, &config.model)?)?;
            if data == "train" {
                splits.train
            } else {
                splits.eval.ok_or_else(|| CliError::Data("the config defines no eval split".into()))?
            }
        }
        path => load_file(&config, Path::new(path), labels)?,
    };
    if let Some(c) = &trainer.center {
        set.inputs = c.apply(&set.inputs).map_err(CliError::data)?;
    }
    let evaluation = trainer.evaluate(&set)?;
    let continuation_mse = match (&config.data.source, &mut trainer.model) {
        (DataSource::Sine { .. }, Model::Recurrent(net)) => Some(sine_continuation_mse(net, &config)?),
        _ => None,
    };
    writeln!(out, "samples {}", set.len())?;
    writeln!(out, "loss {}", evaluation.loss)?;
    if let Some(a) = evaluation.accuracy {
        writeln!(out, "accuracy {a}")?;
    }
    if let Some(c) = continuation_mse {
        writeln!(out, "continuation_mse {c}")?;
    }
    Ok(EvalOutcome { samples: set.len(), evaluation, continuation_mse })
}

/// Uniform draws on `[-1, 1)`.
fn uniform(shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    init_tensor(shape, 3, 3, InitLaw::Uniform, rng)
}

/// Unrolled length of the synthetic batch. Nets without batch norm accept any
/// length and are checked on at most [`GRADCHECK_STEPS`] steps.
fn synthetic_steps(model: &ModelConfig) -> Option<usize> {
    match model {
        ModelConfig::Rnn { steps, batch_norm, .. } | ModelConfig::Lstm { steps, batch_norm, .. } => {
            Some(if *batch_norm { *steps } else { (*steps).min(GRADCHECK_STEPS) })
        }
        _ => None,
    }
}

/// A random batch shaped for `model`: inputs on `[-1, 1)`, one-hot or real targets.
pub fn synthetic_batch(model: &ModelConfig, t_mb: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = rng_from_seed(seed ^ SYNTHETIC_SALT);
    let steps = synthetic_steps(model);
    let mut shape = vec![t_mb];
    shape.extend(model.sample_shape());
    if let Some(s) = steps {
        shape[2] = s;
    }
    let x = uniform(&shape, &mut rng);
    let f = model.outputs();
    let mut yshape = vec![t_mb, f];
    yshape.extend(steps);
    let group = match model.loss() {
        LossKind::Mse => return (x, uniform(&yshape, &mut rng)),
        LossKind::CrossEntropy => f,
        LossKind::BinnedCrossEntropy { bins } => bins,
    };
    let inner = steps.unwrap_or(1);
    let draws = uniform(&[t_mb, f / group, inner], &mut rng);
    let mut y = Tensor::zeros(&yshape);
    for t in 0..t_mb {
        for g in 0..f / group {
            for s in 0..inner {
                let u = (draws[[t, g, s]] + 1.0) / 2.0;
                let class = ((u * group as f64) as usize).min(group - 1);
                y.data_mut()[(t * f + g * group + class) * inner + s] = 1.0;
            }
        }
    }
    (x, y)
}

/// Gradient check of the configured network on a synthetic batch.
pub fn gradcheck(config_path: &Path, threshold: Option<f64>, out: &mut dyn Write) -> CliResult<GradCheckReport> {
    let config = RunConfig::load(config_path)?;
    let report = gradcheck_config(&config, threshold)?;
    writeln!(out, "{}: {} parameters", config.name, Model::build(&config.model, config.seed)?.net().param_count())?;
    write!(out, "{}", report.to_text())?;
    if let Some(e) = report.worst() {
        writeln!(out, "worst {}: analytic {:e} numeric {:e} rel {:.3e}", e.path, e.analytic, e.numeric, e.rel_error)?;
    }
    if !report.pass {
        let worst = report.worst().map(|e| format!("{} rel {:.3e}", e.path, e.rel_error)).unwrap_or_default();
        return Err(CliError::GradCheck(format!("{} entries above {:e}; worst {worst}", report.failures().count(), report.threshold)));
    }
    Ok(report)
}

pub fn gradcheck_config(config: &RunConfig, threshold: Option<f64>) -> CliResult<GradCheckReport> {
    let mut gc = GradCheckConfig::default();
    if let Some(t) = threshold {
        if !(t > 0.0) {
            return Err(CliError::Config(format!("threshold {t} must be positive")));
        }
        gc.threshold = t;
    }
    let mut model = Model::build(&config.model, config.seed)?;
    let (x, y) = synthetic_batch(&config.model, GRADCHECK_BATCH, config.seed);
    model.gradcheck(&x, &y, config.seed, &gc)
}

pub fn inspect(checkpoint: &Path, out: &mut dyn Write) -> CliResult<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let trainer = ckpt.into_trainer()?;
    writeln!(out, "run {}", ckpt.config.name)?;
    writeln!(out, "model digest {}", ckpt.digest)?;
    writeln!(out, "epoch {}  step {}  learning rate {}", ckpt.epoch, ckpt.step, ckpt.learning_rate)?;
    writeln!(out, "optimizer {:?}", ckpt.config.optimizer.kind)?;
    let mut total = 0;
    for (name, t) in trainer.model.params() {
        writeln!(out, "  {name:<28} {:<16} {}", format!("{:?}", t.shape()), t.len())?;
        total += t.len();
    }
    writeln!(out, "parameters {total}")?;
    for (i, bn) in trainer.model.batch_norms().iter().enumerate() {
        writeln!(out, "  bn{i} {:?} features {} running updates {}", bn.mode, bn.running_mean.len(), bn.epoch)?;
    }
    Ok(())
}
