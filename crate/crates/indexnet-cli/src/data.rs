//! Turns a [`DataSource`] into model-shaped tensors and splits.

use std::f64::consts::TAU;
use std::path::Path;

use indexnet::data::{encode_targets, read_delimited, read_idx, read_idx_labels, CenterStats, Dataset, TargetEncoding};
use indexnet::rnn::RecurrentNetwork;
use indexnet::Tensor;

use crate::config::{DataSource, ModelConfig, RunConfig};
use crate::error::{CliError, CliResult};

/// Fractional part of the golden ratio; spreads sine phases evenly in any prefix.
const PHASE_STEP: f64 = 0.618_033_988_749_894_8;

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Option<Dataset>,
}

/// Sorted distinct characters of `text`.
pub fn alphabet(text: &str) -> Vec<char> {
    let mut chars: Vec<char> = text.chars().collect();
    chars.sort_unstable();
    chars.dedup();
    chars
}

fn sine_phase(sequence: usize) -> f64 {
    TAU * (sequence as f64 * PHASE_STEP).fract()
}

fn sine_value(tau: usize, period: f64, phase: f64) -> f64 {
    (TAU * tau as f64 / period + phase).sin()
}

pub fn sine_dataset(sequences: usize, steps: usize, period: f64) -> CliResult<Dataset> {
    let mut x = Tensor::zeros(&[sequences, 1, steps]);
    let mut y = Tensor::zeros(&[sequences, 1, steps]);
    for s in 0..sequences {
        let phase = sine_phase(s);
        for tau in 0..steps {
            x[[s, 0, tau]] = sine_value(tau, period, phase);
            y[[s, 0, tau]] = sine_value(tau + 1, period, phase);
        }
    }
    Dataset::new(x, y).map_err(CliError::data)
}

pub fn char_loop_dataset(text: &str, sequences: usize, steps: usize) -> CliResult<Dataset> {
    let chars: Vec<char> = text.chars().collect();
    let alpha = alphabet(text);
    let code = |i: usize| alpha.binary_search(&chars[i % chars.len()]).expect("char in alphabet");
    let a = alpha.len();
    let mut x = Tensor::zeros(&[sequences, a, steps]);
    let mut y = Tensor::zeros(&[sequences, a, steps]);
    for s in 0..sequences {
        let start = s * 7919 % chars.len();
        for tau in 0..steps {
            x[[s, code(start + tau), tau]] = 1.0;
            y[[s, code(start + tau + 1), tau]] = 1.0;
        }
    }
    Dataset::new(x, y).map_err(CliError::data)
}

/// Reshapes `[count, width, height]` images for the model's input.
fn images_for(images: Tensor, model: &ModelConfig) -> CliResult<Tensor> {
    let count = images.dim(0);
    let mut shape = vec![count];
    shape.extend(model.sample_shape());
    if images.len() != shape.iter().product::<usize>() {
        return Err(CliError::Data(format!("images {:?} do not fit model input {:?}", images.shape(), &shape[1..])));
    }
    images.reshape(&shape).map_err(CliError::data)
}

fn idx_dataset(images: &Path, labels: &Path, classes: usize, model: &ModelConfig) -> CliResult<Dataset> {
    let x = images_for(read_idx(images).map_err(CliError::data)?, model)?;
    let raw: Vec<f64> = read_idx_labels(labels).map_err(CliError::data)?.into_iter().map(|l| l as f64).collect();
    let y = encode_targets(&raw, TargetEncoding::OneHot { classes }).map_err(CliError::data)?;
    Dataset::new(x, y).map_err(CliError::data)
}

fn delimited_dataset(path: &Path, target_columns: usize, targets: Option<TargetEncoding>) -> CliResult<Dataset> {
    let raw = read_delimited(path, target_columns).map_err(CliError::data)?;
    match targets {
        None => Ok(raw),
        Some(enc) => {
            let y = encode_targets(raw.targets.data(), enc).map_err(CliError::data)?;
            Dataset::new(raw.inputs, y).map_err(CliError::data)
        }
    }
}

/// Every sample the source describes, before splitting.
pub fn load_source(source: &DataSource, model: &ModelConfig) -> CliResult<Dataset> {
    let data = match source {
        DataSource::Delimited { path, target_columns, targets } => delimited_dataset(path, *target_columns, *targets)?,
        DataSource::Idx { images, labels, classes } => idx_dataset(images, labels, *classes, model)?,
        DataSource::Sine { sequences, steps, period, .. } => sine_dataset(*sequences, *steps, *period)?,
        DataSource::CharLoop { text, sequences, steps } => char_loop_dataset(text, *sequences, *steps)?,
    };
    check_fits(&data, model)?;
    Ok(data)
}

/// Reads a file in the format of the config's source, for evaluation.
pub fn load_file(config: &RunConfig, path: &Path, labels: Option<&Path>) -> CliResult<Dataset> {
    let data = match &config.data.source {
        DataSource::Delimited { target_columns, targets, .. } => delimited_dataset(path, *target_columns, *targets)?,
        DataSource::Idx { classes, .. } => {
            let labels = labels.ok_or_else(|| CliError::Data("IDX images need --labels".into()))?;
            idx_dataset(path, labels, *classes, &config.model)?
        }
        DataSource::Sine { .. } | DataSource::CharLoop { .. } => {
            return Err(CliError::Data("generated sources are evaluated with --data train or --data eval".into()))
        }
    };
    check_fits(&data, &config.model)?;
    Ok(data)
}

fn check_fits(data: &Dataset, model: &ModelConfig) -> CliResult<()> {
    let sample = &data.inputs.shape()[1..];
    let expected = model.sample_shape();
    let fits = match model {
        ModelConfig::Rnn { batch_norm: false, .. } | ModelConfig::Lstm { batch_norm: false, .. } => sample.first() == expected.first(),
        _ => sample == &expected[..],
    };
    if !fits {
        return Err(CliError::Data(format!("samples of shape {sample:?} do not fit model input {expected:?}")));
    }
    let outputs = data.targets.shape()[1];
    if outputs != model.outputs() {
        return Err(CliError::Data(format!("targets carry {outputs} values per sample, the model emits {}", model.outputs())));
    }
    if data.is_empty() {
        return Err(CliError::Data("the data source holds no samples".into()));
    }
    Ok(())
}

impl Splits {
    /// Splits off the evaluation tail and caps the training head.
    pub fn split(config: &RunConfig, data: Dataset) -> CliResult<Splits> {
        let n = data.len();
        let eval_n = config.data.eval_samples;
        if eval_n >= n {
            return Err(CliError::Data(format!("eval_samples = {eval_n} leaves no training data out of {n}")));
        }
        let (mut train, eval) = data.split(n - eval_n).map_err(CliError::data)?;
        if let Some(cap) = config.data.train_samples {
            if cap < train.len() {
                train = train.split(cap).map_err(CliError::data)?.0;
            }
        }
        Ok(Splits { train, eval: (eval_n > 0).then_some(eval) })
    }

    /// Centering statistics of the training split; none for regression.
    pub fn fit_center(&self, config: &RunConfig) -> CliResult<Option<CenterStats>> {
        match config.data.center {
            Some(mode) if config.model.loss().is_classification() => CenterStats::fit(&self.train.inputs, mode)
                .map(Some)
                .map_err(|e| CliError::Config(format!("centering: {e}"))),
            _ => Ok(None),
        }
    }

    /// Split, then center both parts with the training statistics.
    pub fn prepare(config: &RunConfig, data: Dataset) -> CliResult<(Splits, Option<CenterStats>)> {
        let mut splits = Splits::split(config, data)?;
        let center = splits.fit_center(config)?;
        if let Some(c) = &center {
            splits.apply_center(c)?;
        }
        Ok((splits, center))
    }

    pub fn apply_center(&mut self, center: &CenterStats) -> CliResult<()> {
        self.train.inputs = center.apply(&self.train.inputs).map_err(CliError::data)?;
        if let Some(e) = &mut self.eval {
            e.inputs = center.apply(&e.inputs).map_err(CliError::data)?;
        }
        Ok(())
    }
}

/// Sample indices of the evaluation split, or of the training split when there is none.
pub fn scored_indices(config: &RunConfig, total: usize) -> Vec<usize> {
    let eval_n = config.data.eval_samples;
    if eval_n > 0 {
        (total - eval_n..total).collect()
    } else {
        (0..config.data.train_samples.unwrap_or(total).min(total)).collect()
    }
}

/// Mean squared error of a free-running sine continuation.
///
/// Each scored sequence is read teacher-forced for its `steps` values; the net
/// then feeds back its own outputs, and its next `continuation` predictions are
/// compared with the true curve.
pub fn sine_continuation_mse(net: &mut RecurrentNetwork, config: &RunConfig) -> CliResult<f64> {
    let DataSource::Sine { sequences, steps, period, continuation } = config.data.source else {
        return Err(CliError::Config("continuation scoring needs a sine source".into()));
    };
    let idx = scored_indices(config, sequences);
    let prefix = sine_dataset(sequences, steps, period)?.inputs.select_outer(&idx);
    let out = net.generate(&prefix, continuation - 1)?;
    let mut sum = 0.0;
    for (row, &s) in idx.iter().enumerate() {
        for j in 0..continuation {
            let truth = sine_value(steps + j, period, sine_phase(s));
            let d = out[[row, 0, steps - 1 + j]] - truth;
            sum += d * d;
        }
    }
    Ok(sum / (idx.len() * continuation) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_targets_are_the_next_inputs() {
        let d = sine_dataset(5, 6, 8.0).unwrap();
        for s in 0..5 {
            for tau in 0..5 {
                assert_eq!(d.targets[[s, 0, tau]], d.inputs[[s, 0, tau + 1]]);
            }
        }
    }

    #[test]
    fn char_loop_is_one_hot_and_shifted() {
        let d = char_loop_dataset("abca", 4, 5).unwrap();
        assert_eq!(d.inputs.shape(), &[4, 3, 5]);
        for s in 0..4 {
            for tau in 0..5 {
                let col: f64 = (0..3).map(|c| d.inputs[[s, c, tau]]).sum();
                assert_eq!(col, 1.0);
                if tau < 4 {
                    for c in 0..3 {
                        assert_eq!(d.targets[[s, c, tau]], d.inputs[[s, c, tau + 1]]);
                    }
                }
            }
        }
    }

    #[test]
    fn alphabet_is_sorted_and_distinct() {
        assert_eq!(alphabet("hello"), vec!['e', 'h', 'l', 'o']);
    }
}
