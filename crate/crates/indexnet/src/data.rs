//! Dataset ingestion, input centering, target encoding and mini-batch sampling.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn_math::rng_from_seed;
use crate::tensor::Tensor;

const IDX_UBYTE: u8 = 0x08;

/// Reads a file, inflating it when it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format { offset: 0, message: format!("{}: bad gzip stream: {e}", path.display()) })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Header shape and unsigned-byte payload of an IDX buffer.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::Format { offset: bytes.len(), message: format!("IDX header needs 4 bytes, found {}", bytes.len()) });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format { offset: 0, message: format!("bad IDX magic {:02x} {:02x}", bytes[0], bytes[1]) });
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::Format { offset: 2, message: format!("IDX type 0x{:02x} unsupported, only unsigned bytes (0x08)", bytes[2]) });
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("IDX header for {rank} dimensions needs {header} bytes, found {}", bytes.len()),
        });
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let expected: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Format {
            offset: header + payload.len().min(expected),
            message: format!("IDX payload for shape {shape:?} needs {expected} bytes, found {}", payload.len()),
        });
    }
    Ok((shape, payload))
}

/// IDX unsigned-byte tensor scaled to `[0, 1]` by `/255`.
pub fn read_idx(path: &Path) -> Result<Tensor> {
    let bytes = read_maybe_gz(path)?;
    let (shape, payload) = parse_idx(&bytes)?;
    Tensor::from_vec(&shape, payload.iter().map(|&b| f64::from(b) / 255.0).collect())
}

/// IDX unsigned-byte values as class labels.
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_maybe_gz(path)?;
    let (shape, payload) = parse_idx(&bytes)?;
    if shape.len() != 1 {
        return dim_err(format!("label file must be one-dimensional, got {shape:?}"));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn encode_idx(shape: &[usize], payload: &[u8]) -> Result<Vec<u8>> {
    if shape.iter().product::<usize>() != payload.len() || shape.len() > 255 {
        return dim_err(format!("{} bytes for IDX shape {shape:?}", payload.len()));
    }
    let mut out = vec![0, 0, IDX_UBYTE, shape.len() as u8];
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Dimension(format!("IDX dimension {d} exceeds 32 bits")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    Ok(out)
}

/// Writes an IDX file, gzipped when the path ends in `.gz`.
pub fn write_idx(path: &Path, shape: &[usize], payload: &[u8]) -> Result<()> {
    let bytes = encode_idx(shape, payload)?;
    let out = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Comma-separated numbers, one sample per line, the last `target_columns`
/// columns being targets. Blank lines and `#` comments are skipped, as is a
/// first line that does not parse (a header).
pub fn read_delimited(path: &Path, target_columns: usize) -> Result<Dataset> {
    let bytes = read_maybe_gz(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format { offset: e.utf8_error().valid_up_to(), message: "not UTF-8 text".into() })?;
    parse_delimited(&text, target_columns)
}

pub fn parse_delimited(text: &str, target_columns: usize) -> Result<Dataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut offset = 0usize;
    for (n, line) in text.lines().enumerate() {
        let start = offset;
        offset += line.len() + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = body.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => {
                if let Some(first) = rows.first() {
                    if first.len() != r.len() {
                        return Err(Error::Format { offset: start, message: format!("line {}: {} columns, expected {}", n + 1, r.len(), first.len()) });
                    }
                }
                rows.push(r);
            }
            Err(_) if rows.is_empty() && n == 0 => continue,
            Err(e) => return Err(Error::Format { offset: start, message: format!("line {}: {e}", n + 1) }),
        }
    }
    let Some(first) = rows.first() else {
        return Err(Error::Format { offset: 0, message: "no samples".into() });
    };
    let width = first.len();
    if target_columns >= width {
        return Err(Error::Config(format!("{target_columns} target columns leave no inputs in {width} columns")));
    }
    let f = width - target_columns;
    let inputs: Vec<f64> = rows.iter().flat_map(|r| r[..f].iter().copied()).collect();
    let targets: Vec<f64> = rows.iter().flat_map(|r| r[f..].iter().copied()).collect();
    Dataset::new(Tensor::from_vec(&[rows.len(), f], inputs)?, Tensor::from_vec(&[rows.len(), target_columns], targets)?)
}

/// Samples along the leading axis of both tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rank() == 0 || targets.rank() == 0 || inputs.dim(0) != targets.dim(0) {
            return dim_err(format!("inputs {:?} and targets {:?} disagree on the sample count", inputs.shape(), targets.shape()));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        (self.inputs.select_outer(indices), self.targets.select_outer(indices))
    }

    /// The first `n` samples and the rest.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return dim_err(format!("split at {n} of {} samples", self.len()));
        }
        let (a, b): (Vec<usize>, Vec<usize>) = ((0..n).collect(), (n..self.len()).collect());
        let (xa, ya) = self.batch(&a);
        let (xb, yb) = self.batch(&b);
        Ok((Dataset { inputs: xa, targets: ya }, Dataset { inputs: xb, targets: yb }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// `μ_f` of `[T, F]` data.
    PerFeature,
    /// `μ_{fjk}` of image data: one mean per channel and position.
    PerPixel,
    /// `μ_f` of image or sequence data: averaged over every trailing position too.
    PerChannel,
}

/// Means fitted on a training split, applied unchanged to any split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterStats {
    pub mode: CenterMode,
    /// Shape of one sample.
    pub sample_shape: Vec<usize>,
    /// One mean per sample coordinate (per-feature, per-pixel) or per channel.
    pub mean: Vec<f64>,
}

impl CenterStats {
    pub fn fit(train: &Tensor, mode: CenterMode) -> Result<Self> {
        if train.rank() < 2 || train.dim(0) == 0 {
            return Err(Error::Dimension(format!("cannot center data of shape {:?}", train.shape())));
        }
        let sample_shape = train.shape()[1..].to_vec();
        match mode {
            CenterMode::PerFeature if train.rank() != 2 => return dim_err("per-feature centering needs [T, F] data"),
            CenterMode::PerPixel if train.rank() != 4 => return dim_err("per-pixel centering needs [T, F, N, T] data"),
            CenterMode::PerChannel if train.rank() < 3 => return dim_err("per-channel centering needs maps or sequences"),
            _ => {}
        }
        let n = train.dim(0) as f64;
        let per_sample: usize = sample_shape.iter().product();
        let mut sums = vec![0.0; per_sample];
        for t in 0..train.dim(0) {
            for (s, v) in sums.iter_mut().zip(train.outer(t)) {
                *s += v;
            }
        }
        let mean = match mode {
            CenterMode::PerFeature | CenterMode::PerPixel => sums.into_iter().map(|s| s / n).collect(),
            CenterMode::PerChannel => {
                let inner = per_sample / sample_shape[0];
                sums.chunks(inner).map(|c| c.iter().sum::<f64>() / (n * inner as f64)).collect()
            }
        };
        Ok(CenterStats { mode, sample_shape, mean })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() == 0 || x.shape()[1..] != self.sample_shape[..] {
            return dim_err(format!("centering stats for {:?} applied to {:?}", self.sample_shape, x.shape()));
        }
        let per_sample: usize = self.sample_shape.iter().product();
        let inner = per_sample / self.sample_shape[0];
        let mut out = x.clone();
        for t in 0..x.dim(0) {
            for (i, v) in out.outer_mut(t).iter_mut().enumerate() {
                *v -= match self.mode {
                    CenterMode::PerChannel => self.mean[i / inner],
                    _ => self.mean[i],
                };
            }
        }
        Ok(out)
    }
}

/// Fits on `train` and centers it.
pub fn center(train: &Tensor, mode: CenterMode) -> Result<(Tensor, CenterStats)> {
    let stats = CenterStats::fit(train, mode)?;
    Ok((stats.apply(train)?, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetEncoding {
    OneHot { classes: usize },
    /// `floor(C (v - lo) / (hi - lo))`, clamped to `[0, C-1]`.
    Bins { bins: usize, lo: f64, hi: f64 },
}

pub fn bin_index(v: f64, bins: usize, lo: f64, hi: f64) -> usize {
    let raw = (bins as f64 * (v - lo) / (hi - lo)).floor();
    if raw.is_nan() || raw < 0.0 {
        0
    } else {
        (raw as usize).min(bins - 1)
    }
}

/// Rows of one-hot vectors for class indices or binned values.
pub fn encode_targets(raw: &[f64], encoding: TargetEncoding) -> Result<Tensor> {
    let (width, index): (usize, Box<dyn Fn(f64) -> Result<usize>>) = match encoding {
        TargetEncoding::OneHot { classes } => (
            classes,
            Box::new(move |v: f64| {
                if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
                    Err(Error::Dimension(format!("class index {v} outside 0..{classes}")))
                } else {
                    Ok(v as usize)
                }
            }),
        ),
        TargetEncoding::Bins { bins, lo, hi } => {
            if bins == 0 || hi <= lo {
                return Err(Error::Config(format!("invalid binning {bins} over [{lo}, {hi}]")));
            }
            (bins, Box::new(move |v: f64| Ok(bin_index(v, bins, lo, hi))))
        }
    };
    let mut out = Tensor::zeros(&[raw.len(), width]);
    for (t, &v) in raw.iter().enumerate() {
        out[[t, index(v)?]] = 1.0;
    }
    Ok(out)
}

/// Epoch-wise permutations derived from `(seed, epoch)`, so the sampler's
/// whole state is its configuration plus the epoch counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSampler {
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Drop a final batch smaller than this (1 lets everything through).
    pub min_batch: usize,
}

impl BatchSampler {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        BatchSampler { batch_size, seed, shuffle: true, min_batch: 1 }
    }

    pub fn order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        if self.shuffle {
            let mut rng = rng_from_seed(self.seed);
            rng.set_stream(epoch);
            idx.shuffle(&mut rng);
        }
        idx
    }

    pub fn epoch_batches(&self, epoch: u64, n: usize) -> Result<Vec<Vec<usize>>> {
        if n == 0 {
            return Err(Error::Dimension("cannot sample from an empty dataset".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(self
            .order(epoch, n)
            .chunks(self.batch_size)
            .filter(|c| c.len() >= self.min_batch)
            .map(<[usize]>::to_vec)
            .collect())
    }

    pub fn next_batch(&self, dataset: &Dataset, epoch: u64, index: usize) -> Result<Option<(Tensor, Tensor)>> {
        Ok(self.epoch_batches(epoch, dataset.len())?.get(index).map(|b| dataset.batch(b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_math::rng_from_seed;
    use rand::Rng;

    #[test]
    fn handcrafted_idx() {
        let bytes = [0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 64];
        let (shape, payload) = parse_idx(&bytes).unwrap();
        assert_eq!(shape, vec![2, 2]);
        let t: Vec<f64> = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
        assert_eq!(t, vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert!((t[2] - 0.50196).abs() < 1e-5 && (t[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let truncated = [0, 0, 8, 1, 0, 0, 0, 5, 1, 2];
        match parse_idx(&truncated) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 10);
                assert!(message.contains("needs 5 bytes, found 2"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx(&[1, 0, 8, 0]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx(&[0, 0, 0x0d, 0]), Err(Error::Format { offset: 2, .. })));
        let (shape, payload) = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 0]).unwrap();
        assert_eq!((shape, payload.len()), (vec![0], 0));
    }

    #[test]
    fn idx_round_trip_through_gzip() {
        let dir = std::env::temp_dir().join(format!("indexnet-idx-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let payload: Vec<u8> = (0..24).map(|i| (i * 11) as u8).collect();
        for name in ["a.idx", "a.idx.gz"] {
            let p = dir.join(name);
            write_idx(&p, &[2, 3, 4], &payload).unwrap();
            let bytes = read_maybe_gz(&p).unwrap();
            assert_eq!(bytes, encode_idx(&[2, 3, 4], &payload).unwrap());
            let t = read_idx(&p).unwrap();
            assert_eq!(t.shape(), [2, 3, 4]);
            assert_eq!(t.data()[5], 55.0 / 255.0);
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn delimited_text() {
        let d = parse_delimited("x,y,label\n1,2,0\n# note\n\n3.5, -1, 1\n", 1).unwrap();
        assert_eq!(d.inputs.data(), &[1.0, 2.0, 3.5, -1.0]);
        assert_eq!(d.targets.data(), &[0.0, 1.0]);
        assert!(matches!(parse_delimited("1,2\n3\n", 1), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(parse_delimited("1,2\n3,x\n", 1), Err(Error::Format { .. })));
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-3.0..5.0)).collect()).unwrap()
    }

    #[test]
    fn centering_zeroes_training_means() {
        let x = random(&[7, 2, 3, 3], 1);
        for mode in [CenterMode::PerPixel, CenterMode::PerChannel] {
            let (c, stats) = center(&x, mode).unwrap();
            let inner = 9;
            for f in 0..2 {
                let mut sum = 0.0;
                for t in 0..7 {
                    sum += c.outer(t)[f * inner..(f + 1) * inner].iter().sum::<f64>();
                }
                assert!(sum.abs() / 63.0 < 1e-10);
            }
            if mode == CenterMode::PerPixel {
                for i in 0..18 {
                    let m: f64 = (0..7).map(|t| c.outer(t)[i]).sum::<f64>() / 7.0;
                    assert!(m.abs() < 1e-10);
                }
            }
            let test = random(&[3, 2, 3, 3], 2);
            let other = random(&[3, 2, 3, 3], 3);
            assert_eq!(CenterStats::fit(&x, mode).unwrap(), stats);
            assert_ne!(stats.apply(&test).unwrap(), stats.apply(&other).unwrap());
        }
        let flat = random(&[5, 3], 4);
        let (c, _) = center(&flat, CenterMode::PerFeature).unwrap();
        let (again, _) = center(&c, CenterMode::PerFeature).unwrap();
        assert!(again.max_abs_diff(&c).unwrap() < 1e-12);
        let (zero, _) = center(&Tensor::full(&[4, 2], 3.0), CenterMode::PerFeature).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn target_encodings() {
        let y = encode_targets(&[2.0], TargetEncoding::OneHot { classes: 4 }).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(encode_targets(&[4.0], TargetEncoding::OneHot { classes: 4 }).is_err());
        assert_eq!(bin_index(1.0, 5, 0.0, 1.0), 4);
        assert_eq!(bin_index(-0.1, 5, 0.0, 1.0), 0);
        let mut rng = rng_from_seed(3);
        let draws: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y = encode_targets(&draws, TargetEncoding::Bins { bins: 10, lo: 0.0, hi: 1.0 }).unwrap();
        for c in 0..10 {
            assert!((0..10_000).any(|t| y[[t, c]] == 1.0));
        }
        for t in 0..10_000 {
            assert_eq!(y.outer(t).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let s = BatchSampler::new(3, 9);
        for epoch in 0..5 {
            let b = s.epoch_batches(epoch, 10).unwrap();
            assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
            let mut all: Vec<usize> = b.concat();
            all.sort();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
        assert_eq!(s.epoch_batches(2, 10).unwrap(), s.epoch_batches(2, 10).unwrap());
        assert_ne!(s.epoch_batches(2, 10).unwrap(), s.epoch_batches(3, 10).unwrap());
        let dropping = BatchSampler { min_batch: 2, ..s };
        assert_eq!(dropping.epoch_batches(0, 10).unwrap().len(), 3);
        let full = BatchSampler { shuffle: false, ..BatchSampler::new(10, 0) };
        assert_eq!(full.epoch_batches(0, 10).unwrap(), vec![(0..10).collect::<Vec<_>>()]);
    }

    #[test]
    fn sampler_permutations_are_uniform() {
        // Position-by-index counts over 1000 epochs on 10 indices: 81 degrees of
        // freedom, and 157 sits beyond the p = 1e-6 tail.
        let s = BatchSampler::new(10, 17);
        let mut counts = [[0u32; 10]; 10];
        for epoch in 0..1000 {
            for (pos, &i) in s.order(epoch, 10).iter().enumerate() {
                counts[pos][i] += 1;
            }
        }
        let chi2: f64 = counts.iter().flatten().map(|&c| (f64::from(c) - 100.0).powi(2) / 100.0).sum();
        assert!(chi2 < 157.0, "chi-square {chi2}");
    }
}
