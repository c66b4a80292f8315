//! Checkpoint files.
//!
//! ```text
//! INDEXNET-CHECKPOINT 1
//! digest <sha-256 of the model section>
//! config <byte count>
//! <run config as TOML>
//! epoch <completed epochs>
//! step <completed optimizer steps>
//! optimizer-step <e>
//! learning-rate <f64 bits, hex>
//! batch-norm <index> <running updates> <last batch size>     one line per layer
//! center <mode> <sample shape>                                optional
//! tensors <count>
//! <name> <shape> <byte offset>                                one line per tensor
//! payload <byte count>
//! <little-endian f64 payload>
//! ```
//!
//! Tensors are the parameters (`param.*`), batch-norm running statistics
//! (`bn<i>.*`), optimizer accumulators (`opt.*`) and centering means.
//! Serialization is a pure function of the state, so equal states give equal bytes.

use std::fmt::Write as _;
use std::path::Path;

use indexnet::data::{CenterMode, CenterStats};
use indexnet::Tensor;

use crate::config::{OutputConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::trainer::Trainer;

pub const MAGIC: &str = "INDEXNET-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BnCounters {
    pub updates: u64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// The run config, with output locations reset to their defaults.
    pub config: RunConfig,
    pub digest: String,
    pub epoch: u64,
    pub step: u64,
    pub optimizer_step: u64,
    pub learning_rate: f64,
    pub batch_norms: Vec<BnCounters>,
    pub center: Option<(CenterMode, Vec<usize>)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Checkpoint(msg.into()))
}

fn mode_name(mode: CenterMode) -> &'static str {
    match mode {
        CenterMode::PerFeature => "per_feature",
        CenterMode::PerPixel => "per_pixel",
        CenterMode::PerChannel => "per_channel",
    }
}

fn parse_mode(s: &str) -> CliResult<CenterMode> {
    match s {
        "per_feature" => Ok(CenterMode::PerFeature),
        "per_pixel" => Ok(CenterMode::PerPixel),
        "per_channel" => Ok(CenterMode::PerChannel),
        _ => bad(format!("unknown centering mode {s:?}")),
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> CliResult<Vec<usize>> {
    s.split('x').map(|d| d.parse().or_else(|_| bad(format!("bad shape {s:?}")))).collect()
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Checkpoint {
        let mut config = trainer.config.clone();
        config.output = OutputConfig::default();
        let mut tensors: Vec<(String, Tensor)> =
            trainer.model.params().into_iter().map(|(n, t)| (format!("param.{n}"), t.clone())).collect();
        let bns = trainer.model.batch_norms();
        for (i, bn) in bns.iter().enumerate() {
            let f = bn.running_mean.len();
            let vec = |v: &[f64]| Tensor::from_vec(&[f], v.to_vec()).expect("running stats");
            tensors.push((format!("bn{i}.running_mean"), vec(&bn.running_mean)));
            tensors.push((format!("bn{i}.running_var"), vec(&bn.running_var)));
        }
        for (i, (v, m)) in trainer.optimizer.v.iter().zip(&trainer.optimizer.m).enumerate() {
            tensors.push((format!("opt.v{i}"), v.clone()));
            tensors.push((format!("opt.m{i}"), m.clone()));
        }
        let center = trainer.center.as_ref().map(|c| {
            tensors.push(("center.mean".into(), Tensor::from_vec(&[c.mean.len()], c.mean.clone()).expect("center means")));
            (c.mode, c.sample_shape.clone())
        });
        Checkpoint {
            digest: config.model.digest(),
            config,
            epoch: trainer.epoch,
            step: trainer.step,
            optimizer_step: trainer.optimizer.step,
            learning_rate: trainer.optimizer.learning_rate,
            batch_norms: bns.iter().map(|b| BnCounters { updates: b.epoch, batch_size: b.batch_size }).collect(),
            center,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.config.to_toml();
        let mut h = String::new();
        let _ = writeln!(h, "{MAGIC} {VERSION}");
        let _ = writeln!(h, "digest {}", self.digest);
        let _ = writeln!(h, "config {}", config.len());
        h.push_str(&config);
        h.push('\n');
        let _ = writeln!(h, "epoch {}", self.epoch);
        let _ = writeln!(h, "step {}", self.step);
        let _ = writeln!(h, "optimizer-step {}", self.optimizer_step);
        let _ = writeln!(h, "learning-rate {:016x}", self.learning_rate.to_bits());
        for (i, b) in self.batch_norms.iter().enumerate() {
            let _ = writeln!(h, "batch-norm {i} {} {}", b.updates, b.batch_size);
        }
        if let Some((mode, shape)) = &self.center {
            let _ = writeln!(h, "center {} {}", mode_name(*mode), shape_text(shape));
        }
        let _ = writeln!(h, "tensors {}", self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let _ = writeln!(h, "{name} {} {offset}", shape_text(t.shape()));
            offset += 8 * t.len();
        }
        let _ = writeln!(h, "payload {offset}");
        let mut out = h.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let first = r.line()?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| CliError::Checkpoint("not an indexnet checkpoint".into()))?;
        if version != VERSION.to_string() {
            return bad(format!("format version {version}, this build reads {VERSION}"));
        }
        let digest = r.field("digest")?.to_string();
        let config_len: usize = r.number("config")?;
        let config_text = std::str::from_utf8(r.take(config_len)?).or_else(|_| bad("config echo is not UTF-8"))?.to_string();
        if r.line()? != "" {
            return bad("config echo is not newline-terminated");
        }
        let config: RunConfig = toml::from_str(&config_text).or_else(|e| bad(format!("config echo: {e}")))?;
        if config.model.digest() != digest {
            return bad("the digest does not match the echoed model section");
        }
        let epoch = r.number("epoch")?;
        let step = r.number("step")?;
        let optimizer_step = r.number("optimizer-step")?;
        let lr_hex = r.field("learning-rate")?;
        let learning_rate = f64::from_bits(u64::from_str_radix(lr_hex, 16).or_else(|_| bad("bad learning-rate bits"))?);

        let mut batch_norms = Vec::new();
        let mut center = None;
        let count: usize = loop {
            let line = r.line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["batch-norm", i, updates, batch] => {
                    if i.parse::<usize>().ok() != Some(batch_norms.len()) {
                        return bad(format!("batch-norm entries out of order at {i}"));
                    }
                    let updates = updates.parse().or_else(|_| bad("bad batch-norm counter"))?;
                    let batch_size = batch.parse().or_else(|_| bad("bad batch-norm batch size"))?;
                    batch_norms.push(BnCounters { updates, batch_size });
                }
                ["center", mode, shape] => center = Some((parse_mode(mode)?, parse_shape(shape)?)),
                ["tensors", n] => break n.parse().or_else(|_| bad("bad tensor count"))?,
                _ => return bad(format!("unexpected header line {line:?}")),
            }
        };
        let mut manifest = Vec::with_capacity(count);
        let mut expected_offset = 0;
        for _ in 0..count {
            let line = r.line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, shape, offset] = parts.as_slice() else {
                return bad(format!("bad manifest line {line:?}"));
            };
            let shape = parse_shape(shape)?;
            if offset.parse::<usize>().ok() != Some(expected_offset) {
                return bad(format!("tensor {name} at offset {offset}, expected {expected_offset}"));
            }
            expected_offset += 8 * shape.iter().product::<usize>();
            manifest.push((name.to_string(), shape));
        }
        let payload_len: usize = r.number("payload")?;
        if payload_len != expected_offset {
            return bad(format!("payload of {payload_len} bytes, manifest needs {expected_offset}"));
        }
        let payload = r.take(payload_len)?;
        if r.pos != bytes.len() {
            return bad(format!("{} trailing bytes after the payload", bytes.len() - r.pos));
        }
        let mut tensors = Vec::with_capacity(count);
        let mut at = 0;
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let data = payload[at..at + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            at += 8 * n;
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Checkpoint { config, digest, epoch, step, optimizer_step, learning_rate, batch_norms, center, tensors })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }

    fn tensor(&self, name: &str) -> CliResult<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CliError::Checkpoint(format!("missing tensor {name}")))
    }

    /// Writes the stored state into `trainer`. Every name, shape and the model
    /// digest are checked before anything is written, so a failed restore
    /// leaves the trainer untouched.
    pub fn restore(&self, trainer: &mut Trainer) -> CliResult<()> {
        let digest = trainer.config.model.digest();
        if digest != self.digest {
            return bad(format!("model digest mismatch: checkpoint {}, config {digest}", self.digest));
        }
        let names: Vec<(String, Vec<usize>)> =
            trainer.model.params().iter().map(|(n, t)| (format!("param.{n}"), t.shape().to_vec())).collect();
        let mut params = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            let t = self.tensor(name)?;
            if t.shape() != shape.as_slice() {
                return bad(format!("{name} has shape {:?}, the model needs {shape:?}", t.shape()));
            }
            params.push(t.clone());
        }
        let bn_features: Vec<usize> = trainer.model.batch_norms().iter().map(|b| b.running_mean.len()).collect();
        if bn_features.len() != self.batch_norms.len() {
            return bad(format!("{} batch-norm layers stored, the model has {}", self.batch_norms.len(), bn_features.len()));
        }
        let mut running = Vec::new();
        for (i, &f) in bn_features.iter().enumerate() {
            let mean = self.tensor(&format!("bn{i}.running_mean"))?;
            let var = self.tensor(&format!("bn{i}.running_var"))?;
            if mean.len() != f || var.len() != f {
                return bad(format!("bn{i} stores {} running means, the layer has {f} features", mean.len()));
            }
            running.push((mean.data().to_vec(), var.data().to_vec()));
        }
        let (mut v, mut m) = (Vec::new(), Vec::new());
        if self.tensors.iter().any(|(n, _)| n.starts_with("opt.")) {
            for (i, (_, shape)) in names.iter().enumerate() {
                let (vi, mi) = (self.tensor(&format!("opt.v{i}"))?, self.tensor(&format!("opt.m{i}"))?);
                if vi.shape() != shape.as_slice() || mi.shape() != shape.as_slice() {
                    return bad(format!("optimizer accumulator {i} does not match its parameter"));
                }
                v.push(vi.clone());
                m.push(mi.clone());
            }
        }
        let center = match &self.center {
            Some((mode, sample_shape)) => Some(CenterStats {
                mode: *mode,
                sample_shape: sample_shape.clone(),
                mean: self.tensor("center.mean")?.data().to_vec(),
            }),
            None => None,
        };

        for (p, t) in trainer.model.net_mut().params_mut().into_iter().zip(params) {
            *p = t;
        }
        for ((bn, (mean, var)), c) in trainer.model.net_mut().batch_norms_mut().into_iter().zip(running).zip(&self.batch_norms) {
            bn.running_mean = mean;
            bn.running_var = var;
            bn.epoch = c.updates;
            bn.batch_size = c.batch_size;
        }
        trainer.optimizer.v = v;
        trainer.optimizer.m = m;
        trainer.optimizer.step = self.optimizer_step;
        trainer.optimizer.learning_rate = self.learning_rate;
        trainer.epoch = self.epoch;
        trainer.step = self.step;
        trainer.center = center;
        Ok(())
    }

    /// A trainer rebuilt from the echoed config and restored.
    pub fn into_trainer(&self) -> CliResult<Trainer> {
        let mut t = Trainer::new(self.config.clone(), None)?;
        self.restore(&mut t)?;
        Ok(t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> CliResult<&'a str> {
        let rest = &self.bytes[self.pos..];
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return bad(format!("truncated header at byte {}", self.pos));
        };
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).or_else(|_| bad("header is not UTF-8"))
    }

    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return bad(format!("truncated: needs {n} bytes at {}, found {}", self.pos, self.bytes.len() - self.pos));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn field(&mut self, key: &str) -> CliResult<&'a str> {
        let line = self.line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            _ => bad(format!("expected {key:?}, found {line:?}")),
        }
    }

    fn number<T: std::str::FromStr>(&mut self, key: &str) -> CliResult<T> {
        let v = self.field(key)?;
        v.parse().or_else(|_| bad(format!("{key} {v:?} is not a number")))
    }
}
