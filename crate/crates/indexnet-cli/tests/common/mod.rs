#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A small classification problem: class 1 when `x0 * x1 + 0.5 x2 > 0`.
pub fn write_blobs(path: &Path, rows: usize) {
    let mut s = String::from("x0,x1,x2,class\n");
    for i in 0..rows {
        let a = ((i * 37 % 101) as f64 / 50.0) - 1.0;
        let b = ((i * 59 % 103) as f64 / 51.0) - 1.0;
        let c = ((i * 17 % 97) as f64 / 48.0) - 1.0;
        let class = usize::from(a * b + 0.5 * c > 0.0);
        writeln!(s, "{a},{b},{c},{class}").unwrap();
    }
    fs::write(path, s).unwrap();
}

/// An FNN exercising batch norm, dropout, Nesterov look-ahead, learning-rate
/// decay, an L2 penalty and weight clipping. Writes its data beside it.
pub fn rich_config(dir: &Path, epochs: u64) -> PathBuf {
    write_blobs(&dir.join("blobs.csv"), 45);
    let toml = format!(
        r#"name = "rich-fnn"
seed = 19
epochs = {epochs}
batch_size = 6
checkpoint_every = 2

[model]
kind = "fnn"
input = 3
outputs = 2
loss = "cross_entropy"
input_dropout = 0.1

[[model.hidden]]
width = 6
activation = "tanh"
batch_norm = true
dropout = 0.2

[[model.hidden]]
width = 5
activation = "relu"

[optimizer]
kind = "nesterov"
learning_rate = 0.05
decay = 0.02

[regularizer]
l2 = 0.001
clip = 1.2

[data]
source = {{ format = "delimited", path = "blobs.csv", targets = {{ kind = "one_hot", classes = 2 }} }}
eval_samples = 9
center = "per_feature"
"#
    );
    let path = dir.join("rich.toml");
    fs::write(&path, toml).unwrap();
    path
}
