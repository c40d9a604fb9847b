#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// A run small enough to finish in a couple of seconds: 16-node graphs,
/// 16-wide layers, four pruned models.
pub const TINY: &str = r#"
[dataset]
classes = 3
per_class = 40
contrast = 0.3
noise = 0.05

[model]
conv_channels = 16
hidden_units = 16

[graphs]
nodes = 16
degree = 3
bins = [[2.5, 3.5]]
per_bin = 6

[training]
epochs = 40
pruned_epochs = 20
ensemble_size = 4
min_ensemble = 1
accept_ratio = 0.5
"#;

pub fn ggt(dir: &Path, config: &str, args: &[&str]) -> Output {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("config.toml");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_ggt"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("run"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
