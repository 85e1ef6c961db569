#![allow(dead_code)]

use std::fs;
use std::path::Path;

use prosenet::data::{generate_synthetic, SurvivalDataset, SynthConfig};
use prosenet::train::TrainConfig;

pub const TINY: &str = "
dims = 4x16x16
stem = 2
widths = 2,4
blocks = 1,1
d = 12
heads = 2
layers = 1
mlp_hidden = 24
head_hidden = 8
batch_size = 8
views_per_epoch = 2
";

pub fn tiny_config(seed: u64, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::from_text(TINY).unwrap();
    c.seed = seed;
    c.epochs = epochs;
    c
}

pub fn tiny_dataset(seed: u64, n: usize) -> SurvivalDataset {
    let cfg = SynthConfig {
        raw_dims: [6, 24, 24],
        ..SynthConfig::default()
    };
    generate_synthetic(seed, n, &cfg, [4, 16, 16]).unwrap()
}

/// Every file under `dir` as `(relative path, bytes)`, sorted.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if p.is_dir() {
            out.extend(tree(&p).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else {
            out.push((name, fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}
