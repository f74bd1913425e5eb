#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use farms::tensor_io::{CheckpointWriter, DType, LayerKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_farms"))
}

/// Runs `farms` with `args`, returning its output.
pub fn run(args: &[&str]) -> Output {
    bin().env_remove("FARMS_THREADS").args(args).output().expect("spawn farms")
}

pub fn gaussian(len: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect()
}

/// Three-layer model: a tall linear layer, a conv layer and a wide linear layer.
pub fn three_layer_model(dir: &Path) -> PathBuf {
    let mut w = CheckpointWriter::create(dir, "three").unwrap();
    w.add_layer("fc1", LayerKind::Linear, &[256, 64], DType::F32, &gaussian(256 * 64, 0.1, 1))
        .unwrap();
    w.add_layer(
        "conv",
        LayerKind::Conv2d,
        &[64, 48, 3, 3],
        DType::F32,
        &gaussian(64 * 48 * 9, 0.05, 2),
    )
    .unwrap();
    w.add_layer("fc2", LayerKind::Linear, &[64, 128], DType::F64, &gaussian(64 * 128, 0.2, 3))
        .unwrap();
    w.finish().unwrap();
    dir.join("manifest.json")
}

/// Appends a layer whose blob is shorter than its shape requires.
pub fn add_truncated_layer(dir: &Path) {
    fs::write(dir.join("broken.bin"), [0u8; 10]).unwrap();
    let path = dir.join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    m["layers"].as_array_mut().unwrap().push(serde_json::json!({
        "name": "broken",
        "kind": "linear",
        "shape": [16, 16],
        "dtype": "f32",
        "blob": "broken.bin",
    }));
    fs::write(path, serde_json::to_string_pretty(&m).unwrap()).unwrap();
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// File name to contents for every file in `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
