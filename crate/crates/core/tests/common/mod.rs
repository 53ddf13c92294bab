#![allow(dead_code)]

use std::path::{Path, PathBuf};

use echodistill::audio::FileLoader;
use echodistill::instance::Dataset;
use echodistill::optim::PairedExample;
use echodistill::synthgen::{gen_dataset, GenSpec};

pub fn gen_spec(n: usize, snrs: &[f64], window: Option<(usize, usize)>, seed: u64, prefix: &str) -> GenSpec {
    GenSpec {
        num_instances: n,
        snr_grid: snrs.to_vec(),
        evidence_window: window,
        seed,
        id_prefix: prefix.into(),
        ..GenSpec::default()
    }
}

/// Generates a corpus under `dir/name` and returns its JSONL path.
pub fn corpus(dir: &Path, name: &str, spec: &GenSpec) -> PathBuf {
    gen_dataset(spec, &dir.join(name)).unwrap().jsonl
}

pub fn paired(jsonl: &Path) -> (Vec<PairedExample>, FileLoader) {
    let ds = Dataset::load(jsonl).unwrap();
    (PairedExample::load_all(&ds.instances, &ds.loader).unwrap(), ds.loader)
}
