use std::path::Path;

use cacc::experiment::ExperimentConfig;
use cacc::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record written next to every command's outputs so a run can be repeated
/// exactly.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub config_hash: String,
    pub seed: u64,
    pub ablation: &'a str,
    pub version: &'static str,
    pub config: &'a ExperimentConfig,
}

/// SHA-256 of the effective configuration's compact JSON.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn write(dir: &Path, command: &str, config: &ExperimentConfig) -> Result<()> {
    let record = RunRecord {
        command,
        config_hash: config_hash(config),
        seed: config.seed,
        ablation: config.ablation.as_str(),
        version: env!("CARGO_PKG_VERSION"),
        config,
    };
    cacc::io::write_json(&dir.join("run.json"), &record)
}
