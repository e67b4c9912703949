//! Experiment orchestration: transfer matrices, benchmarks, artifacts.

mod bench;
mod experiment;
mod transfer;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attacks::AttackError;
use crate::data::DataError;
use crate::vit::checkpoint::CheckpointError;
use crate::vit::ModelError;

pub use bench::{bench, bench_interleaved, BenchConfig, BenchReport};
pub use experiment::{
    compress_variants, load_dataset, run_attack, run_bench, run_compress, run_experiment, run_report, run_train,
    run_transfer, CompressConfig, CompressKind, DataConfig, DistillConfig, ExperimentConfig, Finding,
    MultiplexConfig, NamedCheckpoint, RunSummary,
};
pub use transfer::{
    asr, asr_counts, attack_source, evaluate_transfer, input_seed, matrix_pairs, transfer_eval, transfer_matrix, Asr,
    CellLog, InputRecord, MatrixRun, MatrixShape, SkippedCell, SourceAttack, TransferCell,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing checkpoint {id:?} at {path}")]
    MissingCheckpoint { id: String, path: PathBuf },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("success reported by attack on {model} failed re-verification at input {index}")]
    Verification { model: String, index: usize },
    #[error("attack-split image {0} also appears in the training split")]
    AttackLeak(usize),
}

impl HarnessError {
    /// 2 for configuration problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::MissingCheckpoint { .. } => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn hash_is_hex_sha256() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::AttackLeak(0).exit_code(), 3);
    }
}
