//! Byte-level corpus ingestion and deterministic batch streams.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::Batch;
use crate::error::{CoreError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    pub max_batches: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seq_len: 64,
            batch_size: 8,
            max_batches: 32,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

/// A raw byte corpus. Tokens are the bytes themselves.
#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Vec<u8>,
}

impl Corpus {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        Corpus::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.is_empty() {
            return Err(CoreError::Ingest("corpus is empty".into()));
        }
        Ok(Corpus { bytes })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn max_token(&self) -> u32 {
        self.bytes.iter().copied().max().unwrap_or(0) as u32
    }

    fn split_region(&self, split: Split, test_fraction: f64) -> &[u8] {
        let n = self.bytes.len();
        let test_len = ((n as f64) * test_fraction).floor() as usize;
        let train_len = n - test_len;
        match split {
            Split::Train => &self.bytes[..train_len],
            Split::Test => &self.bytes[train_len..],
        }
    }

    /// Number of full (seq_len inputs + shifted targets) windows in a region.
    pub fn window_count(&self, split: Split, config: &DataConfig) -> usize {
        let region = self.split_region(split, config.test_fraction);
        if region.len() < config.seq_len + 1 {
            0
        } else {
            (region.len() - 1) / config.seq_len
        }
    }

    /// Deterministic batch stream over a split.
    ///
    /// Train windows are shuffled once with the config seed (a fixed
    /// without-replacement order); test windows stay in corpus order.
    pub fn batches(&self, split: Split, config: &DataConfig) -> Result<Vec<Batch>> {
        if config.seq_len == 0 {
            return Err(CoreError::config("seq_len must be positive"));
        }
        if config.batch_size == 0 {
            return Err(CoreError::config("batch_size must be positive"));
        }
        let region = self.split_region(split, config.test_fraction);
        let count = self.window_count(split, config);
        if count == 0 {
            return Err(CoreError::Ingest(format!(
                "split {:?} has no full window of length {}",
                split, config.seq_len
            )));
        }

        let mut order: Vec<usize> = (0..count).collect();
        if split == Split::Train {
            let mut rng = Rng::seed_stream(config.seed, &[0x6261_7463_6865_7321]);
            rng.shuffle(&mut order);
        }

        let s = config.seq_len;
        let mut batches = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            if batches.len() >= config.max_batches {
                break;
            }
            let b = chunk.len();
            let mut inputs = Array2::<u32>::zeros((b, s));
            let mut targets = Array2::<u32>::zeros((b, s));
            for (row, &w) in chunk.iter().enumerate() {
                let start = w * s;
                for k in 0..s {
                    inputs[[row, k]] = region[start + k] as u32;
                    targets[[row, k]] = region[start + k + 1] as u32;
                }
            }
            batches.push(Batch::Tokens { inputs, targets });
        }
        Ok(batches)
    }
}
