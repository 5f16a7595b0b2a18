#![allow(dead_code)]

use std::sync::Arc;

use sparrow::dataio::{MemoryDataset, RecordSource};
use sparrow::synth::blob_benchmark;

pub const TRAIN: usize = 10_000;
pub const TEST: usize = 2_000;
pub const SEED: u64 = 7;

pub struct Benchmark {
    pub train: Arc<MemoryDataset>,
    pub test: MemoryDataset,
}

impl Benchmark {
    pub fn source(&self) -> Arc<dyn RecordSource + Send + Sync> {
        self.train.clone()
    }
}

pub fn blobs() -> Benchmark {
    let (train, test) = blob_benchmark(TRAIN, TEST, SEED).unwrap();
    Benchmark {
        train: Arc::new(MemoryDataset::from_dense(train)),
        test: MemoryDataset::from_dense(test),
    }
}

/// Average precision by counting, for every positive, the items ranked at or
/// above it (higher score, or equal score and earlier position).
pub fn rank_walk_auprc(scores: &[f64], labels: &[i8]) -> f64 {
    let n = scores.len();
    let mut at_positive: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        if labels[i] > 0 {
            let mut ranked = 0;
            let mut tp = 0;
            for j in 0..n {
                if scores[j] > scores[i] || (scores[j] == scores[i] && j <= i) {
                    ranked += 1;
                    if labels[j] > 0 {
                        tp += 1;
                    }
                }
            }
            at_positive.push((ranked, tp));
        }
    }
    at_positive.sort_unstable();
    let sum: f64 = at_positive.iter().map(|&(k, tp)| tp as f64 / k as f64).sum();
    sum / at_positive.len() as f64
}

/// Writes rows to a dense binary cache at `path`.
pub fn write_cache(path: &std::path::Path, rows: &MemoryDataset) -> sparrow::dataio::Dataset {
    use sparrow::dataio::{DatasetWriter, Layout};
    let mut w = DatasetWriter::create(path, rows.dim(), Layout::Dense, SEED, false).unwrap();
    for r in rows.as_slice() {
        w.push(&r.x, r.y).unwrap();
    }
    w.finish().unwrap()
}
