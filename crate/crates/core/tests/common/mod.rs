//! Test-only oracles. Nothing here calls into the search or selection code
//! under test.
#![allow(dead_code)]

use knn_tts::{FeatureSequence, UnitDatabase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f32> {
    (0..n * dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect()
}

pub fn database(values: Vec<f32>, dim: usize) -> UnitDatabase {
    let seq = FeatureSequence::new(values, dim, 50.0, "db").unwrap();
    UnitDatabase::from_sequences([seq], "target").unwrap()
}

/// Plain f64 cosine distance, summed left to right.
pub fn naive_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Full sort of every row by (distance, row); returns the first k.
pub fn exhaustive_top_k(query: &[f32], rows: &[f32], dim: usize, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = rows
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, r)| (i, naive_distance(query, r)))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub fn oracle_mean(rows: &[f32], dim: usize, pick: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0f64; dim];
    for &i in pick {
        for d in 0..dim {
            acc[d] += rows[i * dim + d] as f64;
        }
    }
    acc.iter().map(|a| a / pick.len() as f64).collect()
}

pub fn naive_cos(a: &[f32], b: &[f32]) -> f64 {
    1.0 - naive_distance(a, b)
}

pub fn mean_rows(values: &[f32], dim: usize) -> Vec<f32> {
    let n = values.len() / dim;
    let mut acc = vec![0.0f64; dim];
    for r in values.chunks_exact(dim) {
        for d in 0..dim {
            acc[d] += r[d] as f64;
        }
    }
    acc.iter().map(|a| (a / n as f64) as f32).collect()
}
