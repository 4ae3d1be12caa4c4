//! Normalized-row index for batched exact cosine search.
//!
//! Rows are L2-normalized once so that the bulk scan is a blocked dot-product
//! pass over the database with a small best-candidate heap per query. The
//! scan keeps a few more candidates than requested and re-scores them with
//! the exact distance used by [`top_k`](crate::retrieval::top_k); whenever
//! the fast scan's error bound cannot rule out a missed neighbor, the query
//! falls back to the exhaustive path. Results therefore match the
//! definitional search exactly, ties included.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::UnitDatabase;
use crate::kernel;
use crate::retrieval::{
    check_k, top_k, unit_distance, validate_queries, Neighbor, NeighborSearch, Neighbors,
};

pub const DEFAULT_BLOCK_SIZE: usize = 1024;

/// Extra candidates kept by the fast scan for exact re-scoring.
const RERANK_MARGIN: usize = 8;

/// Queries scanned together against each row block.
const QUERY_TILE: usize = 8;

#[derive(Debug, Clone)]
pub struct SearchIndex<'db> {
    db: &'db UnitDatabase,
    normalized: Vec<f32>,
    row_map: Vec<usize>,
    block_size: usize,
    error_bound: f64,
    tile_dot: kernel::TileKernel,
}

/// Normalizes every database row. `block_size` is the number of rows per scan
/// block; it affects speed only.
pub fn build_index(db: &UnitDatabase, block_size: usize) -> Result<SearchIndex<'_>> {
    if block_size == 0 {
        return Err(Error::InvalidBlockSize(block_size));
    }
    let mut normalized = Vec::with_capacity(db.as_slice().len());
    for (row, unit) in db.units().enumerate() {
        let n = db.norm(row);
        normalized.extend(unit.iter().map(|v| (*v as f64 / n) as f32));
    }
    Ok(SearchIndex {
        db,
        normalized,
        row_map: (0..db.len()).collect(),
        block_size,
        error_bound: kernel::fast_error_bound(db.dim()),
        tile_dot: kernel::tile_kernel(),
    })
}

/// Candidate ordered by (distance, row); the heap's top is the worst kept.
#[derive(Clone, Copy, PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct BestK {
    cap: usize,
    heap: BinaryHeap<Candidate>,
}

impl BestK {
    fn new(cap: usize) -> Self {
        BestK {
            cap,
            heap: BinaryHeap::with_capacity(cap + 1),
        }
    }

    #[inline]
    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.cap {
            self.heap.push(c);
        } else if let Some(mut top) = self.heap.peek_mut() {
            if c < *top {
                *top = c;
            }
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

impl<'db> SearchIndex<'db> {
    pub fn database(&self) -> &'db UnitDatabase {
        self.db
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn row_map(&self) -> &[usize] {
        &self.row_map
    }

    pub fn normalized_row(&self, i: usize) -> &[f32] {
        let d = self.db.dim();
        &self.normalized[i * d..(i + 1) * d]
    }

    /// Fast-path distance `1 - q̂·û` between a normalized query and index row `i`.
    pub fn fast_distance(&self, normalized_query: &[f32], i: usize) -> f64 {
        1.0 - kernel::dot_fast(normalized_query, self.normalized_row(i))
    }

    fn normalize(&self, query: &[f32]) -> Vec<f32> {
        let n = kernel::norm(query);
        query.iter().map(|v| (*v as f64 / n) as f32).collect()
    }

    /// Offers every row of one block to each query of a tile.
    fn scan_block(&self, tile: &[Vec<f32>], best: &mut [BestK], block: &[f32], base: usize) {
        let queries: Vec<&[f32]> = tile.iter().map(Vec::as_slice).collect();
        let mut dots = vec![0.0f64; tile.len()];
        for (j, row) in block.chunks_exact(self.db.dim()).enumerate() {
            (self.tile_dot)(&queries, row, &mut dots);
            for (d, heap) in dots.iter().zip(best.iter_mut()) {
                heap.offer(Candidate(1.0 - d, base + j));
            }
        }
    }

    /// Fast-scan candidates for every normalized query.
    ///
    /// Row blocks form the outer loop so each block is reused by all query
    /// tiles while it is still in cache; tiles within a block run in
    /// parallel. Every heap sees rows in the same order whatever the split.
    fn scan(&self, normalized: &[Vec<f32>], cap: usize) -> Vec<BestK> {
        let dim = self.db.dim();
        let mut best: Vec<BestK> = normalized.iter().map(|_| BestK::new(cap)).collect();
        for (b, block) in self.normalized.chunks(self.block_size * dim).enumerate() {
            let base = b * self.block_size;
            normalized
                .par_chunks(QUERY_TILE)
                .zip(best.par_chunks_mut(QUERY_TILE))
                .for_each(|(tile, heaps)| self.scan_block(tile, heaps, block, base));
        }
        best
    }

    /// Re-scores fast-scan candidates exactly, or falls back to the
    /// exhaustive path when a neighbor outside the candidates cannot be
    /// excluded.
    fn finish(&self, query: &[f32], cands: Vec<Candidate>, k: usize) -> Result<Vec<Neighbor>> {
        let n = self.db.len();
        if cands.len() < n {
            let kth = cands[k - 1].0;
            let last = cands[cands.len() - 1].0;
            if last - self.error_bound <= kth + self.error_bound {
                return top_k(query, self.db, k);
            }
        }
        let qn = kernel::dot(query, query);
        let mut exact: Vec<Neighbor> = cands
            .iter()
            .map(|c| {
                let row = self.row_map[c.1];
                Neighbor {
                    row,
                    distance: unit_distance(query, qn, self.db, row),
                }
            })
            .collect();
        exact.sort_by(Neighbor::order);
        exact.truncate(k);
        Ok(exact)
    }
}

impl NeighborSearch for SearchIndex<'_> {
    fn len(&self) -> usize {
        self.db.len()
    }

    fn dim(&self) -> usize {
        self.db.dim()
    }

    fn search(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        check_k(k, self.db.len())?;
        validate_queries(query, self.db.dim()).map_err(|e| match e {
            Error::ZeroNormFrame { .. } => Error::ZeroNorm,
            other => other,
        })?;
        let cap = (k + RERANK_MARGIN).min(self.db.len());
        let best = self.scan(&[self.normalize(query)], cap);
        let cands = best.into_iter().next().expect("one query").into_sorted();
        self.finish(query, cands, k)
    }

    fn search_batch(&self, queries: &[f32], k: usize) -> Result<Neighbors> {
        batch_search(queries, self, k)
    }
}

/// Exact top-k for every row of a row-major M×D query matrix.
///
/// Work is split across the current rayon pool by query tiles; each query's
/// result is independent of the split, so output does not depend on the
/// number of workers.
pub fn batch_search(queries: &[f32], index: &SearchIndex<'_>, k: usize) -> Result<Neighbors> {
    let dim = index.db.dim();
    check_k(k, index.db.len())?;
    validate_queries(queries, dim)?;
    let cap = (k + RERANK_MARGIN).min(index.db.len());
    let raw: Vec<&[f32]> = queries.chunks_exact(dim).collect();
    let normalized: Vec<Vec<f32>> = raw.par_iter().map(|q| index.normalize(q)).collect();
    let best = index.scan(&normalized, cap);
    let lists = raw
        .par_iter()
        .zip(best)
        .map(|(q, b)| index.finish(q, b.into_sorted(), k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Neighbors::from_lists(k, lists))
}
