//! Evaluation procedures: speaker-similarity scores, half-split similarity
//! matrices, confidence intervals, λ sweeps and reference-duration
//! ablations.
//!
//! Real speaker similarity uses embeddings from an external speaker encoder
//! (loaded as [`EmbeddingSet`] files). For model-free runs the mean feature
//! vector of a sequence or database stands in as a proxy embedding.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{subset_database, FeatureSequence, SubsetSpec, UnitDatabase, MIN_NORM};
use crate::index::{build_index, DEFAULT_BLOCK_SIZE};
use crate::kernel;
use crate::retrieval::{
    blend, check_lambda, select, ConversionResult, ConversionSpec, NeighborSearch,
};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

pub const PROXY_SECS_METRIC: &str = "proxy_secs";

/// Speaker encoder cosine similarity: `a·b / (|a| |b|)`.
pub fn secs(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let sa = kernel::dot(a, a);
    let sb = kernel::dot(b, b);
    if !(sa.sqrt() >= MIN_NORM && sb.sqrt() >= MIN_NORM) {
        return Err(Error::ZeroNorm);
    }
    Ok((kernel::dot(a, b) / (sa * sb).sqrt()).clamp(-1.0, 1.0))
}

/// Anything made of equally weighted D-dimensional frames.
pub trait FrameSet {
    fn frame_dim(&self) -> usize;
    fn frame_values(&self) -> &[f32];
}

impl FrameSet for FeatureSequence {
    fn frame_dim(&self) -> usize {
        self.dim()
    }
    fn frame_values(&self) -> &[f32] {
        self.as_slice()
    }
}

impl FrameSet for UnitDatabase {
    fn frame_dim(&self) -> usize {
        self.dim()
    }
    fn frame_values(&self) -> &[f32] {
        self.as_slice()
    }
}

/// Mean frame vector, used as a proxy speaker embedding.
pub fn centroid_embedding<F: FrameSet + ?Sized>(frames: &F) -> Vec<f32> {
    let dim = frames.frame_dim();
    let mut acc = vec![0.0f64; dim];
    let mut n = 0usize;
    for f in frames.frame_values().chunks_exact(dim) {
        for (a, v) in acc.iter_mut().zip(f) {
            *a += *v as f64;
        }
        n += 1;
    }
    acc.into_iter().map(|a| (a / n as f64) as f32).collect()
}

/// SECS between a sequence's proxy embedding and a reference embedding.
pub fn proxy_secs(seq: &FeatureSequence, reference: &[f32]) -> Result<f64> {
    secs(&centroid_embedding(seq), reference)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingItem {
    pub utterance_id: String,
    pub embedding: Vec<f32>,
}

/// Speaker embeddings for one group of utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub label: String,
    pub dim: usize,
    pub items: Vec<EmbeddingItem>,
}

impl EmbeddingSet {
    pub fn new(label: impl Into<String>, items: Vec<EmbeddingItem>) -> Result<Self> {
        let dim = items.first().map_or(0, |i| i.embedding.len());
        let set = EmbeddingSet {
            label: label.into(),
            dim,
            items,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Empty("embedding dimension"));
        }
        for (i, item) in self.items.iter().enumerate() {
            if item.embedding.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    found: item.embedding.len(),
                });
            }
            if let Some(d) = item.embedding.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { frame: i, dim: d });
            }
            if !(kernel::norm(&item.embedding) >= MIN_NORM) {
                return Err(Error::ZeroNormFrame {
                    source_id: item.utterance_id.clone(),
                    frame: i,
                });
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: EmbeddingSet = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            what: "embedding set",
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_json(path, self)
    }

    fn vectors(&self) -> impl Iterator<Item = &[f32]> {
        self.items.iter().map(|i| i.embedding.as_slice())
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPolicy {
    /// Each group's first (ceiling) half against every group's second half.
    #[serde(rename = "half_AB")]
    HalfAB,
    /// All cross pairs; the diagonal uses distinct unordered pairs.
    #[serde(rename = "full")]
    Full,
}

/// Mean pairwise SECS between groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub split_policy: SplitPolicy,
}

impl SimilarityReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }
}

fn mean_cross(a: &[&[f32]], b: &[&[f32]]) -> Result<f64> {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += secs(x, y)?;
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

fn mean_within(a: &[&[f32]]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            sum += secs(a[i], a[j])?;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Builds the G×G similarity matrix.
///
/// Under [`SplitPolicy::HalfAB`] each group is split by utterance order into
/// A (the first `ceil(n/2)` items) and B (the rest), and cell `(i, j)`
/// averages SECS over `A_i × B_j`. Under [`SplitPolicy::Full`] cell `(i, j)`
/// averages over `group_i × group_j`, and diagonal cells over distinct
/// unordered pairs within the group.
pub fn similarity_matrix(groups: &[EmbeddingSet], policy: SplitPolicy) -> Result<SimilarityReport> {
    if groups.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "similarity matrix needs at least 2 groups, got {}",
            groups.len()
        )));
    }
    let dim = groups[0].dim;
    for g in groups {
        g.validate()?;
        if g.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: g.dim,
            });
        }
        let needed = match policy {
            SplitPolicy::HalfAB => 2,
            SplitPolicy::Full => 1,
        };
        if g.items.len() < needed {
            return Err(Error::GroupTooSmall {
                label: g.label.clone(),
                found: g.items.len(),
                needed,
            });
        }
    }
    let vecs: Vec<Vec<&[f32]>> = groups.iter().map(|g| g.vectors().collect()).collect();
    let g = groups.len();
    let mut matrix = vec![vec![0.0; g]; g];
    for i in 0..g {
        for j in 0..g {
            matrix[i][j] = match policy {
                SplitPolicy::HalfAB => {
                    let a = &vecs[i][..vecs[i].len().div_ceil(2)];
                    let b = &vecs[j][vecs[j].len().div_ceil(2)..];
                    mean_cross(a, b)?
                }
                SplitPolicy::Full if i == j => {
                    if vecs[i].len() < 2 {
                        return Err(Error::GroupTooSmall {
                            label: groups[i].label.clone(),
                            found: vecs[i].len(),
                            needed: 2,
                        });
                    }
                    mean_within(&vecs[i])?
                }
                // mirrored below so the matrix is exactly symmetric
                SplitPolicy::Full if j < i => continue,
                SplitPolicy::Full => mean_cross(&vecs[i], &vecs[j])?,
            };
        }
    }
    if policy == SplitPolicy::Full {
        for i in 1..g {
            let (upper, lower) = matrix.split_at_mut(i);
            for (j, row) in upper.iter().enumerate() {
                lower[0][j] = row[i];
            }
        }
    }
    Ok(SimilarityReport {
        labels: groups.iter().map(|g| g.label.clone()).collect(),
        matrix,
        split_policy: policy,
    })
}

/// Mean with a normal-approximation 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiSummary {
    pub mean: f64,
    pub halfwidth: f64,
    pub n: usize,
}

/// `mean ± 1.96 · s / √n` with the n−1 sample standard deviation; the
/// half-width of a single value is 0.
pub fn aggregate_ci(values: &[f64]) -> Result<CiSummary> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Empty("no values to aggregate"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { frame: i, dim: 0 });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let halfwidth = if n == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Z_95 * var.sqrt() / (n as f64).sqrt()
    };
    Ok(CiSummary { mean, halfwidth, n })
}

/// One conversion per λ with shared `(source, db, k)`. The unit selection
/// does not depend on λ, so it is computed once and blended per λ; each
/// entry equals what [`convert`](crate::retrieval::convert) returns for that λ.
pub fn lambda_sweep_with<S: NeighborSearch + ?Sized>(
    source: &FeatureSequence,
    db: &UnitDatabase,
    searcher: &S,
    k: usize,
    lambdas: &[f64],
) -> Result<Vec<(f64, ConversionResult)>> {
    for &l in lambdas {
        check_lambda(l)?;
    }
    let selection = select(source, db, searcher, k)?;
    lambdas
        .iter()
        .map(|&l| Ok((l, blend(source, &selection, l)?)))
        .collect()
}

/// [`lambda_sweep_with`] over the exhaustive search path.
pub fn lambda_sweep(
    source: &FeatureSequence,
    db: &UnitDatabase,
    k: usize,
    lambdas: &[f64],
) -> Result<Vec<(f64, ConversionResult)>> {
    lambda_sweep_with(source, db, db, k, lambdas)
}

/// Precomputed per-utterance scores (WER, UTMOS, ...) from external tools.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalScores {
    rows: Vec<ScoreRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub utterance_id: String,
    pub metric_name: String,
    pub value: f64,
}

impl ExternalScores {
    pub fn new(rows: Vec<ScoreRow>) -> Self {
        ExternalScores { rows }
    }

    /// Reads a CSV with header `utterance_id,metric_name,value`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let malformed = |message: String| Error::Malformed {
            what: "score CSV",
            path: path.to_owned(),
            message,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => malformed(format!("{other:?}")),
        })?;
        let headers = rdr.headers().map_err(|e| malformed(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["utterance_id", "metric_name", "value"] {
            return Err(malformed(format!("unexpected header {headers:?}")));
        }
        let mut rows = Vec::new();
        for rec in rdr.deserialize() {
            let row: ScoreRow = rec.map_err(|e| malformed(e.to_string()))?;
            if !row.value.is_finite() {
                return Err(malformed(format!(
                    "non-finite value for {}",
                    row.utterance_id
                )));
            }
            rows.push(row);
        }
        Ok(ExternalScores { rows })
    }

    pub fn rows(&self) -> &[ScoreRow] {
        &self.rows
    }

    fn for_utterance<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a ScoreRow> + 'a {
        self.rows.iter().filter(move |r| r.utterance_id == id)
    }
}

/// Grid and conversion settings for a reference-duration ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub durations: Vec<f64>,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub lambda: f64,
}

/// One output line: `(duration, seed, utterance, metric, value)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub duration_s: f64,
    pub seed: u64,
    pub utterance_id: String,
    pub metric_name: String,
    pub value: f64,
}

/// For every `(duration, seed)` cell: draw a subset of `db`, convert every
/// source against it, and report each source's proxy SECS to the full
/// database's centroid followed by its external scores.
///
/// Rows come out ordered by duration, then seed, then source, whatever the
/// degree of parallelism.
pub fn ablation_run(
    sources: &[FeatureSequence],
    db: &UnitDatabase,
    config: &AblationConfig,
    scores: Option<&ExternalScores>,
) -> Result<Vec<AblationRow>> {
    let spec = ConversionSpec::new(config.k, config.lambda)?;
    if sources.is_empty() {
        return Err(Error::Empty("no source sequences"));
    }
    if let Some(scores) = scores {
        let known: HashSet<&str> = sources.iter().map(|s| s.source_id()).collect();
        if let Some(r) = scores
            .rows
            .iter()
            .find(|r| !known.contains(r.utterance_id.as_str()))
        {
            return Err(Error::UnknownUtterance(r.utterance_id.clone()));
        }
    }
    let mut cells = Vec::with_capacity(config.durations.len() * config.seeds.len());
    for &d in &config.durations {
        let subset = SubsetSpec::new(d, 0)?;
        let frames =
            crate::features::frames_for_duration(subset.duration_seconds, db.frame_rate_hz());
        if frames > db.len() {
            return Err(Error::DurationExceeded {
                requested: d,
                available: db.duration_seconds(),
            });
        }
        for &s in &config.seeds {
            cells.push(SubsetSpec {
                duration_seconds: d,
                seed: s,
            });
        }
    }
    let target = centroid_embedding(db);

    let per_cell = cells
        .par_iter()
        .map(|cell| -> Result<Vec<AblationRow>> {
            let sub = subset_database(db, cell)?;
            let index = build_index(&sub, DEFAULT_BLOCK_SIZE)?;
            let mut rows = Vec::new();
            for src in sources {
                let selection = select(src, &sub, &index, spec.k)?;
                let converted = blend(src, &selection, spec.lambda)?.converted;
                rows.push(AblationRow {
                    duration_s: cell.duration_seconds,
                    seed: cell.seed,
                    utterance_id: src.source_id().to_owned(),
                    metric_name: PROXY_SECS_METRIC.to_owned(),
                    value: proxy_secs(&converted, &target)?,
                });
                if let Some(scores) = scores {
                    for r in scores.for_utterance(src.source_id()) {
                        rows.push(AblationRow {
                            duration_s: cell.duration_seconds,
                            seed: cell.seed,
                            utterance_id: r.utterance_id.clone(),
                            metric_name: r.metric_name.clone(),
                            value: r.value,
                        });
                    }
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

/// Mean of `metric` per `(duration, seed)` cell, keyed in ascending order.
pub fn cell_means(rows: &[AblationRow], metric: &str) -> BTreeMap<(u64, u64), f64> {
    let mut acc: BTreeMap<(u64, u64), (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric_name == metric) {
        let e = acc.entry((r.duration_s.to_bits(), r.seed)).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

/// Writes ablation rows as CSV with header
/// `duration_s,seed,utterance_id,metric_name,value`.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<csv output>", io),
        other => Error::InvalidConfig(format!("{other:?}")),
    };
    w.write_record(["duration_s", "seed", "utterance_id", "metric_name", "value"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.duration_s.to_string(),
            r.seed.to_string(),
            r.utterance_id.clone(),
            r.metric_name.clone(),
            r.value.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}
