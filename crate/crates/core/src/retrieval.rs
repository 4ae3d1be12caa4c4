//! Frame-level kNN unit selection and interpolation.
//!
//! Every source frame is replaced by the uniform mean of its `k` cosine-nearest
//! database units, then blended back toward the source frame:
//!
//! ```text
//! converted = lambda * selected + (1 - lambda) * source
//! ```
//!
//! Frames are processed independently, so the output always has exactly as
//! many frames as the input.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, UnitDatabase, MIN_NORM};
use crate::kernel;

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Cosine,
}

/// Retrieval and morphing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConversionSpec {
    pub k: usize,
    pub lambda: f64,
    pub metric: Metric,
}

impl ConversionSpec {
    pub fn new(k: usize, lambda: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidK { k, n: 0 });
        }
        check_lambda(lambda)?;
        Ok(ConversionSpec {
            k,
            lambda,
            metric: Metric::Cosine,
        })
    }
}

impl Default for ConversionSpec {
    fn default() -> Self {
        ConversionSpec {
            k: DEFAULT_K,
            lambda: DEFAULT_LAMBDA,
            metric: Metric::Cosine,
        }
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidLambda(lambda))
    }
}

pub(crate) fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        Err(Error::InvalidK { k, n })
    } else {
        Ok(())
    }
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
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
    Ok(distance_from_parts(kernel::dot(a, b), sa, sb))
}

/// Cosine distance from a dot product and the two squared norms. Taking one
/// square root of the product keeps the self-distance of any vector at
/// exactly zero.
#[inline]
pub(crate) fn distance_from_parts(dot: f64, sq_a: f64, sq_b: f64) -> f64 {
    (1.0 - dot / (sq_a * sq_b).sqrt()).clamp(0.0, 2.0)
}

/// Exact distance from a query (with precomputed squared norm) to a database
/// row. Every search path orders neighbors by this value.
#[inline]
pub(crate) fn unit_distance(query: &[f32], query_sq: f64, db: &UnitDatabase, row: usize) -> f64 {
    distance_from_parts(kernel::dot(query, db.unit(row)), query_sq, db.sq_norm(row))
}

/// One retrieved unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub distance: f64,
}

impl Neighbor {
    /// Ascending distance, then ascending row.
    pub fn order(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.row.cmp(&other.row))
    }
}

fn query_sq_norm(query: &[f32], dim: usize) -> Result<f64> {
    if query.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: query.len(),
        });
    }
    let sq = kernel::dot(query, query);
    if sq.sqrt() >= MIN_NORM {
        Ok(sq)
    } else {
        Err(Error::ZeroNorm)
    }
}

/// The `k` units closest to `query`, by ascending distance with ties going
/// to the lower row index. This is the definitional exhaustive path.
pub fn top_k(query: &[f32], db: &UnitDatabase, k: usize) -> Result<Vec<Neighbor>> {
    check_k(k, db.len())?;
    let qn = query_sq_norm(query, db.dim())?;
    let mut all: Vec<Neighbor> = (0..db.len())
        .map(|row| Neighbor {
            row,
            distance: unit_distance(query, qn, db, row),
        })
        .collect();
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, Neighbor::order);
        all.truncate(k);
    }
    all.sort_by(Neighbor::order);
    Ok(all)
}

/// Uniform mean of the given database rows, accumulated in f64.
pub fn mean_of_rows(db: &UnitDatabase, rows: impl IntoIterator<Item = usize>) -> Vec<f32> {
    let mut acc = vec![0.0f64; db.dim()];
    let mut count = 0usize;
    for row in rows {
        for (a, v) in acc.iter_mut().zip(db.unit(row)) {
            *a += *v as f64;
        }
        count += 1;
    }
    let n = count.max(1) as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

/// Mean of the `k` nearest units.
pub fn select_unit(query: &[f32], db: &UnitDatabase, k: usize) -> Result<Vec<f32>> {
    let nn = top_k(query, db, k)?;
    Ok(mean_of_rows(db, nn.iter().map(|n| n.row)))
}

/// `lambda * selected + (1 - lambda) * source`, elementwise. The endpoints
/// return their operand bit for bit.
pub fn interpolate(selected: &[f32], source: &[f32], lambda: f64) -> Result<Vec<f32>> {
    if selected.len() != source.len() {
        return Err(Error::DimensionMismatch {
            expected: source.len(),
            found: selected.len(),
        });
    }
    check_lambda(lambda)?;
    let mut out = vec![0.0; source.len()];
    blend_into(&mut out, selected, source, lambda);
    Ok(out)
}

fn blend_into(out: &mut [f32], selected: &[f32], source: &[f32], lambda: f64) {
    if lambda == 0.0 {
        out.copy_from_slice(source);
    } else if lambda == 1.0 {
        out.copy_from_slice(selected);
    } else {
        let mu = 1.0 - lambda;
        for ((o, s), x) in out.iter_mut().zip(selected).zip(source) {
            *o = (lambda * *s as f64 + mu * *x as f64) as f32;
        }
    }
}

/// Row-major M×k neighbor table.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    k: usize,
    rows: Vec<usize>,
    distances: Vec<f64>,
}

impl Neighbors {
    pub(crate) fn from_lists(k: usize, lists: Vec<Vec<Neighbor>>) -> Self {
        let mut rows = Vec::with_capacity(lists.len() * k);
        let mut distances = Vec::with_capacity(lists.len() * k);
        for list in lists {
            debug_assert_eq!(list.len(), k);
            for n in list {
                rows.push(n.row);
                distances.push(n.distance);
            }
        }
        Neighbors { k, rows, distances }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of queries M.
    pub fn len(&self) -> usize {
        self.rows.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self, query: usize) -> &[usize] {
        &self.rows[query * self.k..(query + 1) * self.k]
    }

    pub fn distances(&self, query: usize) -> &[f64] {
        &self.distances[query * self.k..(query + 1) * self.k]
    }

    pub fn all_rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn all_distances(&self) -> &[f64] {
        &self.distances
    }
}

/// Anything that can answer exact cosine top-k queries over a database's rows.
pub trait NeighborSearch: Sync {
    /// Number of searchable rows.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self) -> usize;

    fn search(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>>;

    /// Searches every row of a row-major M×D query matrix.
    fn search_batch(&self, queries: &[f32], k: usize) -> Result<Neighbors> {
        let dim = self.dim();
        check_k(k, self.len())?;
        validate_queries(queries, dim)?;
        let lists = queries
            .par_chunks_exact(dim)
            .map(|q| self.search(q, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Neighbors::from_lists(k, lists))
    }
}

/// Checks shape and norms of a query matrix sequentially so that the
/// reported failure is always the first offending query.
pub(crate) fn validate_queries(queries: &[f32], dim: usize) -> Result<()> {
    if dim == 0 || !queries.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: queries.len() % dim.max(1),
        });
    }
    for (t, q) in queries.chunks_exact(dim).enumerate() {
        if let Some(d) = q.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { frame: t, dim: d });
        }
        if !(kernel::norm(q) >= MIN_NORM) {
            return Err(Error::ZeroNormFrame {
                source_id: String::from("query"),
                frame: t,
            });
        }
    }
    Ok(())
}

impl NeighborSearch for UnitDatabase {
    fn len(&self) -> usize {
        UnitDatabase::len(self)
    }

    fn dim(&self) -> usize {
        UnitDatabase::dim(self)
    }

    fn search(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        top_k(query, self, k)
    }
}

/// The λ-independent half of a conversion: the selected sequence and the
/// neighbors it was averaged from.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub selected: FeatureSequence,
    pub neighbors: Neighbors,
}

/// Output of [`convert`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConversionResult {
    pub converted: FeatureSequence,
    pub selected: FeatureSequence,
    pub neighbors: Neighbors,
}

impl ConversionResult {
    /// Database rows chosen for source frame `t`.
    pub fn neighbor_indices(&self, t: usize) -> &[usize] {
        self.neighbors.rows(t)
    }
}

/// Selects units for every source frame using `searcher`, which must index
/// the rows of `db`.
pub fn select<S: NeighborSearch + ?Sized>(
    source: &FeatureSequence,
    db: &UnitDatabase,
    searcher: &S,
    k: usize,
) -> Result<Selection> {
    if source.dim() != db.dim() {
        return Err(Error::DimensionMismatch {
            expected: db.dim(),
            found: source.dim(),
        });
    }
    if searcher.len() != db.len() || searcher.dim() != db.dim() {
        return Err(Error::InvalidConfig(
            "search structure does not index this database".into(),
        ));
    }
    check_k(k, db.len())?;
    let neighbors = searcher
        .search_batch(source.as_slice(), k)
        .map_err(|e| match e {
            Error::ZeroNormFrame { frame, .. } => Error::ZeroNormFrame {
                source_id: source.source_id().to_owned(),
                frame,
            },
            other => other,
        })?;
    let dim = db.dim();
    let mut selected = vec![0.0f32; source.as_slice().len()];
    selected
        .par_chunks_exact_mut(dim)
        .enumerate()
        .for_each(|(t, out)| {
            out.copy_from_slice(&mean_of_rows(db, neighbors.rows(t).iter().copied()));
        });
    let selected = FeatureSequence::new(
        selected,
        dim,
        source.frame_rate_hz(),
        source.source_id().to_owned(),
    )?;
    Ok(Selection {
        selected,
        neighbors,
    })
}

/// Applies the interpolation step to a finished selection.
pub fn blend(
    source: &FeatureSequence,
    selection: &Selection,
    lambda: f64,
) -> Result<ConversionResult> {
    check_lambda(lambda)?;
    if selection.selected.len() != source.len() || selection.selected.dim() != source.dim() {
        return Err(Error::DimensionMismatch {
            expected: source.as_slice().len(),
            found: selection.selected.as_slice().len(),
        });
    }
    let dim = source.dim();
    let mut out = vec![0.0f32; source.as_slice().len()];
    out.par_chunks_exact_mut(dim)
        .zip(selection.selected.as_slice().par_chunks_exact(dim))
        .zip(source.as_slice().par_chunks_exact(dim))
        .for_each(|((o, s), x)| blend_into(o, s, x, lambda));
    let converted = FeatureSequence::new(
        out,
        dim,
        source.frame_rate_hz(),
        source.source_id().to_owned(),
    )?;
    Ok(ConversionResult {
        converted,
        selected: selection.selected.clone(),
        neighbors: selection.neighbors.clone(),
    })
}

/// Converts with an arbitrary search structure over `db`.
pub fn convert_with<S: NeighborSearch + ?Sized>(
    source: &FeatureSequence,
    db: &UnitDatabase,
    searcher: &S,
    spec: &ConversionSpec,
) -> Result<ConversionResult> {
    check_lambda(spec.lambda)?;
    let selection = select(source, db, searcher, spec.k)?;
    blend(source, &selection, spec.lambda)
}

/// Converts `source` against `db` using the exhaustive definitional search.
pub fn convert(
    source: &FeatureSequence,
    db: &UnitDatabase,
    spec: &ConversionSpec,
) -> Result<ConversionResult> {
    convert_with(source, db, db, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db(rows: &[&[f32]]) -> UnitDatabase {
        let seq = FeatureSequence::from_rows(rows, 50.0, "u").unwrap();
        UnitDatabase::from_sequences([seq], "spk").unwrap()
    }

    #[test]
    fn cosine_distance_cases() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm)
        ));
        assert!(matches!(
            cosine_distance(&[1.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn top_k_hand_computed() {
        let db = db(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let nn = top_k(&[1.0, 0.0], &db, 2).unwrap();
        assert_eq!(nn.iter().map(|n| n.row).collect::<Vec<_>>(), [0, 1]);
        assert_eq!(
            nn.iter().map(|n| n.distance).collect::<Vec<_>>(),
            [0.0, 1.0]
        );
    }

    #[test]
    fn top_k_self_match_and_ties() {
        let db = db(&[&[0.3, 0.4], &[2.0, 2.0], &[1.0, 1.0], &[0.6, 0.8]]);
        let nn = top_k(&[0.6, 0.8], &db, 4).unwrap();
        // rows 0 and 3 differ by an exact power of two; lower row wins the tie
        assert_eq!(nn[0].row, 0);
        assert_eq!(nn[1].row, 3);
        assert_eq!(nn[0].distance, 0.0);
        // rows 1 and 2 also tie
        assert_eq!(nn[2].row, 1);
        assert_eq!(nn[3].row, 2);
    }

    #[test]
    fn top_k_errors() {
        let db = db(&[&[1.0, 0.0]]);
        assert!(matches!(
            top_k(&[1.0, 0.0], &db, 2),
            Err(Error::InvalidK { k: 2, n: 1 })
        ));
        assert!(matches!(
            top_k(&[1.0, 0.0], &db, 0),
            Err(Error::InvalidK { .. })
        ));
        assert!(matches!(top_k(&[0.0, 0.0], &db, 1), Err(Error::ZeroNorm)));
    }

    #[test]
    fn select_unit_averages() {
        let db = db(&[
            &[1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            &[0.0, 0.0, 1.0],
            &[-1.0, 0.0, 0.0],
        ]);
        assert_eq!(
            select_unit(&[0.9, 0.1, 0.0], &db, 1).unwrap(),
            [1.0, 0.0, 0.0]
        );
        assert_eq!(
            select_unit(&[1.0, 1.0, 0.0], &db, 2).unwrap(),
            [0.5, 0.5, 0.0]
        );
    }

    #[test]
    fn interpolate_cases() {
        let s = [2.0f32, -0.0, 3.5];
        let x = [0.1f32, 7.0, -1.0];
        assert_eq!(interpolate(&s, &x, 0.0).unwrap(), x);
        let at_one = interpolate(&s, &x, 1.0).unwrap();
        assert_eq!(
            at_one.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            s.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            interpolate(&[2.0, 2.0], &[0.0, 0.0], 0.5).unwrap(),
            [1.0, 1.0]
        );
        assert!(matches!(
            interpolate(&[1.0], &[1.0, 2.0], 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            interpolate(&[1.0], &[1.0], 1.5),
            Err(Error::InvalidLambda(_))
        ));
    }

    #[test]
    fn convert_endpoints() {
        let rows: Vec<[f32; 3]> = (0..12)
            .map(|i| {
                let f = i as f32;
                [f.sin() + 1.5, (2.0 * f).cos(), 0.3 * f - 1.0]
            })
            .collect();
        let source = FeatureSequence::from_rows(&rows, 50.0, "src").unwrap();
        let db = UnitDatabase::from_sequences([source.clone()], "self").unwrap();

        let r = convert(&source, &db, &ConversionSpec::new(4, 0.0).unwrap()).unwrap();
        assert_eq!(r.converted, source);

        let r = convert(&source, &db, &ConversionSpec::new(1, 1.0).unwrap()).unwrap();
        assert_eq!(r.converted.as_slice(), source.as_slice());
        for t in 0..source.len() {
            assert_eq!(r.neighbor_indices(t), [t]);
        }
    }

    #[test]
    fn convert_errors() {
        let source = FeatureSequence::from_rows(&[[1.0f32, 0.0], [0.0, 0.0]], 50.0, "src").unwrap();
        let d = db(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let err = convert(&source, &d, &ConversionSpec::new(1, 1.0).unwrap()).unwrap_err();
        assert!(
            matches!(err, Error::ZeroNormFrame { frame: 1, ref source_id } if source_id == "src")
        );

        let ok = FeatureSequence::from_rows(&[[1.0f32, 0.0]], 50.0, "src").unwrap();
        assert!(matches!(
            convert(&ok, &d, &ConversionSpec::new(3, 1.0).unwrap()),
            Err(Error::InvalidK { k: 3, n: 2 })
        ));
        let wide = FeatureSequence::from_rows(&[[1.0f32, 0.0, 0.0]], 50.0, "src").unwrap();
        assert!(matches!(
            convert(&wide, &d, &ConversionSpec::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(ConversionSpec::new(0, 0.5).is_err());
        assert!(ConversionSpec::new(4, -0.1).is_err());
        assert!(ConversionSpec::new(4, 1.1).is_err());
        assert!(ConversionSpec::new(4, f64::NAN).is_err());
        let d = ConversionSpec::default();
        assert_eq!((d.k, d.lambda, d.metric), (4, 1.0, Metric::Cosine));
    }
}
