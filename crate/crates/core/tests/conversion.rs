mod common;

use common::*;
use knn_tts::retrieval::{interpolate, ConversionSpec};
use knn_tts::{build_index, convert, convert_with, Error, FeatureSequence, UnitDatabase};
use proptest::prelude::*;

fn rows(n: usize, dim: usize) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(prop_oneof![-4.0f32..-0.05, 0.05f32..4.0], n * dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_is_convex(sel in rows(1, 12), src in rows(1, 12), lambda in 0.0f64..=1.0) {
        let out = interpolate(&sel, &src, lambda).unwrap();
        for ((o, s), x) in out.iter().zip(&sel).zip(&src) {
            prop_assert!(*o >= s.min(*x) && *o <= s.max(*x));
        }
    }

    #[test]
    fn interpolation_endpoints_are_bitwise(sel in rows(1, 12), src in rows(1, 12)) {
        prop_assert_eq!(interpolate(&sel, &src, 0.0).unwrap(), src.clone());
        prop_assert_eq!(interpolate(&sel, &src, 1.0).unwrap(), sel.clone());
    }

    #[test]
    fn converting_a_database_frame_with_one_neighbor_is_identity(
        values in rows(40, 6),
        pick in 0usize..40,
    ) {
        let db = database(values.clone(), 6);
        let t = pick;
        let src = FeatureSequence::new(values[t * 6..(t + 1) * 6].to_vec(), 6, 50.0, "q").unwrap();
        let out = convert(&src, &db, &ConversionSpec::new(1, 1.0).unwrap()).unwrap();
        // duplicates may win the tie with a lower index, but the vector is the same
        prop_assert_eq!(out.converted.as_slice(), src.as_slice());
    }

    #[test]
    fn zero_lambda_returns_source(values in rows(30, 5), src in rows(7, 5), k in 1usize..6) {
        let db = database(values, 5);
        let src = FeatureSequence::new(src, 5, 50.0, "q").unwrap();
        let out = convert(&src, &db, &ConversionSpec::new(k, 0.0).unwrap()).unwrap();
        prop_assert_eq!(out.converted.as_slice(), src.as_slice());
    }
}

#[test]
fn database_order_does_not_change_selection() {
    let mut r = rng(21);
    let dim = 16;
    let values = gaussian_rows(&mut r, 300, dim);
    let seqs: Vec<FeatureSequence> = values
        .chunks(dim * 30)
        .enumerate()
        .map(|(i, c)| FeatureSequence::new(c.to_vec(), dim, 50.0, format!("u{i}")).unwrap())
        .collect();
    let db = UnitDatabase::from_sequences(seqs.clone(), "s").unwrap();
    let mut reversed = seqs;
    reversed.reverse();
    let db_rev = UnitDatabase::from_sequences(reversed, "s").unwrap();
    let src = FeatureSequence::new(gaussian_rows(&mut r, 25, dim), dim, 50.0, "src").unwrap();
    let spec = ConversionSpec::new(4, 1.0).unwrap();
    let a = convert(&src, &db, &spec).unwrap();
    let b = convert(&src, &db_rev, &spec).unwrap();
    for t in 0..src.len() {
        let mut pa: Vec<_> = a
            .neighbor_indices(t)
            .iter()
            .map(|&i| db.provenance(i))
            .collect();
        let mut pb: Vec<_> = b
            .neighbor_indices(t)
            .iter()
            .map(|&i| db_rev.provenance(i))
            .collect();
        pa.sort();
        pb.sort();
        assert_eq!(pa, pb);
    }
    for (x, y) in a.converted.as_slice().iter().zip(b.converted.as_slice()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn index_and_exhaustive_paths_agree() {
    let mut r = rng(22);
    let dim = 32;
    let db = database(gaussian_rows(&mut r, 2000, dim), dim);
    let index = build_index(&db, 300).unwrap();
    let src = FeatureSequence::new(gaussian_rows(&mut r, 120, dim), dim, 50.0, "src").unwrap();
    for k in [1, 4, 8] {
        let spec = ConversionSpec::new(k, 0.6).unwrap();
        let exact = convert(&src, &db, &spec).unwrap();
        let fast = convert_with(&src, &db, &index, &spec).unwrap();
        assert_eq!(exact, fast);
    }
}

#[test]
fn conversion_is_repeatable() {
    let mut r = rng(23);
    let db = database(gaussian_rows(&mut r, 500, 8), 8);
    let src = FeatureSequence::new(gaussian_rows(&mut r, 50, 8), 8, 50.0, "src").unwrap();
    let spec = ConversionSpec::default();
    assert_eq!(
        convert(&src, &db, &spec).unwrap(),
        convert(&src, &db, &spec).unwrap()
    );
}

#[test]
fn output_keeps_source_shape_and_rate() {
    let mut r = rng(24);
    let db = database(gaussian_rows(&mut r, 100, 4), 4);
    let src = FeatureSequence::new(gaussian_rows(&mut r, 9, 4), 4, 100.0, "abc").unwrap();
    let out = convert(&src, &db, &ConversionSpec::new(3, 0.5).unwrap()).unwrap();
    assert_eq!(out.converted.len(), 9);
    assert_eq!(out.converted.dim(), 4);
    assert_eq!(out.converted.frame_rate_hz(), 100.0);
    assert_eq!(out.converted.source_id(), "abc");
    assert_eq!(out.neighbors.len(), 9);
    assert_eq!(out.neighbors.k(), 3);
}

#[test]
fn invalid_settings_are_rejected() {
    let mut r = rng(25);
    let db = database(gaussian_rows(&mut r, 5, 4), 4);
    let src = FeatureSequence::new(gaussian_rows(&mut r, 2, 4), 4, 50.0, "s").unwrap();
    assert!(ConversionSpec::new(0, 1.0).is_err());
    assert!(ConversionSpec::new(1, 1.5).is_err());
    assert!(ConversionSpec::new(1, f64::NAN).is_err());
    let too_many = ConversionSpec {
        k: 6,
        ..ConversionSpec::default()
    };
    assert!(convert(&src, &db, &too_many).is_err());
    let wrong_dim = FeatureSequence::new(vec![1.0; 6], 3, 50.0, "w").unwrap();
    assert!(convert(&wrong_dim, &db, &ConversionSpec::default()).is_err());
    let zero =
        FeatureSequence::new(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 4, 50.0, "z").unwrap();
    let err = convert(&zero, &db, &ConversionSpec::new(1, 1.0).unwrap()).unwrap_err();
    assert!(matches!(err, Error::ZeroNormFrame { frame: 1, ref source_id } if source_id == "z"));
    assert_eq!(err.kind(), "zero_norm");
}
