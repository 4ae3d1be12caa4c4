//! Retrieval engine for kNN-based voice conversion over self-supervised speech
//! features.
//!
//! * [`features`]: feature sequences, the KNNF file format, unit databases.
//! * [`retrieval`]: cosine kNN unit selection and λ-interpolation.
//! * [`index`]: normalized-row index for fast batched exact search.
//! * [`eval`]: SECS, similarity matrices, confidence intervals, λ sweeps and
//!   reference-duration ablations.
//! * [`synth`]: synthetic speaker/phone feature generator with known ground
//!   truth.

// norm checks are written `!(x >= MIN_NORM)` so that NaN fails them too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod features;
pub mod index;
mod kernel;
pub mod retrieval;
pub mod synth;

pub use error::{Error, Result};
pub use features::{
    build_database, database_duration, load_database, load_features, save_database, save_features,
    subset_database, FeatureSequence, SubsetSpec, UnitDatabase,
};
pub use index::{batch_search, build_index, SearchIndex};
pub use retrieval::{
    convert, convert_with, cosine_distance, interpolate, select_unit, top_k, ConversionResult,
    ConversionSpec, Metric, Neighbor, NeighborSearch, Neighbors,
};
