//! Failure-mode classification of centroid-moment-tensor earthquakes and
//! permutation-calibrated tests of temporal association between modes.
//!
//! The crate is organised as a pipeline:
//!
//! * [`catalog`]: NDK parsing, magnitude/time filtering, depth classes.
//! * [`tensor`]: principal axes of the moment tensor and the four
//!   classifier features (three axis azimuths, plunge of the smallest axis).
//! * [`classifier`]: mean-difference projection, cross-validated KDE and the
//!   density-crossing threshold that splits each depth class in two.
//! * [`binning`]: 15° regions with 5° sub-cells, equal-fraction time periods
//!   and binary presence series.
//! * [`assoc`]: lagged stacked vectors, 2×2 tables, chi-square and
//!   log-odds statistics calibrated by random permutation.
//! * [`fdr`]: Benjamini–Hochberg selection.
//! * [`synth`]: coupled Markov generators, synthetic catalogs and exact
//!   permutation oracles.
//! * [`pipeline`] and [`plots`]: orchestration, result files and SVG panels.
//!
//! With the default `parallel` feature the Monte Carlo and per-test loops
//! run on rayon; without it the same code runs sequentially. Results are
//! bit-identical either way.

pub mod assoc;
pub mod binning;
pub mod catalog;
pub mod classifier;
pub mod fdr;
pub mod par;
pub mod pipeline;
pub mod plots;
pub mod synth;
pub mod tensor;

pub use assoc::{
    lagged_pair, permutation_calibrate, pooled_control, AssociationResult, Calibration,
    Comparison, ContingencyTable, LaggedPair,
};
pub use binning::{PresenceSeries, RegionAnchor, SeriesMode, Span, SpatialCell};
pub use catalog::{DepthClass, MomentTensorRecord, ParseMode};
pub use classifier::{DensityEstimate, ModeLabel, ProjectionModel};
pub use fdr::{bh_select, FdrOutcome};
pub use pipeline::{RunConfig, RunReport};
pub use tensor::{FeatureVector, MomentTensor, PrincipalAxes};
