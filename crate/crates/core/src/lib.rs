//! Objective comparison of striated toolmarks.
//!
//! The pipeline runs from 3-D heightmaps to decisions: a profile is taken
//! from each scan ([`profile_io`]), detrended into a signature
//! ([`extraction`]), registered and scored against other signatures
//! ([`similarity`]), grouped by source ([`clustering`]), and the score
//! distributions of same-source and different-source pairs are modeled
//! ([`densities`]) to yield thresholds and likelihood ratios
//! ([`likelihood`]). [`evaluation`] measures the resulting classifier and
//! [`synthgen`] produces labeled synthetic data for every stage.

pub mod clustering;
pub mod densities;
pub mod evaluation;
pub mod extraction;
pub mod likelihood;
pub mod meta;
pub mod profile_io;
pub mod similarity;
pub mod synthgen;

pub use clustering::{pam, select_k, silhouette, Clustering, Dissimilarity, SilhouetteReport};
pub use densities::{
    collect_scores, fit_beta, fit_densities, intersection_threshold, AggregationMode, BetaFit, ScoreDensities,
};
pub use evaluation::{crossvalidate, length_sweep, roc_area, roc_curve, EvaluationReport};
pub use extraction::{extract_signature, Signature};
pub use likelihood::{classify, compare_marks, likelihood_ratio, verbal_scale};
pub use meta::{Direction, Side, SizeClass, SourceId, SourceMeta};
pub use profile_io::{extract_profile, load_scan, save_scan, Profile, ScanFormat, SurfaceScan};
pub use similarity::{align, similarity_matrix, similarity_score, Alignment, SimilarityMatrix};
pub use synthgen::{calibrate, generate_dataset, GeneratorConfig, Preset};
