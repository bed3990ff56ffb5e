//! Mechanism analyses: influence of training samples on a convex probe (with
//! an exact leave-one-out oracle), intra-class feature diversity, and
//! utility-weight distributions.

mod influence;
mod stats;

pub use influence::{
    fit_probe, influence_scores, loo_oracle, probe_test_loss, ConvexProbe, InfluenceReport, ProbeFit, LOO_MAX_TRAIN,
};
pub use stats::{
    intra_class_diversity, spearman, weight_histogram, DiversityReport, Histogram, WeightDistribution, WEIGHT_BINS,
};
