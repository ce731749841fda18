//! Nuclear morphometry from instance masks and the subtype comparison.

mod features;
mod stats;

pub use features::{
    convex_hull, nuclei_csv, nucleus_features, patch_aggregate, NucleusRecord, PatchAggregate,
};
pub use stats::{
    box_plot, compare_groups, welch_t_test, BoxPlot, ClassSummary, FeatureComparison, GroupInput,
    GroupStats, Pooling, WelchResult,
};
