//! Classification and ranking metrics plus interpretability tools.

mod analysis;
mod confusion;
mod ranking;

pub use analysis::{
    centered_window, gradient_times_input, input_gradient_attribution, motif_logo, variant_delta, MotifLogo, Mutation,
    ScoredPeptide, VariantEffect,
};
pub use confusion::{confusion_metrics, macro_average, BinaryCounts, ConfusionMetrics, MacroAverage};
pub use ranking::{auprc, auroc, auroc_trapezoid, group_rankings, mean_average_precision, RankedItem, RankedList};
