//! Verification statistics, detection metrics and evaluation protocols.

mod detection;
mod protocol;
mod report;
mod stats;

pub use detection::{average_precision, iou, mean_average_precision, Detection};
pub use protocol::{
    protocol_pairs, verification_protocol, MatcherScorer, PairCounts, PairRecord, PixelScorer, Protocol, Scorer, View,
};
pub use report::{environment_rows, histogram_svg, metrics_csv, scatter_svg, scores_text, MetricRow};
pub use report::write_text;
pub use stats::{
    auc, bootstrap_env, bootstrap_stat, decidability, kolmogorov_survival, ks_distance, ks_statistic, pearson,
    DecisionEnvironment,
};
