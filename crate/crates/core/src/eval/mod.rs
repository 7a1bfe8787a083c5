//! Segmentation and translation metrics, statistics and experiment reports.

mod experiment;
mod metrics;
mod report;
mod stats;

pub use experiment::{
    compare, evaluate, metric_value, slice_seed, summarize, Comparison, Conventions, Correlation, EvalOptions,
    Evaluation, MetricsRecord, ModelPredictor, OraclePredictor, Predictor, SliceMaps, Summary,
};
pub use metrics::{dice, dice3d, iou, mse, ssim, SsimConfig};
pub use report::{
    evaluate_experiment, read_metrics, write_metrics, write_report, ReportPaths, HEATMAP_DIR, HISTOGRAM_FILE,
    METRICS_FILE, SUMMARY_FILE, VARIANCE_DIR,
};
pub use stats::{mean_std, paired_ttest, pearson, ranks, spearman, MeanStd, TTest};
