//! Metrics, benchmark runners, report emission, and embedding export.

mod bench;
mod metrics;
mod report;

pub use bench::{
    cluster_count_sensitivity, export_embeddings, run_closeset_benchmark, run_openset_benchmark,
    BenchOptions, ClusterMetrics, MethodName, RunRecord, SensitivityRow,
};
pub use metrics::{
    clustering_acc, macro_f1_paper, macro_f1_standard, micro_f1, nmi, per_class_recall,
    MetricReport,
};
pub use report::{label_histogram_csv, records_to_csv, summary_markdown, MethodSummary};
