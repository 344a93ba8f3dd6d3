//! Unlearning and editing metrics, the forget-quality test and reports.

pub mod evaluate;
pub mod metrics;

pub use evaluate::{
    audit_records, edit_accuracy, edit_metrics, evaluate_full, forget_truth_ratios, locality_references,
    locality_scores, report_from_audit, EditMetrics, EvalReport, MetricTriple, RecordAudit, MAX_ANSWER_TOKENS,
    SIGNIFICANCE,
};
pub use metrics::{
    forget_quality, kolmogorov_q, ks_two_sample, model_utility, rouge_l, truth_ratio_forget, truth_ratio_raw,
    truth_ratio_utility, KsResult, KS_EXACT_LIMIT,
};
