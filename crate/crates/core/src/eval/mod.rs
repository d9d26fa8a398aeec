//! Answer metrics and batch evaluation.

pub mod bench;
pub mod metrics;

pub use bench::{
    parse_k_list, run_eval, sweep_table, EvalError, EvalExample, EvalSettings, ExampleResult, FailedExample, Metric,
    MetricReport,
};
pub use metrics::{
    bleu, discrepancy, discrepancy_batch, discrepancy_from_cosine, exact_match, mc_accuracy, mc_score,
    normalize_tokens, rouge_l, token_f1, DiscrepancyCase, DiscrepancySummary, LabelExtractor, McScore,
};
