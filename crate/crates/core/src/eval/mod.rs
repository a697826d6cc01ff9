//! Detection metrics, ablation harness and learning-curve tooling.

pub mod ablation;
pub mod ap;
pub mod curves;
pub mod fp;
pub mod report;

pub use ap::{average_precision, mean_ap, ClassMatch, Tagged};
pub use fp::{false_positive_ratio, FpRatio};
pub use report::{evaluate_detector, EvalResult};
pub use ablation::{default_grid, domain_generalization_eval, run_ablations, tail_fp_ratio, AblationReport, AblationRow, RowOutcome, Variant};
pub use curves::{extract_curves, parse_metrics_log, svg_line_plot, Curves};
