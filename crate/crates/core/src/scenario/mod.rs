//! The experiment matrix: which b-values a classifier was trained on, what
//! the inference protocol provides, and how each evaluation mode fares.

mod report;
mod run;
mod spec;

pub use report::{csv_header, csv_row, emit_report, load_report, marks, render_csv, summarize, Report, Summary, REPORT_CSV, REPORT_JSON, SUMMARY_JSON};
pub use run::{
    apply_holm, canonical_order, fold_seed, run_matrix, run_scenario, slot_altered, threshold_baseline, Comparison, MissingFill,
    ModeResult, ScenarioConfig, ScenarioResult, TESTED_PAIRS,
};
pub use spec::{enumerate_scenarios, missing_for, shifted_for, Mode, ScenarioKind, ScenarioSpec};
