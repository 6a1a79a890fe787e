//! Linear weighted kappa, patient-level prediction, cross-site matrices,
//! summaries and reports.

mod kappa;
mod matrix;
mod report;

pub use kappa::{weighted_kappa, weighted_kappa_with, ConfusionMatrix, Weighting};
pub use matrix::{
    cross_site_matrix, patient_level_predict, patient_prediction, site_kappa, summarize, KappaMatrix,
    PatientPrediction, SummaryStats,
};
pub use report::{
    build_summary, emit_report, format_sig6, matrix_from_csv, matrix_to_csv, render_report, ReportSummary,
};
