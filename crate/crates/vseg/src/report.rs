//! Plain-text tables in the layout of the validation/test comparison.

use std::fmt::Write;

use vseg_core::model::Variant;
use vseg_core::train::Metrics;

/// One table row: means over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub variant: Variant,
    pub val_accuracy: f64,
    pub val_dsc: f64,
    pub test_accuracy: f64,
    pub test_dsc: f64,
}

const METHOD_WIDTH: usize = 17;

pub fn comparison_table(rows: &[Row]) -> String {
    let mut s = String::new();
    let w = METHOD_WIDTH;
    writeln!(s, "{:<w$} | {:^19} | {:^19}", "Method", "Validation set", "Test set").unwrap();
    writeln!(s, "{:<w$} | {:<9} {:<9} | {:<9} {:<9}", "", "Accuracy", "DSC", "Accuracy", "DSC").unwrap();
    writeln!(s, "{}-+-{}-+-{}", "-".repeat(w), "-".repeat(19), "-".repeat(19)).unwrap();
    for r in rows {
        writeln!(
            s,
            "{:<w$} | {:<9.4} {:<9.4} | {:<9.4} {:<9.4}",
            r.variant.display_name(),
            r.val_accuracy,
            r.val_dsc,
            r.test_accuracy,
            r.test_dsc
        )
        .unwrap();
    }
    s
}

/// Header and row for a single evaluated checkpoint.
pub fn eval_table(label: &str, m: &Metrics) -> String {
    let w = METHOD_WIDTH;
    let mut s = String::new();
    writeln!(s, "{:<w$} | {:<9} {:<9} {:<9}", "Method", "Accuracy", "Soft DSC", "Hard DSC").unwrap();
    writeln!(s, "{:<w$} | {:<9.4} {:<9.4} {:<9.4}", label, m.accuracy, m.soft_dsc, m.hard_dsc).unwrap();
    s
}
