//! Plain-text number formatting shared by the CSV and JSON writers.

/// IEEE double with 17 significant digits, e.g. `1.0000000000000000e0`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes one CSV row of 17-significant-digit doubles.
pub fn csv_row(values: &[f64]) -> String {
    let cells: Vec<String> = values.iter().map(|&v| fmt_f64(v)).collect();
    cells.join(",")
}
