//! CSV helpers shared by the metrics and benchmark writers.

use std::path::Path;

use crate::error::Result;

/// `x` rounded to 6 significant digits, printed without an exponent.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let r: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{r}")
}

/// A table that can be written as a headed CSV file.
pub trait CsvReport {
    fn header(&self) -> Vec<&'static str>;
    fn rows(&self) -> Vec<Vec<String>>;
}

/// Header row plus one line per entry, in the report's own order.
pub fn emit_csv<R: CsvReport + ?Sized>(report: &R, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(report.header())?;
    for row in report.rows() {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(2.71828459), "2.71828");
        assert_eq!(sig6(123456789.0), "123457000");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(-2.5), "-2.5");
        assert_eq!(sig6(f64::NAN), "NaN");
    }
}
