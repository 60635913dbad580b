//! Pre-training, fine-tuning benchmarks and post-hoc diagnostics.

mod benchmark;
mod diagnostics;
mod finetune;
mod pretrain;

pub use benchmark::{
    run_benchmark, summarize, write_benchmark_csv, write_summary_csv, BenchmarkReport, BenchmarkRow, BenchmarkSpec,
    Candidate, InitScheme, SummaryRow,
};
pub use diagnostics::{
    bounds_probe, diagnose_dead, diagnose_ds, dump_prediction_density, write_bounds_csv, write_dead_csv,
    write_density_csv, write_ds_csv, BoundsReport, DensityMode, DensityRow, DiagnosticConfig, VertexBoundRow,
};
pub use finetune::{
    accuracy, cross_entropy, finetune_eval, finetune_on, mean_cross_entropy, FinetuneConfig, FinetuneOutcome,
    LabelledSplit,
};
pub use pretrain::{
    pretrain, pretrain_random_label, select_window, write_loss_log, PretrainConfig, PretrainOutcome, WindowRecord,
};

use std::path::Path;

use crate::error::{Error, Result};

/// Formats `x` with six significant digits, switching to exponent form
/// outside `[1e-5, 1e6)` like C's `%g`.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!(
            "{}e{}{:02}",
            trim_zeros(mantissa.to_string()),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len();
        if n == 0 {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std }
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub(crate) fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(0.5), "0.5");
        assert_eq!(sig6(std::f64::consts::PI), "3.14159");
        assert_eq!(sig6(-2.0 / 3.0), "-0.666667");
        assert_eq!(sig6(82.4213), "82.4213");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(999999.7), "1e+06");
        assert_eq!(sig6(1234567.0), "1.23457e+06");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(1.5e-7), "1.5e-07");
        assert_eq!(sig6(f64::NAN), "NaN");
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[7.0]).std, 0.0);
    }
}
