use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Mean and population standard deviation (two-pass).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("mean_std of an empty set"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub t: f64,
    pub df: usize,
    /// One-sided p-value for `mean(a - b) > 0`.
    pub p_greater: f64,
}

/// Paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("paired test needs two equal-length samples of size >= 2"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let df = d.len() - 1;
    if sd == 0.0 {
        let (t, p) = match mean.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => (f64::INFINITY, 0.0),
            Some(std::cmp::Ordering::Less) => (f64::NEG_INFINITY, 1.0),
            _ => (0.0, 0.5),
        };
        return Ok(PairedTest { mean_diff: mean, t, df, p_greater: p });
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(PairedTest { mean_diff: mean, t, df, p_greater: 1.0 - dist.cdf(t) })
}
