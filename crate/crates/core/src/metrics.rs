//! Gaps, difficulty levels, and confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least 2 values for an interval, got {0}")]
    InsufficientData(usize),
    #[error("unknown difficulty level `{0}` (expected hard, medium, easy or trivial)")]
    UnknownLevel(String),
    #[error("confidence must lie in (0, 1), got {0}")]
    BadConfidence(f64),
}

/// Degrees of freedom of the interval quantile. Fixed regardless of how many
/// values are aggregated: the evaluation protocol always quotes a 3-dof t.
pub const CI_DOF: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyLevel {
    pub name: String,
    pub rho: f64,
}

pub const LEVELS: [(&str, f64); 4] = [("hard", 0.25), ("medium", 0.50), ("easy", 0.75), ("trivial", 0.90)];

pub fn level_of(name: &str) -> Result<DifficultyLevel, MetricsError> {
    LEVELS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, rho)| DifficultyLevel {
            name: n.to_string(),
            rho: *rho,
        })
        .ok_or_else(|| MetricsError::UnknownLevel(name.to_string()))
}

/// Name of the registered level at exactly `rho`, if any.
pub fn level_name(rho: f64) -> Option<&'static str> {
    LEVELS.iter().find(|(_, r)| *r == rho).map(|(n, _)| *n)
}

pub fn gap(rho: f64, rho_hat: f64) -> f64 {
    (rho_hat - rho).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub rho: f64,
    pub rho_hat: f64,
    pub gap: f64,
}

impl GapRecord {
    pub fn new(rho: f64, rho_hat: f64) -> Self {
        GapRecord {
            rho,
            rho_hat,
            gap: gap(rho, rho_hat),
        }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Two-sided t quantile at `confidence` with [`CI_DOF`] degrees of freedom.
pub fn t_quantile(confidence: f64) -> Result<f64, MetricsError> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(MetricsError::BadConfidence(confidence));
    }
    let t = StudentsT::new(0.0, 1.0, CI_DOF).expect("valid t parameters");
    Ok(t.inverse_cdf(0.5 + confidence / 2.0))
}

/// `(mean, t · s / √n)` with `s` the sample standard deviation.
pub fn aggregate_ci(values: &[f64], confidence: f64) -> Result<(f64, f64), MetricsError> {
    if values.len() < 2 {
        return Err(MetricsError::InsufficientData(values.len()));
    }
    let n = values.len() as f64;
    let m = mean(values);
    if values.iter().all(|v| *v == values[0]) {
        // skip the rounding noise of the summed mean
        return Ok((values[0], 0.0));
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((m, t_quantile(confidence)? * var.sqrt() / n.sqrt()))
}

/// One row of the final report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub level: String,
    pub rho: f64,
    pub mean_rho_hat: f64,
    pub mean_gap: f64,
    /// `None` when fewer than two seeds were run.
    pub ci_half_width: Option<f64>,
    pub n_seeds: usize,
}

impl ReportRow {
    pub fn from_seeds(level: &str, rho: f64, rho_hats: &[f64]) -> Result<Self, MetricsError> {
        if rho_hats.is_empty() {
            return Err(MetricsError::InsufficientData(0));
        }
        let gaps: Vec<f64> = rho_hats.iter().map(|r| gap(rho, *r)).collect();
        let ci = match aggregate_ci(&gaps, 0.95) {
            Ok((_, hw)) => Some(hw),
            Err(MetricsError::InsufficientData(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(ReportRow {
            level: level.to_string(),
            rho,
            mean_rho_hat: mean(rho_hats),
            mean_gap: mean(&gaps),
            ci_half_width: ci,
            n_seeds: rho_hats.len(),
        })
    }
}

pub const CSV_HEADER: &str = "level,rho,mean_rho_hat,mean_gap,ci_half_width,n_seeds";

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let ci = r.ci_half_width.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{}\n",
            r.level, r.rho, r.mean_rho_hat, r.mean_gap, ci, r.n_seeds
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaps() {
        assert!((gap(0.25, 0.30) - 0.05).abs() < 1e-12);
        assert_eq!(gap(0.4, 0.4), 0.0);
        assert!((gap(0.9, 0.25) - 0.65).abs() < 1e-12);
    }

    #[test]
    fn levels() {
        assert_eq!(level_of("hard").unwrap().rho, 0.25);
        assert_eq!(level_of("trivial").unwrap().rho, 0.90);
        assert_eq!(level_of("extreme"), Err(MetricsError::UnknownLevel("extreme".into())));
        assert_eq!(level_name(0.5), Some("medium"));
    }

    #[test]
    fn interval_edge_cases() {
        assert_eq!(aggregate_ci(&[0.4], 0.95), Err(MetricsError::InsufficientData(1)));
        assert_eq!(aggregate_ci(&[0.7, 0.7], 0.95).unwrap(), (0.7, 0.0));
        assert_eq!(aggregate_ci(&[0.2, 0.2, 0.2], 0.95).unwrap().1, 0.0);
    }

    #[test]
    fn single_seed_row_has_no_interval() {
        let row = ReportRow::from_seeds("hard", 0.25, &[0.3]).unwrap();
        assert_eq!(row.ci_half_width, None);
        assert!(to_csv(&[row]).lines().nth(1).unwrap().contains(",,1"));
    }
}
