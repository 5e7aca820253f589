//! Counting metrics and per-image evaluation records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::shape(format!("{} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    Ok(())
}

/// `(1/N) Σ |ŷ − y|`.
pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check(preds, gts)?;
    Ok(preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).sum::<f64>() / preds.len() as f64)
}

/// `sqrt((1/N) Σ (ŷ − y)²)`.
pub fn rmse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check(preds, gts)?;
    Ok((preds.iter().zip(gts).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / preds.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub y: f64,
    pub y_hat: f64,
    pub y_vis: f64,
    pub y_hat_vis: f64,
    pub y_occ: f64,
    pub y_hat_occ: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageError {
    pub id: u64,
    pub file_name: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub n_images: usize,
    pub records: Vec<ImageRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<ImageError>,
}

impl MetricsReport {
    /// Sorts records by image id and aggregates totals.
    pub fn from_records(mut records: Vec<ImageRecord>, mut errors: Vec<ImageError>) -> Result<Self> {
        records.sort_by_key(|r| r.id);
        errors.sort_by_key(|e| e.id);
        let preds: Vec<f64> = records.iter().map(|r| r.y_hat).collect();
        let gts: Vec<f64> = records.iter().map(|r| r.y).collect();
        Ok(Self { mae: mae(&preds, &gts)?, rmse: rmse(&preds, &gts)?, n_images: records.len(), records, errors })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(mae(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 4.0], &[2.0, 2.0]).unwrap(), 1.5);
        assert_eq!(mae(&[10.0], &[7.0]).unwrap(), 3.0);
        assert_eq!(rmse(&[1.0, 4.0], &[2.0, 2.0]).unwrap(), 2.5f64.sqrt());
        let e = rmse(&[2.5, 5.5, 0.5], &[1.0, 4.0, -1.0]).unwrap();
        assert!((e - 1.5).abs() < 1e-15);
        assert!(mae(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }
}
