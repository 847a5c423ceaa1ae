use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature standardization learned from training rows.
///
/// Non-finite entries are treated as missing: they are ignored while fitting
/// and mapped to 0 (the training mean) by [`Scaler::transform`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for features without variance.
    pub std: Vec<f64>,
    /// Indices of features that had zero variance in training.
    pub constant_features: Vec<usize>,
}

impl Scaler {
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Scaler> {
        if rows.len() < 2 {
            return Err(Error::InsufficientData(format!("scaler needs >= 2 rows, got {}", rows.len())));
        }
        let dim = rows[0].as_ref().len();
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(Error::InvalidParameter("rows have different lengths".into()));
        }
        let mut mean = vec![0.0; dim];
        let mut std = vec![1.0; dim];
        let mut constant_features = Vec::new();
        for j in 0..dim {
            let col: Vec<f64> = rows.iter().map(|r| r.as_ref()[j]).filter(|v| v.is_finite()).collect();
            if col.is_empty() {
                constant_features.push(j);
                continue;
            }
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
            mean[j] = m;
            if var > 0.0 && var.is_finite() {
                std[j] = var.sqrt();
            } else {
                log::warn!("feature {j} has zero variance in training data; leaving it unscaled");
                constant_features.push(j);
            }
        }
        Ok(Scaler { mean, std, constant_features })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .enumerate()
            .map(|(j, (v, (m, s)))| {
                if !v.is_finite() {
                    0.0
                } else if self.constant_features.contains(&j) {
                    *v
                } else {
                    (v - m) / s
                }
            })
            .collect()
    }
}
