use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::Task;
use crate::stats;

pub const NUM_SIGNALS: usize = 3;
pub const FEATURES_PER_SIGNAL: usize = 4;
pub const NUM_FEATURES: usize = NUM_SIGNALS * FEATURES_PER_SIGNAL;

/// Number of sign changes of `x - mean(x)`, where zero counts as positive.
pub fn mean_crossings(x: &[f64]) -> usize {
    let Some(m) = stats::mean(x) else { return 0 };
    x.windows(2).filter(|w| (w[0] - m >= 0.0) != (w[1] - m >= 0.0)).count()
}

/// Window features of one respiratory signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalFeatures {
    pub mean_crossings: f64,
    pub variance: f64,
    pub std: f64,
    pub snr: f64,
}

impl SignalFeatures {
    pub fn to_array(self) -> [f64; FEATURES_PER_SIGNAL] {
        [self.mean_crossings, self.variance, self.std, self.snr]
    }
}

pub fn signal_features(values: &[f64], snr: f64) -> Result<SignalFeatures> {
    if values.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: values.len() });
    }
    let variance = stats::sample_variance(values);
    Ok(SignalFeatures { mean_crossings: mean_crossings(values) as f64, variance, std: variance.sqrt(), snr })
}

/// Features of the TA_FIR, RM_NIR and RM_FIR windows, in that order. A
/// missing block marks a signal that was unavailable for the window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub blocks: [Option<SignalFeatures>; NUM_SIGNALS],
}

impl FeatureVector {
    pub fn new(blocks: [Option<SignalFeatures>; NUM_SIGNALS]) -> Self {
        FeatureVector { blocks }
    }

    pub fn is_complete(&self) -> bool {
        self.blocks.iter().all(Option::is_some)
    }

    /// Flattened features; missing blocks become `NaN`.
    pub fn to_row(&self) -> [f64; NUM_FEATURES] {
        let mut row = [f64::NAN; NUM_FEATURES];
        for (b, block) in self.blocks.iter().enumerate() {
            if let Some(f) = block {
                row[b * FEATURES_PER_SIGNAL..(b + 1) * FEATURES_PER_SIGNAL].copy_from_slice(&f.to_array());
            }
        }
        row
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Breathing,
    Apnea,
}

impl Label {
    pub fn is_apnea(self) -> bool {
        self == Label::Apnea
    }

    pub fn from_apnea(apnea: bool) -> Self {
        if apnea { Label::Apnea } else { Label::Breathing }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub features: FeatureVector,
    pub label: Label,
    pub subject: String,
    pub task: Task,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn crossing_examples() {
        assert_eq!(mean_crossings(&[1.0, -1.0, 1.0, -1.0]), 3);
        let c = signal_features(&[0.7; 20], 0.0).unwrap();
        assert_eq!((c.mean_crossings, c.variance, c.std), (0.0, 0.0, 0.0));
        assert!(matches!(signal_features(&[1.0], 0.0), Err(Error::TooShort { .. })));
    }

    #[test]
    fn sine_window_features() {
        let fs = 8.7;
        let x: Vec<f64> = (0..(12.0 * fs) as usize).map(|i| (2.0 * PI * 0.167 * i as f64 / fs).sin()).collect();
        let f = signal_features(&x, 1.0).unwrap();
        // Direct evaluation of the sample variance and crossing count.
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        assert!((f.variance - var).abs() < 1e-12);
        assert!((f.variance - 0.5).abs() < 0.05);
        assert!((3.0..=5.0).contains(&f.mean_crossings));
    }

    #[test]
    fn missing_blocks_are_nan() {
        let s = signal_features(&[0.0, 1.0, 0.0], 2.0).unwrap();
        let fv = FeatureVector::new([Some(s), None, Some(s)]);
        let row = fv.to_row();
        assert!(!fv.is_complete());
        assert!(row[4..8].iter().all(|v| v.is_nan()));
        assert_eq!(row[11], 2.0);
    }
}
