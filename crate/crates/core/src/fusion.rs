//! Rate fusion across the three camera signals.
//!
//! The signal-quality-based (SQb) fusion turns per-source SNRs into integer
//! weights `w_i = round(M · SNR_i / Σ SNR)` with `M = 24` and takes the lower
//! weighted median of the per-source rates. Quantizing the weights is what
//! gives `M` an effect: with real-valued weights the weighted median would be
//! invariant to any common scale.
//!
//! The final combiner ([`S2Combiner`]) arbitrates between the fused rate and
//! the apnea detector's decision.

use serde::{Deserialize, Serialize};

use crate::dsp::SpectralEstimate;
use crate::error::{Error, Result};
use crate::stats;

/// Weight budget distributed across sources.
pub const SQB_SCALE: f64 = 24.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqbWeights {
    pub weights: Vec<u32>,
    /// Every SNR was zero; weights fell back to 1 each.
    pub uniform_fallback: bool,
}

/// Integer fusion weights from non-negative SNRs.
pub fn sqb_weights(snrs: &[f64]) -> Result<SqbWeights> {
    if snrs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if snrs.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidParameter(format!("SNRs must be finite and >= 0: {snrs:?}")));
    }
    let total: f64 = snrs.iter().sum();
    if total <= 0.0 {
        return Ok(SqbWeights { weights: vec![1; snrs.len()], uniform_fallback: true });
    }
    let mut weights: Vec<u32> = snrs.iter().map(|s| (SQB_SCALE * s / total).round() as u32).collect();
    if weights.iter().all(|w| *w == 0) {
        let best = snrs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        weights[best] = 1;
    }
    Ok(SqbWeights { weights, uniform_fallback: false })
}

/// Lower weighted median: the smallest value whose cumulative weight reaches
/// half the total.
pub fn weighted_median(values: &[f64], weights: &[u32]) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::InvalidParameter("values/weights length mismatch".into()));
    }
    let total: u64 = weights.iter().map(|&w| w as u64).sum();
    if total == 0 {
        return Err(Error::InvalidParameter("weights sum to zero".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut cum = 0u64;
    for i in order {
        cum += weights[i] as u64;
        // cum >= total / 2, kept in integers.
        if 2 * cum >= total {
            return Ok(values[i]);
        }
    }
    unreachable!("cumulative weight reaches the total")
}

/// Up to three per-source estimates for one window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionInput {
    pub estimates: Vec<SpectralEstimate>,
}

impl FusionInput {
    pub fn new(estimates: impl IntoIterator<Item = SpectralEstimate>) -> Self {
        FusionInput { estimates: estimates.into_iter().collect() }
    }

    fn valid(&self) -> Vec<&SpectralEstimate> {
        self.estimates.iter().filter(|e| e.rr.is_finite() && e.snr.is_finite() && e.snr >= 0.0).collect()
    }
}

/// SNR-weighted median of the per-source rates.
pub fn sqb_fuse(input: &FusionInput) -> Result<f64> {
    let valid = input.valid();
    match valid.len() {
        0 => Err(Error::NoEstimate),
        1 => Ok(valid[0].rr),
        _ => {
            let snrs: Vec<f64> = valid.iter().map(|e| e.snr).collect();
            let w = sqb_weights(&snrs)?;
            let rrs: Vec<f64> = valid.iter().map(|e| e.rr).collect();
            weighted_median(&rrs, &w.weights)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMode {
    Mean,
    Median,
}

/// Unweighted mean or median of the valid per-source rates.
pub fn baseline_fuse(input: &FusionInput, mode: BaselineMode) -> Result<f64> {
    let rrs: Vec<f64> = input.valid().iter().map(|e| e.rr).collect();
    match mode {
        BaselineMode::Mean => stats::mean(&rrs),
        BaselineMode::Median => stats::median(&rrs),
    }
    .ok_or(Error::NoEstimate)
}

/// Output of the apnea detector for one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApneaDecision {
    pub apnea: bool,
    pub posterior: f64,
}

/// How a detected apnea modifies the reported rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum S2Strategy {
    /// Report 0 breaths/min during detected apnea.
    #[default]
    SuppressToZero,
    /// Keep reporting the last rate observed before the apnea.
    HoldLast,
    /// Report the fused rate unchanged, only setting the flag.
    MarkOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionDiagnostic {
    MissingDetector,
    NoEstimate,
}

/// Fused respiratory activity for one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaEstimate {
    pub timestamp: f64,
    /// Final rate in breaths/min; `None` when no source produced an estimate
    /// and no apnea was detected.
    pub rr: Option<f64>,
    pub apnea: bool,
    pub apnea_posterior: Option<f64>,
    pub rr_sqb: Option<f64>,
    pub per_source: Vec<SpectralEstimate>,
    pub diagnostics: Vec<FusionDiagnostic>,
}

/// Stateful final-stage combiner; state is only used by
/// [`S2Strategy::HoldLast`].
#[derive(Debug, Clone, Default)]
pub struct S2Combiner {
    strategy: S2Strategy,
    last_breathing_rr: Option<f64>,
}

impl S2Combiner {
    pub fn new(strategy: S2Strategy) -> Self {
        S2Combiner { strategy, last_breathing_rr: None }
    }

    pub fn fuse(
        &mut self,
        timestamp: f64,
        input: &FusionInput,
        decision: Option<ApneaDecision>,
    ) -> RaEstimate {
        let mut diagnostics = Vec::new();
        let rr_sqb = match sqb_fuse(input) {
            Ok(r) => Some(r),
            Err(_) => {
                diagnostics.push(FusionDiagnostic::NoEstimate);
                None
            }
        };
        if decision.is_none() {
            diagnostics.push(FusionDiagnostic::MissingDetector);
        }
        let apnea = decision.is_some_and(|d| d.apnea);
        let rr = if apnea {
            match self.strategy {
                S2Strategy::SuppressToZero => Some(0.0),
                S2Strategy::HoldLast => self.last_breathing_rr.or(rr_sqb),
                S2Strategy::MarkOnly => rr_sqb,
            }
        } else {
            if rr_sqb.is_some() {
                self.last_breathing_rr = rr_sqb;
            }
            rr_sqb
        };
        RaEstimate {
            timestamp,
            rr,
            apnea,
            apnea_posterior: decision.map(|d| d.posterior),
            rr_sqb,
            per_source: input.estimates.clone(),
            diagnostics,
        }
    }
}

/// One-shot suppress-to-zero combination of a fused rate and a decision.
pub fn s2_fuse(timestamp: f64, rr_sqb: f64, decision: Option<ApneaDecision>) -> RaEstimate {
    let input = FusionInput::new([SpectralEstimate {
        source: crate::timebase::SignalSource::TaFir,
        rr: rr_sqb,
        peak_freq: rr_sqb / 60.0,
        snr: 1.0,
    }]);
    let mut est = S2Combiner::new(S2Strategy::SuppressToZero).fuse(timestamp, &input, decision);
    est.per_source.clear();
    est
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timebase::SignalSource;
    use proptest::prelude::*;

    fn est(rr: f64, snr: f64) -> SpectralEstimate {
        SpectralEstimate { source: SignalSource::TaFir, rr, peak_freq: rr / 60.0, snr }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(sqb_weights(&[1.0, 1.0, 2.0]).unwrap().weights, vec![6, 6, 12]);
        assert_eq!(sqb_weights(&[1.0, 1.0, 1.0]).unwrap().weights, vec![8, 8, 8]);
        assert_eq!(sqb_weights(&[0.01, 0.01, 10.0]).unwrap().weights, vec![0, 0, 24]);
        let z = sqb_weights(&[0.0, 0.0, 0.0]).unwrap();
        assert!(z.uniform_fallback);
        assert_eq!(z.weights, vec![1, 1, 1]);
    }

    #[test]
    fn all_rounding_to_zero_keeps_best_source() {
        let snrs = vec![1.0; 60];
        let mut s = snrs.clone();
        s[7] = 1.2;
        let w = sqb_weights(&s).unwrap();
        assert_eq!(w.weights.iter().sum::<u32>(), 1);
        assert_eq!(w.weights[7], 1);
    }

    #[test]
    fn weighted_median_examples() {
        assert_eq!(weighted_median(&[10.0, 12.0, 30.0], &[1, 1, 22]).unwrap(), 30.0);
        assert_eq!(weighted_median(&[8.0, 10.0, 12.0], &[1, 1, 1]).unwrap(), 10.0);
        assert_eq!(weighted_median(&[10.0, 20.0], &[1, 1]).unwrap(), 10.0);
    }

    #[test]
    fn sqb_examples() {
        let input = FusionInput::new([est(10.0, 5.0), est(10.0, 5.0), est(24.0, 0.1)]);
        assert_eq!(sqb_fuse(&input).unwrap(), 10.0);
        let same = FusionInput::new([est(13.2, 0.3), est(13.2, 9.0), est(13.2, 1.0)]);
        assert_eq!(sqb_fuse(&same).unwrap(), 13.2);
        assert_eq!(sqb_fuse(&FusionInput::new([est(14.0, 0.2)])).unwrap(), 14.0);
        assert!(matches!(sqb_fuse(&FusionInput::default()), Err(Error::NoEstimate)));
    }

    #[test]
    fn baseline_examples() {
        let input = FusionInput::new([est(10.0, 1.0), est(10.0, 1.0), est(40.0, 1.0)]);
        assert_eq!(baseline_fuse(&input, BaselineMode::Median).unwrap(), 10.0);
        assert_eq!(baseline_fuse(&input, BaselineMode::Mean).unwrap(), 20.0);
        let one = FusionInput::new([est(17.0, 1.0)]);
        assert_eq!(baseline_fuse(&one, BaselineMode::Mean).unwrap(), 17.0);
    }

    #[test]
    fn s2_examples() {
        let r = s2_fuse(12.0, 10.4, Some(ApneaDecision { apnea: false, posterior: 0.1 }));
        assert_eq!(r.rr, Some(10.4));
        assert!(!r.apnea);
        let r = s2_fuse(12.0, 9.8, Some(ApneaDecision { apnea: true, posterior: 0.9 }));
        assert_eq!(r.rr, Some(0.0));
        assert!(r.apnea);
        assert_eq!(r.apnea_posterior, Some(0.9));
        let r = s2_fuse(12.0, 9.8, None);
        assert_eq!(r.rr, Some(9.8));
        assert!(r.diagnostics.contains(&FusionDiagnostic::MissingDetector));
    }

    #[test]
    fn other_strategies() {
        let input = FusionInput::new([est(11.0, 2.0)]);
        let yes = Some(ApneaDecision { apnea: true, posterior: 0.8 });
        let no = Some(ApneaDecision { apnea: false, posterior: 0.2 });
        let mut hold = S2Combiner::new(S2Strategy::HoldLast);
        hold.fuse(0.0, &FusionInput::new([est(14.0, 2.0)]), no);
        assert_eq!(hold.fuse(1.0, &input, yes).rr, Some(14.0));
        let mut mark = S2Combiner::new(S2Strategy::MarkOnly);
        let r = mark.fuse(1.0, &input, yes);
        assert_eq!((r.rr, r.apnea), (Some(11.0), true));
    }

    /// Independent route: expand integer weights into repeated values and take
    /// the lower median of the sorted expansion.
    fn expanded_lower_median(values: &[f64], weights: &[u32]) -> f64 {
        let mut all: Vec<f64> = values
            .iter()
            .zip(weights)
            .flat_map(|(v, w)| std::iter::repeat_n(*v, *w as usize))
            .collect();
        all.sort_by(f64::total_cmp);
        all[(all.len() - 1) / 2]
    }

    proptest! {
        #[test]
        fn equal_weights_give_lower_median(v in proptest::collection::vec(1.0f64..40.0, 1..8), w in 1u32..5) {
            let weights = vec![w; v.len()];
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            prop_assert_eq!(weighted_median(&v, &weights).unwrap(), s[(s.len() - 1) / 2]);
        }

        #[test]
        fn weighted_median_matches_expansion(v in proptest::collection::vec(1.0f64..40.0, 1..6),
                                             w in proptest::collection::vec(0u32..30, 6)) {
            let mut weights = w[..v.len()].to_vec();
            if weights.iter().all(|x| *x == 0) { weights[0] = 1; }
            prop_assert_eq!(weighted_median(&v, &weights).unwrap(), expanded_lower_median(&v, &weights));
        }

        #[test]
        fn sqb_output_is_an_input(rr in proptest::collection::vec(1.0f64..45.0, 3), snr in proptest::collection::vec(0.0f64..50.0, 3)) {
            let input = FusionInput::new(rr.iter().zip(&snr).map(|(r, s)| est(*r, *s)));
            let out = sqb_fuse(&input).unwrap();
            prop_assert!(rr.contains(&out));
        }

        #[test]
        fn raising_median_holder_snr_keeps_output(rr in proptest::collection::vec(1.0f64..45.0, 3),
                                                  snr in proptest::collection::vec(0.01f64..50.0, 3),
                                                  boost in 1.0f64..20.0) {
            let input = FusionInput::new(rr.iter().zip(&snr).map(|(r, s)| est(*r, *s)));
            let out = sqb_fuse(&input).unwrap();
            let holder = rr.iter().position(|r| *r == out).unwrap();
            let mut boosted = snr.clone();
            boosted[holder] *= boost;
            let input2 = FusionInput::new(rr.iter().zip(&boosted).map(|(r, s)| est(*r, *s)));
            prop_assert_eq!(sqb_fuse(&input2).unwrap(), out);
        }
    }
}
