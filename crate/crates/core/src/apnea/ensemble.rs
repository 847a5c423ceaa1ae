use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{FeatureVector, LabeledWindow, FEATURES_PER_SIGNAL, NUM_FEATURES, NUM_SIGNALS};
use super::scaler::Scaler;
use super::svm::{train_svm, Svm, SvmConfig};
use crate::error::{Error, Result};
use crate::fusion::ApneaDecision;

/// Version written into serialized models.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub expert: SvmConfig,
    pub aggregator: SvmConfig,
    /// Folds for the out-of-fold expert posteriors the aggregator learns from.
    pub stacking_folds: usize,
    pub threshold: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            expert: SvmConfig::default(),
            aggregator: SvmConfig::default(),
            stacking_folds: 5,
            threshold: 0.5,
        }
    }
}

/// Three per-signal experts and an aggregator over their posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmEnsemble {
    pub format_version: u32,
    pub scaler: Scaler,
    pub experts: Vec<Svm>,
    pub aggregator: Svm,
    pub threshold: f64,
}

/// Aggregator input: the experts' posteriors on the log-odds scale.
fn log_odds(p: [f64; NUM_SIGNALS]) -> [f64; NUM_SIGNALS] {
    p.map(|p| (p / (1.0 - p)).ln())
}

fn block(row: &[f64], s: usize) -> &[f64] {
    &row[s * FEATURES_PER_SIGNAL..(s + 1) * FEATURES_PER_SIGNAL]
}

fn train_experts(rows: &[Vec<f64>], labels: &[bool], cfg: &SvmConfig) -> Result<Vec<Svm>> {
    (0..NUM_SIGNALS)
        .into_par_iter()
        .map(|s| {
            let x: Vec<&[f64]> = rows.iter().map(|r| block(r, s)).collect();
            train_svm(&x, labels, cfg)
        })
        .collect()
}

/// Fold index per window: distinct groups are assigned round-robin in sorted
/// order; with fewer groups than folds, windows are assigned round-robin.
fn stacking_assignment(groups: &[&str], folds: usize) -> Vec<usize> {
    let distinct: BTreeSet<&str> = groups.iter().copied().collect();
    if distinct.len() >= folds {
        let order: Vec<&str> = distinct.into_iter().collect();
        groups.iter().map(|g| order.binary_search(g).unwrap() % folds).collect()
    } else {
        (0..groups.len()).map(|i| i % folds).collect()
    }
}

impl SvmEnsemble {
    pub fn train(windows: &[LabeledWindow], cfg: &EnsembleConfig) -> Result<SvmEnsemble> {
        if windows.is_empty() {
            return Err(Error::EmptyInput);
        }
        if cfg.stacking_folds < 2 {
            return Err(Error::InvalidParameter("stacking needs at least 2 folds".into()));
        }
        let labels: Vec<bool> = windows.iter().map(|w| w.label.is_apnea()).collect();
        if labels.iter().all(|l| *l) || labels.iter().all(|l| !*l) {
            return Err(Error::SingleClassFold);
        }
        let raw: Vec<[f64; NUM_FEATURES]> = windows.iter().map(|w| w.features.to_row()).collect();
        let scaler = Scaler::fit(&raw)?;
        let rows: Vec<Vec<f64>> = raw.iter().map(|r| scaler.transform(r)).collect();

        let groups: Vec<&str> = windows.iter().map(|w| w.subject.as_str()).collect();
        let fold_of = stacking_assignment(&groups, cfg.stacking_folds);
        let mut stacked = vec![[0.0; NUM_SIGNALS]; rows.len()];
        let per_fold: Vec<Result<Vec<(usize, [f64; NUM_SIGNALS])>>> = (0..cfg.stacking_folds)
            .into_par_iter()
            .map(|k| {
                let (train, test): (Vec<usize>, Vec<usize>) = (0..rows.len()).partition(|&i| fold_of[i] != k);
                if test.is_empty() {
                    return Ok(Vec::new());
                }
                let tr_rows: Vec<Vec<f64>> = train.iter().map(|&i| rows[i].clone()).collect();
                let tr_labels: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
                let n_pos = tr_labels.iter().filter(|l| **l).count();
                if n_pos == 0 || n_pos == tr_labels.len() {
                    let p = n_pos as f64 / tr_labels.len().max(1) as f64;
                    return Ok(test.into_iter().map(|i| (i, [p; NUM_SIGNALS])).collect());
                }
                let experts = train_experts(&tr_rows, &tr_labels, &cfg.expert)?;
                Ok(test
                    .into_iter()
                    .map(|i| (i, std::array::from_fn(|s| experts[s].posterior(block(&rows[i], s)))))
                    .collect())
            })
            .collect();
        for fold in per_fold {
            for (i, p) in fold? {
                stacked[i] = log_odds(p);
            }
        }

        let aggregator = train_svm(&stacked, &labels, &cfg.aggregator)?;
        let experts = train_experts(&rows, &labels, &cfg.expert)?;
        Ok(SvmEnsemble { format_version: MODEL_FORMAT_VERSION, scaler, experts, aggregator, threshold: cfg.threshold })
    }

    fn check(&self) -> Result<()> {
        if self.experts.len() != NUM_SIGNALS || self.scaler.dim() != NUM_FEATURES {
            return Err(Error::NotTrained);
        }
        Ok(())
    }

    /// Standardized feature row; missing blocks are zero.
    pub fn standardize(&self, fv: &FeatureVector) -> Result<Vec<f64>> {
        self.check()?;
        Ok(self.scaler.transform(&fv.to_row()))
    }

    pub fn expert_posteriors(&self, fv: &FeatureVector) -> Result<[f64; NUM_SIGNALS]> {
        let row = self.standardize(fv)?;
        Ok(std::array::from_fn(|s| self.experts[s].posterior(block(&row, s))))
    }

    pub fn posterior(&self, fv: &FeatureVector) -> Result<f64> {
        let p = self.expert_posteriors(fv)?;
        Ok(self.aggregator.posterior(&log_odds(p)))
    }

    pub fn classify(&self, fv: &FeatureVector) -> Result<ApneaDecision> {
        let posterior = self.posterior(fv)?;
        Ok(ApneaDecision { apnea: posterior >= self.threshold, posterior })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<SvmEnsemble> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelVersion(header.format_version));
        }
        let model: SvmEnsemble = serde_json::from_str(text)?;
        model.check()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apnea::features::{Label, SignalFeatures};
    use crate::protocol::Task;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Windows whose signal blocks carry class information only where
    /// `informative[s]` is set.
    pub(crate) fn toy_windows(n: usize, informative: [bool; 3], seed: u64) -> Vec<LabeledWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let apnea = rng.random_bool(0.35);
                let blocks = std::array::from_fn(|s| {
                    let shift = if informative[s] && apnea { 1.5 } else { 0.0 };
                    let mut g = || rng.sample::<f64, _>(StandardNormal);
                    Some(SignalFeatures {
                        mean_crossings: 5.0 + 2.0 * g() + 3.0 * shift,
                        variance: (1.0 - 0.5 * shift / 1.5 + 0.2 * g()).abs(),
                        std: 1.0 + 0.3 * g() - 0.4 * shift,
                        snr: 4.0 + g() - 2.0 * shift,
                    })
                });
                LabeledWindow {
                    features: FeatureVector::new(blocks),
                    label: Label::from_apnea(apnea),
                    subject: format!("s{}", i % 7),
                    task: Task::CentralApnea,
                }
            })
            .collect()
    }

    #[test]
    fn prototypes_land_on_their_side() {
        let w = toy_windows(300, [true, true, true], 1);
        let model = SvmEnsemble::train(&w, &EnsembleConfig::default()).unwrap();
        let proto = |apnea: bool| {
            let sel: Vec<[f64; NUM_FEATURES]> =
                w.iter().filter(|x| x.label.is_apnea() == apnea).map(|x| x.features.to_row()).collect();
            let mean: [f64; NUM_FEATURES] =
                std::array::from_fn(|j| sel.iter().map(|r| r[j]).sum::<f64>() / sel.len() as f64);
            FeatureVector::new(std::array::from_fn(|s| {
                Some(SignalFeatures {
                    mean_crossings: mean[4 * s],
                    variance: mean[4 * s + 1],
                    std: mean[4 * s + 2],
                    snr: mean[4 * s + 3],
                })
            }))
        };
        assert!(model.posterior(&proto(true)).unwrap() > 0.5);
        assert!(model.posterior(&proto(false)).unwrap() < 0.5);

        let mut strict = model.clone();
        strict.threshold = 1.0;
        assert!(w.iter().all(|x| !strict.classify(&x.features).unwrap().apnea));
    }

    #[test]
    fn empty_and_untrained() {
        assert!(matches!(SvmEnsemble::train(&[], &EnsembleConfig::default()), Err(Error::EmptyInput)));
        let w = toy_windows(50, [true, true, true], 2);
        let mut model = SvmEnsemble::train(&w, &EnsembleConfig::default()).unwrap();
        model.experts.clear();
        assert!(matches!(model.classify(&w[0].features), Err(Error::NotTrained)));
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let w = toy_windows(80, [true, false, true], 3);
        let model = SvmEnsemble::train(&w, &EnsembleConfig::default()).unwrap();
        let text = model.to_json().unwrap();
        let back = SvmEnsemble::from_json(&text).unwrap();
        for x in &w {
            assert_eq!(model.posterior(&x.features).unwrap(), back.posterior(&x.features).unwrap());
        }
        let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 99", 1);
        assert!(matches!(SvmEnsemble::from_json(&bumped), Err(Error::ModelVersion(99))));
    }

    fn held_out_f1(informative: [bool; 3], seed: u64) -> (f64, [f64; 3]) {
        let train = toy_windows(400, informative, seed);
        let test = toy_windows(400, informative, seed + 1000);
        let model = SvmEnsemble::train(&train, &EnsembleConfig::default()).unwrap();
        let truth: Vec<bool> = test.iter().map(|w| w.label.is_apnea()).collect();
        let f1 = |pred: Vec<bool>| crate::eval::classification_metrics(&pred, &truth).unwrap().f1.unwrap();
        let fused = f1(test.iter().map(|w| model.classify(&w.features).unwrap().apnea).collect());
        let experts = std::array::from_fn(|s| {
            f1(test.iter().map(|w| model.expert_posteriors(&w.features).unwrap()[s] >= 0.5).collect())
        });
        (fused, experts)
    }

    #[test]
    fn one_informative_signal_is_not_diluted() {
        let (fused, experts) = held_out_f1([false, true, false], 11);
        assert!(fused >= experts[1] - 0.02, "fused {fused} expert {}", experts[1]);
    }

    #[test]
    fn fusing_informative_signals_beats_each() {
        let (fused, experts) = held_out_f1([true, true, true], 12);
        let best = experts.iter().cloned().fold(0.0, f64::max);
        assert!(fused >= best, "fused {fused} best expert {best}");
    }

    #[test]
    fn stacking_groups_stay_together() {
        let groups = ["b", "a", "c", "a", "e", "d", "f", "b"];
        let f = stacking_assignment(&groups, 5);
        assert_eq!(f[1], f[3]);
        assert_eq!(f[0], f[7]);
        assert_eq!(f[1], 0);
    }
}
