use std::collections::BTreeSet;

use rayon::prelude::*;

use super::ensemble::{EnsembleConfig, SvmEnsemble};
use super::features::{LabeledWindow, NUM_SIGNALS};
use crate::error::{Error, Result};

/// One leave-one-subject-out fold, as indices into the window list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub held_out: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Folds in sorted subject order. Training indices cover only the detector
/// training tasks of the other subjects; test indices cover every apnea-task
/// window of the held-out subject.
pub fn loso_split(windows: &[LabeledWindow]) -> Result<Vec<Fold>> {
    let subjects: BTreeSet<&str> = windows.iter().map(|w| w.subject.as_str()).collect();
    if subjects.len() < 2 {
        return Err(Error::CannotSplit(subjects.len()));
    }
    Ok(subjects
        .into_iter()
        .map(|s| {
            let train = (0..windows.len())
                .filter(|&i| windows[i].subject != s && windows[i].task.is_detector_training_task())
                .collect();
            let test = (0..windows.len()).filter(|&i| windows[i].subject == s && windows[i].task.has_apnea()).collect();
            Fold { held_out: s.to_string(), train, test }
        })
        .collect())
}

/// Held-out decisions of one fold, aligned with `fold.test`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub fold: Fold,
    pub fused: Vec<bool>,
    /// Decisions of each single-signal expert at the ensemble threshold.
    pub experts: [Vec<bool>; NUM_SIGNALS],
}

/// Train one ensemble per fold and classify the held-out windows.
pub fn run_loso(windows: &[LabeledWindow], cfg: &EnsembleConfig) -> Result<Vec<FoldOutcome>> {
    loso_split(windows)?
        .into_par_iter()
        .map(|fold| {
            let train: Vec<LabeledWindow> = fold.train.iter().map(|&i| windows[i].clone()).collect();
            let model = SvmEnsemble::train(&train, cfg)?;
            let mut fused = Vec::with_capacity(fold.test.len());
            let mut experts: [Vec<bool>; NUM_SIGNALS] = Default::default();
            for &i in &fold.test {
                let fv = &windows[i].features;
                fused.push(model.classify(fv)?.apnea);
                for (e, p) in experts.iter_mut().zip(model.expert_posteriors(fv)?) {
                    e.push(p >= model.threshold);
                }
            }
            Ok(FoldOutcome { fold, fused, experts })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apnea::features::{FeatureVector, Label};
    use crate::protocol::Task;

    fn windows(subjects: usize) -> Vec<LabeledWindow> {
        let mut out = Vec::new();
        for s in 0..subjects {
            for task in Task::ALL {
                for _ in 0..3 {
                    out.push(LabeledWindow {
                        features: FeatureVector::default(),
                        label: Label::Breathing,
                        subject: format!("subject{s:02}"),
                        task,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn fold_counts() {
        assert_eq!(loso_split(&windows(30)).unwrap().len(), 30);
        assert!(matches!(loso_split(&windows(1)), Err(Error::CannotSplit(1))));
    }

    #[test]
    fn folds_are_disjoint_and_filtered() {
        let w = windows(4);
        for fold in loso_split(&w).unwrap() {
            assert!(fold.train.iter().all(|&i| w[i].subject != fold.held_out));
            assert!(fold.test.iter().all(|&i| w[i].subject == fold.held_out));
            assert!(fold.train.iter().all(|&i| matches!(w[i].task, Task::CentralApnea | Task::ObstructiveApnea)));
            assert!(fold.test.iter().all(|&i| w[i].task != Task::SpontaneousBreathing));
            assert_eq!(fold.test.len(), 12);
        }
    }
}
