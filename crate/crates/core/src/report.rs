//! Evaluation reports.
//!
//! An [`EvalReport`] is a pure function of the per-window records and the
//! session annotations, so recomputing it from the written per-window CSV
//! reproduces the same numbers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::apnea::{FoldOutcome, LabeledWindow, NUM_SIGNALS};
use crate::dataset::SessionMeta;
use crate::eval::{
    bland_altman_repeated, classification_metrics, count_episodes, median_mad, pearson_ci, pooled_pairs, rmse_pairs,
    BlandAltman, ClassificationMetrics, PearsonCi,
};
use crate::pipeline::WindowRecord;
use crate::timebase::SignalSource;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Rate series compared against the reference, by record column name.
pub const SERIES: [&str; 5] = ["rr_final", "rr_sqb", "rr_ta", "rr_rm_nir", "rr_rm_fir"];

/// Scope key covering every session.
pub const ALL: &str = "all";

fn series(r: &WindowRecord, name: &str) -> Option<f64> {
    match name {
        "rr_final" => r.rr_final,
        "rr_sqb" => r.rr_sqb,
        "rr_ta" => r.rr[0],
        "rr_rm_nir" => r.rr[1],
        "rr_rm_fir" => r.rr[2],
        _ => None,
    }
}

/// Processing result of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub meta: SessionMeta,
    /// Camera channels that were unavailable.
    pub missing: Vec<SignalSource>,
    pub records: Vec<WindowRecord>,
}

impl SessionOutcome {
    pub fn is_degraded(&self) -> bool {
        !self.missing.is_empty()
    }

    /// `(estimate, reference)` pairs of one series after segment pooling.
    pub fn pooled(&self, name: &str, segment_s: f64) -> Vec<(f64, f64)> {
        let est: Vec<(f64, Option<f64>)> = self.records.iter().map(|r| (r.timestamp, series(r, name))).collect();
        let reference: Vec<(f64, Option<f64>)> = self.records.iter().map(|r| (r.timestamp, r.rr_ref)).collect();
        pooled_pairs(&est, &reference, segment_s)
    }

    /// Window classification against annotations, if the session has any.
    pub fn classification(&self) -> Option<ClassificationMetrics> {
        let (pred, truth): (Vec<bool>, Vec<bool>) =
            self.records.iter().filter_map(|r| r.apnea_ref.map(|t| (r.apnea_flag, t))).unzip();
        if truth.is_empty() {
            return None;
        }
        classification_metrics(&pred, &truth).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub subject: String,
    pub task: String,
    pub metadata: BTreeMap<String, String>,
    pub missing: Vec<String>,
    pub degraded: bool,
    pub windows: usize,
    pub annotated_episodes: usize,
    pub detected_episodes: usize,
}

/// Median and mean absolute deviation over sessions or subjects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub mad: f64,
    pub n: usize,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Spread> {
        median_mad(values).map(|(median, mad)| Spread { median, mad, n: values.len() })
    }
}

/// Agreement of one rate series with the reference over pooled segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub pairs: usize,
    pub rmse: f64,
    pub per_subject_rmse: BTreeMap<String, f64>,
    pub bland_altman: Option<BlandAltman>,
    pub pearson: Option<PearsonCi>,
}

impl Agreement {
    /// `None` when no segment has both an estimate and a reference.
    pub fn from_subjects(by_subject: &BTreeMap<String, Vec<(f64, f64)>>) -> Option<Agreement> {
        let all: Vec<(f64, f64)> = by_subject.values().flatten().copied().collect();
        let rmse = rmse_pairs(&all).ok()?;
        let per_subject_rmse =
            by_subject.iter().filter_map(|(s, p)| rmse_pairs(p).ok().map(|v| (s.clone(), v))).collect();
        let groups: Vec<Vec<(f64, f64)>> = by_subject.values().cloned().collect();
        let (x, y): (Vec<f64>, Vec<f64>) = all.iter().copied().unzip();
        Some(Agreement {
            pairs: all.len(),
            rmse,
            per_subject_rmse,
            bland_altman: bland_altman_repeated(&groups).ok(),
            pearson: pearson_ci(&x, &y).ok(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApneaSummary {
    pub sessions: usize,
    pub f1: Option<Spread>,
    pub sensitivity: Option<Spread>,
    pub specificity: Option<Spread>,
    /// Counts summed over all sessions of the task.
    pub pooled: ClassificationMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub segment_s: f64,
    /// Whether any session ran without one or more camera channels.
    pub degraded: bool,
    pub sessions: Vec<SessionSummary>,
    /// Scope (`all` or a task name) to series name to agreement.
    pub agreement: BTreeMap<String, BTreeMap<String, Agreement>>,
    /// Task name to window classification summary.
    pub apnea: BTreeMap<String, ApneaSummary>,
    /// Metadata key to value to agreement of `rr_final`.
    pub groups: BTreeMap<String, BTreeMap<String, Agreement>>,
}

fn agreement_over<'a>(
    outcomes: impl Iterator<Item = &'a SessionOutcome> + Clone,
    segment_s: f64,
) -> BTreeMap<String, Agreement> {
    SERIES
        .iter()
        .filter_map(|name| {
            let mut by_subject: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for o in outcomes.clone() {
                by_subject.entry(o.meta.subject.clone()).or_default().extend(o.pooled(name, segment_s));
            }
            by_subject.retain(|_, p| !p.is_empty());
            Agreement::from_subjects(&by_subject).map(|a| (name.to_string(), a))
        })
        .collect()
}

impl EvalReport {
    pub fn build(outcomes: &[SessionOutcome], segment_s: f64) -> EvalReport {
        let sessions = outcomes
            .iter()
            .map(|o| SessionSummary {
                id: o.meta.id.clone(),
                subject: o.meta.subject.clone(),
                task: o.meta.task.name().to_string(),
                metadata: o.meta.metadata.clone(),
                missing: o.missing.iter().map(|s| s.name().to_string()).collect(),
                degraded: o.is_degraded(),
                windows: o.records.len(),
                annotated_episodes: o.meta.apnea_intervals.len(),
                detected_episodes: count_episodes(&o.records.iter().map(|r| r.apnea_flag).collect::<Vec<_>>()),
            })
            .collect();

        let mut agreement = BTreeMap::new();
        let all = agreement_over(outcomes.iter(), segment_s);
        if !all.is_empty() {
            agreement.insert(ALL.to_string(), all);
        }
        let mut by_task: BTreeMap<String, Vec<&SessionOutcome>> = BTreeMap::new();
        for o in outcomes {
            by_task.entry(o.meta.task.name().to_string()).or_default().push(o);
        }
        for (task, list) in &by_task {
            let a = agreement_over(list.iter().copied(), segment_s);
            if !a.is_empty() {
                agreement.insert(task.clone(), a);
            }
        }

        let mut apnea = BTreeMap::new();
        for (task, list) in &by_task {
            let metrics: Vec<ClassificationMetrics> = list.iter().filter_map(|o| o.classification()).collect();
            if metrics.is_empty() {
                continue;
            }
            let collect = |f: fn(&ClassificationMetrics) -> Option<f64>| -> Option<Spread> {
                Spread::of(&metrics.iter().filter_map(f).collect::<Vec<_>>())
            };
            let sum = |f: fn(&ClassificationMetrics) -> usize| metrics.iter().map(f).sum::<usize>();
            apnea.insert(
                task.clone(),
                ApneaSummary {
                    sessions: metrics.len(),
                    f1: collect(|m| m.f1),
                    sensitivity: collect(|m| m.sensitivity),
                    specificity: collect(|m| m.specificity),
                    pooled: ClassificationMetrics::from_counts(sum(|m| m.tp), sum(|m| m.fp), sum(|m| m.fn_), sum(|m| m.tn)),
                },
            );
        }

        let mut groups: BTreeMap<String, BTreeMap<String, Agreement>> = BTreeMap::new();
        let mut keyed: BTreeMap<(&str, &str), Vec<&SessionOutcome>> = BTreeMap::new();
        for o in outcomes {
            for (k, v) in &o.meta.metadata {
                keyed.entry((k.as_str(), v.as_str())).or_default().push(o);
            }
        }
        for ((k, v), list) in keyed {
            let mut by_subject: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for o in list {
                by_subject.entry(o.meta.subject.clone()).or_default().extend(o.pooled("rr_final", segment_s));
            }
            by_subject.retain(|_, p| !p.is_empty());
            if let Some(a) = Agreement::from_subjects(&by_subject) {
                groups.entry(k.to_string()).or_default().insert(v.to_string(), a);
            }
        }

        EvalReport {
            format_version: REPORT_FORMAT_VERSION,
            segment_s,
            degraded: outcomes.iter().any(SessionOutcome::is_degraded),
            sessions,
            agreement,
            apnea,
            groups,
        }
    }

    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Leave-one-subject-out detector scores for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoTask {
    /// Per held-out subject F1 of the fused ensemble.
    pub fused_f1: BTreeMap<String, f64>,
    /// Per held-out subject F1 of each single-signal expert, by signal name.
    pub expert_f1: BTreeMap<String, BTreeMap<String, f64>>,
    pub fused: Option<Spread>,
    pub experts: BTreeMap<String, Spread>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub format_version: u32,
    pub folds: usize,
    pub tasks: BTreeMap<String, LosoTask>,
}

impl LosoReport {
    /// Score each fold per task. Subjects whose F1 is undefined for a task
    /// (no positives and no detections) are left out of that task.
    pub fn build(windows: &[LabeledWindow], outcomes: &[FoldOutcome]) -> LosoReport {
        let mut tasks: BTreeMap<String, LosoTask> = BTreeMap::new();
        for o in outcomes {
            let mut by_task: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (k, &i) in o.fold.test.iter().enumerate() {
                by_task.entry(windows[i].task.name().to_string()).or_default().push(k);
            }
            for (task, ks) in by_task {
                let truth: Vec<bool> = ks.iter().map(|&k| windows[o.fold.test[k]].label.is_apnea()).collect();
                let f1 = |pred: &[bool]| {
                    let p: Vec<bool> = ks.iter().map(|&k| pred[k]).collect();
                    classification_metrics(&p, &truth).ok().and_then(|m| m.f1)
                };
                let entry = tasks.entry(task).or_insert_with(|| LosoTask {
                    fused_f1: BTreeMap::new(),
                    expert_f1: BTreeMap::new(),
                    fused: None,
                    experts: BTreeMap::new(),
                });
                if let Some(v) = f1(&o.fused) {
                    entry.fused_f1.insert(o.fold.held_out.clone(), v);
                }
                for s in 0..NUM_SIGNALS {
                    if let Some(v) = f1(&o.experts[s]) {
                        entry
                            .expert_f1
                            .entry(SignalSource::CAMERA[s].name().to_string())
                            .or_default()
                            .insert(o.fold.held_out.clone(), v);
                    }
                }
            }
        }
        for t in tasks.values_mut() {
            t.fused = Spread::of(&t.fused_f1.values().copied().collect::<Vec<_>>());
            t.experts = t
                .expert_f1
                .iter()
                .filter_map(|(k, v)| Spread::of(&v.values().copied().collect::<Vec<_>>()).map(|s| (k.clone(), s)))
                .collect();
        }
        LosoReport { format_version: REPORT_FORMAT_VERSION, folds: outcomes.len(), tasks }
    }

    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
