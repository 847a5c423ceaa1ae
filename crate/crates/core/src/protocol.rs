//! Recording protocol vocabulary shared by the simulator, the detector and
//! the dataset layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Minimum duration of an apnea event, seconds.
pub const MIN_APNEA_S: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SpontaneousBreathing,
    CentralApnea,
    ObstructiveApnea,
    CentralApneaBlanket,
    CentralApneaArbitrary,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::SpontaneousBreathing,
        Task::CentralApnea,
        Task::ObstructiveApnea,
        Task::CentralApneaBlanket,
        Task::CentralApneaArbitrary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::SpontaneousBreathing => "spontaneous_breathing",
            Task::CentralApnea => "central_apnea",
            Task::ObstructiveApnea => "obstructive_apnea",
            Task::CentralApneaBlanket => "central_apnea_blanket",
            Task::CentralApneaArbitrary => "central_apnea_arbitrary",
        }
    }

    /// Tasks whose protocol contains apnea events.
    pub fn has_apnea(self) -> bool {
        self != Task::SpontaneousBreathing
    }

    /// Tasks used to train the apnea detector.
    pub fn is_detector_training_task(self) -> bool {
        matches!(self, Task::CentralApnea | Task::ObstructiveApnea)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApneaKind {
    Central,
    Obstructive,
}

impl ApneaKind {
    pub fn name(self) -> &'static str {
        match self {
            ApneaKind::Central => "central",
            ApneaKind::Obstructive => "obstructive",
        }
    }
}

impl FromStr for ApneaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "central" => Ok(ApneaKind::Central),
            "obstructive" => Ok(ApneaKind::Obstructive),
            _ => Err(Error::InvalidParameter(format!("unknown apnea kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApneaInterval {
    pub start: f64,
    pub end: f64,
    pub kind: ApneaKind,
}

impl ApneaInterval {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn overlap(&self, start: f64, end: f64) -> f64 {
        (self.end.min(end) - self.start.max(start)).max(0.0)
    }
}

/// Window label rule: apnea when at least half of `[start, end)` lies inside
/// annotated apnea intervals.
pub fn window_is_apnea(start: f64, end: f64, intervals: &[ApneaInterval]) -> bool {
    let covered: f64 = intervals.iter().map(|a| a.overlap(start, end)).sum();
    covered >= 0.5 * (end - start)
}
