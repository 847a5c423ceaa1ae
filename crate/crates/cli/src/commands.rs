use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use s2fusion::apnea::{run_loso, LabeledWindow, SvmEnsemble};
use s2fusion::dataset::{discover_sessions, read_records, write_records, write_simulated, SessionDir, SessionMeta};
use s2fusion::pipeline::{analyze_session, labeled_windows, run_session, PipelineConfig};
use s2fusion::protocol::Task;
use s2fusion::report::{EvalReport, LosoReport, SessionOutcome, REPORT_FORMAT_VERSION};
use s2fusion::sim::{ChannelNoise, SessionSpec, SubjectProfile};
use s2fusion::timebase::{SignalSource, Spectrum};

use crate::GlobalArgs;

/// A user-input problem that is not a library error.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invalid(pub String);

pub enum Outcome {
    Complete,
    Degraded,
}

impl Outcome {
    fn from_degraded(degraded: bool) -> Self {
        if degraded {
            Outcome::Degraded
        } else {
            Outcome::Complete
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.strategy {
        cfg.strategy = s.into();
    }
    if let Some(t) = g.threshold {
        cfg.ensemble.threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Output directory; one subdirectory per session.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub subjects: usize,
    /// Comma-separated task names; all five by default.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,
    /// `none`, `moderate`, or a per-channel SNR in dB.
    #[arg(long, default_value = "moderate")]
    pub noise: String,
    /// Render NIR/FIR video instead of writing the analytic signals.
    #[arg(long)]
    pub frames: bool,
    /// Truncate every session to this many seconds.
    #[arg(long)]
    pub duration: Option<f64>,
}

fn parse_noise(s: &str) -> Result<ChannelNoise> {
    match s {
        "none" => Ok(ChannelNoise::none()),
        "moderate" => Ok(ChannelNoise::moderate()),
        db => match db.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(ChannelNoise::uniform(v)),
            _ => Err(Invalid(format!("noise must be none, moderate or a dB value, got {db:?}")).into()),
        },
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn simulate(g: &GlobalArgs, a: &SimulateArgs) -> Result<Outcome> {
    if a.subjects == 0 {
        bail!(Invalid("--subjects must be at least 1".into()));
    }
    let tasks: Vec<Task> = if a.tasks.is_empty() {
        Task::ALL.to_vec()
    } else {
        a.tasks.iter().map(|t| t.parse::<Task>()).collect::<s2fusion::Result<_>>()?
    };
    let noise = parse_noise(&a.noise)?;
    for i in 0..a.subjects {
        let id = format!("s{:02}", i + 1);
        let subject = SubjectProfile::random(id.clone(), mix(g.seed, i as u64, 0));
        let metadata: BTreeMap<String, String> = [("sex".into(), if i % 2 == 0 { "f" } else { "m" }.into())].into();
        for &task in &tasks {
            let mut spec = SessionSpec::protocol(task, &subject, noise, mix(g.seed, i as u64, 1 + task as u64));
            if let Some(d) = a.duration {
                if !(d > 0.0) {
                    bail!(Invalid(format!("--duration must be positive, got {d}")));
                }
                spec = spec.truncated(d);
            }
            let dir = a.out.join(format!("{id}_{task}"));
            info!("writing {}", dir.display());
            write_simulated(&dir, &spec, a.frames, &metadata)?;
        }
    }
    Ok(Outcome::Complete)
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// A session directory or a directory of sessions.
    #[arg(long)]
    pub data: PathBuf,
}

fn sessions(data: &Path) -> Result<Vec<SessionDir>> {
    let list = discover_sessions(data)?;
    for s in &list {
        s.validate().with_context(|| format!("session {}", s.meta.id))?;
    }
    Ok(list)
}

pub fn extract(g: &GlobalArgs, a: &DataArgs) -> Result<Outcome> {
    let cfg = load_config(g)?;
    let mut degraded = false;
    for s in sessions(&a.data)? {
        let (nir, fir) = (s.has_frames(Spectrum::Nir), s.has_frames(Spectrum::Fir));
        if !nir && !fir {
            info!("{}: no video, keeping stored signals", s.meta.id);
            continue;
        }
        degraded |= !(nir && fir);
        let signals = s.extract(&cfg).with_context(|| format!("extracting {}", s.meta.id))?;
        s.write_signals(&signals)?;
        info!("{}: signals written", s.meta.id);
    }
    Ok(Outcome::from_degraded(degraded))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the trained model (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Also run leave-one-subject-out validation and write its report here.
    #[arg(long)]
    pub loso: Option<PathBuf>,
}

/// Labeled detector windows of every apnea-task session.
fn detector_windows(list: &[SessionDir], cfg: &PipelineConfig) -> Result<Vec<LabeledWindow>> {
    let per: Vec<Result<Vec<LabeledWindow>>> = list
        .par_iter()
        .filter(|s| s.meta.task.has_apnea())
        .map(|s| {
            let signals = s.load_signals(cfg)?;
            let analysis = analyze_session(&signals, Some(&s.meta.apnea_intervals), cfg)?;
            Ok(labeled_windows(&analysis, &s.meta.subject, s.meta.task, cfg))
        })
        .collect();
    Ok(per.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

pub fn train(g: &GlobalArgs, a: &TrainArgs) -> Result<Outcome> {
    let cfg = load_config(g)?;
    let list = sessions(&a.data)?;
    let windows = detector_windows(&list, &cfg)?;
    let training: Vec<LabeledWindow> =
        windows.iter().filter(|w| w.task.is_detector_training_task()).cloned().collect();
    if training.is_empty() {
        bail!(Invalid("no central or obstructive apnea sessions to train on".into()));
    }
    info!("training on {} windows", training.len());
    let model = SvmEnsemble::train(&training, &cfg.ensemble)?;
    write_json(&a.model, &model.to_json()?)?;
    if let Some(path) = &a.loso {
        let outcomes = run_loso(&windows, &cfg.ensemble)?;
        write_json(path, &LosoReport::build(&windows, &outcomes).to_json()?)?;
    }
    Ok(Outcome::Complete)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained detector; without it, fusion reports SQb rates unchanged.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory for `windows/*.csv`, `sessions.json` and `report.json`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Index of an `evaluate` output directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub segment_s: f64,
    pub sessions: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub meta: SessionMeta,
    pub missing: Vec<SignalSource>,
    /// Per-window table, relative to the output directory.
    pub windows: String,
}

pub const MANIFEST: &str = "sessions.json";
pub const REPORT: &str = "report.json";

pub fn evaluate(g: &GlobalArgs, a: &EvaluateArgs) -> Result<Outcome> {
    let cfg = load_config(g)?;
    let detector = match &a.model {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let mut m = SvmEnsemble::from_json(&text)?;
            if let Some(t) = g.threshold {
                m.threshold = t;
            }
            Some(m)
        }
        None => None,
    };
    let list = sessions(&a.data)?;
    let outcomes: Vec<SessionOutcome> = list
        .par_iter()
        .map(|s| {
            let signals = s.load_signals(&cfg)?;
            run_session(&signals, &s.meta, detector.as_ref(), &cfg).with_context(|| format!("session {}", s.meta.id))
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(a.out.join("windows"))?;
    let mut entries = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let rel = format!("windows/{}.csv", o.meta.id);
        write_records(&a.out.join(&rel), &o.records)?;
        entries.push(ManifestEntry { meta: o.meta.clone(), missing: o.missing.clone(), windows: rel });
    }
    let manifest = Manifest { format_version: REPORT_FORMAT_VERSION, segment_s: cfg.segment_s, sessions: entries };
    write_json(&a.out.join(MANIFEST), &serde_json::to_string_pretty(&manifest)?)?;
    let report = EvalReport::build(&outcomes, cfg.segment_s);
    write_json(&a.out.join(REPORT), &report.to_json()?)?;
    Ok(Outcome::from_degraded(report.degraded))
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Output directory of `evaluate`.
    #[arg(long)]
    pub results: PathBuf,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn report(a: &ReportArgs) -> Result<Outcome> {
    let path = a.results.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if manifest.format_version != REPORT_FORMAT_VERSION {
        bail!(Invalid(format!("unsupported results format version {}", manifest.format_version)));
    }
    let outcomes: Vec<SessionOutcome> = manifest
        .sessions
        .into_iter()
        .map(|e| {
            let records = read_records(&a.results.join(&e.windows))?;
            Ok(SessionOutcome { meta: e.meta, missing: e.missing, records })
        })
        .collect::<Result<_>>()?;
    let report = EvalReport::build(&outcomes, manifest.segment_s);
    let json = report.to_json()?;
    match &a.out {
        Some(p) => write_json(p, &json)?,
        None => println!("{json}"),
    }
    Ok(Outcome::from_degraded(report.degraded))
}
