//! End-to-end processing of one session: signal extraction, per-window
//! spectral analysis and features, apnea detection and fusion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apnea::{signal_features, EnsembleConfig, FeatureVector, Label, LabeledWindow, SignalFeatures, SvmEnsemble};
use crate::dataset::SessionMeta;
use crate::dsp::{analyze_conditioned, condition_signal, DspConfig, SpectralEstimate};
use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::fusion::{ApneaDecision, FusionInput, RaEstimate, S2Combiner, S2Strategy};
use crate::protocol::{window_is_apnea, ApneaInterval, Task, MIN_APNEA_S};
use crate::report::SessionOutcome;
use crate::roi::{hold_and_retrigger, AffineTransform, ChestGeometry, LandmarkFrame, RoiContext, DEFAULT_RETRIGGER_S};
use crate::signals::{extract_ta, extract_velocity_profiles, VelocityProfileSet};
use crate::sim::SyntheticSignals;
use crate::timebase::{
    FrameSource, RespSignal, SignalSource, WindowGrid, DEFAULT_SEGMENT_S, DEFAULT_WINDOW_S, MIN_WINDOW_SAMPLES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dsp: DspConfig,
    pub flow: FlowParams,
    pub chest: ChestGeometry,
    pub window_s: f64,
    pub stride_s: f64,
    /// Pooling segment for agreement metrics.
    pub segment_s: f64,
    pub retrigger_s: f64,
    pub strategy: S2Strategy,
    /// Runs of detected apnea windows spanning less than this are dropped.
    pub min_apnea_run_s: f64,
    /// Spacing of the windows used to train the detector.
    pub training_stride_s: f64,
    pub ensemble: EnsembleConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dsp: DspConfig::default(),
            flow: FlowParams::default(),
            chest: ChestGeometry::default(),
            window_s: DEFAULT_WINDOW_S,
            stride_s: 1.0 / crate::sim::FIR_RATE_HZ,
            segment_s: DEFAULT_SEGMENT_S,
            retrigger_s: DEFAULT_RETRIGGER_S,
            strategy: S2Strategy::SuppressToZero,
            min_apnea_run_s: MIN_APNEA_S,
            training_stride_s: 2.0,
            ensemble: EnsembleConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window_s", self.window_s),
            ("stride_s", self.stride_s),
            ("segment_s", self.segment_s),
            ("retrigger_s", self.retrigger_s),
            ("training_stride_s", self.training_stride_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.min_apnea_run_s >= 0.0) {
            return Err(Error::InvalidParameter("min_apnea_run_s must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ensemble.threshold) {
            return Err(Error::InvalidParameter("threshold must lie in [0, 1]".into()));
        }
        self.flow.validate()
    }
}

/// The respiratory signals of one session. Camera channels may be missing.
#[derive(Debug, Clone, Default)]
pub struct SessionSignals {
    pub ta_fir: Option<RespSignal>,
    pub rm_nir: Option<VelocityProfileSet>,
    pub rm_fir: Option<VelocityProfileSet>,
    pub ref_thorax: Option<RespSignal>,
}

impl From<&SyntheticSignals> for SessionSignals {
    fn from(s: &SyntheticSignals) -> Self {
        SessionSignals {
            ta_fir: Some(s.ta_fir.clone()),
            rm_nir: Some(VelocityProfileSet::from_signal(&s.rm_nir)),
            rm_fir: Some(VelocityProfileSet::from_signal(&s.rm_fir)),
            ref_thorax: Some(s.ref_thorax.clone()),
        }
    }
}

impl SessionSignals {
    pub fn missing_cameras(&self) -> Vec<SignalSource> {
        let present = [self.ta_fir.is_some(), self.rm_nir.is_some(), self.rm_fir.is_some()];
        SignalSource::CAMERA.iter().zip(present).filter(|(_, p)| !p).map(|(s, _)| *s).collect()
    }

    fn span(&self) -> f64 {
        let ends = [
            self.ta_fir.as_ref().and_then(|s| s.times().last().copied()),
            self.rm_nir.as_ref().and_then(|s| s.times.last().copied()),
            self.rm_fir.as_ref().and_then(|s| s.times.last().copied()),
        ];
        ends.into_iter().flatten().fold(0.0, f64::max)
    }
}

/// Video inputs of one session.
pub struct SessionVideo<'a> {
    pub nir: Option<&'a dyn FrameSource>,
    pub fir: Option<&'a dyn FrameSource>,
    pub landmarks: &'a [LandmarkFrame],
    pub calibration: AffineTransform,
}

/// Extract TA and both RM profile sets from video.
pub fn extract_signals(video: &SessionVideo<'_>, cfg: &PipelineConfig) -> Result<SessionSignals> {
    let t = video.calibration;
    let nir_dims = match (video.nir, video.fir) {
        (Some(n), _) => n.dims(),
        (None, Some(f)) => {
            let (w, h) = f.dims();
            ((w as f64 / t.sx).round() as usize, (h as f64 / t.sy).round() as usize)
        }
        (None, None) => return Err(Error::InsufficientData("session has no video".into())),
    };
    let fir_dims = video.fir.map_or((0, 0), |f| f.dims());
    let ctx = RoiContext { nir_dims, fir_dims, transform: t, geometry: cfg.chest };
    let track = hold_and_retrigger(video.landmarks, cfg.retrigger_s, &ctx)?;
    let mut out = SessionSignals::default();
    if let Some(fir) = video.fir {
        out.ta_fir = Some(extract_ta(fir, &track)?);
        out.rm_fir = Some(extract_velocity_profiles(fir, &track, &cfg.flow)?);
    }
    if let Some(nir) = video.nir {
        out.rm_nir = Some(extract_velocity_profiles(nir, &track, &cfg.flow)?);
    }
    Ok(out)
}

/// Spectral estimates, features and reference values of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowAnalysis {
    pub start: f64,
    pub end: f64,
    /// Per-camera estimates in [`SignalSource::CAMERA`] order.
    pub estimates: [Option<SpectralEstimate>; 3],
    pub features: FeatureVector,
    pub rr_ref: Option<f64>,
    pub apnea_ref: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionAnalysis {
    pub grid: WindowGrid,
    pub windows: Vec<WindowAnalysis>,
    pub missing: Vec<SignalSource>,
}

enum ChannelResult {
    Estimate(SpectralEstimate, SignalFeatures),
    Flat,
    Missing,
}

fn analyze_channel(source: SignalSource, times: &[f64], raw: &[f64], conditioned: &[f64], cfg: &DspConfig) -> ChannelResult {
    if times.len() < MIN_WINDOW_SAMPLES {
        return ChannelResult::Missing;
    }
    match analyze_conditioned(source, times, raw, conditioned, cfg) {
        Ok(ws) => match signal_features(&ws.processed, ws.estimate.snr) {
            Ok(f) => ChannelResult::Estimate(ws.estimate, f),
            Err(_) => ChannelResult::Missing,
        },
        Err(Error::DegenerateWindow) => ChannelResult::Flat,
        Err(e) => {
            log::debug!("{} window skipped: {e}", source.name());
            ChannelResult::Missing
        }
    }
}

fn conditioned(source: SignalSource, times: &[f64], values: &[f64], bandpass: bool, cfg: &DspConfig) -> Result<Vec<f64>> {
    let c = condition_signal(times, values, bandpass, cfg)?;
    if c.skipped_runs > 0 {
        log::warn!("{}: {} short run(s) left unconditioned", source.name(), c.skipped_runs);
    }
    Ok(c.values)
}

/// Rate the band-passed reference is thinned to before spectral analysis.
const REFERENCE_ANALYSIS_RATE_HZ: f64 = 10.0;

/// A signal and its conditioned samples.
struct Prepared {
    source: SignalSource,
    times: Vec<f64>,
    raw: Vec<f64>,
    values: Vec<f64>,
}

impl Prepared {
    fn new(signal: &RespSignal, bandpass: bool, cfg: &DspConfig) -> Result<Self> {
        let values = conditioned(signal.source(), signal.times(), signal.values(), bandpass, cfg)?;
        Ok(Prepared {
            source: signal.source(),
            times: signal.times().to_vec(),
            raw: signal.values().to_vec(),
            values,
        })
    }

    /// Keep every k-th sample so the rate drops to about `rate_hz`; only
    /// valid after band-passing well below the new Nyquist frequency.
    fn thinned(self, rate_hz: f64) -> Self {
        let fs = 1.0 / crate::timebase::typical_period(&self.times);
        let k = (fs / rate_hz).floor().max(1.0) as usize;
        if k == 1 {
            return self;
        }
        let pick = |v: Vec<f64>| v.into_iter().step_by(k).collect();
        Prepared { source: self.source, times: pick(self.times), raw: pick(self.raw), values: pick(self.values) }
    }

    fn analyze(&self, start: f64, end: f64, cfg: &DspConfig) -> ChannelResult {
        let r = crate::timebase::sample_range(&self.times, start, end);
        analyze_channel(self.source, &self.times[r.clone()], &self.raw[r.clone()], &self.values[r], cfg)
    }
}

/// A profile set and its conditioned profiles.
struct PreparedProfiles<'a> {
    raw: &'a VelocityProfileSet,
    conditioned: VelocityProfileSet,
}

impl<'a> PreparedProfiles<'a> {
    fn new(raw: &'a VelocityProfileSet, cfg: &DspConfig) -> Result<Self> {
        let profiles = raw
            .profiles
            .iter()
            .map(|p| conditioned(raw.source, &raw.times, p, false, cfg))
            .collect::<Result<_>>()?;
        Ok(PreparedProfiles { raw, conditioned: VelocityProfileSet { profiles, ..raw.clone() } })
    }

    fn analyze(&self, start: f64, end: f64, cfg: &DspConfig) -> ChannelResult {
        let (r, keep) = self.raw.selection(start, end);
        let raw = self.raw.mean_of(r.clone(), &keep);
        let cond = self.conditioned.mean_of(r.clone(), &keep);
        analyze_channel(self.raw.source, &self.raw.times[r], &raw, &cond, cfg)
    }
}

/// Analyze every window of the shared grid. Every signal is conditioned over
/// the whole recording first: detrended, and for TA and the reference also
/// band-passed. RM profiles are conditioned one by one. Windows are labelled from `annotations` when given; the
/// reference rate is forced to 0 in apnea windows.
pub fn analyze_session(
    signals: &SessionSignals,
    annotations: Option<&[ApneaInterval]>,
    cfg: &PipelineConfig,
) -> Result<SessionAnalysis> {
    cfg.validate()?;
    let missing = signals.missing_cameras();
    if missing.len() == 3 {
        return Err(Error::InsufficientData("no camera signal available".into()));
    }
    let grid = WindowGrid::covering(0.0, signals.span(), cfg.window_s, cfg.stride_s)?;
    if grid.count == 0 {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    let dsp = &cfg.dsp;
    let ta = signals.ta_fir.as_ref().map(|s| Prepared::new(s, true, dsp)).transpose()?;
    let thorax = signals
        .ref_thorax
        .as_ref()
        .map(|s| Prepared::new(s, true, dsp).map(|p| p.thinned(REFERENCE_ANALYSIS_RATE_HZ)))
        .transpose()?;
    let rm_nir = signals.rm_nir.as_ref().map(|p| PreparedProfiles::new(p, dsp)).transpose()?;
    let rm_fir = signals.rm_fir.as_ref().map(|p| PreparedProfiles::new(p, dsp)).transpose()?;
    let windows = (0..grid.count)
        .into_par_iter()
        .map(|k| {
            let (start, end) = grid.bounds(k);
            let mut estimates = [None; 3];
            let mut blocks = [None; 3];
            for c in 0..3 {
                let result = match c {
                    0 => ta.as_ref().map(|s| s.analyze(start, end, dsp)),
                    1 => rm_nir.as_ref().map(|p| p.analyze(start, end, dsp)),
                    _ => rm_fir.as_ref().map(|p| p.analyze(start, end, dsp)),
                };
                match result.unwrap_or(ChannelResult::Missing) {
                    ChannelResult::Estimate(e, f) => {
                        estimates[c] = Some(e);
                        blocks[c] = Some(f);
                    }
                    ChannelResult::Flat => {
                        blocks[c] =
                            Some(SignalFeatures { mean_crossings: 0.0, variance: 0.0, std: 0.0, snr: 0.0 });
                    }
                    ChannelResult::Missing => {}
                }
            }
            let apnea_ref = annotations.map(|a| window_is_apnea(start, end, a));
            let rr_ref = if apnea_ref == Some(true) {
                Some(0.0)
            } else {
                thorax.as_ref().and_then(|r| match r.analyze(start, end, dsp) {
                    ChannelResult::Estimate(e, _) => Some(e.rr),
                    _ => None,
                })
            };
            WindowAnalysis { start, end, estimates, features: FeatureVector::new(blocks), rr_ref, apnea_ref }
        })
        .collect();
    Ok(SessionAnalysis { grid, windows, missing })
}

/// Clear detected runs whose window timestamps span less than `min_s`.
pub fn drop_short_runs(times: &[f64], flags: &mut [bool], min_s: f64) {
    let mut i = 0;
    while i < flags.len() {
        if !flags[i] {
            i += 1;
            continue;
        }
        let j = (i..flags.len()).find(|&j| !flags[j]).unwrap_or(flags.len());
        if times[j - 1] - times[i] < min_s {
            flags[i..j].iter_mut().for_each(|f| *f = false);
        }
        i = j;
    }
}

/// Classify every window, drop short detections, and fuse.
pub fn fuse_session(analysis: &SessionAnalysis, detector: Option<&SvmEnsemble>, cfg: &PipelineConfig) -> Result<Vec<RaEstimate>> {
    let decisions: Option<Vec<ApneaDecision>> = detector
        .map(|d| {
            let mut dec: Vec<ApneaDecision> =
                analysis.windows.par_iter().map(|w| d.classify(&w.features)).collect::<Result<_>>()?;
            let times: Vec<f64> = analysis.windows.iter().map(|w| w.end).collect();
            let mut flags: Vec<bool> = dec.iter().map(|x| x.apnea).collect();
            drop_short_runs(&times, &mut flags, cfg.min_apnea_run_s);
            dec.iter_mut().zip(flags).for_each(|(x, f)| x.apnea = f);
            Ok::<_, Error>(dec)
        })
        .transpose()?;
    let mut combiner = S2Combiner::new(cfg.strategy);
    Ok(analysis
        .windows
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let input = FusionInput::new(w.estimates.iter().flatten().copied());
            combiner.fuse(w.end, &input, decisions.as_ref().map(|d| d[k]))
        })
        .collect())
}

/// Training windows of one session, taken every `training_stride_s`.
pub fn labeled_windows(analysis: &SessionAnalysis, subject: &str, task: Task, cfg: &PipelineConfig) -> Vec<LabeledWindow> {
    let step = ((cfg.training_stride_s / analysis.grid.stride).round() as usize).max(1);
    analysis
        .windows
        .iter()
        .step_by(step)
        .filter_map(|w| {
            w.apnea_ref.map(|a| LabeledWindow {
                features: w.features,
                label: Label::from_apnea(a),
                subject: subject.to_string(),
                task,
            })
        })
        .collect()
}

/// Analyze, classify and fuse one session into its per-window records.
pub fn run_session(
    signals: &SessionSignals,
    meta: &SessionMeta,
    detector: Option<&SvmEnsemble>,
    cfg: &PipelineConfig,
) -> Result<SessionOutcome> {
    let analysis = analyze_session(signals, Some(&meta.apnea_intervals), cfg)?;
    if !analysis.missing.is_empty() {
        let names: Vec<&str> = analysis.missing.iter().map(|s| s.name()).collect();
        log::warn!("session {}: running without {}", meta.id, names.join(", "));
    }
    let fused = fuse_session(&analysis, detector, cfg)?;
    Ok(SessionOutcome { meta: meta.clone(), missing: analysis.missing.clone(), records: window_records(&analysis, &fused) })
}

/// One row of the per-window output table.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub timestamp: f64,
    pub rr: [Option<f64>; 3],
    pub snr: [Option<f64>; 3],
    pub rr_sqb: Option<f64>,
    pub apnea_posterior: Option<f64>,
    pub apnea_flag: bool,
    pub rr_final: Option<f64>,
    pub rr_ref: Option<f64>,
    pub apnea_ref: Option<bool>,
}

/// Column order of the per-window table. Appending columns is compatible;
/// reordering is not.
pub const RECORD_COLUMNS: [&str; 13] = [
    "timestamp",
    "rr_ta",
    "rr_rm_nir",
    "rr_rm_fir",
    "snr_ta",
    "snr_rm_nir",
    "snr_rm_fir",
    "rr_sqb",
    "apnea_posterior",
    "apnea_flag",
    "rr_final",
    "rr_ref",
    "apnea_ref",
];

pub fn window_records(analysis: &SessionAnalysis, fused: &[RaEstimate]) -> Vec<WindowRecord> {
    analysis
        .windows
        .iter()
        .zip(fused)
        .map(|(w, f)| WindowRecord {
            timestamp: f.timestamp,
            rr: w.estimates.map(|e| e.map(|e| e.rr)),
            snr: w.estimates.map(|e| e.map(|e| e.snr)),
            rr_sqb: f.rr_sqb,
            apnea_posterior: f.apnea_posterior,
            apnea_flag: f.apnea,
            rr_final: f.rr,
            rr_ref: w.rr_ref,
            apnea_ref: w.apnea_ref,
        })
        .collect()
}

impl WindowRecord {
    pub fn to_fields(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut out = vec![format!("{}", self.timestamp)];
        out.extend(self.rr.iter().map(|v| f(*v)));
        out.extend(self.snr.iter().map(|v| f(*v)));
        out.push(f(self.rr_sqb));
        out.push(f(self.apnea_posterior));
        out.push(u8::from(self.apnea_flag).to_string());
        out.push(f(self.rr_final));
        out.push(f(self.rr_ref));
        out.push(self.apnea_ref.map_or(String::new(), |a| u8::from(a).to_string()));
        out
    }

    pub fn from_fields(fields: &[&str]) -> Result<Self> {
        if fields.len() < RECORD_COLUMNS.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} columns, got {}",
                RECORD_COLUMNS.len(),
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|_| Error::InvalidParameter(format!("bad number {s:?}")))
            }
        };
        let flag = |s: &str| -> Result<Option<bool>> {
            match s {
                "" => Ok(None),
                "0" => Ok(Some(false)),
                "1" => Ok(Some(true)),
                _ => Err(Error::InvalidParameter(format!("bad flag {s:?}"))),
            }
        };
        Ok(WindowRecord {
            timestamp: num(fields[0])?.ok_or_else(|| Error::InvalidParameter("missing timestamp".into()))?,
            rr: [num(fields[1])?, num(fields[2])?, num(fields[3])?],
            snr: [num(fields[4])?, num(fields[5])?, num(fields[6])?],
            rr_sqb: num(fields[7])?,
            apnea_posterior: num(fields[8])?,
            apnea_flag: flag(fields[9])?.ok_or_else(|| Error::InvalidParameter("missing apnea_flag".into()))?,
            rr_final: num(fields[10])?,
            rr_ref: num(fields[11])?,
            apnea_ref: flag(fields[12])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{synth_signals, ChannelNoise, SessionSpec, SubjectProfile};

    #[test]
    fn partial_config_keeps_nested_defaults() {
        let cfg: PipelineConfig =
            serde_json::from_str(r#"{"ensemble": {"threshold": 0.4}, "flow": {"iterations": 5}}"#).unwrap();
        let d = PipelineConfig::default();
        assert_eq!(cfg.ensemble.threshold, 0.4);
        assert_eq!(cfg.ensemble.expert, d.ensemble.expert);
        assert_eq!(cfg.flow.iterations, 5);
        assert_eq!(cfg.flow.window_size, d.flow.window_size);
        assert_eq!(cfg.dsp, d.dsp);
    }

    #[test]
    fn short_runs_are_dropped() {
        let t: Vec<f64> = (0..100).map(|i| i as f64 * 0.5).collect();
        let mut f = vec![false; 100];
        f[10..20].iter_mut().for_each(|x| *x = true);
        f[40..80].iter_mut().for_each(|x| *x = true);
        drop_short_runs(&t, &mut f, 10.0);
        assert!(f[10..20].iter().all(|x| !x));
        assert!(f[40..80].iter().all(|x| *x));
    }

    #[test]
    fn record_fields_round_trip() {
        let r = WindowRecord {
            timestamp: 12.114942528735632,
            rr: [Some(10.2), None, Some(0.1 + 0.2)],
            snr: [Some(3.0), None, Some(1e6)],
            rr_sqb: Some(10.2),
            apnea_posterior: Some(0.123456789),
            apnea_flag: false,
            rr_final: Some(10.2),
            rr_ref: None,
            apnea_ref: Some(true),
        };
        let fields = r.to_fields();
        let refs: Vec<&str> = fields.iter().map(String::as_str).collect();
        assert_eq!(WindowRecord::from_fields(&refs).unwrap(), r);
    }

    #[test]
    fn clean_spontaneous_session_tracks_constant_rate() {
        let spec = SessionSpec::protocol(
            crate::protocol::Task::SpontaneousBreathing,
            &SubjectProfile::nominal("s"),
            ChannelNoise::none(),
            1,
        )
        .with_constant_rr(12.0)
        .without_motion();
        let sig = synth_signals(&spec).unwrap();
        let cfg = PipelineConfig::default();
        let a = analyze_session(&SessionSignals::from(&sig), Some(&spec.apnea_intervals), &cfg).unwrap();
        for w in &a.windows {
            for e in w.estimates.iter().flatten() {
                assert!((e.rr - 12.0).abs() <= 0.3 + 1e-9, "{} at {}: {}", e.source.name(), w.end, e.rr);
            }
        }
    }

    #[test]
    fn missing_detector_passes_sqb_through() {
        let spec = SessionSpec::protocol(Task::CentralApnea, &SubjectProfile::nominal("s"), ChannelNoise::moderate(), 2);
        let sig = synth_signals(&spec).unwrap();
        let cfg = PipelineConfig::default();
        let mut signals = SessionSignals::from(&sig);
        signals.rm_fir = None;
        let a = analyze_session(&signals, Some(&spec.apnea_intervals), &cfg).unwrap();
        assert_eq!(a.missing, vec![SignalSource::RmFir]);
        let fused = fuse_session(&a, None, &cfg).unwrap();
        assert!(fused.iter().all(|f| f.rr == f.rr_sqb && !f.apnea));
    }
}
