//! Synthetic recording sessions for the five protocol tasks.
//!
//! A session is driven by a chest displacement `d(t)` (fundamental plus a
//! 0.3-amplitude second harmonic at the instantaneous rate) and a nostril
//! temperature oscillation. Apnea intervals gate these components with short
//! raised-cosine ramps placed outside the interval, so the gated signals are
//! exactly zero inside it. The same timestamps and waveforms feed both the
//! direct signal generator ([`synth_signals`]) and the frame renderer
//! ([`synth_frames`]).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{window_is_apnea, ApneaInterval, ApneaKind, Task, MIN_APNEA_S};
use crate::roi::{AffineTransform, LandmarkFrame};
use crate::timebase::{Frame, FrameSource, RespSignal, SignalSource, Spectrum, WindowGrid};

pub const NIR_RATE_HZ: f64 = 15.0;
pub const FIR_RATE_HZ: f64 = 8.7;
pub const REFERENCE_RATE_HZ: f64 = 50.0;
pub const JITTER_FRACTION: f64 = 0.1;
pub const NIR_DIMS: (usize, usize) = (336, 190);
pub const FIR_DIMS: (usize, usize) = (160, 120);
pub const HARMONIC_AMPLITUDE: f64 = 0.3;
/// Chest-ROI motion during an obstructive apnea relative to normal
/// breathing. The ROI spans lower thorax and upper abdomen, which move
/// against each other while the airway is blocked.
pub const PARADOXICAL_MOTION_FACTOR: f64 = 0.4;
/// Baseline of the nostril intensity in normalized FIR units.
pub const NOSTRIL_BASELINE: f64 = 0.6;

const RAMP_S: f64 = 1.5;
const NOSE: (f64, f64) = (168.0, 95.0);
const CHIN_Y: f64 = 120.0;
const CHEST_TOP_Y: f64 = 130.0;

/// Per-subject physiology, shared by all of a subject's sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub id: String,
    /// Resting rate for spontaneous breathing, breaths/min.
    pub base_rr: f64,
    /// Peak nostril intensity swing, normalized FIR units.
    pub ta_amplitude: f64,
    /// Peak chest displacement in NIR pixels.
    pub chest_amplitude_px: f64,
    /// Phase lag of the nostril temperature behind chest motion, radians.
    pub ta_lag_rad: f64,
}

impl SubjectProfile {
    pub fn nominal(id: impl Into<String>) -> Self {
        SubjectProfile { id: id.into(), base_rr: 12.0, ta_amplitude: 0.1, chest_amplitude_px: 2.0, ta_lag_rad: 0.8 }
    }

    pub fn random(id: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SubjectProfile {
            id: id.into(),
            base_rr: rng.random_range(10.0..18.0),
            ta_amplitude: rng.random_range(0.06..0.14),
            chest_amplitude_px: rng.random_range(1.4..2.6),
            ta_lag_rad: rng.random_range(0.4..1.2),
        }
    }
}

/// Per-channel signal-to-noise ratios in dB; `None` means noiseless.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelNoise {
    pub ta_db: Option<f64>,
    pub rm_nir_db: Option<f64>,
    pub rm_fir_db: Option<f64>,
    pub reference_db: Option<f64>,
}

impl ChannelNoise {
    pub fn none() -> Self {
        ChannelNoise::default()
    }

    pub fn uniform(db: f64) -> Self {
        ChannelNoise { ta_db: Some(db), rm_nir_db: Some(db), rm_fir_db: Some(db), reference_db: Some(db + 20.0) }
    }

    pub fn moderate() -> Self {
        ChannelNoise::uniform(6.0)
    }

    pub fn is_none(&self) -> bool {
        *self == ChannelNoise::none()
    }

    fn for_source(&self, s: SignalSource) -> Option<f64> {
        match s {
            SignalSource::TaFir => self.ta_db,
            SignalSource::RmNir => self.rm_nir_db,
            SignalSource::RmFir => self.rm_fir_db,
            SignalSource::RefThorax | SignalSource::RefAbdomen => self.reference_db,
        }
    }
}

/// An interval during which one camera channel is buried in extra noise,
/// as when the subject turns their head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionEpisode {
    pub start: f64,
    pub end: f64,
    pub source: SignalSource,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub subject: SubjectProfile,
    pub task: Task,
    pub duration_s: f64,
    /// `(time, rate)` knots of a piecewise-linear breathing rate, breaths/min.
    pub rr_profile: Vec<(f64, f64)>,
    pub apnea_intervals: Vec<ApneaInterval>,
    pub noise: ChannelNoise,
    pub motion: Vec<MotionEpisode>,
    /// Gain on the NIR chest motion (below 1 under a blanket).
    pub rm_nir_gain: f64,
    /// Extra RM_NIR noise from blanket texture, dB relative to the
    /// unattenuated chest signal.
    pub rm_nir_texture_db: Option<f64>,
    /// Standard deviation of per-pixel frame noise.
    pub pixel_noise: f64,
    pub seed: u64,
}

fn central(start: f64, end: f64) -> ApneaInterval {
    ApneaInterval { start, end, kind: ApneaKind::Central }
}

impl SessionSpec {
    /// The recording protocol of `task` for one subject.
    pub fn protocol(task: Task, subject: &SubjectProfile, noise: ChannelNoise, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let three = |kind| -> Vec<ApneaInterval> {
            [30.0, 90.0, 150.0].iter().map(|&s| ApneaInterval { start: s, end: s + 20.0, kind }).collect()
        };
        let paced = |d: f64| vec![(0.0, 10.0), (d, 10.0)];
        let mut spec = SessionSpec {
            subject: subject.clone(),
            task,
            duration_s: 180.0,
            rr_profile: paced(180.0),
            apnea_intervals: Vec::new(),
            noise,
            motion: Vec::new(),
            rm_nir_gain: 1.0,
            rm_nir_texture_db: None,
            pixel_noise: 0.0,
            seed,
        };
        match task {
            Task::SpontaneousBreathing => {
                spec.duration_s = 270.0;
                let phase = rng.random_range(0.0..2.0 * PI);
                spec.rr_profile = (0..=270)
                    .map(|t| {
                        let t = t as f64;
                        (t, subject.base_rr + 2.0 * (2.0 * PI * t / 120.0 + phase).sin())
                    })
                    .collect();
                spec.motion = head_turn_schedule(270.0, -10.0);
            }
            Task::CentralApnea => spec.apnea_intervals = three(ApneaKind::Central),
            Task::ObstructiveApnea => spec.apnea_intervals = three(ApneaKind::Obstructive),
            Task::CentralApneaBlanket => {
                spec.apnea_intervals = three(ApneaKind::Central);
                spec.rm_nir_gain = 0.3;
                if !noise.is_none() {
                    spec.rm_nir_texture_db = Some(10.0);
                }
            }
            Task::CentralApneaArbitrary => {
                let s1 = rng.random_range(25.0..45.0);
                let l1 = rng.random_range(15.0..40.0);
                let s2 = rng.random_range(100.0..120.0);
                let l2 = rng.random_range(15.0..40.0);
                spec.apnea_intervals = vec![central(s1, s1 + l1), central(s2, s2 + l2)];
            }
        }
        if task.has_apnea() {
            let first = rng.random_range(0..SignalSource::CAMERA.len());
            spec.motion = gap_head_turns(&spec.apnea_intervals, spec.duration_s, first, -10.0);
        }
        spec
    }

    /// Replace the rate profile by a constant rate.
    pub fn with_constant_rr(mut self, rr: f64) -> Self {
        self.rr_profile = vec![(0.0, rr), (self.duration_s, rr)];
        self
    }

    /// Shorten the session to `duration_s`, dropping apneas that would no
    /// longer end inside it.
    pub fn truncated(mut self, duration_s: f64) -> Self {
        self.duration_s = self.duration_s.min(duration_s);
        let d = self.duration_s;
        self.apnea_intervals.retain(|a| a.end <= d);
        self.motion.retain(|m| m.start < d);
        self.motion.iter_mut().for_each(|m| m.end = m.end.min(d));
        self
    }

    pub fn without_motion(mut self) -> Self {
        self.motion.clear();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.duration_s > 0.0) {
            return bad(format!("duration {}", self.duration_s));
        }
        if self.rr_profile.is_empty()
            || self.rr_profile.windows(2).any(|w| w[1].0 <= w[0].0)
            || self.rr_profile.iter().any(|(_, r)| !(r.is_finite() && *r >= 0.0))
        {
            return bad("rate profile must have increasing knots and non-negative rates".into());
        }
        for a in &self.apnea_intervals {
            if !(a.duration() > MIN_APNEA_S) || a.start < 0.0 || a.end > self.duration_s {
                return bad(format!("apnea interval {:?} must last > {MIN_APNEA_S} s inside the session", a));
            }
            let consistent = match self.task {
                Task::SpontaneousBreathing => false,
                Task::ObstructiveApnea => a.kind == ApneaKind::Obstructive,
                _ => a.kind == ApneaKind::Central,
            };
            if !consistent {
                return bad(format!("{:?} apnea in task {}", a.kind, self.task));
            }
        }
        if !(self.rm_nir_gain >= 0.0) || !(self.pixel_noise >= 0.0) {
            return bad("gains and noise levels must be non-negative".into());
        }
        Ok(())
    }

    fn rr_at(&self, t: f64) -> f64 {
        interp_knots(&self.rr_profile, t)
    }

    /// Breathing phase in radians: the integral of the rate profile.
    fn phase_at(&self, t: f64) -> f64 {
        let k = &self.rr_profile;
        let mut acc = 0.0;
        let mut prev = (0.0f64.min(k[0].0), k[0].1);
        for &(kt, kr) in k.iter() {
            if kt >= t {
                let r_t = self.rr_at(t);
                acc += 0.5 * (prev.1 + r_t) * (t - prev.0).max(0.0);
                return 2.0 * PI * acc / 60.0;
            }
            acc += 0.5 * (prev.1 + kr) * (kt - prev.0);
            prev = (kt, kr);
        }
        acc += prev.1 * (t - prev.0);
        2.0 * PI * acc / 60.0
    }

    fn waveform(&self, t: f64, lag: f64) -> f64 {
        let phi = self.phase_at(t) - lag;
        phi.sin() + HARMONIC_AMPLITUDE * (2.0 * phi).sin()
    }

    /// Gate for chest motion: closed only during central apnea.
    fn motion_gate(&self, t: f64) -> f64 {
        gate(t, self.apnea_intervals.iter().filter(|a| a.kind == ApneaKind::Central))
    }

    /// Gate for airflow: closed during every apnea.
    fn airflow_gate(&self, t: f64) -> f64 {
        gate(t, self.apnea_intervals.iter())
    }

    /// Attenuation of ROI-averaged chest motion during obstructive apneas.
    fn paradox_factor(&self, t: f64) -> f64 {
        let open = gate(t, self.apnea_intervals.iter().filter(|a| a.kind == ApneaKind::Obstructive));
        PARADOXICAL_MOTION_FACTOR + (1.0 - PARADOXICAL_MOTION_FACTOR) * open
    }

    /// Chest displacement in NIR pixels, before the NIR-specific gain.
    pub fn displacement(&self, t: f64) -> f64 {
        self.subject.chest_amplitude_px * self.waveform(t, 0.0) * self.motion_gate(t) * self.paradox_factor(t)
    }

    /// Nostril temperature swing in normalized FIR units.
    pub fn airflow(&self, t: f64) -> f64 {
        self.subject.ta_amplitude * self.waveform(t, self.subject.ta_lag_rad) * self.airflow_gate(t)
    }

    fn mean_rr(&self) -> f64 {
        let n = 200;
        (0..n).map(|i| self.rr_at(self.duration_s * i as f64 / n as f64)).sum::<f64>() / n as f64
    }

    /// Power of a channel's breathing component at the mean rate, used as
    /// the reference for its SNR.
    fn signal_power(&self, s: SignalSource) -> f64 {
        let harmonic = 1.0 + HARMONIC_AMPLITUDE * HARMONIC_AMPLITUDE;
        let omega = 2.0 * PI * self.mean_rr() / 60.0;
        let velocity = 1.0 + (2.0 * HARMONIC_AMPLITUDE).powi(2);
        let a = self.subject.chest_amplitude_px;
        match s {
            SignalSource::TaFir => self.subject.ta_amplitude.powi(2) * harmonic / 2.0,
            SignalSource::RmNir => (a * omega).powi(2) * velocity / 2.0,
            SignalSource::RmFir => (a * FIR_SCALE_Y * omega).powi(2) * velocity / 2.0,
            SignalSource::RefThorax | SignalSource::RefAbdomen => harmonic / 2.0,
        }
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let step = 0.5;
        let n = (self.duration_s / step).ceil() as usize;
        let rr = (0..=n).map(|i| {
            let t = (i as f64 * step).min(self.duration_s);
            (t, self.rr_at(t))
        });
        GroundTruth {
            duration_s: self.duration_s,
            rr_trace: rr.collect(),
            apnea_intervals: self.apnea_intervals.clone(),
        }
    }
}

const FIR_SCALE_X: f64 = FIR_DIMS.0 as f64 / NIR_DIMS.0 as f64;
const FIR_SCALE_Y: f64 = FIR_DIMS.1 as f64 / NIR_DIMS.1 as f64;

/// 30 s episodes every 60 s, cycling through the camera channels.
pub fn head_turn_schedule(duration_s: f64, snr_db: f64) -> Vec<MotionEpisode> {
    let mut out = Vec::new();
    let mut start = 30.0;
    let mut k = 0;
    while start + 30.0 <= duration_s {
        out.push(MotionEpisode { start, end: start + 30.0, source: SignalSource::CAMERA[k % 3], snr_db });
        start += 60.0;
        k += 1;
    }
    out
}

/// One 20 s head turn centered in every breathing gap of at least 26 s
/// between apneas, cycling through the camera channels from `first`.
pub fn gap_head_turns(apneas: &[ApneaInterval], duration_s: f64, first: usize, snr_db: f64) -> Vec<MotionEpisode> {
    let mut edges = vec![0.0];
    for a in apneas {
        edges.extend([a.start, a.end]);
    }
    edges.push(duration_s);
    edges
        .chunks(2)
        .filter(|g| g[1] - g[0] >= 26.0)
        .enumerate()
        .map(|(k, g)| {
            let mid = 0.5 * (g[0] + g[1]);
            MotionEpisode {
                start: mid - 10.0,
                end: mid + 10.0,
                source: SignalSource::CAMERA[(first + k) % SignalSource::CAMERA.len()],
                snr_db,
            }
        })
        .collect()
}

fn interp_knots(k: &[(f64, f64)], t: f64) -> f64 {
    let i = k.partition_point(|(kt, _)| *kt <= t);
    if i == 0 {
        return k[0].1;
    }
    if i == k.len() {
        return k[k.len() - 1].1;
    }
    let (t0, r0) = k[i - 1];
    let (t1, r1) = k[i];
    r0 + (r1 - r0) * (t - t0) / (t1 - t0)
}

fn gate<'a>(t: f64, intervals: impl Iterator<Item = &'a ApneaInterval>) -> f64 {
    let mut g = 1.0;
    for a in intervals {
        let v = if t >= a.start && t <= a.end {
            0.0
        } else if t < a.start && t > a.start - RAMP_S {
            0.5 * (1.0 - (PI * (a.start - t) / RAMP_S).cos())
        } else if t > a.end && t < a.end + RAMP_S {
            0.5 * (1.0 - (PI * (t - a.end) / RAMP_S).cos())
        } else {
            1.0
        };
        g *= v;
    }
    g
}

/// Simulator ground truth for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub duration_s: f64,
    /// `(time, rate)` samples of the breathing rate, ignoring apnea.
    pub rr_trace: Vec<(f64, f64)>,
    pub apnea_intervals: Vec<ApneaInterval>,
}

impl GroundTruth {
    pub fn is_apnea_window(&self, start: f64, end: f64) -> bool {
        window_is_apnea(start, end, &self.apnea_intervals)
    }

    /// Rate for a window: 0 for apnea windows, otherwise the mean breathing
    /// rate over the window.
    pub fn window_rr(&self, start: f64, end: f64) -> f64 {
        if self.is_apnea_window(start, end) {
            return 0.0;
        }
        let n = 24;
        (0..=n).map(|i| interp_knots(&self.rr_trace, start + (end - start) * i as f64 / n as f64)).sum::<f64>()
            / (n + 1) as f64
    }

    pub fn labels(&self, grid: &WindowGrid) -> Vec<bool> {
        grid.iter().map(|(s, e)| self.is_apnea_window(s, e)).collect()
    }

    pub fn apnea_fraction(&self) -> f64 {
        self.apnea_intervals.iter().map(|a| a.overlap(0.0, self.duration_s)).sum::<f64>() / self.duration_s
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSignals {
    pub ta_fir: RespSignal,
    pub rm_nir: RespSignal,
    pub rm_fir: RespSignal,
    pub ref_thorax: RespSignal,
    pub ref_abdomen: RespSignal,
    pub truth: GroundTruth,
}

mod stream {
    pub const NIR_TIMES: u64 = 0;
    pub const FIR_TIMES: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const MOTION: u64 = 8;
    pub const TEXTURE: u64 = 12;
    pub const PIXELS: u64 = 16;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Camera timestamps with ±10 % uniform jitter on each frame interval.
pub fn jittered_times(rate: f64, duration_s: f64, rng: &mut impl Rng) -> Vec<f64> {
    let period = 1.0 / rate;
    let mut t = 0.0;
    let mut out = Vec::with_capacity((duration_s * rate * 1.2) as usize + 1);
    while t < duration_s {
        out.push(t);
        t += period * (1.0 + rng.random_range(-JITTER_FRACTION..JITTER_FRACTION));
    }
    out
}

fn camera_times(spec: &SessionSpec, s: Spectrum) -> Vec<f64> {
    match s {
        Spectrum::Nir => jittered_times(NIR_RATE_HZ, spec.duration_s, &mut rng_for(spec.seed, stream::NIR_TIMES)),
        Spectrum::Fir => jittered_times(FIR_RATE_HZ, spec.duration_s, &mut rng_for(spec.seed, stream::FIR_TIMES)),
    }
}

/// Unit-variance mixture of white and pink noise.
pub fn colored_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let driver: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    // Three-pole approximation of a 1/f spectrum.
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut pink: Vec<f64> = driver
        .iter()
        .map(|&w| {
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    let sd = crate::stats::sample_std(&pink);
    if sd > 0.0 {
        pink.iter_mut().for_each(|p| *p /= sd);
    }
    white.iter().zip(&pink).map(|(w, p)| (w + p) / 2f64.sqrt()).collect()
}

fn noise_sigma(power: f64, db: f64) -> f64 {
    (power / 10f64.powf(db / 10.0)).sqrt()
}

fn add_noise(spec: &SessionSpec, source: SignalSource, times: &[f64], values: &mut [f64], power: f64) {
    let idx = SignalSource::ALL.iter().position(|s| *s == source).unwrap() as u64;
    if let Some(db) = spec.noise.for_source(source) {
        let sigma = noise_sigma(power, db);
        let noise = colored_noise(values.len(), &mut rng_for(spec.seed, stream::NOISE + idx));
        values.iter_mut().zip(noise).for_each(|(v, n)| *v += sigma * n);
    }
    let mut rng = rng_for(spec.seed, stream::MOTION + idx);
    for ep in spec.motion.iter().filter(|e| e.source == source) {
        let sigma = noise_sigma(power, ep.snr_db);
        let range: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= ep.start && times[i] < ep.end).collect();
        let noise = colored_noise(range.len(), &mut rng);
        for (i, n) in range.into_iter().zip(noise) {
            values[i] += sigma * n;
        }
    }
}

fn velocity(times: &[f64], disp: impl Fn(f64) -> f64) -> (Vec<f64>, Vec<f64>) {
    let d: Vec<f64> = times.iter().map(|&t| disp(t)).collect();
    let v = (1..times.len()).map(|i| (d[i] - d[i - 1]) / (times[i] - times[i - 1])).collect();
    (times[1..].to_vec(), v)
}

/// Generate the five respiratory signals of a session directly.
pub fn synth_signals(spec: &SessionSpec) -> Result<SyntheticSignals> {
    spec.validate()?;
    let nir_t = camera_times(spec, Spectrum::Nir);
    let fir_t = camera_times(spec, Spectrum::Fir);

    let mut ta: Vec<f64> = fir_t.iter().map(|&t| NOSTRIL_BASELINE + spec.airflow(t)).collect();
    add_noise(spec, SignalSource::TaFir, &fir_t, &mut ta, spec.signal_power(SignalSource::TaFir));

    let (rm_nir_t, mut rm_nir) = velocity(&nir_t, |t| spec.rm_nir_gain * spec.displacement(t));
    let p_nir = spec.signal_power(SignalSource::RmNir);
    add_noise(spec, SignalSource::RmNir, &rm_nir_t, &mut rm_nir, p_nir);
    if let Some(db) = spec.rm_nir_texture_db {
        let sigma = noise_sigma(p_nir, db);
        let noise = colored_noise(rm_nir.len(), &mut rng_for(spec.seed, stream::TEXTURE));
        rm_nir.iter_mut().zip(noise).for_each(|(v, n)| *v += sigma * n);
    }

    let (rm_fir_t, mut rm_fir) = velocity(&fir_t, |t| FIR_SCALE_Y * spec.displacement(t));
    add_noise(spec, SignalSource::RmFir, &rm_fir_t, &mut rm_fir, spec.signal_power(SignalSource::RmFir));

    let n_ref = (spec.duration_s * REFERENCE_RATE_HZ).floor() as usize;
    let ref_t: Vec<f64> = (0..n_ref).map(|i| i as f64 / REFERENCE_RATE_HZ).collect();
    let mut thorax: Vec<f64> = ref_t.iter().map(|&t| spec.waveform(t, 0.0) * spec.motion_gate(t)).collect();
    let mut abdomen: Vec<f64> = ref_t
        .iter()
        .map(|&t| {
            let paradox = spec
                .apnea_intervals
                .iter()
                .any(|i| i.kind == ApneaKind::Obstructive && t >= i.start && t <= i.end);
            let sign = if paradox { -0.8 } else { 0.8 };
            sign * spec.waveform(t, 0.3) * spec.motion_gate(t)
        })
        .collect();
    let p_ref = spec.signal_power(SignalSource::RefThorax);
    add_noise(spec, SignalSource::RefThorax, &ref_t, &mut thorax, p_ref);
    add_noise(spec, SignalSource::RefAbdomen, &ref_t, &mut abdomen, p_ref);

    Ok(SyntheticSignals {
        ta_fir: RespSignal::new(SignalSource::TaFir, fir_t, ta)?,
        rm_nir: RespSignal::new(SignalSource::RmNir, rm_nir_t, rm_nir)?,
        rm_fir: RespSignal::new(SignalSource::RmFir, rm_fir_t, rm_fir)?,
        ref_thorax: RespSignal::new(SignalSource::RefThorax, ref_t.clone(), thorax)?,
        ref_abdomen: RespSignal::new(SignalSource::RefAbdomen, ref_t, abdomen)?,
        truth: spec.ground_truth(),
    })
}

/// Smooth random texture: a sum of oriented sinusoids.
#[derive(Debug, Clone)]
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
    base: f64,
}

impl Texture {
    fn random(rng: &mut impl Rng, base: f64, contrast: f64, scale: f64) -> Self {
        let n = 6;
        let waves = (0..n)
            .map(|_| {
                let wavelength = rng.random_range(8.0..20.0) * scale;
                let theta = rng.random_range(0.0..PI);
                let k = 2.0 * PI / wavelength;
                (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..2.0 * PI), contrast / n as f64)
            })
            .collect();
        Texture { waves, base }
    }

    /// `(sin, cos)` of every wave's phase at every pixel of a `w x h` frame,
    /// wave-minor.
    fn phase_table(&self, w: usize, h: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(w * h * self.waves.len());
        for y in 0..h {
            for x in 0..w {
                for (kx, ky, p, _) in &self.waves {
                    out.push((kx * x as f64 + ky * y as f64 + p).sin_cos());
                }
            }
        }
        out
    }
}

/// Frames rendered on demand for one camera.
#[derive(Debug, Clone)]
pub struct SyntheticFrames {
    spectrum: Spectrum,
    dims: (usize, usize),
    times: Vec<f64>,
    /// Vertical chest offset per frame, in this camera's pixels.
    chest_offset: Vec<f64>,
    /// Nostril intensity per frame (FIR only).
    nostril: Vec<f64>,
    texture: Texture,
    phases: std::sync::Arc<Vec<(f64, f64)>>,
    pixel_noise: f64,
    seed: u64,
}

impl FrameSource for SyntheticFrames {
    fn spectrum(&self) -> Spectrum {
        self.spectrum
    }

    fn dims(&self) -> (usize, usize) {
        self.dims
    }

    fn timestamps(&self) -> &[f64] {
        &self.times
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        if index >= self.times.len() {
            return Err(Error::InvalidParameter(format!("frame {index} of {}", self.times.len())));
        }
        let (w, h) = self.dims;
        let d = self.chest_offset[index];
        let (background, chest_top) = match self.spectrum {
            Spectrum::Nir => (0.25, CHEST_TOP_Y),
            Spectrum::Fir => (0.0, CHEST_TOP_Y * FIR_SCALE_Y),
        };
        let mut f = Frame::filled(w, h, background);
        // Shifting the texture down by d rotates each wave's phase by -ky·d.
        let shift: Vec<(f64, f64)> =
            self.texture.waves.iter().map(|(_, ky, _, a)| { let (s, c) = (ky * d).sin_cos(); (a * c, a * s) }).collect();
        let nw = shift.len();
        let first = ((chest_top + d).ceil().max(0.0) as usize).min(h);
        for y in first..h {
            for x in 0..w {
                let ph = &self.phases[(y * w + x) * nw..(y * w + x + 1) * nw];
                let v: f64 = ph.iter().zip(&shift).map(|((sa, ca), (ac, as_))| sa * ac - ca * as_).sum();
                f.data[y * w + x] = self.texture.base + v;
            }
        }
        if self.spectrum == Spectrum::Fir {
            let (nx, ny) = (NOSE.0 * FIR_SCALE_X, NOSE.1 * FIR_SCALE_Y);
            for y in (ny - 9.0).round() as usize..=(ny + 9.0).round() as usize {
                for x in (nx - 6.0).round() as usize..=(nx + 6.0).round() as usize {
                    f.set(x, y, self.nostril[index]);
                }
            }
            // A fixed hot spot keeps the min-max normalization stable.
            for y in 2..6 {
                for x in 2..6 {
                    f.set(x, y, 1.0);
                }
            }
        }
        if self.pixel_noise > 0.0 {
            let mut rng = rng_for(self.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), stream::PIXELS);
            for v in f.data.iter_mut() {
                *v += self.pixel_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(f)
    }
}

/// Rendered video of a session.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub nir: SyntheticFrames,
    pub fir: SyntheticFrames,
    pub landmarks: Vec<LandmarkFrame>,
    pub calibration: AffineTransform,
    pub truth: GroundTruth,
}

/// Render NIR and FIR frames of a session. The scene is static except for
/// the chest texture, which moves with the chest displacement, and the
/// nostril patch, whose FIR intensity follows the airflow. Motion episodes
/// and channel noise apply to [`synth_signals`] only; frames carry just
/// `pixel_noise`.
pub fn synth_frames(spec: &SessionSpec) -> Result<SyntheticVideo> {
    spec.validate()?;
    let nir_t = camera_times(spec, Spectrum::Nir);
    let fir_t = camera_times(spec, Spectrum::Fir);
    let mut rng = rng_for(spec.seed, stream::TEXTURE + 1);
    let nir_texture = Texture::random(&mut rng, 0.55, 0.35, 1.0);
    let fir_texture = Texture::random(&mut rng, 0.35, 0.2, FIR_SCALE_Y);
    let nir = SyntheticFrames {
        spectrum: Spectrum::Nir,
        dims: NIR_DIMS,
        chest_offset: nir_t.iter().map(|&t| spec.rm_nir_gain * spec.displacement(t)).collect(),
        nostril: Vec::new(),
        phases: std::sync::Arc::new(nir_texture.phase_table(NIR_DIMS.0, NIR_DIMS.1)),
        times: nir_t.clone(),
        texture: nir_texture,
        pixel_noise: spec.pixel_noise,
        seed: spec.seed,
    };
    let fir = SyntheticFrames {
        spectrum: Spectrum::Fir,
        dims: FIR_DIMS,
        chest_offset: fir_t.iter().map(|&t| FIR_SCALE_Y * spec.displacement(t)).collect(),
        nostril: fir_t.iter().map(|&t| NOSTRIL_BASELINE + spec.airflow(t)).collect(),
        phases: std::sync::Arc::new(fir_texture.phase_table(FIR_DIMS.0, FIR_DIMS.1)),
        times: fir_t,
        texture: fir_texture,
        pixel_noise: spec.pixel_noise,
        seed: spec.seed.wrapping_add(1),
    };
    let landmarks =
        nir_t.iter().map(|&t| LandmarkFrame { timestamp: t, nose: NOSE, chin_y: CHIN_Y, valid: true }).collect();
    Ok(SyntheticVideo {
        nir,
        fir,
        landmarks,
        calibration: AffineTransform::full_frame(NIR_DIMS, FIR_DIMS),
        truth: spec.ground_truth(),
    })
}
