//! Shared domain types: timestamped signals, frame streams, and the sliding
//! window grid every later stage is evaluated on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Minimum number of samples a window must hold to be analysed.
pub const MIN_WINDOW_SAMPLES: usize = 8;

/// Default analysis window length in seconds.
pub const DEFAULT_WINDOW_S: f64 = 12.0;

/// Default pooling segment for evaluation, seconds.
pub const DEFAULT_SEGMENT_S: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Spectrum {
    Nir,
    Fir,
}

/// Origin of a respiratory signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignalSource {
    TaFir,
    RmNir,
    RmFir,
    RefThorax,
    RefAbdomen,
}

impl SignalSource {
    /// The three camera-derived sources, in canonical order.
    pub const CAMERA: [SignalSource; 3] = [SignalSource::TaFir, SignalSource::RmNir, SignalSource::RmFir];
    pub const ALL: [SignalSource; 5] = [
        SignalSource::TaFir,
        SignalSource::RmNir,
        SignalSource::RmFir,
        SignalSource::RefThorax,
        SignalSource::RefAbdomen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SignalSource::TaFir => "ta_fir",
            SignalSource::RmNir => "rm_nir",
            SignalSource::RmFir => "rm_fir",
            SignalSource::RefThorax => "ref_thorax",
            SignalSource::RefAbdomen => "ref_abdomen",
        }
    }

    /// Index into `CAMERA`, if this is a camera source.
    pub fn camera_index(self) -> Option<usize> {
        SignalSource::CAMERA.iter().position(|&s| s == self)
    }
}

pub(crate) fn check_times(times: &[f64]) -> Result<()> {
    for (i, t) in times.iter().enumerate() {
        if !t.is_finite() || *t < 0.0 {
            return Err(Error::NonMonotonicTime(i));
        }
        if i > 0 && *t <= times[i - 1] {
            return Err(Error::NonMonotonicTime(i));
        }
    }
    Ok(())
}

/// An unevenly sampled scalar time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespSignal {
    source: SignalSource,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl RespSignal {
    pub fn new(source: SignalSource, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidParameter(format!(
                "{} timestamps but {} values",
                times.len(),
                values.len()
            )));
        }
        check_times(&times)?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(RespSignal { source, times, values })
    }

    pub fn source(&self) -> SignalSource {
        self.source
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Typical sampling interval: the median of consecutive differences.
    pub fn typical_period(&self) -> f64 {
        typical_period(&self.times)
    }

    /// Effective duration `last - first + period`, so that `n` uniform samples
    /// at rate `fs` span exactly `n / fs` seconds.
    pub fn duration(&self) -> f64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => b - a + self.typical_period(),
            _ => 0.0,
        }
    }

    /// Index range of samples with `start <= t < end`.
    pub fn range(&self, start: f64, end: f64) -> std::ops::Range<usize> {
        sample_range(&self.times, start, end)
    }

    pub fn slice(&self, start: f64, end: f64) -> Window<'_> {
        let r = self.range(start, end);
        Window {
            start,
            end,
            times: &self.times[r.clone()],
            values: &self.values[r],
        }
    }
}

pub(crate) fn typical_period(times: &[f64]) -> f64 {
    if times.len() < 2 {
        return 0.0;
    }
    let diffs: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    stats::median(&diffs).unwrap_or(0.0)
}

// Tolerance absorbing `t0 + k * stride` round-off at window edges.
const EDGE_EPS: f64 = 1e-9;

pub(crate) fn sample_range(times: &[f64], start: f64, end: f64) -> std::ops::Range<usize> {
    let lo = times.partition_point(|&t| t < start - EDGE_EPS);
    let hi = times.partition_point(|&t| t < end - EDGE_EPS);
    lo..hi.max(lo)
}

/// A borrowed view of the samples falling in `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<'a> {
    pub start: f64,
    pub end: f64,
    pub times: &'a [f64],
    pub values: &'a [f64],
}

impl Window<'_> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Regularly spaced window starts shared by every channel of a session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowGrid {
    pub origin: f64,
    pub length: f64,
    pub stride: f64,
    pub count: usize,
}

impl WindowGrid {
    /// All complete windows of `length` inside `[origin, origin + span)`.
    pub fn covering(origin: f64, span: f64, length: f64, stride: f64) -> Result<Self> {
        if !(length > 0.0) || !(stride > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "window length {length} and stride {stride} must be positive"
            )));
        }
        let count = if span + EDGE_EPS < length {
            0
        } else {
            ((span - length) / stride + EDGE_EPS).floor() as usize + 1
        };
        Ok(WindowGrid { origin, length, stride, count })
    }

    pub fn bounds(&self, k: usize) -> (f64, f64) {
        let start = self.origin + k as f64 * self.stride;
        (start, start + self.length)
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.count).map(move |k| self.bounds(k))
    }
}

/// Result of windowing a single signal.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet<'a> {
    pub windows: Vec<Window<'a>>,
    /// Windows dropped for holding fewer than [`MIN_WINDOW_SAMPLES`] samples.
    pub skipped_sparse: usize,
}

impl WindowSet<'_> {
    /// No window could be formed (signal shorter than one window, or every
    /// window too sparse).
    pub fn is_empty_result(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Cut `signal` into windows of `length` seconds every `stride` seconds,
/// starting at the first sample. Partial trailing windows are dropped.
pub fn slide_windows(signal: &RespSignal, length: f64, stride: f64) -> Result<WindowSet<'_>> {
    if signal.is_empty() {
        return Err(Error::EmptyInput);
    }
    let grid = WindowGrid::covering(signal.times[0], signal.duration(), length, stride)?;
    let mut windows = Vec::with_capacity(grid.count);
    let mut skipped_sparse = 0;
    for (start, end) in grid.iter() {
        let w = signal.slice(start, end);
        if w.len() < MIN_WINDOW_SAMPLES {
            skipped_sparse += 1;
        } else {
            windows.push(w);
        }
    }
    Ok(WindowSet { windows, skipped_sparse })
}

/// Median of the estimates falling in each non-overlapping `segment`-second
/// bin anchored at t = 0. Empty bins and non-finite estimates are skipped.
pub fn pool_segments(estimates: &[(f64, f64)], segment: f64) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    if !(segment > 0.0) {
        return out;
    }
    let mut current: Option<usize> = None;
    let mut bucket: Vec<f64> = Vec::new();
    for &(t, rr) in estimates {
        if !rr.is_finite() || !t.is_finite() {
            continue;
        }
        let idx = (t / segment).floor().max(0.0) as usize;
        if current != Some(idx) {
            if let (Some(c), Some(m)) = (current, stats::median(&bucket)) {
                out.push((c, m));
            }
            bucket.clear();
            current = Some(idx);
        }
        bucket.push(rr);
    }
    if let (Some(c), Some(m)) = (current, stats::median(&bucket)) {
        out.push((c, m));
    }
    out
}

/// A single-channel image with real-valued intensities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "frame buffer of {} for {width}x{height}",
                data.len()
            )));
        }
        Ok(Frame { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Frame { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Copy out the rectangle `[x0, x1) x [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Frame {
        let w = x1 - x0;
        let h = y1 - y0;
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y1 {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x1]);
        }
        Frame { width: w, height: h, data }
    }
}

/// Random access to a timestamped frame stream. Implemented by in-memory
/// sequences, on-disk datasets and the synthetic renderer, so extraction can
/// stream frames instead of holding a whole video.
pub trait FrameSource: Sync {
    fn spectrum(&self) -> Spectrum;
    fn dims(&self) -> (usize, usize);
    fn timestamps(&self) -> &[f64];
    fn frame(&self, index: usize) -> Result<Frame>;

    fn len(&self) -> usize {
        self.timestamps().len()
    }

    fn is_empty(&self) -> bool {
        self.timestamps().is_empty()
    }
}

/// An in-memory frame stream.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub spectrum: Spectrum,
    pub width: usize,
    pub height: usize,
    pub nominal_rate: f64,
    times: Vec<f64>,
    frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn new(spectrum: Spectrum, nominal_rate: f64, times: Vec<f64>, frames: Vec<Frame>) -> Result<Self> {
        if times.len() != frames.len() {
            return Err(Error::InvalidParameter("timestamp/frame count mismatch".into()));
        }
        check_times(&times)?;
        let (width, height) = frames.first().map(|f| (f.width, f.height)).unwrap_or((0, 0));
        if frames.iter().any(|f| f.width != width || f.height != height) {
            return Err(Error::InvalidParameter("frames differ in size".into()));
        }
        Ok(FrameSequence { spectrum, width, height, nominal_rate, times, frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }
}

impl FrameSource for FrameSequence {
    fn spectrum(&self) -> Spectrum {
        self.spectrum
    }

    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn timestamps(&self) -> &[f64] {
        &self.times
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        self.frames.get(index).cloned().ok_or(Error::EmptyInput)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(fs: f64, duration: f64) -> RespSignal {
        let n = (duration * fs).round() as usize;
        let times: Vec<f64> = (0..n).map(|i| i as f64 / fs).collect();
        let values = times.iter().map(|t| t.sin()).collect();
        RespSignal::new(SignalSource::TaFir, times, values).unwrap()
    }

    #[test]
    fn sixty_seconds_at_fir_rate() {
        let s = uniform(8.7, 60.0);
        let ws = slide_windows(&s, 12.0, 1.0 / 8.7).unwrap();
        // Direct enumeration over starts t_k = k / 8.7 with t_k + 12 <= 522 / 8.7.
        let n = s.len();
        let dur = n as f64 / 8.7;
        let expected = (0..).take_while(|k| *k as f64 / 8.7 + 12.0 <= dur + 1e-9).count();
        assert_eq!(ws.windows.len(), expected);
        assert_eq!(expected, 418);
        assert_eq!(ws.skipped_sparse, 0);
    }

    #[test]
    fn exact_length_gives_one_window() {
        let s = uniform(10.0, 12.0);
        let ws = slide_windows(&s, 12.0, 12.0).unwrap();
        assert_eq!(ws.windows.len(), 1);
        assert_eq!(ws.windows[0].len(), s.len());
    }

    #[test]
    fn shorter_than_window_is_empty_result() {
        let s = uniform(8.7, 10.0);
        let ws = slide_windows(&s, 12.0, 1.0).unwrap();
        assert!(ws.is_empty_result());
    }

    #[test]
    fn empty_signal_is_error() {
        let s = RespSignal::new(SignalSource::RmNir, vec![], vec![]).unwrap();
        assert!(matches!(slide_windows(&s, 12.0, 1.0), Err(Error::EmptyInput)));
    }

    #[test]
    fn sparse_windows_are_skipped_and_counted() {
        // 1 Hz signal: a 5 s window holds 5 samples (< 8).
        let times: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let s = RespSignal::new(SignalSource::RmFir, times, vec![0.0; 30]).unwrap();
        let ws = slide_windows(&s, 5.0, 5.0).unwrap();
        assert!(ws.windows.is_empty());
        assert_eq!(ws.skipped_sparse, 6);
    }

    #[test]
    fn rejects_non_monotonic_times() {
        assert!(RespSignal::new(SignalSource::TaFir, vec![0.0, 1.0, 1.0], vec![0.0; 3]).is_err());
        assert!(RespSignal::new(SignalSource::TaFir, vec![0.0, 1.0], vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(pool_segments(&[(1.0, 10.0), (2.0, 10.0), (3.0, 40.0)], 15.0), vec![(0, 10.0)]);
        assert_eq!(pool_segments(&[(16.0, 12.5)], 15.0), vec![(1, 12.5)]);
        let est: Vec<(f64, f64)> = (0..45).map(|i| (i as f64, 12.0)).collect();
        assert_eq!(pool_segments(&est, 15.0).len(), 3);
        // Empty middle bin is omitted.
        assert_eq!(pool_segments(&[(1.0, 1.0), (31.0, 2.0)], 15.0), vec![(0, 1.0), (2, 2.0)]);
    }

    proptest! {
        #[test]
        fn window_count_formula(fs in 4.0f64..20.0, dur in 12.0f64..90.0, stride in 0.1f64..5.0) {
            let s = uniform(fs, dur);
            let ws = slide_windows(&s, 12.0, stride).unwrap();
            let d = s.duration();
            let expected = ((d - 12.0) / stride + 1e-9).floor() as usize + 1;
            prop_assert_eq!(ws.windows.len() + ws.skipped_sparse, expected);
            // Deterministic boundaries.
            let again = slide_windows(&s, 12.0, stride).unwrap();
            prop_assert_eq!(ws, again);
        }

        #[test]
        fn pooling_is_permutation_invariant_within_bin(mut v in proptest::collection::vec(1.0f64..40.0, 1..20), seed in any::<u64>()) {
            let a: Vec<(f64, f64)> = v.iter().enumerate().map(|(i, &r)| (i as f64 * 0.5, r)).collect();
            let p1 = pool_segments(&a, 15.0);
            // Shuffle values while keeping timestamps inside the single bin.
            let k = (seed as usize) % v.len();
            v.rotate_left(k);
            v.reverse();
            let b: Vec<(f64, f64)> = v.iter().enumerate().map(|(i, &r)| (i as f64 * 0.5, r)).collect();
            prop_assert_eq!(p1, pool_segments(&b, 15.0));
        }
    }
}
