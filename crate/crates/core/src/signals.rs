//! Respiratory signal extraction from video: thermal airflow (TA) from the
//! nostril ROI of the FIR stream and respiratory motion (RM) from dense
//! vertical flow over the chest ROI of either stream.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{flow_between, ExpandedPyramid, FlowParams};
use crate::roi::{Roi, RoiTrack};
use crate::stats;
use crate::timebase::{Frame, FrameSource, RespSignal, SignalSource, Spectrum, DEFAULT_WINDOW_S};

pub const GRID_ROWS: usize = 5;
pub const GRID_COLS: usize = 7;

/// 3x3 median filter with replicated borders.
pub fn preprocess_nir(frame: &Frame) -> Result<Frame> {
    if frame.width < 3 || frame.height < 3 {
        return Err(Error::TooShort { needed: 3, got: frame.width.min(frame.height) });
    }
    Ok(median3x3(frame))
}

fn median3x3(frame: &Frame) -> Frame {
    let (w, h) = (frame.width as isize, frame.height as isize);
    let mut out = frame.clone();
    let mut buf = [0.0f64; 9];
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let xx = (x + dx).clamp(0, w - 1);
                    let yy = (y + dy).clamp(0, h - 1);
                    buf[k] = frame.data[(yy * w + xx) as usize];
                    k += 1;
                }
            }
            out.data[(y * w + x) as usize] = *buf.select_nth_unstable_by(4, f64::total_cmp).1;
        }
    }
    out
}

/// Min-max normalized FIR frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFrame {
    pub frame: Frame,
    /// The input was constant; the output is all zeros.
    pub degenerate: bool,
}

/// Rescale intensities to `[0, 1]`.
pub fn preprocess_fir(frame: &Frame) -> NormalizedFrame {
    let (lo, hi) = frame
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        log::warn!("constant FIR frame; normalization degenerate");
        return NormalizedFrame { frame: Frame::filled(frame.width, frame.height, 0.0), degenerate: true };
    }
    let data = frame.data.iter().map(|v| (v - lo) / range).collect();
    NormalizedFrame { frame: Frame { width: frame.width, height: frame.height, data }, degenerate: false }
}

/// Mean intensity inside the ROI's pixel rectangle.
pub fn roi_mean(frame: &Frame, roi: &Roi) -> f64 {
    let (x0, y0, x1, y1) = roi.pixel_bounds((frame.width, frame.height));
    let mut sum = 0.0;
    for y in y0..y1 {
        sum += frame.data[y * frame.width + x0..y * frame.width + x1].iter().sum::<f64>();
    }
    sum / ((x1 - x0) * (y1 - y0)) as f64
}

/// Tolerance used when looking up the ROI in effect for a frame time.
fn lookup_tolerance(track: &RoiTrack) -> f64 {
    crate::timebase::typical_period(&track.entries.iter().map(|e| e.0).collect::<Vec<_>>()).max(0.0) * 2.0
}

/// Spatial mean of the normalized FIR intensity inside the nostril ROI, one
/// sample per frame with a valid ROI.
pub fn extract_ta<F: FrameSource + ?Sized>(fir: &F, track: &RoiTrack) -> Result<RespSignal> {
    let tol = lookup_tolerance(track);
    let times = fir.timestamps();
    let samples: Vec<Option<(f64, f64)>> = (0..fir.len())
        .into_par_iter()
        .map(|i| -> Result<Option<(f64, f64)>> {
            let Some(rois) = track.at(times[i], tol) else {
                return Ok(None);
            };
            let norm = preprocess_fir(&fir.frame(i)?);
            Ok(Some((times[i], roi_mean(&norm.frame, rois.nostril(Spectrum::Fir)))))
        })
        .collect::<Result<_>>()?;
    let (t, v): (Vec<f64>, Vec<f64>) = samples.into_iter().flatten().unzip();
    if t.is_empty() {
        return Err(Error::EmptySignal);
    }
    RespSignal::new(SignalSource::TaFir, t, v)
}

/// Cell-averaged vertical velocity profiles over the chest grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityProfileSet {
    pub source: SignalSource,
    pub times: Vec<f64>,
    /// `profiles[p][i]` is profile `p` at `times[i]`, pixels/second.
    pub profiles: Vec<Vec<f64>>,
}

/// Per-profile standard deviations over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileStats {
    pub sigma: Vec<f64>,
}

/// Profiles kept by the outlier rule `σ_p <= median(Σ) + 2·IQR(Σ)`. The
/// non-strict comparison keeps every profile when they are all identical,
/// and always keeps the median.
pub fn retained_profiles(stats: &ProfileStats) -> Vec<bool> {
    let med = stats::median(&stats.sigma).unwrap_or(0.0);
    let iqr = stats::iqr(&stats.sigma).unwrap_or(0.0);
    let threshold = med + 2.0 * iqr;
    stats.sigma.iter().map(|&s| s <= threshold).collect()
}

impl VelocityProfileSet {
    pub fn new(source: SignalSource, times: Vec<f64>, profiles: Vec<Vec<f64>>) -> Result<Self> {
        if profiles.is_empty() || profiles.iter().any(|p| p.len() != times.len()) {
            return Err(Error::InvalidParameter("profile lengths must match timestamps".into()));
        }
        // Reuse the signal validation for monotone times and finite values.
        for p in &profiles {
            RespSignal::new(source, times.clone(), p.clone())?;
        }
        Ok(VelocityProfileSet { source, times, profiles })
    }

    /// A single-profile set wrapping an already aggregated signal.
    pub fn from_signal(signal: &RespSignal) -> Self {
        VelocityProfileSet {
            source: signal.source(),
            times: signal.times().to_vec(),
            profiles: vec![signal.values().to_vec()],
        }
    }

    pub fn stats(&self, range: std::ops::Range<usize>) -> ProfileStats {
        ProfileStats { sigma: self.profiles.iter().map(|p| stats::sample_std(&p[range.clone()])).collect() }
    }

    /// Sample range of `[start, end)` and the profiles the outlier rule
    /// retains over it.
    pub fn selection(&self, start: f64, end: f64) -> (std::ops::Range<usize>, Vec<bool>) {
        let r = crate::timebase::sample_range(&self.times, start, end);
        let keep = retained_profiles(&self.stats(r.clone()));
        (r, keep)
    }

    /// Mean over `range` of the profiles flagged in `keep`.
    pub fn mean_of(&self, range: std::ops::Range<usize>, keep: &[bool]) -> Vec<f64> {
        let kept: Vec<&Vec<f64>> = self.profiles.iter().zip(keep).filter(|(_, k)| **k).map(|(p, _)| p).collect();
        range.map(|i| kept.iter().map(|p| p[i]).sum::<f64>() / kept.len() as f64).collect()
    }

    /// RM samples for `[start, end)`: the mean of the profiles retained by
    /// the outlier rule evaluated on this window only.
    pub fn window(&self, start: f64, end: f64) -> (&[f64], Vec<f64>) {
        let (r, keep) = self.selection(start, end);
        let values = self.mean_of(r.clone(), &keep);
        (&self.times[r], values)
    }

    /// Aggregate into one signal, applying the outlier rule over consecutive
    /// non-overlapping blocks of `block_s` seconds.
    pub fn to_signal(&self, block_s: f64) -> Result<RespSignal> {
        let Some(&t0) = self.times.first() else {
            return Err(Error::EmptySignal);
        };
        let t_end = *self.times.last().unwrap();
        let mut values = Vec::with_capacity(self.times.len());
        let mut start = t0;
        while start <= t_end {
            let (_, v) = self.window(start, start + block_s);
            values.extend(v);
            start += block_s;
        }
        RespSignal::new(self.source, self.times.clone(), values)
    }
}

/// Mean of `plane` over each cell of a `rows x cols` grid; the last row and
/// column absorb remainder pixels.
pub fn cell_means(plane: &[f64], width: usize, height: usize, rows: usize, cols: usize) -> Vec<f64> {
    let ch = height / rows;
    let cw = width / cols;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y0 = r * ch;
        let y1 = if r + 1 == rows { height } else { y0 + ch };
        for c in 0..cols {
            let x0 = c * cw;
            let x1 = if c + 1 == cols { width } else { x0 + cw };
            let mut s = 0.0;
            for y in y0..y1 {
                s += plane[y * width + x0..y * width + x1].iter().sum::<f64>();
            }
            out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

fn rm_source(s: Spectrum) -> SignalSource {
    match s {
        Spectrum::Nir => SignalSource::RmNir,
        Spectrum::Fir => SignalSource::RmFir,
    }
}

fn preprocessed_patch(frame: &Frame, spectrum: Spectrum, bounds: (usize, usize, usize, usize)) -> Frame {
    let (x0, y0, x1, y1) = bounds;
    match spectrum {
        Spectrum::Fir => preprocess_fir(frame).frame.crop(x0, y0, x1, y1),
        Spectrum::Nir => {
            // Median-filter a one-pixel margin so interior results match a
            // full-frame filter.
            let mx0 = x0.saturating_sub(1);
            let my0 = y0.saturating_sub(1);
            let mx1 = (x1 + 1).min(frame.width);
            let my1 = (y1 + 1).min(frame.height);
            let filtered = median3x3(&frame.crop(mx0, my0, mx1, my1));
            filtered.crop(x0 - mx0, y0 - my0, x1 - mx0, y1 - my0)
        }
    }
}

const PAIR_CHUNK: usize = 32;

/// The 35 cell-mean vertical velocity profiles (pixels/second) over the chest
/// ROI, one sample per consecutive frame pair stamped at the later frame.
/// Pairs without a chest ROI are skipped.
pub fn extract_velocity_profiles<F: FrameSource + ?Sized>(
    frames: &F,
    track: &RoiTrack,
    params: &FlowParams,
) -> Result<VelocityProfileSet> {
    params.validate()?;
    let spectrum = frames.spectrum();
    let dims = frames.dims();
    let times = frames.timestamps();
    if times.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: times.len() });
    }
    let tol = lookup_tolerance(track);
    let chunks: Vec<(usize, usize)> = (1..times.len())
        .step_by(PAIR_CHUNK)
        .map(|s| (s, (s + PAIR_CHUNK).min(times.len())))
        .collect();
    let per_chunk: Vec<Vec<(f64, Vec<f64>)>> = chunks
        .into_par_iter()
        .map(|(lo, hi)| -> Result<Vec<(f64, Vec<f64>)>> {
            let mut out = Vec::new();
            let mut prev = frames.frame(lo - 1)?;
            // Expansion of the previous frame and the ROI it was cut with.
            let mut cached: Option<((usize, usize, usize, usize), ExpandedPyramid)> = None;
            for i in lo..hi {
                let curr = frames.frame(i)?;
                if let Some(rois) = track.at(times[i], tol) {
                    let roi = rois.chest(spectrum);
                    let b = roi.pixel_bounds(dims);
                    let (w, h) = (b.2 - b.0, b.3 - b.1);
                    if w < GRID_COLS.max(params.poly_n) || h < GRID_ROWS.max(params.poly_n) {
                        return Err(Error::PatchTooSmall { width: w, height: h, min: GRID_COLS.max(params.poly_n) });
                    }
                    let e0 = match cached.take() {
                        Some((cb, e)) if cb == b => e,
                        _ => ExpandedPyramid::new(&preprocessed_patch(&prev, spectrum, b), params)?,
                    };
                    let e1 = ExpandedPyramid::new(&preprocessed_patch(&curr, spectrum, b), params)?;
                    let field = flow_between(&e0, &e1, params)?;
                    let vel = field.vertical_velocities(times[i] - times[i - 1])?;
                    out.push((times[i], cell_means(&vel, w, h, GRID_ROWS, GRID_COLS)));
                    cached = Some((b, e1));
                } else {
                    cached = None;
                }
                prev = curr;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let samples: Vec<(f64, Vec<f64>)> = per_chunk.into_iter().flatten().collect();
    if samples.is_empty() {
        return Err(Error::EmptySignal);
    }
    let t: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let profiles = (0..GRID_ROWS * GRID_COLS)
        .map(|p| samples.iter().map(|s| s.1[p]).collect())
        .collect();
    VelocityProfileSet::new(rm_source(spectrum), t, profiles)
}

/// RM signal with profile rejection over consecutive 12 s blocks.
pub fn extract_rm<F: FrameSource + ?Sized>(frames: &F, track: &RoiTrack, params: &FlowParams) -> Result<RespSignal> {
    extract_velocity_profiles(frames, track, params)?.to_signal(DEFAULT_WINDOW_S)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi::RoiSet;

    fn roi(x: f64, y: f64, w: f64, h: f64, s: Spectrum) -> Roi {
        Roi { x, y, w, h, spectrum: s }
    }

    #[test]
    fn median_filter_cases() {
        let c = Frame::filled(6, 5, 0.3);
        assert_eq!(preprocess_nir(&c).unwrap(), c);
        let mut salt = c.clone();
        salt.set(2, 2, 9.0);
        assert_eq!(preprocess_nir(&salt).unwrap(), c);
        // Checkerboard: an interior 3x3 block centred on a 1 holds five 1s.
        let mut cb = Frame::filled(6, 6, 0.0);
        for y in 0..6 {
            for x in 0..6 {
                cb.set(x, y, ((x + y) % 2) as f64);
            }
        }
        let f = preprocess_nir(&cb).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                let block: Vec<f64> = (0..9).map(|k| cb.get(x + k % 3 - 1, y + k / 3 - 1)).collect();
                let ones = block.iter().filter(|v| **v == 1.0).count();
                let majority = if ones >= 5 { 1.0 } else { 0.0 };
                assert_eq!(f.get(x, y), majority);
            }
        }
        assert!(preprocess_nir(&Frame::filled(2, 5, 0.0)).is_err());
    }

    #[test]
    fn minmax_cases() {
        let f = Frame::new(3, 1, vec![10.0, 20.0, 30.0]).unwrap();
        assert_eq!(preprocess_fir(&f).frame.data, vec![0.0, 0.5, 1.0]);
        let g = Frame::new(3, 1, vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(preprocess_fir(&g).frame, g);
        let c = preprocess_fir(&Frame::filled(4, 4, 7.0));
        assert!(c.degenerate && c.frame.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn roi_mean_cases() {
        let f = Frame::filled(10, 10, 0.4);
        assert!((roi_mean(&f, &roi(2.0, 2.0, 4.0, 4.0, Spectrum::Fir)) - 0.4).abs() < 1e-15);
        let g = Frame::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(roi_mean(&g, &roi(0.0, 0.0, 2.0, 2.0, Spectrum::Fir)), 0.5);
        // Raw path: constant offset passes straight through the mean.
        let h = Frame::new(3, 2, vec![0.1, 0.7, 0.3, 0.9, 0.2, 0.5]).unwrap();
        let r = roi(0.0, 0.0, 3.0, 2.0, Spectrum::Fir);
        let shifted = Frame::new(3, 2, h.data.iter().map(|v| v + 2.5).collect()).unwrap();
        assert!((roi_mean(&shifted, &r) - roi_mean(&h, &r) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn identical_profiles_all_retained() {
        let s = ProfileStats { sigma: vec![0.7; 35] };
        assert!(retained_profiles(&s).iter().all(|k| *k));
    }

    #[test]
    fn burst_profile_rejected() {
        let mut sigma = vec![1.0; 34];
        sigma.push(100.0);
        // median = 1, IQR = 0, threshold = 1.
        let keep = retained_profiles(&ProfileStats { sigma });
        assert!(keep[..34].iter().all(|k| *k));
        assert!(!keep[34]);
    }

    #[test]
    fn window_average_uses_retained_profiles() {
        let times: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let quiet: Vec<f64> = times.iter().map(|t| t.sin()).collect();
        let burst: Vec<f64> = times.iter().map(|t| 100.0 * (7.0 * t).sin()).collect();
        let mut profiles = vec![quiet.clone(); 34];
        profiles.push(burst);
        let set = VelocityProfileSet::new(SignalSource::RmNir, times, profiles).unwrap();
        let (_, v) = set.window(0.0, 2.0);
        for (a, b) in v.iter().zip(&quiet) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_grid_assigns_remainders_to_last_cells() {
        let (w, h) = (16, 12);
        let plane: Vec<f64> = (0..w * h).map(|i| (i % w) as f64).collect();
        let m = cell_means(&plane, w, h, 5, 7);
        assert_eq!(m.len(), 35);
        // Column width 2: first cell averages x in {0, 1}; last takes x in 12..16.
        assert_eq!(m[0], 0.5);
        assert_eq!(m[6], 13.5);
    }

    #[test]
    fn ta_from_uniform_frames() {
        let frames: Vec<Frame> = (0..5)
            .map(|i| {
                let mut f = Frame::filled(20, 20, 0.0);
                f.set(19, 19, 1.0);
                for y in 5..10 {
                    for x in 5..10 {
                        f.set(x, y, 0.4 + 0.01 * i as f64);
                    }
                }
                f
            })
            .collect();
        let times: Vec<f64> = (0..5).map(|i| i as f64 * 0.115).collect();
        let seq = crate::timebase::FrameSequence::new(Spectrum::Fir, 8.7, times.clone(), frames).unwrap();
        let r = roi(5.0, 5.0, 5.0, 5.0, Spectrum::Fir);
        let set = RoiSet { nostril_nir: r, nostril_fir: r, chest_nir: r, chest_fir: r };
        let ta = extract_ta(&seq, &RoiTrack::constant(&times, set)).unwrap();
        assert_eq!(ta.len(), 5);
        assert!((ta.values()[0] - 0.4).abs() < 1e-12);
        let empty = RoiTrack { entries: times.iter().map(|&t| (t, None)).collect() };
        assert!(matches!(extract_ta(&seq, &empty), Err(Error::EmptySignal)));
    }
}
