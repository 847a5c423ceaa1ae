//! Per-window spectral analysis: smoothness-prior detrending, zero-phase
//! Butterworth band-pass, Lomb-Scargle periodogram, peak picking and the
//! in-band/out-of-band power ratio used as signal quality.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::timebase::{SignalSource, MIN_WINDOW_SAMPLES};

pub const DEFAULT_LAMBDA: f64 = 300.0;
/// The thermal camera frame rate.
pub const DEFAULT_LAMBDA_RATE_HZ: f64 = 8.7;
pub const BAND_LOW_HZ: f64 = 0.015;
pub const BAND_HIGH_HZ: f64 = 0.75;
pub const DEFAULT_GRID_STEP_HZ: f64 = 0.001;
/// SNR margin `k` in breaths/min.
pub const DEFAULT_SNR_MARGIN_BPM: f64 = 2.0;
pub const DEFAULT_SNR_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DspConfig {
    pub lambda: f64,
    /// Sample rate at which `lambda` applies. Recordings at other rates use
    /// `lambda * (fs / lambda_rate_hz)^2`, which keeps the detrending cutoff
    /// at the same frequency. `None` uses `lambda` at every rate.
    pub lambda_rate_hz: Option<f64>,
    pub band_low: f64,
    pub band_high: f64,
    pub grid_step: f64,
    pub bandpass_order: usize,
    pub snr_margin_bpm: f64,
    pub snr_cap: f64,
    /// Band-pass is skipped when any gap exceeds this many typical periods.
    pub max_gap_periods: f64,
    /// Estimates below this rate are flagged as implausible (still reported).
    pub implausible_below_bpm: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            lambda: DEFAULT_LAMBDA,
            lambda_rate_hz: Some(DEFAULT_LAMBDA_RATE_HZ),
            band_low: BAND_LOW_HZ,
            band_high: BAND_HIGH_HZ,
            grid_step: DEFAULT_GRID_STEP_HZ,
            bandpass_order: 2,
            snr_margin_bpm: DEFAULT_SNR_MARGIN_BPM,
            snr_cap: DEFAULT_SNR_CAP,
            max_gap_periods: 3.0,
            implausible_below_bpm: 4.0,
        }
    }
}

impl DspConfig {
    pub fn grid(&self) -> Vec<f64> {
        frequency_grid(self.band_low, self.band_high, self.grid_step)
    }

    /// Smoothing parameter for a recording sampled at `fs` Hz.
    pub fn lambda_at(&self, fs: f64) -> f64 {
        match self.lambda_rate_hz {
            Some(rate) => self.lambda * (fs / rate).powi(2),
            None => self.lambda,
        }
    }
}

/// `low, low + step, ...` up to and including `high` (within round-off).
pub fn frequency_grid(low: f64, high: f64, step: f64) -> Vec<f64> {
    let count = ((high - low) / step + 1e-9).floor() as usize + 1;
    (0..count).map(|k| low + k as f64 * step).collect()
}

/// Smoothness-priors detrending: returns `z - (I + λ²D₂ᵀD₂)⁻¹ z`, where
/// `D₂` is the second-order difference operator. The system matrix is
/// pentadiagonal and is factored as banded LDLᵀ in O(n).
pub fn detrend(z: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = z.len();
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    let l2 = lambda * lambda;
    // Bands of M = I + λ² D₂ᵀD₂: main, first and second super-diagonals.
    let mut d0 = vec![1.0; n];
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    const C: [f64; 3] = [1.0, -2.0, 1.0];
    for r in 0..n - 2 {
        for a in 0..3 {
            d0[r + a] += l2 * C[a] * C[a];
            for b in a + 1..3 {
                if b - a == 1 {
                    d1[r + a] += l2 * C[a] * C[b];
                } else {
                    d2[r + a] += l2 * C[a] * C[b];
                }
            }
        }
    }
    // LDLᵀ with unit-lower L having two sub-diagonals l1, l2.
    let mut diag = vec![0.0; n];
    let mut sub1 = vec![0.0; n];
    let mut sub2 = vec![0.0; n];
    for i in 0..n {
        if i >= 2 {
            sub2[i] = d2[i - 2] / diag[i - 2];
        }
        if i >= 1 {
            let mut v = d1[i - 1];
            if i >= 2 {
                v -= sub2[i] * sub1[i - 1] * diag[i - 2];
            }
            sub1[i] = v / diag[i - 1];
        }
        let mut v = d0[i];
        if i >= 1 {
            v -= sub1[i] * sub1[i] * diag[i - 1];
        }
        if i >= 2 {
            v -= sub2[i] * sub2[i] * diag[i - 2];
        }
        diag[i] = v;
    }
    let mut y = z.to_vec();
    for i in 0..n {
        if i >= 1 {
            y[i] -= sub1[i] * y[i - 1];
        }
        if i >= 2 {
            y[i] -= sub2[i] * y[i - 2];
        }
    }
    for i in 0..n {
        y[i] /= diag[i];
    }
    for i in (0..n).rev() {
        if i + 1 < n {
            y[i] -= sub1[i + 1] * y[i + 1];
        }
        if i + 2 < n {
            y[i] -= sub2[i + 2] * y[i + 2];
        }
    }
    Ok(z.iter().zip(&y).map(|(a, trend)| a - trend).collect())
}

/// One second-order section, `a[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b[0] + self.b[1] * zi + self.b[2] * zi * zi;
        let den = self.a[0] + self.a[1] * zi + self.a[2] * zi * zi;
        num / den
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    // Steady-state transposed-direct-form-II state for a unit step.
    fn step_state(&self) -> [f64; 2] {
        let y = self.dc_gain();
        [y - self.b[0], self.b[2] - self.a[2] * y]
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    /// Complex frequency response at `f` Hz for sample rate `fs`.
    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let z = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * f / fs);
        self.sections.iter().map(|s| s.response(z)).product()
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        // Steady-state input level seen by the current section.
        let mut level = x[0];
        for s in &self.sections {
            let st = s.step_state();
            let mut z = [st[0] * level, st[1] * level];
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b[0] * xin + z[0];
                z[0] = s.b[1] * xin - s.a[1] * out + z[1];
                z[1] = s.b[2] * xin - s.a[2] * out;
                *v = out;
            }
            level *= s.dc_gain();
        }
        y
    }

    /// Forward-backward (zero-phase) filtering with odd-extension padding and
    /// steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let mut fwd = self.run(&ext);
        fwd.reverse();
        let mut back = self.run(&fwd);
        back.reverse();
        back[pad..pad + n].to_vec()
    }
}

/// Digital Butterworth band-pass of prototype order `order` (the resulting
/// filter has `2 * order` poles), via the bilinear transform with prewarping.
pub fn butter_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<SosFilter> {
    if order == 0 || !(low > 0.0) || !(high > low) || !(high < fs / 2.0) {
        return Err(Error::InvalidParameter(format!(
            "band-pass [{low}, {high}] Hz of order {order} at fs = {fs} Hz"
        )));
    }
    let pi = std::f64::consts::PI;
    let k = 2.0 * fs;
    let wl = k * (pi * low / fs).tan();
    let wh = k * (pi * high / fs).tan();
    let bw = wh - wl;
    let w0sq = wl * wh;

    let mut poles = Vec::with_capacity(2 * order);
    for i in 0..order {
        let theta = pi * (2 * i + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta) * bw;
        let disc = (p * p - 4.0 * w0sq).sqrt();
        for s in [(p + disc) / 2.0, (p - disc) / 2.0] {
            poles.push((k + s) / (k - s));
        }
    }

    // Pair complex poles with their conjugates, real poles with each other.
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > 1e-12).collect();
    let mut real: Vec<f64> = poles.iter().filter(|p| p.im.abs() <= 1e-12).map(|p| p.re).collect();
    complex.sort_by(|a, b| a.re.total_cmp(&b.re));
    real.sort_by(f64::total_cmp);
    let mut sections: Vec<Biquad> = complex
        .iter()
        .map(|p| Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -2.0 * p.re, p.norm_sqr()] })
        .collect();
    for pair in real.chunks(2) {
        let (p1, p2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -(p1 + p2), p1 * p2] });
    }
    let mut filter = SosFilter { sections };
    // Unit gain at the geometric band centre.
    let fc = (fs / pi) * ((wl * wh).sqrt() / k).atan();
    let g = filter.response(fc, fs).norm();
    filter.sections[0].b.iter_mut().for_each(|b| *b /= g);
    Ok(filter)
}

/// A periodogram over an explicit frequency grid (Hz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Psd {
    pub frequencies: Vec<f64>,
    pub power: Vec<f64>,
}

fn is_degenerate(values: &[f64]) -> bool {
    let m = stats::mean(values).unwrap_or(0.0);
    let var = stats::sample_variance(values);
    !(var > 0.0) || var <= 1e-24 * m * m
}

/// Classical (Lomb 1976 / Scargle 1982) normalized periodogram of an
/// unevenly sampled series, evaluated at `frequencies`. The mean is removed
/// and the power is normalized by twice the sample variance.
pub fn lomb_scargle_on(times: &[f64], values: &[f64], frequencies: &[f64]) -> Result<Psd> {
    let n = times.len();
    if n != values.len() {
        return Err(Error::InvalidParameter("times/values length mismatch".into()));
    }
    if n < MIN_WINDOW_SAMPLES {
        return Err(Error::TooShort { needed: MIN_WINDOW_SAMPLES, got: n });
    }
    if is_degenerate(values) {
        return Err(Error::DegenerateWindow);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = stats::sample_variance(values);
    let t0 = times[0];
    let m = frequencies.len();
    let uniform_step = frequencies.windows(2).all(|w| {
        ((w[1] - w[0]) - (frequencies[1] - frequencies[0])).abs() < 1e-12
    });

    let mut yc = vec![0.0; m];
    let mut ys = vec![0.0; m];
    let mut cc = vec![0.0; m];
    let mut cs = vec![0.0; m];
    let two_pi = 2.0 * std::f64::consts::PI;
    if uniform_step && m > 1 {
        // cos/sin over the grid by rotation, four samples at a time so the
        // recurrences run independently.
        let df = frequencies[1] - frequencies[0];
        for base in (0..n).step_by(4) {
            let mut re = [0.0; 4];
            let mut im = [0.0; 4];
            let mut step_re = [1.0; 4];
            let mut step_im = [0.0; 4];
            let mut y = [0.0; 4];
            for j in 0..(n - base).min(4) {
                let (t, v) = (times[base + j], values[base + j]);
                let dt = t - t0;
                (im[j], re[j]) = (two_pi * frequencies[0] * dt).sin_cos();
                (step_im[j], step_re[j]) = (two_pi * df * dt).sin_cos();
                y[j] = v - mean;
            }
            for k in 0..m {
                let (mut a, mut b, mut c2, mut d) = (0.0, 0.0, 0.0, 0.0);
                for j in 0..4 {
                    let (c, s) = (re[j], im[j]);
                    a += y[j] * c;
                    b += y[j] * s;
                    c2 += c * c;
                    d += c * s;
                    re[j] = c * step_re[j] - s * step_im[j];
                    im[j] = c * step_im[j] + s * step_re[j];
                }
                yc[k] += a;
                ys[k] += b;
                cc[k] += c2;
                cs[k] += d;
            }
        }
    } else {
        for (&t, &v) in times.iter().zip(values) {
            let dt = t - t0;
            let y = v - mean;
            for k in 0..m {
                let (s, c) = (two_pi * frequencies[k] * dt).sin_cos();
                yc[k] += y * c;
                ys[k] += y * s;
                cc[k] += c * c;
                cs[k] += c * s;
            }
        }
    }
    let nf = n as f64;
    let power = (0..m)
        .map(|k| {
            let ss = nf - cc[k];
            let wt = 0.5 * (2.0 * cs[k]).atan2(cc[k] - ss);
            let (st, ct) = wt.sin_cos();
            let ycr = ct * yc[k] + st * ys[k];
            let ysr = ct * ys[k] - st * yc[k];
            let ccr = ct * ct * cc[k] + 2.0 * ct * st * cs[k] + st * st * ss;
            let ssr = ct * ct * ss - 2.0 * ct * st * cs[k] + st * st * cc[k];
            let mut p = 0.0;
            if ccr > 1e-12 * nf {
                p += ycr * ycr / ccr;
            }
            if ssr > 1e-12 * nf {
                p += ysr * ysr / ssr;
            }
            (p / (2.0 * var)).max(0.0)
        })
        .collect();
    Ok(Psd { frequencies: frequencies.to_vec(), power })
}

/// Lomb-Scargle on the default respiratory grid 0.015–0.75 Hz.
pub fn lomb_scargle(times: &[f64], values: &[f64]) -> Result<Psd> {
    lomb_scargle_on(times, values, &DspConfig::default().grid())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrPeak {
    /// Breaths per minute.
    pub rr: f64,
    pub peak_freq: f64,
}

/// Highest-power frequency; ties resolve to the lower frequency.
pub fn estimate_rr(psd: &Psd) -> Result<RrPeak> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in psd.power.iter().enumerate() {
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    let (i, _) = best.ok_or(Error::NoEstimate)?;
    let f = psd.frequencies[i];
    Ok(RrPeak { rr: 60.0 * f, peak_freq: f })
}

/// Ratio of power within `±k/2` breaths/min of the peak to the power
/// outside it, over the evaluated grid. Capped at `cap` when the outside
/// power vanishes.
pub fn compute_snr(psd: &Psd, peak_freq: f64, k_bpm: f64, cap: f64) -> f64 {
    let half = k_bpm / 60.0 / 2.0;
    let (mut inside, mut outside) = (0.0, 0.0);
    for (&f, &p) in psd.frequencies.iter().zip(&psd.power) {
        if (f - peak_freq).abs() <= half + 1e-12 {
            inside += p;
        } else {
            outside += p;
        }
    }
    if outside <= 0.0 {
        return cap;
    }
    (inside / outside).min(cap)
}

/// RR, peak frequency and SNR of one signal over one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub source: SignalSource,
    pub rr: f64,
    pub peak_freq: f64,
    pub snr: f64,
}

/// Full analysis of one window of one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSpectrum {
    pub estimate: SpectralEstimate,
    /// Detrended (and, for TA, band-passed) samples.
    pub processed: Vec<f64>,
    pub filter_skipped: bool,
    pub implausible: bool,
}

/// Band-pass `values` with the configured Butterworth filter designed at the
/// window's mean sample rate. Returns `None` when gaps exceed
/// `max_gap_periods` typical periods.
pub fn bandpass_window(times: &[f64], values: &[f64], cfg: &DspConfig) -> Result<Option<Vec<f64>>> {
    let n = times.len();
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    let period = crate::timebase::typical_period(times);
    let max_gap = times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    if max_gap > cfg.max_gap_periods * period {
        return Ok(None);
    }
    let fs = (n - 1) as f64 / (times[n - 1] - times[0]);
    let high = cfg.band_high.min(0.45 * fs);
    let filter = butter_bandpass(cfg.bandpass_order, cfg.band_low, high, fs)?;
    Ok(Some(filter.filtfilt(values)))
}

/// Index ranges of the gap-free runs of `times`: a new run starts wherever
/// consecutive samples are more than `max_gap_periods` typical periods apart.
pub fn contiguous_runs(times: &[f64], max_gap_periods: f64) -> Vec<std::ops::Range<usize>> {
    if times.is_empty() {
        return Vec::new();
    }
    let limit = max_gap_periods * crate::timebase::typical_period(times);
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..times.len() {
        if times[i] - times[i - 1] > limit {
            runs.push(start..i);
            start = i;
        }
    }
    runs.push(start..times.len());
    runs
}

/// Shortest run that [`condition_signal`] processes.
pub const MIN_CONDITION_RUN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Conditioned {
    pub values: Vec<f64>,
    /// Runs shorter than [`MIN_CONDITION_RUN`] samples, passed through as is.
    pub skipped_runs: usize,
}

/// Optionally band-pass a whole recording, then detrend it. Each gap-free run
/// is processed on its own at its mean sample rate, with the smoothing
/// parameter from [`DspConfig::lambda_at`].
///
/// Conditioning the recording once, rather than each window, keeps the
/// detrending edge effects and the filter start-up transient out of the
/// windows, which span only a couple of breaths.
pub fn condition_signal(times: &[f64], values: &[f64], bandpass: bool, cfg: &DspConfig) -> Result<Conditioned> {
    if times.len() != values.len() {
        return Err(Error::InvalidParameter("times and values differ in length".into()));
    }
    if times.len() < 3 {
        return Err(Error::TooShort { needed: 3, got: times.len() });
    }
    let mut out = values.to_vec();
    let mut skipped_runs = 0;
    for run in contiguous_runs(times, cfg.max_gap_periods) {
        if run.len() < MIN_CONDITION_RUN {
            skipped_runs += 1;
            continue;
        }
        let fs = (run.len() - 1) as f64 / (times[run.end - 1] - times[run.start]);
        let mut seg = values[run.clone()].to_vec();
        if bandpass {
            let high = cfg.band_high.min(0.45 * fs);
            seg = butter_bandpass(cfg.bandpass_order, cfg.band_low, high, fs)?.filtfilt(&seg);
        }
        out[run].copy_from_slice(&detrend(&seg, cfg.lambda_at(fs))?);
    }
    Ok(Conditioned { values: out, skipped_runs })
}

/// Detrend, optionally band-pass, and estimate RR and SNR for one window.
pub fn analyze_window(
    source: SignalSource,
    times: &[f64],
    values: &[f64],
    bandpass: bool,
    cfg: &DspConfig,
) -> Result<WindowSpectrum> {
    if times.len() < MIN_WINDOW_SAMPLES {
        return Err(Error::TooShort { needed: MIN_WINDOW_SAMPLES, got: times.len() });
    }
    if is_degenerate(values) {
        return Err(Error::DegenerateWindow);
    }
    let mut processed = detrend(values, cfg.lambda)?;
    let mut filter_skipped = false;
    if bandpass {
        match bandpass_window(times, &processed, cfg)? {
            Some(f) => processed = f,
            None => filter_skipped = true,
        }
    }
    let mut ws = analyze_conditioned(source, times, values, &processed, cfg)?;
    ws.filter_skipped = filter_skipped;
    Ok(ws)
}

/// Estimate RR and SNR for one window of an already conditioned recording.
/// `raw` holds the same samples before conditioning; a flat raw window is
/// degenerate however much filter leakage the conditioned one carries.
pub fn analyze_conditioned(
    source: SignalSource,
    times: &[f64],
    raw: &[f64],
    conditioned: &[f64],
    cfg: &DspConfig,
) -> Result<WindowSpectrum> {
    if times.len() < MIN_WINDOW_SAMPLES {
        return Err(Error::TooShort { needed: MIN_WINDOW_SAMPLES, got: times.len() });
    }
    if raw.len() != times.len() || conditioned.len() != times.len() {
        return Err(Error::InvalidParameter("times and values differ in length".into()));
    }
    if is_degenerate(raw) {
        return Err(Error::DegenerateWindow);
    }
    let in_var = stats::sample_variance(raw) + stats::mean(raw).map_or(0.0, |m| m * m);
    if stats::sample_variance(conditioned) <= 1e-18 * in_var {
        return Err(Error::DegenerateWindow);
    }
    let psd = lomb_scargle_on(times, conditioned, &cfg.grid())?;
    let peak = estimate_rr(&psd)?;
    let snr = compute_snr(&psd, peak.peak_freq, cfg.snr_margin_bpm, cfg.snr_cap);
    Ok(WindowSpectrum {
        estimate: SpectralEstimate { source, rr: peak.rr, peak_freq: peak.peak_freq, snr },
        processed: conditioned.to_vec(),
        filter_skipped: false,
        implausible: peak.rr < cfg.implausible_below_bpm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sine(fs: f64, dur: f64, f: f64) -> (Vec<f64>, Vec<f64>) {
        let n = (fs * dur).round() as usize;
        let t: Vec<f64> = (0..n).map(|i| i as f64 / fs).collect();
        let v = t.iter().map(|t| (2.0 * PI * f * t).sin()).collect();
        (t, v)
    }

    #[test]
    fn grid_has_expected_extent() {
        let g = DspConfig::default().grid();
        assert_eq!(g.len(), 736);
        assert_abs_diff_eq!(g[0], 0.015);
        assert_abs_diff_eq!(*g.last().unwrap(), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn detrend_constant_and_ramp() {
        let r = detrend(&[3.5; 100], 300.0).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-8));
        let ramp: Vec<f64> = (0..104).map(|i| i as f64 / 103.0).collect();
        let r = detrend(&ramp, 300.0).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-3));
        assert!(matches!(detrend(&[1.0, 2.0], 300.0), Err(Error::TooShort { .. })));
    }

    #[test]
    fn detrend_keeps_respiratory_sine() {
        let (t, s) = sine(8.7, 12.0, 0.3);
        let z: Vec<f64> = t.iter().zip(&s).map(|(t, s)| s + 0.2 * t).collect();
        let r = detrend(&z, 300.0).unwrap();
        let p_sine = lomb_scargle(&t, &s).unwrap();
        let p_res = lomb_scargle(&t, &r).unwrap();
        let i = p_sine.frequencies.iter().position(|f| (f - 0.3).abs() < 1e-9).unwrap();
        // Normalized power at 0.3 Hz is preserved; the raw variance loses only
        // a little at the window edges.
        assert!(p_res.power[i] >= 0.95 * p_sine.power[i]);
        assert!(stats::sample_variance(&r) >= 0.9 * stats::sample_variance(&s));
    }

    #[test]
    fn bandpass_dc_and_passband() {
        let fs = 8.7;
        let n = (240.0 * fs) as usize;
        let dc = vec![5.0; n];
        let f = butter_bandpass(2, BAND_LOW_HZ, BAND_HIGH_HZ, fs).unwrap();
        let y = f.filtfilt(&dc);
        assert!(stats::mean(&y).unwrap().abs() < 1e-3);
        for (freq, lo, hi) in [(0.167, 0.9, 1.1), (2.0, 0.0, 0.15)] {
            let (_, s) = sine(fs, 240.0, freq);
            let y = f.filtfilt(&s);
            let mid = &y[n / 4..3 * n / 4];
            let amp = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(amp >= lo && amp <= hi, "f={freq} amp={amp}");
        }
        // Squared magnitude at the passband centre is unity.
        let fc = (BAND_LOW_HZ * BAND_HIGH_HZ).sqrt();
        assert!((f.response(fc, fs).norm() - 1.0).abs() < 0.05);
    }

    #[test]
    fn conditioned_recording_keeps_short_window_peaks() {
        for (fs, bandpass) in [(8.7, true), (8.7, false), (15.0, false)] {
            let (t, _) = sine(fs, 120.0, 0.2);
            let v: Vec<f64> = t.iter().map(|t| 0.6 + 0.01 * t + (2.0 * PI * 0.2 * t - 0.8).sin()).collect();
            let c = condition_signal(&t, &v, bandpass, &DspConfig::default()).unwrap();
            assert_eq!(c.skipped_runs, 0);
            let mut start = 0.0;
            while start + 12.0 <= 120.0 {
                let r = crate::timebase::sample_range(&t, start, start + 12.0);
                let psd = lomb_scargle(&t[r.clone()], &c.values[r]).unwrap();
                let rr = estimate_rr(&psd).unwrap().rr;
                assert!((rr - 12.0).abs() <= 0.3, "fs {fs} window at {start}: {rr}");
                start += 6.0;
            }
        }
    }

    #[test]
    fn conditioning_splits_at_gaps() {
        let (mut t, v) = sine(8.7, 60.0, 0.2);
        let k = t.len() / 2;
        for x in t.iter_mut().skip(k) {
            *x += 5.0;
        }
        assert_eq!(contiguous_runs(&t, 3.0), vec![0..k, k..t.len()]);
        let cfg = DspConfig::default();
        let c = condition_signal(&t, &v, true, &cfg).unwrap();
        assert_eq!(c.skipped_runs, 0);
        let fs = (k - 1) as f64 / (t[k - 1] - t[0]);
        let f = butter_bandpass(2, BAND_LOW_HZ, BAND_HIGH_HZ, fs).unwrap();
        let first = detrend(&f.filtfilt(&v[..k]), cfg.lambda_at(fs)).unwrap();
        assert_eq!(&c.values[..k], &first[..]);

        let mut short = t.clone();
        for x in short.iter_mut().skip(t.len() - 5) {
            *x += 5.0;
        }
        let c = condition_signal(&short, &v, false, &cfg).unwrap();
        assert_eq!(c.skipped_runs, 1);
        assert_eq!(&c.values[t.len() - 5..], &v[t.len() - 5..]);
    }

    #[test]
    fn lambda_tracks_sample_rate() {
        let cfg = DspConfig::default();
        assert_eq!(cfg.lambda_at(DEFAULT_LAMBDA_RATE_HZ), DEFAULT_LAMBDA);
        assert!((cfg.lambda_at(2.0 * DEFAULT_LAMBDA_RATE_HZ) - 4.0 * DEFAULT_LAMBDA).abs() < 1e-9);
        let fixed = DspConfig { lambda_rate_hz: None, ..cfg };
        assert_eq!(fixed.lambda_at(50.0), DEFAULT_LAMBDA);
    }

    #[test]
    fn bandpass_skips_gappy_windows() {
        let (mut t, v) = sine(8.7, 12.0, 0.2);
        for x in t.iter_mut().skip(50) {
            *x += 2.0;
        }
        assert!(bandpass_window(&t, &v, &DspConfig::default()).unwrap().is_none());
    }

    #[test]
    fn lomb_scargle_finds_sine_even_with_gaps() {
        let (t, v) = sine(8.7, 12.0, 0.3);
        let psd = lomb_scargle(&t, &v).unwrap();
        assert!((estimate_rr(&psd).unwrap().peak_freq - 0.3).abs() <= 0.005 + 1e-9);
        // Deterministically drop ~30 % of samples.
        let keep: Vec<usize> = (0..t.len()).filter(|i| (i * 7) % 10 >= 3).collect();
        let tt: Vec<f64> = keep.iter().map(|&i| t[i]).collect();
        let vv: Vec<f64> = keep.iter().map(|&i| v[i]).collect();
        let psd = lomb_scargle(&tt, &vv).unwrap();
        assert!((estimate_rr(&psd).unwrap().peak_freq - 0.3).abs() <= 0.01);
    }

    #[test]
    fn constant_window_is_degenerate() {
        let t: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        assert!(matches!(lomb_scargle(&t, &[2.0; 20]), Err(Error::DegenerateWindow)));
    }

    #[test]
    fn rr_examples() {
        let psd = |peaks: &[(f64, f64)]| {
            let freqs = DspConfig::default().grid();
            let power = freqs
                .iter()
                .map(|f| peaks.iter().find(|(pf, _)| (pf - f).abs() < 1e-9).map_or(0.1, |p| p.1))
                .collect();
            Psd { frequencies: freqs, power }
        };
        assert_abs_diff_eq!(estimate_rr(&psd(&[(0.2, 5.0)])).unwrap().rr, 12.0, epsilon = 1e-9);
        assert_abs_diff_eq!(estimate_rr(&psd(&[(0.165, 5.0)])).unwrap().rr, 9.9, epsilon = 1e-9);
        let r = RrPeak { rr: 60.0 * 0.167, peak_freq: 0.167 };
        assert_abs_diff_eq!(r.rr, 10.02, epsilon = 1e-9);
        assert_abs_diff_eq!(estimate_rr(&psd(&[(0.2, 5.0), (0.4, 5.0)])).unwrap().rr, 12.0, epsilon = 1e-9);
    }

    #[test]
    fn snr_examples() {
        let freqs = DspConfig::default().grid();
        let mut power = vec![0.0; freqs.len()];
        power[40] = 3.0;
        let psd = Psd { frequencies: freqs.clone(), power };
        assert_eq!(compute_snr(&psd, freqs[40], 2.0, 1e6), 1e6);

        let flat = Psd { frequencies: freqs.clone(), power: vec![1.0; freqs.len()] };
        let f = freqs[60];
        // Direct count of in-band bins.
        let inside = freqs.iter().filter(|x| (*x - f).abs() <= 1.0 / 60.0).count() as f64;
        let expect = inside / (freqs.len() as f64 - inside);
        let snr = compute_snr(&flat, f, 2.0, 1e6);
        assert_abs_diff_eq!(snr, expect, epsilon = 1e-12);
        assert!((snr - 0.047).abs() < 0.005);
    }

    proptest! {
        #[test]
        fn detrend_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0,
                             x in proptest::collection::vec(-10.0f64..10.0, 60),
                             y in proptest::collection::vec(-10.0f64..10.0, 60)) {
            let combo: Vec<f64> = x.iter().zip(&y).map(|(x, y)| a * x + b * y).collect();
            let lhs = detrend(&combo, 300.0).unwrap();
            let dx = detrend(&x, 300.0).unwrap();
            let dy = detrend(&y, 300.0).unwrap();
            for i in 0..60 {
                prop_assert!((lhs[i] - (a * dx[i] + b * dy[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn ls_offset_and_scale_invariance(c in -50.0f64..50.0, k in 0.01f64..100.0, f in 0.1f64..0.6) {
            let (t, v) = sine(8.7, 12.0, f);
            let noisy: Vec<f64> = v.iter().enumerate().map(|(i, x)| x + 0.3 * ((i * 37 % 11) as f64 / 11.0 - 0.5)).collect();
            let base = lomb_scargle(&t, &noisy).unwrap();
            let shifted: Vec<f64> = noisy.iter().map(|x| k * x + c).collect();
            let other = lomb_scargle(&t, &shifted).unwrap();
            for (p, q) in base.power.iter().zip(&other.power) {
                prop_assert!((p - q).abs() < 1e-8 * (1.0 + p.abs()));
            }
            prop_assert_eq!(estimate_rr(&base).unwrap(), estimate_rr(&other).unwrap());
        }

        #[test]
        fn snr_scale_invariance(k in 1e-3f64..1e3, p in proptest::collection::vec(0.0f64..10.0, 148), idx in 0usize..148) {
            let freqs = DspConfig::default().grid();
            let a = Psd { frequencies: freqs.clone(), power: p.clone() };
            let b = Psd { frequencies: freqs.clone(), power: p.iter().map(|x| x * k).collect() };
            let s1 = compute_snr(&a, freqs[idx], 2.0, 1e6);
            let s2 = compute_snr(&b, freqs[idx], 2.0, 1e6);
            prop_assert!((s1 - s2).abs() <= 1e-12 * s1.abs().max(1.0));
        }
    }
}
