//! NIR-to-FIR registration and nostril/chest ROI derivation from facial
//! landmark tracks.
//!
//! Landmarks live in NIR pixel coordinates. A scale-and-translate transform
//! fixed at camera calibration maps them into the thermal frame:
//!
//! ```text
//! x_fir = sx * x_nir + tx
//! y_fir = sy * y_nir + ty
//! ```
//!
//! ROI rectangles stay real-valued until pixels are sampled; see
//! [`Roi::pixel_bounds`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timebase::Spectrum;

/// Nostril box extent in NIR pixels.
pub const NOSTRIL_WIDTH: f64 = 15.0;
pub const NOSTRIL_HEIGHT: f64 = 20.0;

/// Default landmark re-detection interval in seconds.
pub const DEFAULT_RETRIGGER_S: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineTransform {
    pub fn new(sx: f64, sy: f64, tx: f64, ty: f64) -> Result<Self> {
        let t = AffineTransform { sx, sy, tx, ty };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        AffineTransform { sx: 1.0, sy: 1.0, tx: 0.0, ty: 0.0 }
    }

    /// Pure scaling between two frame sizes.
    pub fn full_frame(from: (usize, usize), to: (usize, usize)) -> Self {
        AffineTransform {
            sx: to.0 as f64 / from.0 as f64,
            sy: to.1 as f64 / from.1 as f64,
            tx: 0.0,
            ty: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.sx, self.sy, self.tx, self.ty].iter().all(|v| v.is_finite());
        if !finite || self.sx <= 0.0 || self.sy <= 0.0 {
            return Err(Error::InvalidParameter(format!("invalid transform {self:?}")));
        }
        Ok(())
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (self.sx * x + self.tx, self.sy * y + self.ty)
    }

    pub fn inverse(&self) -> AffineTransform {
        AffineTransform {
            sx: 1.0 / self.sx,
            sy: 1.0 / self.sy,
            tx: -self.tx / self.sx,
            ty: -self.ty / self.sy,
        }
    }

    /// Parse a calibration file: four whitespace-separated reals
    /// `sx sy tx ty`. Blank lines and `#` comments are ignored.
    pub fn parse_calibration(text: &str) -> Result<Self> {
        let nums: Vec<f64> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace)
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::format("calibration.txt", format!("not a number: {tok:?}")))
            })
            .collect::<Result<_>>()?;
        if nums.len() != 4 {
            return Err(Error::format(
                "calibration.txt",
                format!("expected 4 values (sx sy tx ty), found {}", nums.len()),
            ));
        }
        AffineTransform::new(nums[0], nums[1], nums[2], nums[3])
    }

    pub fn to_calibration_string(&self) -> String {
        format!(
            "# NIR -> FIR registration: x' = sx*x + tx, y' = sy*y + ty\n# sx sy tx ty\n{} {} {} {}\n",
            self.sx, self.sy, self.tx, self.ty
        )
    }
}

/// Map a NIR pixel into FIR coordinates, failing if it lands outside the
/// `fir_dims` frame.
pub fn project_point(t: &AffineTransform, p: (f64, f64), fir_dims: (usize, usize)) -> Result<(f64, f64)> {
    t.validate()?;
    let (x, y) = t.apply(p);
    let (w, h) = fir_dims;
    if x < 0.0 || y < 0.0 || x > w as f64 || y > h as f64 {
        return Err(Error::OutOfFrame { x, y, width: w, height: h });
    }
    Ok((x, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkFrame {
    pub timestamp: f64,
    pub nose: (f64, f64),
    /// Bottom ordinate of the detected face box.
    pub chin_y: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub spectrum: Spectrum,
}

impl Roi {
    /// Intersect with a `dims` frame, keeping at least one pixel in each
    /// direction.
    pub fn clamp(&self, (fw, fh): (usize, usize)) -> Roi {
        let (x, w) = clamp_axis(self.x, self.w, fw as f64);
        let (y, h) = clamp_axis(self.y, self.h, fh as f64);
        Roi { x, y, w, h, spectrum: self.spectrum }
    }

    /// Integer pixel rectangle `(x0, y0, x1, y1)` (exclusive ends) obtained by
    /// rounding both edges half-up, guaranteed non-empty and inside `dims`.
    pub fn pixel_bounds(&self, (fw, fh): (usize, usize)) -> (usize, usize, usize, usize) {
        let (x0, x1) = round_axis(self.x, self.x + self.w, fw);
        let (y0, y1) = round_axis(self.y, self.y + self.h, fh);
        (x0, y0, x1, y1)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

fn clamp_axis(start: f64, len: f64, limit: f64) -> (f64, f64) {
    let lo = start.clamp(0.0, (limit - 1.0).max(0.0));
    let hi = (start + len).clamp(lo + 1.0, limit.max(lo + 1.0));
    (lo, hi - lo)
}

fn round_axis(a: f64, b: f64, limit: usize) -> (usize, usize) {
    let lo = ((a + 0.5).floor().max(0.0) as usize).min(limit.saturating_sub(1));
    let hi = ((b + 0.5).floor().max(0.0) as usize).clamp(lo + 1, limit.max(lo + 1));
    (lo, hi)
}

/// Frame-size relative placement of the chest box below the face.
/// These constants are configuration, not measured values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChestGeometry {
    /// Gap between chin and chest box top, as a fraction of frame height.
    pub offset_frac: f64,
    /// Box width as a fraction of frame width, centred on the nose.
    pub width_frac: f64,
    /// Box height as a fraction of frame height.
    pub height_frac: f64,
}

impl Default for ChestGeometry {
    fn default() -> Self {
        ChestGeometry { offset_frac: 0.15, width_frac: 0.6, height_frac: 0.35 }
    }
}

impl ChestGeometry {
    /// Unclamped chest box in NIR coordinates.
    pub fn chest_box(&self, nose_x: f64, chin_y: f64, (w, h): (usize, usize)) -> Roi {
        let bw = self.width_frac * w as f64;
        Roi {
            x: nose_x - bw / 2.0,
            y: chin_y + self.offset_frac * h as f64,
            w: bw,
            h: self.height_frac * h as f64,
            spectrum: Spectrum::Nir,
        }
    }
}

/// Everything needed to turn a landmark frame into ROIs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiContext {
    pub nir_dims: (usize, usize),
    pub fir_dims: (usize, usize),
    pub transform: AffineTransform,
    pub geometry: ChestGeometry,
}

/// Nostril and chest boxes in both spectra for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSet {
    pub nostril_nir: Roi,
    pub nostril_fir: Roi,
    pub chest_nir: Roi,
    pub chest_fir: Roi,
}

impl RoiSet {
    pub fn nostril(&self, s: Spectrum) -> &Roi {
        match s {
            Spectrum::Nir => &self.nostril_nir,
            Spectrum::Fir => &self.nostril_fir,
        }
    }

    pub fn chest(&self, s: Spectrum) -> &Roi {
        match s {
            Spectrum::Nir => &self.chest_nir,
            Spectrum::Fir => &self.chest_fir,
        }
    }
}

fn project_roi(t: &AffineTransform, r: &Roi) -> Roi {
    let (x0, y0) = t.apply((r.x, r.y));
    let (x1, y1) = t.apply((r.x + r.w, r.y + r.h));
    Roi { x: x0, y: y0, w: x1 - x0, h: y1 - y0, spectrum: Spectrum::Fir }
}

/// Derive all four ROIs from one landmark frame. FIR boxes are projections of
/// the unclamped NIR boxes, each then clamped to its own frame.
pub fn derive_rois(lm: &LandmarkFrame, ctx: &RoiContext) -> Result<RoiSet> {
    if !lm.valid || !lm.nose.0.is_finite() || !lm.nose.1.is_finite() || !lm.chin_y.is_finite() {
        return Err(Error::NoRoi);
    }
    let nostril = Roi {
        x: lm.nose.0 - NOSTRIL_WIDTH / 2.0,
        y: lm.nose.1 - NOSTRIL_HEIGHT / 2.0,
        w: NOSTRIL_WIDTH,
        h: NOSTRIL_HEIGHT,
        spectrum: Spectrum::Nir,
    };
    let chest = ctx.geometry.chest_box(lm.nose.0, lm.chin_y, ctx.nir_dims);
    Ok(RoiSet {
        nostril_nir: nostril.clamp(ctx.nir_dims),
        nostril_fir: project_roi(&ctx.transform, &nostril).clamp(ctx.fir_dims),
        chest_nir: chest.clamp(ctx.nir_dims),
        chest_fir: project_roi(&ctx.transform, &chest).clamp(ctx.fir_dims),
    })
}

/// ROIs over time; `None` entries are frames with no usable ROI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTrack {
    pub entries: Vec<(f64, Option<RoiSet>)>,
}

impl RoiTrack {
    /// Apply one ROI set to every timestamp (a static scene).
    pub fn constant(times: &[f64], rois: RoiSet) -> Self {
        RoiTrack { entries: times.iter().map(|&t| (t, Some(rois))).collect() }
    }

    /// ROIs in effect at time `t`: the latest entry at or before `t`. Frames
    /// preceding the first entry by less than `tolerance` use that entry.
    pub fn at(&self, t: f64, tolerance: f64) -> Option<&RoiSet> {
        let idx = self.entries.partition_point(|(et, _)| *et <= t + 1e-9);
        if idx == 0 {
            return match self.entries.first() {
                Some((t0, r)) if t0 - t <= tolerance => r.as_ref(),
                _ => None,
            };
        }
        self.entries[idx - 1].1.as_ref()
    }

    pub fn gap_count(&self) -> usize {
        self.entries.iter().filter(|(_, r)| r.is_none()).count()
    }
}

/// Build a track that holds the last valid ROI across invalid landmark frames
/// for at most `retrigger_s` seconds; longer outages become gaps.
pub fn hold_and_retrigger(track: &[LandmarkFrame], retrigger_s: f64, ctx: &RoiContext) -> Result<RoiTrack> {
    if !(retrigger_s > 0.0) {
        return Err(Error::InvalidParameter(format!("retrigger interval {retrigger_s}")));
    }
    let mut last: Option<(f64, RoiSet)> = None;
    let mut entries = Vec::with_capacity(track.len());
    for lm in track {
        let rois = match derive_rois(lm, ctx) {
            Ok(r) => {
                last = Some((lm.timestamp, r));
                Some(r)
            }
            Err(_) => match last {
                Some((t0, r)) if lm.timestamp - t0 <= retrigger_s => Some(r),
                _ => None,
            },
        };
        entries.push((lm.timestamp, rois));
    }
    if entries.iter().all(|(_, r)| r.is_none()) {
        return Err(Error::EmptyTrack);
    }
    Ok(RoiTrack { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const NIR: (usize, usize) = (336, 190);
    const FIR: (usize, usize) = (160, 120);

    fn ctx(t: AffineTransform) -> RoiContext {
        RoiContext { nir_dims: NIR, fir_dims: FIR, transform: t, geometry: ChestGeometry::default() }
    }

    fn lm(t: f64, valid: bool) -> LandmarkFrame {
        LandmarkFrame { timestamp: t, nose: (168.0, 95.0), chin_y: 120.0, valid }
    }

    #[test]
    fn projection_examples() {
        let id = AffineTransform::identity();
        assert_eq!(project_point(&id, (50.0, 40.0), FIR).unwrap(), (50.0, 40.0));
        let t = AffineTransform::new(0.5, 0.5, 10.0, 5.0).unwrap();
        assert_eq!(project_point(&t, (100.0, 60.0), FIR).unwrap(), (60.0, 35.0));
        let full = AffineTransform::full_frame(NIR, FIR);
        let (x, y) = project_point(&full, (336.0, 190.0), FIR).unwrap();
        assert_abs_diff_eq!(x, 160.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y, 120.0, epsilon = 1e-9);
        assert!(matches!(project_point(&id, (200.0, 10.0), FIR), Err(Error::OutOfFrame { .. })));
    }

    #[test]
    fn nostril_box_is_centred_on_nose() {
        let set = derive_rois(&lm(0.0, true), &ctx(AffineTransform::identity())).unwrap();
        let n = set.nostril_nir;
        assert_eq!((n.x, n.y, n.w, n.h), (160.5, 85.0, 15.0, 20.0));
        assert_eq!(n.pixel_bounds(NIR), (161, 85, 176, 105));
    }

    #[test]
    fn chest_box_geometry() {
        let raw = ChestGeometry::default().chest_box(168.0, 120.0, NIR);
        assert_abs_diff_eq!(raw.y, 148.5, epsilon = 1e-9);
        assert_abs_diff_eq!(raw.h, 66.5, epsilon = 1e-9);
        assert_abs_diff_eq!(raw.x, 67.2, epsilon = 1e-9);
        assert_abs_diff_eq!(raw.w, 201.6, epsilon = 1e-9);
        let c = raw.clamp(NIR);
        assert_abs_diff_eq!(c.y + c.h, 190.0, epsilon = 1e-9);
    }

    #[test]
    fn edge_nose_is_clamped_inside() {
        let l = LandmarkFrame { timestamp: 0.0, nose: (0.0, 189.0), chin_y: 189.0, valid: true };
        let set = derive_rois(&l, &ctx(AffineTransform::full_frame(NIR, FIR))).unwrap();
        for (r, dims) in [(set.nostril_nir, NIR), (set.chest_nir, NIR), (set.nostril_fir, FIR), (set.chest_fir, FIR)] {
            assert!(r.x >= 0.0 && r.y >= 0.0 && r.w >= 1.0 && r.h >= 1.0);
            assert!(r.x + r.w <= dims.0 as f64 && r.y + r.h <= dims.1 as f64);
        }
    }

    #[test]
    fn invalid_landmark_has_no_roi() {
        assert!(matches!(derive_rois(&lm(0.0, false), &ctx(AffineTransform::identity())), Err(Error::NoRoi)));
    }

    #[test]
    fn hold_then_timeout() {
        let c = ctx(AffineTransform::full_frame(NIR, FIR));
        let frames: Vec<LandmarkFrame> = (0..=20).map(|i| lm(i as f64, i == 0 || i == 20)).collect();
        let track = hold_and_retrigger(&frames, 10.0, &c).unwrap();
        let first = derive_rois(&frames[0], &c).unwrap();
        assert_eq!(track.at(5.0, 0.0), Some(&first));
        assert_eq!(track.at(10.0, 0.0), Some(&first));
        for t in 11..20 {
            assert_eq!(track.at(t as f64, 0.0), None, "t={t}");
        }
        assert!(track.at(20.0, 0.0).is_some());
        assert_eq!(track.gap_count(), 9);
    }

    #[test]
    fn all_valid_track_matches_per_frame() {
        let c = ctx(AffineTransform::full_frame(NIR, FIR));
        let frames: Vec<LandmarkFrame> = (0..10)
            .map(|i| LandmarkFrame { timestamp: i as f64 * 0.1, nose: (150.0 + i as f64, 90.0), chin_y: 118.0, valid: true })
            .collect();
        let track = hold_and_retrigger(&frames, 10.0, &c).unwrap();
        for (f, (_, r)) in frames.iter().zip(&track.entries) {
            assert_eq!(r.as_ref(), Some(&derive_rois(f, &c).unwrap()));
        }
    }

    #[test]
    fn all_invalid_is_empty_track() {
        let c = ctx(AffineTransform::identity());
        let frames = vec![lm(0.0, false), lm(1.0, false)];
        assert!(matches!(hold_and_retrigger(&frames, 10.0, &c), Err(Error::EmptyTrack)));
    }

    #[test]
    fn identity_and_equal_sizes_coincide() {
        let c = RoiContext { nir_dims: NIR, fir_dims: NIR, transform: AffineTransform::identity(), geometry: ChestGeometry::default() };
        let set = derive_rois(&lm(0.0, true), &c).unwrap();
        let strip = |r: Roi| (r.x, r.y, r.w, r.h);
        assert_eq!(strip(set.nostril_nir), strip(set.nostril_fir));
        assert_eq!(strip(set.chest_nir), strip(set.chest_fir));
    }

    #[test]
    fn calibration_text_round_trip() {
        let t = AffineTransform::new(0.476, 0.632, 1.5, -2.0).unwrap();
        let parsed = AffineTransform::parse_calibration(&t.to_calibration_string()).unwrap();
        assert_eq!(parsed, t);
        assert!(AffineTransform::parse_calibration("1 2 3").is_err());
        assert!(AffineTransform::parse_calibration("-1 1 0 0").is_err());
    }

    proptest! {
        #[test]
        fn inverse_round_trip(sx in 0.1f64..4.0, sy in 0.1f64..4.0, tx in -50.0f64..50.0, ty in -50.0f64..50.0,
                              x in 0.0f64..400.0, y in 0.0f64..400.0) {
            let t = AffineTransform::new(sx, sy, tx, ty).unwrap();
            let (bx, by) = t.inverse().apply(t.apply((x, y)));
            prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
        }

        #[test]
        fn rois_never_leave_frame(nx in -20.0f64..360.0, ny in -20.0f64..210.0, chin in 0.0f64..200.0,
                                  sx in 0.2f64..1.5, sy in 0.2f64..1.5, tx in -30.0f64..30.0, ty in -30.0f64..30.0) {
            let c = ctx(AffineTransform::new(sx, sy, tx, ty).unwrap());
            let l = LandmarkFrame { timestamp: 0.0, nose: (nx, ny), chin_y: chin, valid: true };
            let set = derive_rois(&l, &c).unwrap();
            for (r, dims) in [(set.nostril_nir, NIR), (set.chest_nir, NIR), (set.nostril_fir, FIR), (set.chest_fir, FIR)] {
                prop_assert!(r.x >= 0.0 && r.y >= 0.0 && r.w >= 1.0 && r.h >= 1.0);
                prop_assert!(r.x + r.w <= dims.0 as f64 + 1e-9 && r.y + r.h <= dims.1 as f64 + 1e-9);
                let (x0, y0, x1, y1) = r.pixel_bounds(dims);
                prop_assert!(x0 < x1 && y0 < y1 && x1 <= dims.0 && y1 <= dims.1);
            }
        }
    }
}
