//! Agreement and detection metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::timebase::pool_segments;

const Z_975: f64 = 1.959_963_984_540_054;

/// Root mean square of paired differences.
pub fn rmse(estimates: &[f64], reference: &[f64]) -> Result<f64> {
    if estimates.len() != reference.len() {
        return Err(Error::InvalidParameter("estimate and reference lengths differ".into()));
    }
    if estimates.is_empty() {
        return Err(Error::NoPairs);
    }
    let ss: f64 = estimates.iter().zip(reference).map(|(e, r)| (e - r) * (e - r)).sum();
    Ok((ss / estimates.len() as f64).sqrt())
}

/// Pool timestamped estimates and references into segments of `segment_s`
/// seconds (anchored at 0) and pair the segments present in both. Missing
/// values are skipped before pooling.
pub fn pooled_pairs(
    estimates: &[(f64, Option<f64>)],
    reference: &[(f64, Option<f64>)],
    segment_s: f64,
) -> Vec<(f64, f64)> {
    let present = |s: &[(f64, Option<f64>)]| -> Vec<(f64, f64)> {
        s.iter().filter_map(|(t, v)| v.map(|v| (*t, v))).collect()
    };
    let e = pool_segments(&present(estimates), segment_s);
    let r = pool_segments(&present(reference), segment_s);
    let mut out = Vec::new();
    let mut j = 0;
    for (bin, ev) in e {
        while j < r.len() && r[j].0 < bin {
            j += 1;
        }
        if j < r.len() && r[j].0 == bin {
            out.push((ev, r[j].1));
        }
    }
    out
}

pub fn rmse_pairs(pairs: &[(f64, f64)]) -> Result<f64> {
    let (e, r): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    rmse(&e, &r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// Standard deviation of a single difference, combining within- and
    /// between-subject components.
    pub sd: f64,
}

/// Limits of agreement for repeated measurements per subject, where the true
/// value may vary within a subject. `groups[s]` holds `(estimate, reference)`
/// pairs of subject `s`; differences are `estimate - reference`.
pub fn bland_altman_repeated(groups: &[Vec<(f64, f64)>]) -> Result<BlandAltman> {
    let groups: Vec<Vec<f64>> =
        groups.iter().filter(|g| !g.is_empty()).map(|g| g.iter().map(|(e, r)| e - r).collect()).collect();
    let k = groups.len();
    if k < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::InsufficientData("need >= 2 subjects with >= 2 pairs each".into()));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let nf = n as f64;
    let grand = groups.iter().flatten().sum::<f64>() / nf;
    let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
    let ss_within: f64 = groups.iter().zip(&means).map(|(g, m)| g.iter().map(|d| (d - m).powi(2)).sum::<f64>()).sum();
    let ss_between: f64 = groups.iter().zip(&means).map(|(g, m)| g.len() as f64 * (m - grand).powi(2)).sum();
    let ms_within = ss_within / (nf - k as f64);
    let ms_between = ss_between / (k as f64 - 1.0);
    let sum_sq: f64 = groups.iter().map(|g| (g.len() * g.len()) as f64).sum();
    let divisor = (nf * nf - sum_sq) / ((k as f64 - 1.0) * nf);
    let var_between = ((ms_between - ms_within) / divisor).max(0.0);
    let sd = (var_between + ms_within).sqrt();
    Ok(BlandAltman { bias: grand, loa_low: grand - Z_975 * sd, loa_high: grand + Z_975 * sd, sd })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonCi {
    pub r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

/// Pearson correlation with a 95 % interval from the Fisher z-transform.
pub fn pearson_ci(x: &[f64], y: &[f64]) -> Result<PearsonCi> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::InvalidParameter("x and y lengths differ".into()));
    }
    if n < 4 {
        return Err(Error::InsufficientData(format!("correlation needs >= 4 pairs, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Undefined("correlation with a zero-variance input".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let z = r.atanh();
    let se = 1.0 / ((n - 3) as f64).sqrt();
    Ok(PearsonCi { r, ci_low: (z - Z_975 * se).tanh(), ci_high: (z + Z_975 * se).tanh(), n })
}

/// Confusion counts with apnea as the positive class. Ratios whose
/// denominator is zero are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub f1: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl ClassificationMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
        ClassificationMetrics {
            tp,
            fp,
            fn_,
            tn,
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
        }
    }
}

pub fn classification_metrics(predicted: &[bool], truth: &[bool]) -> Result<ClassificationMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidParameter("prediction and truth lengths differ".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(ClassificationMetrics::from_counts(tp, fp, fn_, tn))
}

/// Median and mean absolute deviation from the median.
pub fn median_mad(values: &[f64]) -> Option<(f64, f64)> {
    let m = crate::stats::median(values)?;
    let mad = values.iter().map(|v| (v - m).abs()).sum::<f64>() / values.len() as f64;
    Some((m, mad))
}

/// Number of maximal runs of `true`.
pub fn count_episodes(flags: &[bool]) -> usize {
    flags.iter().enumerate().filter(|&(i, &f)| f && (i == 0 || !flags[i - 1])).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSum {
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for `a` tending to be smaller than `b`.
    pub p_less: f64,
    pub p_two_sided: f64,
}

/// Wilcoxon rank-sum (Mann-Whitney U) test with the tie-corrected normal
/// approximation.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<RankSum> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::EmptyInput);
    }
    let mut all: Vec<(f64, usize)> = a.iter().map(|&v| (v, 0)).chain(b.iter().map(|&v| (v, 1))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].iter_mut().for_each(|x| *x = r);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let r1: f64 = all.iter().zip(&ranks).filter(|((_, g), _)| *g == 0).map(|(_, r)| r).sum();
    let (n1f, n2f, nf) = (n1 as f64, n2 as f64, n as f64);
    let u = r1 - n1f * (n1f + 1.0) / 2.0;
    let mean = n1f * n2f / 2.0;
    let var = n1f * n2f / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    if var <= 0.0 {
        return Ok(RankSum { u, z: 0.0, p_less: 0.5, p_two_sided: 1.0 });
    }
    let sd = var.sqrt();
    let z = (u - mean) / sd;
    let z_less = (u - mean + 0.5) / sd;
    let z_abs = ((u - mean).abs() - 0.5).max(0.0) / sd;
    Ok(RankSum { u, z, p_less: normal.cdf(z_less), p_two_sided: (2.0 * normal.sf(z_abs)).min(1.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&[3.0, 4.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rmse(&[10.0, 10.0], &[12.0, 8.0]).unwrap(), 2.0, epsilon = 1e-15);
        assert!(matches!(rmse(&[], &[]), Err(Error::NoPairs)));
    }

    #[test]
    fn pooling_pairs_common_segments() {
        let e = [(1.0, Some(10.0)), (2.0, Some(12.0)), (16.0, None), (31.0, Some(9.0))];
        let r = [(1.0, Some(11.0)), (17.0, Some(3.0)), (32.0, Some(9.0))];
        assert_eq!(pooled_pairs(&e, &r, 15.0), vec![(11.0, 11.0), (9.0, 9.0)]);
    }

    #[test]
    fn bland_altman_zero_and_errors() {
        let g = vec![vec![(1.0, 1.0), (2.0, 2.0)], vec![(3.0, 3.0), (4.0, 4.0)]];
        let ba = bland_altman_repeated(&g).unwrap();
        assert_eq!((ba.bias, ba.loa_low, ba.loa_high), (0.0, 0.0, 0.0));
        assert!(matches!(bland_altman_repeated(&g[..1]), Err(Error::InsufficientData(_))));
        let thin = vec![vec![(1.0, 0.0)], vec![(1.0, 0.0), (2.0, 0.0)]];
        assert!(bland_altman_repeated(&thin).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let yn: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(pearson_ci(&x, &y2).unwrap().r, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson_ci(&x, &yn).unwrap().r, -1.0, epsilon = 1e-12);
        assert!(matches!(pearson_ci(&x, &[1.0; 10]), Err(Error::Undefined(_))));
        assert!(pearson_ci(&x[..3], &y2[..3]).is_err());
    }

    #[test]
    fn classification_examples() {
        let perfect = classification_metrics(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((perfect.f1, perfect.sensitivity, perfect.specificity), (Some(1.0), Some(1.0), Some(1.0)));
        let none = classification_metrics(&[false, false, false], &[true, false, true]).unwrap();
        assert_eq!(none.sensitivity, Some(0.0));
        let m = ClassificationMetrics::from_counts(9, 2, 1, 8);
        assert_abs_diff_eq!(m.f1.unwrap(), 18.0 / 21.0, epsilon = 1e-15);
        let no_pos = classification_metrics(&[false, false], &[false, false]).unwrap();
        assert_eq!(no_pos.sensitivity, None);
        assert_eq!(no_pos.specificity, Some(1.0));
    }

    #[test]
    fn episodes_are_runs() {
        assert_eq!(count_episodes(&[false, true, true, false, true, false, false, true]), 3);
        assert_eq!(count_episodes(&[]), 0);
    }

    #[test]
    fn rank_sum_small_example() {
        // Fully separated samples of 20 each: U = 0.
        let a: Vec<f64> = (0..20).map(f64::from).collect();
        let b: Vec<f64> = (20..40).map(f64::from).collect();
        let r = rank_sum_test(&a, &b).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.p_less < 1e-6);
        let r2 = rank_sum_test(&b, &a).unwrap();
        assert!(r2.p_less > 0.99);
        let same = rank_sum_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(same.p_two_sided, 1.0);
    }
}
