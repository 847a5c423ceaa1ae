//! Soft-margin RBF support vector machine trained by sequential minimal
//! optimization, with Platt-scaled posteriors.
//!
//! The solver follows the second-order working-set selection of Fan, Chen and
//! Lin (2005) on the dual
//!
//! ```text
//! min ½ αᵀQα − eᵀα   s.t.  yᵀα = 0,  0 ≤ αᵢ ≤ Cᵢ,   Qᵢⱼ = yᵢyⱼK(xᵢ, xⱼ)
//! ```
//!
//! and stops when the maximal KKT violation falls below the tolerance.
//! Posteriors come from a sigmoid `1 / (1 + exp(A·f + B))` fitted to the
//! training decision values with the Newton method of Lin, Lin and Weng (2007).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub c: f64,
    /// RBF width; `None` picks `1 / (dim · variance of all training entries)`.
    pub gamma: Option<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Scale each class's penalty by `n / (2 · n_class)`.
    pub class_weighted: bool,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { c: 1.0, gamma: None, tolerance: 1e-3, max_iterations: 1_000_000, class_weighted: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Svm {
    pub gamma: f64,
    pub support_vectors: Vec<Vec<f64>>,
    /// `αᵢ·yᵢ` for each support vector.
    pub coefficients: Vec<f64>,
    pub bias: f64,
    pub platt_a: f64,
    pub platt_b: f64,
}

fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

pub fn default_gamma<R: AsRef<[f64]>>(x: &[R]) -> f64 {
    let dim = x.first().map_or(1, |r| r.as_ref().len()).max(1);
    let all: Vec<f64> = x.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
    let n = all.len().max(1) as f64;
    let m = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    if var > 0.0 { 1.0 / (dim as f64 * var) } else { 1.0 / dim as f64 }
}

impl Svm {
    /// Signed distance-like decision value; positive means the positive class.
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.coefficients)
            .map(|(sv, c)| c * rbf(self.gamma, sv, x))
            .sum::<f64>()
            + self.bias
    }

    /// Platt-scaled probability of the positive class, in (0, 1).
    pub fn posterior(&self, x: &[f64]) -> f64 {
        sigmoid_posterior(self.decision(x), self.platt_a, self.platt_b)
    }
}

fn sigmoid_posterior(f: f64, a: f64, b: f64) -> f64 {
    let z = a * f + b;
    let p = if z >= 0.0 { (-z).exp() / (1.0 + (-z).exp()) } else { 1.0 / (1.0 + z.exp()) };
    p.clamp(1e-12, 1.0 - 1e-12)
}

/// Box constraints `(C₊, C₋)` for the given class counts.
pub fn class_penalties(cfg: &SvmConfig, n_pos: usize, n_neg: usize) -> (f64, f64) {
    if cfg.class_weighted {
        let n = (n_pos + n_neg) as f64;
        (cfg.c * n / (2.0 * n_pos as f64), cfg.c * n / (2.0 * n_neg as f64))
    } else {
        (cfg.c, cfg.c)
    }
}

/// Train on rows `x` with labels `y` (`true` is the positive class).
pub fn train_svm<R: AsRef<[f64]> + Sync>(x: &[R], y: &[bool], cfg: &SvmConfig) -> Result<Svm> {
    let n = x.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if y.len() != n {
        return Err(Error::InvalidParameter("label count differs from row count".into()));
    }
    let n_pos = y.iter().filter(|v| **v).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::SingleClassFold);
    }
    if !(cfg.c > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(Error::InvalidParameter(format!("C = {} and tolerance = {}", cfg.c, cfg.tolerance)));
    }
    let gamma = cfg.gamma.unwrap_or_else(|| default_gamma(x));
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma = {gamma}")));
    }
    let (c_pos, c_neg) = class_penalties(cfg, n_pos, n - n_pos);
    let sign: Vec<f64> = y.iter().map(|&v| if v { 1.0 } else { -1.0 }).collect();
    let bound: Vec<f64> = y.iter().map(|&v| if v { c_pos } else { c_neg }).collect();

    let kernel = KernelMatrix::new(x, gamma);
    let (alpha, bias) = smo(&kernel, &sign, &bound, cfg)?;

    let mut support_vectors = Vec::new();
    let mut coefficients = Vec::new();
    for i in 0..n {
        if alpha[i] > 0.0 {
            support_vectors.push(x[i].as_ref().to_vec());
            coefficients.push(alpha[i] * sign[i]);
        }
    }
    let mut svm = Svm { gamma, support_vectors, coefficients, bias, platt_a: 0.0, platt_b: 0.0 };
    let decisions: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| alpha[j] > 0.0).map(|j| alpha[j] * sign[j] * kernel.get(i, j)).sum::<f64>() + bias)
        .collect();
    let (a, b) = platt_fit(&decisions, y);
    svm.platt_a = a;
    svm.platt_b = b;
    Ok(svm)
}

struct KernelMatrix {
    n: usize,
    values: Vec<f64>,
}

impl KernelMatrix {
    fn new<R: AsRef<[f64]> + Sync>(x: &[R], gamma: f64) -> Self {
        use rayon::prelude::*;
        let n = x.len();
        let mut values = vec![0.0; n * n];
        values.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rbf(gamma, x[i].as_ref(), x[j].as_ref());
            }
        });
        KernelMatrix { n, values }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

fn smo(k: &KernelMatrix, y: &[f64], c: &[f64], cfg: &SvmConfig) -> Result<(Vec<f64>, f64)> {
    let n = y.len();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let upper = |a: &[f64], t: usize| a[t] >= c[t];
    let lower = |a: &[f64], t: usize| a[t] <= 0.0;
    let in_up = |a: &[f64], t: usize| if y[t] > 0.0 { !upper(a, t) } else { !lower(a, t) };
    let in_low = |a: &[f64], t: usize| if y[t] > 0.0 { !lower(a, t) } else { !upper(a, t) };

    let mut iterations = 0;
    loop {
        let mut g_max = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if in_up(&alpha, t) && -y[t] * grad[t] >= g_max {
                g_max = -y[t] * grad[t];
                i = t;
            }
        }
        if i == usize::MAX {
            break;
        }
        let ki = k.row(i);
        let mut g_max2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut obj_min = f64::INFINITY;
        for t in 0..n {
            if !in_low(&alpha, t) {
                continue;
            }
            let yg = y[t] * grad[t];
            g_max2 = g_max2.max(yg);
            let diff = g_max + yg;
            if diff > 0.0 {
                let quad = (ki[i] + k.get(t, t) - 2.0 * ki[t]).max(TAU);
                let obj = -diff * diff / quad;
                if obj <= obj_min {
                    obj_min = obj;
                    j = t;
                }
            }
        }
        if g_max + g_max2 < cfg.tolerance || j == usize::MAX {
            break;
        }
        iterations += 1;
        if iterations > cfg.max_iterations {
            log::warn!("SMO stopped after {} iterations without reaching tolerance", cfg.max_iterations);
            break;
        }

        let kj = k.row(j);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = (ki[i] + kj[j] - 2.0 * ki[j]).max(TAU);
        let (ci, cj) = (c[i], c[j]);
        let (mut ai, mut aj) = (old_i, old_j);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > ci - cj {
                if ai > ci {
                    ai = ci;
                    aj = ci - diff;
                }
            } else if aj > cj {
                aj = cj;
                ai = cj + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > ci {
                if ai > ci {
                    ai = ci;
                    aj = sum - ci;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > cj {
                if aj > cj {
                    aj = cj;
                    ai = sum - cj;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        alpha[i] = ai;
        alpha[j] = aj;
        let (di, dj) = (ai - old_i, aj - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free_sum, mut free_count) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if upper(&alpha, t) {
            if y[t] < 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else if lower(&alpha, t) {
            if y[t] > 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else {
            free_sum += yg;
            free_count += 1;
        }
    }
    let rho = if free_count > 0 { free_sum / free_count as f64 } else { (ub + lb) / 2.0 };
    Ok((alpha, -rho))
}

/// Regularized maximum-likelihood fit of the Platt sigmoid. Returns `(A, B)`.
pub fn platt_fit(decisions: &[f64], labels: &[bool]) -> (f64, f64) {
    let prior1 = labels.iter().filter(|v| **v).count() as f64;
    let prior0 = labels.len() as f64 - prior1;
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let targets: Vec<f64> = labels.iter().map(|&l| if l { hi } else { lo }).collect();
    let objective = |a: f64, b: f64| -> f64 {
        decisions
            .iter()
            .zip(&targets)
            .map(|(f, t)| {
                let z = f * a + b;
                if z >= 0.0 { t * z + (-z).exp().ln_1p() } else { (t - 1.0) * z + z.exp().ln_1p() }
            })
            .sum()
    };

    let sigma = 1e-12;
    let mut a = 0.0;
    let mut b = ((prior0 + 1.0) / (prior1 + 1.0)).ln();
    let mut fval = objective(a, b);
    for _ in 0..100 {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (sigma, sigma, 0.0, 0.0, 0.0);
        for (f, t) in decisions.iter().zip(&targets) {
            let z = f * a + b;
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = t - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < 1e-10 {
            log::debug!("Platt line search failed to improve");
            break;
        }
    }
    (a, b)
}
