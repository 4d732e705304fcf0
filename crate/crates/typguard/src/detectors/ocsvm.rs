//! ν one-class SVM with an RBF kernel, solved by SMO.
//!
//! Dual problem, with `L` training points:
//!
//! ```text
//! min_α  ½ αᵀ K α    s.t.  0 ≤ α_i ≤ 1/(ν L),  Σ α_i = 1
//! ```
//!
//! Decision function `f(x) = Σ_s α_s exp(−γ ‖x − v_s‖²) − ρ`; points with
//! `f(x) < 0` fall outside the learned boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ν values searched by [`select_ocsvm_nu`] unless overridden.
pub const DEFAULT_NU_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.2, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoConfig {
    /// Stop when the maximal KKT violation `max_up(−G) − min_low(−G)` drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SmoConfig {
    fn default() -> Self {
        SmoConfig { tol: 1e-6, max_iter: 5_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcsvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    pub dual_coefs: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
    pub train_count: usize,
    pub n_iter: usize,
    /// Final KKT gap reached by the solver.
    pub kkt_gap: f64,
}

#[inline]
fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

impl OcsvmModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.first().map(Vec::len).unwrap_or(0)
    }

    /// `Σ α_s k(x, v_s) − ρ`
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), actual: x.len() });
        }
        Ok(self.support_vectors.iter().zip(&self.dual_coefs).map(|(v, a)| a * rbf(self.gamma, x, v)).sum::<f64>()
            - self.rho)
    }

    pub fn upper_bound(&self) -> f64 {
        1.0 / (self.nu * self.train_count as f64)
    }
}

/// `1 / (F · Var(all feature entries))`, or 1 when the features are constant.
pub fn scale_gamma(features: &[Vec<f64>]) -> f64 {
    let f = features.first().map(Vec::len).unwrap_or(0);
    let n = (features.len() * f) as f64;
    if n == 0.0 {
        return 1.0;
    }
    let mean = features.iter().flatten().sum::<f64>() / n;
    let var = features.iter().flatten().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (f as f64 * var)
    } else {
        1.0
    }
}

/// Solves the ν one-class dual and keeps the points with `α > 0`.
pub fn fit_ocsvm(features: &[Vec<f64>], nu: f64, gamma: f64, config: SmoConfig) -> Result<OcsvmModel> {
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::Parameter(format!("nu = {nu} must lie in (0, 1)")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Parameter(format!("gamma = {gamma} must be positive")));
    }
    let l = features.len();
    if l == 0 {
        return Err(Error::Parameter("one-class SVM needs at least one training point".into()));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|r| r.len() != dim) {
        return Err(Error::Dimension { expected: dim, actual: bad.len() });
    }
    let c = 1.0 / (nu * l as f64);

    // Feasible start: the first ⌊νL⌋ coefficients at the bound, the
    // remainder on the next one.
    let mut alpha = vec![0.0; l];
    let mut left = 1.0;
    for a in alpha.iter_mut() {
        if left <= 0.0 {
            break;
        }
        *a = c.min(left);
        left -= *a;
    }

    let column = |i: usize| -> Vec<f64> { features.iter().map(|x| rbf(gamma, &features[i], x)).collect() };
    // Gradient of ½αᵀKα is Kα.
    let mut grad = vec![0.0; l];
    for (i, &a) in alpha.iter().enumerate() {
        if a > 0.0 {
            for (g, k) in grad.iter_mut().zip(column(i)) {
                *g += a * k;
            }
        }
    }

    let eps_bound = c * 1e-12;
    let at_upper = |a: f64| a >= c - eps_bound;
    let at_lower = |a: f64| a <= eps_bound;

    let mut n_iter = 0;
    let mut gap;
    loop {
        // i: steepest ascent among variables that can still grow.
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        for t in 0..l {
            if !at_upper(alpha[t]) && -grad[t] > gmax {
                gmax = -grad[t];
                i = t;
            }
        }
        // Largest G among variables that can still shrink gives the gap.
        let mut gmax2 = f64::NEG_INFINITY;
        for t in 0..l {
            if !at_lower(alpha[t]) {
                gmax2 = gmax2.max(grad[t]);
            }
        }
        gap = gmax + gmax2;
        if i == usize::MAX || gap < config.tol || n_iter >= config.max_iter {
            break;
        }
        // j: second-order working-set selection among shrinkable variables.
        let ki = column(i);
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..l {
            if at_lower(alpha[t]) {
                continue;
            }
            let b = gmax + grad[t];
            if b > 0.0 {
                let a = (2.0 - 2.0 * ki[t]).max(1e-12);
                let obj = -(b * b) / a;
                if obj <= best {
                    best = obj;
                    j = t;
                }
            }
        }
        if j == usize::MAX {
            break;
        }
        let kj = column(j);
        let quad = (2.0 - 2.0 * ki[j]).max(1e-12);
        let mut delta = (grad[j] - grad[i]) / quad;
        delta = delta.min(c - alpha[i]).min(alpha[j]);
        if delta <= 0.0 {
            break;
        }
        alpha[i] += delta;
        alpha[j] -= delta;
        if alpha[j] < eps_bound {
            alpha[j] = 0.0;
        }
        if alpha[i] > c - eps_bound {
            alpha[i] = c;
        }
        for t in 0..l {
            grad[t] += delta * (ki[t] - kj[t]);
        }
        n_iter += 1;
    }
    if n_iter >= config.max_iter {
        log::warn!("one-class SMO stopped at max_iter with KKT gap {gap:.3e}");
    }

    // ρ: G on free vectors, else the midpoint of the feasible interval.
    let mut free_sum = 0.0;
    let mut free_n = 0usize;
    let mut lb = f64::NEG_INFINITY; // max G over α = C
    let mut ub = f64::INFINITY; // min G over α = 0
    for t in 0..l {
        if at_upper(alpha[t]) {
            lb = lb.max(grad[t]);
        } else if at_lower(alpha[t]) {
            ub = ub.min(grad[t]);
        } else {
            free_sum += grad[t];
            free_n += 1;
        }
    }
    let rho = if free_n > 0 {
        free_sum / free_n as f64
    } else if lb.is_finite() && ub.is_finite() {
        0.5 * (lb + ub)
    } else if lb.is_finite() {
        lb
    } else {
        ub
    };

    let (support_vectors, dual_coefs) =
        features.iter().zip(&alpha).filter(|(_, &a)| a > 0.0).map(|(x, &a)| (x.clone(), a)).unzip();
    Ok(OcsvmModel { support_vectors, dual_coefs, rho, gamma, nu, train_count: l, n_iter, kkt_gap: gap })
}

/// Fraction of `validation` points on or inside the boundary (`f ≥ 0`).
pub fn accept_rate(model: &OcsvmModel, validation: &[Vec<f64>]) -> Result<f64> {
    let mut inside = 0usize;
    for x in validation {
        if model.decision(x)? >= 0.0 {
            inside += 1;
        }
    }
    Ok(inside as f64 / validation.len() as f64)
}

#[derive(Debug, Clone)]
pub struct NuSelection {
    pub model: OcsvmModel,
    /// `(ν, validation accept rate)` per grid entry.
    pub candidates: Vec<(f64, f64)>,
}

/// Picks the ν whose model accepts the largest share of held-out
/// in-distribution points; ties go to the smaller ν.
pub fn select_ocsvm_nu(
    train: &[Vec<f64>],
    validation: &[Vec<f64>],
    nu_grid: &[f64],
    gamma: f64,
    config: SmoConfig,
) -> Result<NuSelection> {
    if validation.is_empty() {
        return Err(Error::Parameter("ν selection needs a non-empty validation set".into()));
    }
    if nu_grid.is_empty() {
        return Err(Error::Parameter("ν grid must not be empty".into()));
    }
    let mut grid = nu_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut best: Option<(OcsvmModel, f64)> = None;
    let mut candidates = Vec::with_capacity(grid.len());
    for nu in grid {
        let model = fit_ocsvm(train, nu, gamma, config)?;
        let acc = accept_rate(&model, validation)?;
        log::debug!("ocsvm nu={nu} accept={acc:.4} sv={}", model.support_vectors.len());
        candidates.push((nu, acc));
        if best.as_ref().is_none_or(|(_, b)| acc > *b) {
            best = Some((model, acc));
        }
    }
    Ok(NuSelection { model: best.unwrap().0, candidates })
}
