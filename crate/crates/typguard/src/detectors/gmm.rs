//! Full-covariance Gaussian mixture fitted by EM, with BIC model selection.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Component counts searched by [`select_gmm_bic`] unless overridden.
pub const DEFAULT_COMPONENT_GRID: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop when `|ΔL| < tol · max(|L|, 1)` for the mean log-likelihood `L`.
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { max_iter: 200, tol: 1e-6 }
    }
}

/// A fitted mixture. Covariances are row-major `F × F` with eigenvalues floored at `ridge`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub n_components: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
    /// Mean per-sample log-likelihood of the training data under this model.
    pub train_loglik: f64,
    pub train_count: usize,
    pub seed: u64,
    pub ridge: f64,
    pub n_iter: usize,
    pub converged: bool,
    /// Mean log-likelihood before each M-step, plus the final value.
    pub loglik_history: Vec<f64>,
}

struct Component {
    log_weight: f64,
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    /// `F ln 2π + ln |Σ|`
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: &[f64], cov: &[f64]) -> Result<Self> {
        let f = mean.len();
        let chol = DMatrix::from_row_slice(f, f, cov).cholesky().ok_or_else(|| {
            Error::Validation("covariance is not positive definite after the eigenvalue floor".into())
        })?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Component {
            log_weight: weight.ln(),
            mean: DVector::from_column_slice(mean),
            chol_l: chol.l(),
            log_norm: f as f64 * LN_2PI + log_det,
        })
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let z = self.chol_l.solve_lower_triangular(&diff).expect("Cholesky factor has a positive diagonal");
        -0.5 * (self.log_norm + z.norm_squared())
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl GmmModel {
    pub fn dim(&self) -> usize {
        self.means.first().map(Vec::len).unwrap_or(0)
    }

    fn components(&self) -> Result<Vec<Component>> {
        (0..self.n_components).map(|c| Component::new(self.weights[c], &self.means[c], &self.covariances[c])).collect()
    }

    /// Free parameters for full covariances:
    /// `(c − 1) + cF + cF(F + 1)/2`.
    pub fn n_parameters(&self) -> usize {
        free_parameters(self.n_components, self.dim())
    }

    /// `−2 · total loglik + p · ln(count)`.
    pub fn bic(&self) -> f64 {
        let n = self.train_count as f64;
        -2.0 * self.train_loglik * n + self.n_parameters() as f64 * n.ln()
    }

    /// Prepared scorer; factorises each covariance once.
    pub fn scorer(&self) -> Result<GmmScorer> {
        Ok(GmmScorer { dim: self.dim(), components: self.components()? })
    }

    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        self.scorer()?.log_likelihood(x)
    }
}

pub fn free_parameters(n_components: usize, dim: usize) -> usize {
    (n_components - 1) + n_components * dim + n_components * dim * (dim + 1) / 2
}

/// Scores points against a fitted mixture.
pub struct GmmScorer {
    dim: usize,
    components: Vec<Component>,
}

impl GmmScorer {
    /// `log Σ_c w_c N(x; μ_c, Σ_c)`
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, actual: x.len() });
        }
        let terms: Vec<f64> = self.components.iter().map(|c| c.log_weight + c.log_pdf(x)).collect();
        Ok(log_sum_exp(&terms))
    }
}

struct Data<'a> {
    rows: &'a [Vec<f64>],
    dim: usize,
}

impl Data<'_> {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        for r in self.rows {
            for (m, x) in mu.iter_mut().zip(r) {
                *m += x;
            }
        }
        let n = self.len() as f64;
        mu.iter_mut().for_each(|m| *m /= n);
        mu
    }

    /// Weighted scatter `Σ w_i (x_i − μ)(x_i − μ)ᵀ / total`, row-major.
    fn scatter(&self, weights: Option<&[f64]>, mu: &[f64], total: f64) -> Vec<f64> {
        let f = self.dim;
        let mut s = vec![0.0; f * f];
        let mut diff = vec![0.0; f];
        for (i, r) in self.rows.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            for a in 0..f {
                diff[a] = r[a] - mu[a];
            }
            for a in 0..f {
                let wa = w * diff[a];
                for b in a..f {
                    s[a * f + b] += wa * diff[b];
                }
            }
        }
        for a in 0..f {
            for b in a..f {
                let v = s[a * f + b] / total;
                s[a * f + b] = v;
                s[b * f + a] = v;
            }
        }
        s
    }
}

fn validate_features(features: &[Vec<f64>]) -> Result<usize> {
    let dim = features.first().map(Vec::len).unwrap_or(0);
    if dim == 0 {
        return Err(Error::Parameter("features must be non-empty vectors".into()));
    }
    for (i, r) in features.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::Dimension { expected: dim, actual: r.len() });
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("feature row {i} has a non-finite value")));
        }
    }
    Ok(dim)
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
fn kmeanspp_seeds(data: &Data<'_>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centres = vec![data.rows[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.rows.iter().map(|r| sq(r, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = data.rows[pick].clone();
        for (d, r) in d2.iter_mut().zip(data.rows) {
            *d = d.min(sq(r, &c));
        }
        centres.push(c);
    }
    centres
}

/// Raises every eigenvalue of a symmetric `dim × dim` matrix to at least `floor`.
///
/// Among covariances with all eigenvalues `≥ floor`, this is the one that
/// maximises the M-step objective, so EM stays monotone.
fn floor_eigenvalues(cov: Vec<f64>, dim: usize, floor: f64) -> Vec<f64> {
    let eig = DMatrix::from_row_slice(dim, dim, &cov).symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return cov;
    }
    let lambda = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(floor)));
    let m = &eig.eigenvectors * lambda * eig.eigenvectors.transpose();
    let mut out = vec![0.0; dim * dim];
    for a in 0..dim {
        for b in a..dim {
            let v = 0.5 * (m[(a, b)] + m[(b, a)]);
            out[a * dim + b] = v;
            out[b * dim + a] = v;
        }
    }
    out
}

/// Fits a full-covariance mixture by EM.
///
/// Covariance eigenvalues are floored at `ridge = 1e-6 · trace(Σ_data) / F`,
/// so duplicate points never make a component singular.
pub fn fit_gmm_em(features: &[Vec<f64>], n_components: usize, seed: u64, config: EmConfig) -> Result<GmmModel> {
    let dim = validate_features(features)?;
    let n = features.len();
    if n_components == 0 || n_components > n {
        return Err(Error::Parameter(format!("n_components = {n_components} must be in 1..={n} (training count)")));
    }
    let data = Data { rows: features, dim };
    let global_mu = data.mean();
    let global_cov = data.scatter(None, &global_mu, n as f64);
    let trace: f64 = (0..dim).map(|a| global_cov[a * dim + a]).sum();
    let ridge = (1e-6 * trace / dim as f64).max(1e-12);
    let floor = |cov: Vec<f64>| floor_eigenvalues(cov, dim, ridge);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = vec![1.0 / n_components as f64; n_components];
    let mut means = kmeanspp_seeds(&data, n_components, &mut rng);
    let mut covs = vec![floor(global_cov.clone()); n_components];

    let mut history = Vec::new();
    let mut resp = vec![0.0; n * n_components];
    let mut converged = false;
    let mut n_iter = 0;
    loop {
        // E-step
        let comps =
            (0..n_components).map(|c| Component::new(weights[c], &means[c], &covs[c])).collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        let mut terms = vec![0.0; n_components];
        for (i, x) in features.iter().enumerate() {
            for (t, comp) in terms.iter_mut().zip(&comps) {
                *t = comp.log_weight + comp.log_pdf(x);
            }
            let lse = log_sum_exp(&terms);
            total += lse;
            for c in 0..n_components {
                resp[i * n_components + c] = (terms[c] - lse).exp();
            }
        }
        let loglik = total / n as f64;
        if let Some(&prev) = history.last() {
            let prev: f64 = prev;
            if (loglik - prev).abs() < config.tol * prev.abs().max(1.0) {
                converged = true;
            }
        }
        history.push(loglik);
        if converged || n_iter >= config.max_iter {
            break;
        }

        // M-step
        n_iter += 1;
        let mut col = vec![0.0; n];
        for c in 0..n_components {
            for i in 0..n {
                col[i] = resp[i * n_components + c];
            }
            let nk: f64 = col.iter().sum::<f64>() + 10.0 * f64::EPSILON;
            weights[c] = nk / n as f64;
            let mut mu = vec![0.0; dim];
            for (w, x) in col.iter().zip(features) {
                for (m, v) in mu.iter_mut().zip(x) {
                    *m += w * v;
                }
            }
            mu.iter_mut().for_each(|m| *m /= nk);
            covs[c] = floor(data.scatter(Some(&col), &mu, nk));
            means[c] = mu;
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
    }

    Ok(GmmModel {
        n_components,
        weights,
        means,
        covariances: covs,
        train_loglik: *history.last().unwrap(),
        train_count: n,
        seed,
        ridge,
        n_iter,
        converged,
        loglik_history: history,
    })
}

/// Index of the lowest BIC; ties go to the earlier (smaller) candidate.
pub fn argmin_bic(bics: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &b) in bics.iter().enumerate() {
        if best.is_none_or(|j| b < bics[j]) {
            best = Some(i);
        }
    }
    best
}

/// Result of a BIC grid search.
#[derive(Debug, Clone)]
pub struct BicSelection {
    pub model: GmmModel,
    /// `(n_components, bic)` for every candidate fitted.
    pub candidates: Vec<(usize, f64)>,
}

/// Fits one mixture per grid entry (entries above the training count are
/// dropped) and keeps the lowest BIC, preferring fewer components on ties.
pub fn select_gmm_bic(
    features: &[Vec<f64>],
    component_grid: &[usize],
    seed: u64,
    config: EmConfig,
) -> Result<BicSelection> {
    let mut grid: Vec<usize> = filter_component_grid(component_grid, features.len());
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() {
        return Err(Error::Parameter(format!(
            "no component count in {component_grid:?} fits {} training points",
            features.len()
        )));
    }
    let mut models = Vec::with_capacity(grid.len());
    for &c in &grid {
        let model = fit_gmm_em(features, c, seed, config)?;
        log::debug!("gmm c={c} loglik={:.6} bic={:.3}", model.train_loglik, model.bic());
        models.push(model);
    }
    let bics: Vec<f64> = models.iter().map(GmmModel::bic).collect();
    let best = argmin_bic(&bics).unwrap();
    Ok(BicSelection { candidates: grid.iter().copied().zip(bics).collect(), model: models.swap_remove(best) })
}

pub fn filter_component_grid(grid: &[usize], count: usize) -> Vec<usize> {
    grid.iter().copied().filter(|&c| c >= 1 && c <= count).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blob(n: usize, centre: &[f64], sigma: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).unwrap();
        (0..n).map(|_| centre.iter().map(|c| c + normal.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn one_component_recovers_the_sample_mean() {
        let x = blob(200, &[1.0, -2.0, 0.5], 0.1, 3);
        let model = fit_gmm_em(&x, 1, 0, EmConfig::default()).unwrap();
        let d = Data { rows: &x, dim: 3 };
        for (a, b) in model.means[0].iter().zip(d.mean()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn duplicates_stay_finite() {
        let x = vec![vec![0.5, 0.5]; 20];
        let model = fit_gmm_em(&x, 2, 1, EmConfig::default()).unwrap();
        assert!(model.train_loglik.is_finite());
        assert!(model.scorer().is_ok());
    }

    #[test]
    fn two_separated_blobs_split_cleanly() {
        let sigma = 0.01;
        let a = [0.0, 0.0];
        let b = [10.0 * sigma, 0.0];
        let mut x = blob(150, &a, sigma, 10);
        x.extend(blob(150, &b, sigma, 11));
        let model = fit_gmm_em(&x, 2, 5, EmConfig::default()).unwrap();
        // Direct per-blob MLE means.
        let mle_a = Data { rows: &x[..150], dim: 2 }.mean();
        let mle_b = Data { rows: &x[150..], dim: 2 }.mean();
        let mut found = [false, false];
        for mu in &model.means {
            for (slot, target) in [&mle_a, &mle_b].into_iter().enumerate() {
                let err: f64 = mu.iter().zip(target).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                if err < 0.05 * sigma * 10.0 {
                    found[slot] = true;
                }
            }
        }
        assert_eq!(found, [true, true], "means {:?}", model.means);
        // Responsibilities are effectively one-hot.
        let scorer = model.scorer().unwrap();
        for row in &x {
            let terms: Vec<f64> = scorer.components.iter().map(|c| c.log_weight + c.log_pdf(row)).collect();
            let lse = log_sum_exp(&terms);
            let top = terms.iter().map(|t| (t - lse).exp()).fold(0.0, f64::max);
            assert!(top > 0.999);
        }
    }

    #[test]
    fn too_many_components_is_a_parameter_error() {
        let x = blob(3, &[0.0], 1.0, 0);
        assert!(matches!(fit_gmm_em(&x, 4, 0, EmConfig::default()), Err(Error::Parameter(_))));
    }

    #[test]
    fn bic_prefers_one_component_for_one_blob() {
        let x = blob(300, &[0.0, 0.0, 0.0], 1.0, 21);
        let sel = select_gmm_bic(&x, &DEFAULT_COMPONENT_GRID, 4, EmConfig::default()).unwrap();
        // BIC recomputed directly from each candidate's fitted log-likelihood.
        for &(c, bic) in &sel.candidates {
            let m = fit_gmm_em(&x, c, 4, EmConfig::default()).unwrap();
            let direct = -2.0 * m.train_loglik * 300.0 + free_parameters(c, 3) as f64 * 300f64.ln();
            assert!((bic - direct).abs() < 1e-9 * direct.abs().max(1.0));
        }
        assert_eq!(sel.model.n_components, 1);
    }

    #[test]
    fn grid_is_filtered_by_sample_size() {
        assert_eq!(filter_component_grid(&DEFAULT_COMPONENT_GRID, 3), vec![1, 2]);
        assert!(select_gmm_bic(&blob(3, &[0.0], 1.0, 0), &[4, 8], 0, EmConfig::default()).is_err());
    }

    #[test]
    fn bic_ties_pick_fewer_components() {
        assert_eq!(argmin_bic(&[5.0, 5.0, 7.0]), Some(0));
        assert_eq!(argmin_bic(&[6.0, 5.0, 5.0]), Some(1));
    }

    #[test]
    fn density_peaks_at_the_mean() {
        let x = blob(100, &[0.0, 0.0], 0.01, 8);
        let model = fit_gmm_em(&x, 1, 0, EmConfig::default()).unwrap();
        let mu = model.means[0].clone();
        let at_mode = model.log_likelihood(&mu).unwrap();
        // −log N(μ; μ, Σ) = ½(F ln 2π + ln|Σ|)
        let comp = Component::new(1.0, &mu, &model.covariances[0]).unwrap();
        assert!((at_mode + 0.5 * comp.log_norm).abs() < 1e-9);
        let far = model.log_likelihood(&[mu[0] + 0.1, mu[1]]).unwrap();
        assert!(far < at_mode);
        assert!(matches!(model.log_likelihood(&[0.0]), Err(Error::Dimension { .. })));
    }
}
