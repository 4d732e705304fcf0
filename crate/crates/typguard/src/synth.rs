//! Seeded synthetic embeddings for tests, benchmarks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embedding::{EmbeddingView, MultiViewDataset};
use crate::error::Result;

/// Generator for stream `stream` of `seed`; streams never overlap, so
/// per-trial generators are independent of scheduling order.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Row-major buffer of `count` standard Gaussian vectors projected onto the
/// unit sphere.
pub fn gaussian_unit_rows<R: Rng + ?Sized>(rng: &mut R, count: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(count * dim);
    for _ in 0..count {
        out.extend(unit(&gaussian_vec(rng, dim)).into_iter().map(|x| x as f32));
    }
    out
}

pub fn gaussian_unit_view<R: Rng + ?Sized>(rng: &mut R, view_id: &str, count: usize, dim: usize) -> EmbeddingView {
    rows_to_unit_view(view_id, dim, gaussian_unit_rows(rng, count, dim))
}

pub(crate) fn rows_to_unit_view(view_id: &str, dim: usize, data: Vec<f32>) -> EmbeddingView {
    EmbeddingView::new(view_id, dim, data, false)
        .and_then(|v| v.normalize_rows())
        .expect("synthetic rows are finite and non-zero")
}

/// Isotropic Gaussian clusters around random unit-norm centres.
#[derive(Debug, Clone)]
pub struct SphereClusters {
    pub centres: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl SphereClusters {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, n_clusters: usize, dim: usize, sigma: f64) -> Self {
        let centres = (0..n_clusters).map(|_| unit(&gaussian_vec(rng, dim))).collect();
        SphereClusters { centres, sigma }
    }

    pub fn dim(&self) -> usize {
        self.centres[0].len()
    }

    /// `count` latent points with uniformly chosen clusters.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                let c = rng.random_range(0..self.centres.len());
                self.sample_around(rng, &self.centres[c])
            })
            .collect()
    }

    /// Points from cluster `cluster` with its centre moved by `shift`.
    pub fn sample_shifted<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        cluster: usize,
        shift: &[f64],
        count: usize,
    ) -> Vec<Vec<f64>> {
        let centre: Vec<f64> = self.centres[cluster].iter().zip(shift).map(|(c, s)| c + s).collect();
        (0..count).map(|_| self.sample_around(rng, &centre)).collect()
    }

    fn sample_around<R: Rng + ?Sized>(&self, rng: &mut R, centre: &[f64]) -> Vec<f64> {
        centre.iter().map(|c| c + self.sigma * rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

/// Fixed random linear maps standing in for different encoders. View 0 is
/// the identity; every view is unit-normalized.
#[derive(Debug, Clone)]
pub struct ViewProjector {
    ids: Vec<String>,
    dim: usize,
    maps: Vec<Option<Vec<f64>>>,
}

impl ViewProjector {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, n_views: usize, dim: usize) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let maps = (0..n_views)
            .map(|v| (v > 0).then(|| (0..dim * dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()))
            .collect();
        ViewProjector { ids: (0..n_views).map(|v| format!("view{v}")).collect(), dim, maps }
    }

    pub fn view_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn project(&self, latent: &[Vec<f64>], ids: Vec<String>) -> Result<MultiViewDataset> {
        let d = self.dim;
        let views = self
            .maps
            .iter()
            .zip(&self.ids)
            .map(|(map, id)| {
                let mut data = Vec::with_capacity(latent.len() * d);
                for x in latent {
                    match map {
                        None => data.extend(x.iter().map(|&v| v as f32)),
                        Some(a) => {
                            for r in 0..d {
                                let row = &a[r * d..(r + 1) * d];
                                data.push(row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() as f32);
                            }
                        }
                    }
                }
                rows_to_unit_view(id, d, data)
            })
            .collect();
        MultiViewDataset::align(views, ids)
    }
}

/// In-distribution reference corpus plus ID and shifted-OOD test sets.
#[derive(Debug, Clone)]
pub struct DetectionScenario {
    pub reference: MultiViewDataset,
    pub id_test: MultiViewDataset,
    pub ood_test: MultiViewDataset,
}

#[derive(Debug, Clone, Copy)]
pub struct ScenarioConfig {
    pub dim: usize,
    pub n_views: usize,
    pub n_clusters: usize,
    /// Per-coordinate standard deviation of each cluster.
    pub sigma: f64,
    /// Length of the OOD cluster's centre displacement, in units of `sigma`.
    pub shift_sigmas: f64,
    pub reference_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            dim: 64,
            n_views: 2,
            n_clusters: 3,
            sigma: 0.05,
            shift_sigmas: 3.0,
            reference_count: 2000,
            test_count: 500,
            seed: 0,
        }
    }
}

/// ID data is a uniform mixture of spherical Gaussian clusters; OOD data is
/// cluster 0 with its centre moved `shift_sigmas · σ` in a random direction.
pub fn detection_scenario(cfg: &ScenarioConfig) -> Result<DetectionScenario> {
    let mut rng = rng_for(cfg.seed, 0);
    let clusters = SphereClusters::new(&mut rng, cfg.n_clusters, cfg.dim, cfg.sigma);
    let projector = ViewProjector::new(&mut rng, cfg.n_views, cfg.dim);
    let shift: Vec<f64> =
        unit(&gaussian_vec(&mut rng, cfg.dim)).into_iter().map(|u| u * cfg.shift_sigmas * cfg.sigma).collect();
    let ids = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();

    let reference = clusters.sample(&mut rng_for(cfg.seed, 1), cfg.reference_count);
    let id_test = clusters.sample(&mut rng_for(cfg.seed, 2), cfg.test_count);
    let ood_test = clusters.sample_shifted(&mut rng_for(cfg.seed, 3), 0, &shift, cfg.test_count);
    Ok(DetectionScenario {
        reference: projector.project(&reference, ids("ref", cfg.reference_count))?,
        id_test: projector.project(&id_test, ids("id", cfg.test_count))?,
        ood_test: projector.project(&ood_test, ids("ood", cfg.test_count))?,
    })
}
