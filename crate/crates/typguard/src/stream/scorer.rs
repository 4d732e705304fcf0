//! Batch scorers for the simulator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Checkpoint;
use crate::embedding::{EmbeddingView, MultiViewDataset};
use crate::error::{Error, Result};
use crate::pipeline::{FittedDetector, ModelBundle, ScoreOptions};
use crate::prdc::FeatureSubset;
use crate::synth::rng_for;

/// A request snapshot handed to the scorer.
#[derive(Debug, Clone, Copy)]
pub struct ScoreItem<'a> {
    pub req_id: &'a str,
    pub text: &'a str,
    pub word_count: usize,
    pub checkpoint: Option<&'a Checkpoint>,
}

/// Normalized anomaly scores in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    pub scores: Vec<f64>,
    /// Feature subset used, for feature-based scorers.
    pub subset: Option<FeatureSubset>,
}

/// Batch in, scores out, order preserved.
pub trait Scorer {
    fn score_batch(&mut self, batch: &[ScoreItem<'_>]) -> Result<BatchScores>;

    /// Ground-truth 1-based word position of the first toxic content, if the
    /// scorer can tell from the text alone.
    fn toxic_onset(&self, _text: &str) -> Option<usize> {
        None
    }
}

fn marker_position(text: &str, marker: &str) -> Option<usize> {
    text.split_whitespace().position(|w| w == marker).map(|p| p + 1)
}

/// Deterministic oracle: score 1 when the text contains `marker` as a word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerScorer {
    pub marker: String,
}

impl MarkerScorer {
    pub fn new(marker: impl Into<String>) -> Self {
        MarkerScorer { marker: marker.into() }
    }
}

impl Scorer for MarkerScorer {
    fn score_batch(&mut self, batch: &[ScoreItem<'_>]) -> Result<BatchScores> {
        let scores =
            batch.iter().map(|it| if marker_position(it.text, &self.marker).is_some() { 1.0 } else { 0.0 }).collect();
        Ok(BatchScores { scores, subset: None })
    }

    fn toxic_onset(&self, text: &str) -> Option<usize> {
        marker_position(text, &self.marker)
    }
}

/// Scores a random ID or OOD feature vector per request, chosen by whether
/// the text contains `marker`, through a fitted detector.
#[derive(Debug, Clone)]
pub struct SyntheticScorer {
    detector: FittedDetector,
    id_pool: Vec<Vec<f64>>,
    ood_pool: Vec<Vec<f64>>,
    marker: String,
    rng: ChaCha8Rng,
}

impl SyntheticScorer {
    pub fn new(
        detector: FittedDetector,
        id_pool: Vec<Vec<f64>>,
        ood_pool: Vec<Vec<f64>>,
        marker: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if id_pool.is_empty() || ood_pool.is_empty() {
            return Err(Error::Parameter("synthetic scorer needs non-empty ID and OOD pools".into()));
        }
        Ok(SyntheticScorer { detector, id_pool, ood_pool, marker: marker.into(), rng: rng_for(seed, 0) })
    }
}

impl Scorer for SyntheticScorer {
    fn score_batch(&mut self, batch: &[ScoreItem<'_>]) -> Result<BatchScores> {
        let feats: Vec<Vec<f64>> = batch
            .iter()
            .map(|it| {
                let pool =
                    if marker_position(it.text, &self.marker).is_some() { &self.ood_pool } else { &self.id_pool };
                pool[self.rng.random_range(0..pool.len())].clone()
            })
            .collect();
        let scores = self.detector.score(&feats)?.into_iter().map(|(_, n)| n).collect();
        Ok(BatchScores { scores, subset: Some(self.detector.subset) })
    }

    fn toxic_onset(&self, text: &str) -> Option<usize> {
        marker_position(text, &self.marker)
    }
}

/// Scores checkpoint embeddings with a fitted bundle. Batches smaller than
/// `max(k) + 1` use the PD detector.
#[derive(Debug, Clone, Copy)]
pub struct PipelineScorer<'a> {
    pub bundle: &'a ModelBundle,
    pub options: ScoreOptions,
}

impl<'a> PipelineScorer<'a> {
    pub fn new(bundle: &'a ModelBundle, options: ScoreOptions) -> Self {
        PipelineScorer { bundle, options }
    }
}

impl Scorer for PipelineScorer<'_> {
    fn score_batch(&mut self, batch: &[ScoreItem<'_>]) -> Result<BatchScores> {
        if batch.is_empty() {
            return Ok(BatchScores { scores: Vec::new(), subset: None });
        }
        let mut views = Vec::with_capacity(self.bundle.views.len());
        for bv in &self.bundle.views {
            let mut data = Vec::with_capacity(batch.len() * bv.dim);
            for it in batch {
                let row = it.checkpoint.and_then(|cp| cp.get(&bv.view_id)).ok_or_else(|| {
                    Error::Protocol(format!("request {:?} has no {:?} checkpoint", it.req_id, bv.view_id))
                })?;
                if row.len() != bv.dim {
                    return Err(Error::Dimension { expected: bv.dim, actual: row.len() });
                }
                data.extend_from_slice(row);
            }
            views.push(EmbeddingView::new(bv.view_id.clone(), bv.dim, data, true)?);
        }
        let ids = batch.iter().map(|it| it.req_id.to_owned()).collect();
        let records = self.bundle.score(&MultiViewDataset::align(views, ids)?, self.options)?;
        Ok(BatchScores {
            subset: records.first().map(|r| r.subset),
            scores: records.into_iter().map(|r| r.normalized).collect(),
        })
    }
}
