//! Density models over in-distribution PRDC features, and score calibration.
//!
//! Raw anomaly scores are "higher = more anomalous": the negative
//! log-likelihood for a GMM, the negated decision value for a one-class SVM.
//! [`ScoreCalibration`] standardises raw scores on the training features and
//! squashes them through a sigmoid.

pub mod gmm;
pub mod ocsvm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gmm::{fit_gmm_em, select_gmm_bic, EmConfig, GmmModel};
pub use ocsvm::{fit_ocsvm, scale_gamma, select_ocsvm_nu, OcsvmModel, SmoConfig};

/// Label for inputs that look like the reference corpus.
pub const LABEL_SAFE: u8 = 1;
/// Label for flagged inputs.
pub const LABEL_TOXIC: u8 = 0;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Gmm,
    Ocsvm,
}

impl DetectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::Gmm => "gmm",
            DetectorKind::Ocsvm => "ocsvm",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gmm" => Ok(DetectorKind::Gmm),
            "ocsvm" => Ok(DetectorKind::Ocsvm),
            _ => Err(Error::Parameter(format!("unknown detector {s:?} (gmm|ocsvm)"))),
        }
    }
}

/// A fitted density model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum Detector {
    Gmm(GmmModel),
    Ocsvm(OcsvmModel),
}

impl Detector {
    pub fn kind(&self) -> DetectorKind {
        match self {
            Detector::Gmm(_) => DetectorKind::Gmm,
            Detector::Ocsvm(_) => DetectorKind::Ocsvm,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Detector::Gmm(m) => m.dim(),
            Detector::Ocsvm(m) => m.dim(),
        }
    }

    /// Raw anomaly scores for a batch of feature vectors.
    pub fn raw_scores(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        match self {
            Detector::Gmm(m) => {
                let scorer = m.scorer()?;
                features.iter().map(|x| scorer.log_likelihood(x).map(|l| -l)).collect()
            }
            Detector::Ocsvm(m) => features.iter().map(|x| m.decision(x).map(|d| -d)).collect(),
        }
    }

    pub fn anomaly_score(&self, features: &[f64]) -> Result<f64> {
        match self {
            Detector::Gmm(m) => m.log_likelihood(features).map(|l| -l),
            Detector::Ocsvm(m) => m.decision(features).map(|d| -d),
        }
    }
}

/// Standardisation of raw scores measured on in-distribution training features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCalibration {
    pub mean_nll: f64,
    pub std_nll: f64,
}

impl ScoreCalibration {
    pub const STD_FLOOR: f64 = 1e-9;

    /// Mean and population standard deviation of `raw`, std floored at 1e-9.
    pub fn fit(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Parameter("calibration needs at least one score".into()));
        }
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let var = raw.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        Ok(ScoreCalibration { mean_nll: mean, std_nll: var.sqrt().max(Self::STD_FLOOR) })
    }

    /// `1 / (1 + exp(−(raw − mean) / std))`
    pub fn normalize(&self, raw: f64) -> f64 {
        let z = (raw - self.mean_nll) / self.std_nll;
        if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        }
    }
}

/// 1 (safe) below the threshold, 0 (toxic) at or above it.
pub fn predict_label(score: f64, threshold: f64) -> u8 {
    if score < threshold {
        LABEL_SAFE
    } else {
        LABEL_TOXIC
    }
}
