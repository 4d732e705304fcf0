//! Typicality-based out-of-distribution detection.
//!
//! A "safe" reference corpus, given as precomputed embeddings from one or
//! more encoders, defines the typical set. Each test input is described by
//! per-point Precision/Recall/Density/Coverage features measured against k-NN
//! balls of the reference, and a density model fitted on in-distribution
//! features turns that description into an anomaly score.
//!
//! The crate is organised bottom-up:
//!
//! - [`embedding`]: views, normalization, the `TGE1` vector file format.
//! - [`neighborhood`]: reference split, k-NN radii, ball containment, `TGI1` index files.
//! - [`prdc`]: the per-point feature vectors and a brute-force oracle.
//! - [`detectors`]: GMM (EM + BIC) and one-class SVM detectors, sigmoid calibration, model bundles.
//! - [`evalkit`]: AUROC, FPR@95TPR, AUPRC, max F1.
//! - [`theory`]: Monte Carlo checks of the null expectations and two-sample statistics.
//! - [`stream`]: a simulator for in-generation guardrail scheduling.
//! - [`pipeline`]: fit / score orchestration shared by the CLI.
//! - [`synth`]: seeded synthetic embedding generators.

pub mod detectors;
pub mod embedding;
pub mod error;
pub mod evalkit;
pub mod neighborhood;
pub mod pipeline;
pub mod prdc;
pub mod stream;
pub mod synth;
pub mod theory;

pub use embedding::{EmbeddingView, MultiViewDataset};
pub use error::{Error, Result};
pub use neighborhood::{ReferenceIndex, ReferenceSplit};
pub use prdc::{FeatureSubset, PrdcVector};
