//! Fit and score orchestration: reference split, PRDC features, detector
//! selection, calibration and the persisted model bundle.
//!
//! Two-sample features (Recall, Coverage) depend on the test batch, so the
//! training features of reference half B and every scored test set are cut
//! into near-equal chunks of about `batch_size` points. Chunks smaller than
//! `max(k) + 1` are scored with the PD detector instead.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detectors::{
    gmm::DEFAULT_COMPONENT_GRID, ocsvm::DEFAULT_NU_GRID, predict_label, scale_gamma, select_gmm_bic, select_ocsvm_nu,
    Detector, DetectorKind, EmConfig, ScoreCalibration, SmoConfig, DEFAULT_THRESHOLD,
};
use crate::embedding::{ids_path_for, load_embedding_file, load_ids, MultiViewDataset};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalReport, LabeledScores};
use crate::neighborhood::{normalize_k_list, split_reference, ReferenceIndex};
use crate::prdc::{compute_prdc_batch, restrict, FeatureSubset, PrdcVector};
use crate::stream::SimulationConfig;
use crate::synth::rng_for;
use crate::theory::TheoryConfig;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Which detector families to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorChoice {
    Gmm,
    Ocsvm,
    Both,
}

impl DetectorChoice {
    pub fn kinds(self) -> &'static [DetectorKind] {
        match self {
            DetectorChoice::Gmm => &[DetectorKind::Gmm],
            DetectorChoice::Ocsvm => &[DetectorKind::Ocsvm],
            DetectorChoice::Both => &[DetectorKind::Gmm, DetectorKind::Ocsvm],
        }
    }
}

/// One embedding file. `id` overrides the view id stored in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSource {
    pub path: PathBuf,
    #[serde(default)]
    pub id: Option<String>,
}

/// Everything a run needs, loaded from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub reference_views: Vec<ViewSource>,
    pub test_views: Vec<ViewSource>,
    pub k_list: Vec<usize>,
    pub feature_subset: FeatureSubset,
    pub detector: DetectorChoice,
    /// Detector used for scoring when both are fitted. Defaults to OCSVM.
    pub scoring_detector: Option<DetectorKind>,
    pub component_grid: Vec<usize>,
    pub nu_grid: Vec<f64>,
    /// RBF gamma; `None` picks `1 / (F · var)` on the training features.
    pub gamma: Option<f64>,
    pub seed: u64,
    pub batch_size: usize,
    /// Share of half-B features held out for ν selection.
    pub validation_fraction: f64,
    pub threshold: f64,
    pub em: EmConfig,
    pub smo: SmoConfig,
    pub simulation: SimulationConfig,
    pub theory: TheoryConfig,
    pub bundle_path: Option<PathBuf>,
    pub scores_path: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            reference_views: Vec::new(),
            test_views: Vec::new(),
            k_list: vec![5],
            feature_subset: FeatureSubset::Full,
            detector: DetectorChoice::Both,
            scoring_detector: None,
            component_grid: DEFAULT_COMPONENT_GRID.to_vec(),
            nu_grid: DEFAULT_NU_GRID.to_vec(),
            gamma: None,
            seed: 0,
            batch_size: 256,
            validation_fraction: 0.2,
            threshold: DEFAULT_THRESHOLD,
            em: EmConfig::default(),
            smo: SmoConfig::default(),
            simulation: SimulationConfig::default(),
            theory: TheoryConfig::default(),
            bundle_path: None,
            scores_path: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: PipelineConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        normalize_k_list(&self.k_list)?;
        if self.component_grid.is_empty() {
            return Err(Error::Parameter("component_grid must not be empty".into()));
        }
        if self.nu_grid.is_empty() {
            return Err(Error::Parameter("nu_grid must not be empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Parameter("validation_fraction must lie in (0, 1)".into()));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Parameter(format!("gamma = {g} must be positive")));
            }
        }
        Ok(())
    }

    fn scoring_kind(&self) -> DetectorKind {
        self.scoring_detector.unwrap_or(match self.detector {
            DetectorChoice::Gmm => DetectorKind::Gmm,
            _ => DetectorKind::Ocsvm,
        })
    }
}

/// Loads and aligns a set of embedding files. Sample ids come from each
/// file's sibling `.ids.jsonl` when present (all present files must agree),
/// otherwise from row indices.
pub fn load_views(sources: &[ViewSource]) -> Result<MultiViewDataset> {
    if sources.is_empty() {
        return Err(Error::Parameter("at least one view file is required".into()));
    }
    let mut views = Vec::with_capacity(sources.len());
    let mut ids: Option<Vec<String>> = None;
    for src in sources {
        let mut view = load_embedding_file(&src.path)?;
        if let Some(id) = &src.id {
            let (dim, normalized) = (view.dim(), view.is_normalized());
            view = crate::embedding::EmbeddingView::new(id.clone(), dim, view.into_data(), normalized)?;
        }
        let ids_path = ids_path_for(&src.path);
        if ids_path.exists() {
            let these = load_ids(&ids_path)?;
            match &ids {
                Some(prev) if *prev != these => {
                    return Err(Error::Alignment(format!(
                        "{} lists different sample ids than the first view",
                        ids_path.display()
                    )))
                }
                _ => ids = Some(these),
            }
        }
        views.push(view);
    }
    match ids {
        Some(ids) => MultiViewDataset::align(views, ids),
        None => MultiViewDataset::with_index_ids(views),
    }
}

/// `round(n / batch_size)` (at least one) contiguous ranges whose lengths
/// differ by at most one.
pub fn chunk_ranges(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let chunks = ((n as f64 / batch_size.max(1) as f64).round() as usize).clamp(1, n);
    let (base, extra) = (n / chunks, n % chunks);
    let mut start = 0;
    (0..chunks)
        .map(|c| {
            let len = base + usize::from(c < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn full_features_chunked(
    indices: &[ReferenceIndex],
    data: &MultiViewDataset,
    batch_size: usize,
) -> Result<Vec<PrdcVector>> {
    let mut out = Vec::with_capacity(data.len());
    for r in chunk_ranges(data.len(), batch_size) {
        let chunk = data.select(&r.collect::<Vec<_>>());
        out.extend(compute_prdc_batch(indices, &chunk, FeatureSubset::Full)?);
    }
    Ok(out)
}

/// Criterion values of every grid candidate: `(n_components, BIC)` for a
/// GMM, `(ν, validation accept rate)` for an OCSVM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedDetector {
    pub subset: FeatureSubset,
    pub detector: Detector,
    pub calibration: ScoreCalibration,
    pub candidates: Vec<(f64, f64)>,
}

impl FittedDetector {
    pub fn kind(&self) -> DetectorKind {
        self.detector.kind()
    }

    /// `(raw, normalized)` per feature vector.
    pub fn score(&self, features: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
        Ok(self.detector.raw_scores(features)?.into_iter().map(|r| (r, self.calibration.normalize(r))).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleView {
    pub view_id: String,
    pub dim: usize,
    /// Index file name, relative to the bundle's directory.
    pub index_file: String,
}

/// Everything needed to score new inputs. Serialized as one JSON document;
/// each view's reference index lives next to it as a `TGI1` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub views: Vec<BundleView>,
    pub k_list: Vec<usize>,
    pub split_seed: u64,
    /// Size of reference half A (indexed).
    pub reference_count: usize,
    /// Size of reference half B (feature source).
    pub counterpart_count: usize,
    pub batch_size: usize,
    pub threshold: f64,
    pub primary_subset: FeatureSubset,
    pub scoring_detector: DetectorKind,
    pub detectors: Vec<FittedDetector>,
    #[serde(skip)]
    indices: Vec<ReferenceIndex>,
}

/// Options that may override the bundle's defaults at scoring time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScoreOptions {
    pub subset: Option<FeatureSubset>,
    pub detector: Option<DetectorKind>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub raw: f64,
    pub normalized: f64,
    pub label: u8,
    pub subset: FeatureSubset,
}

/// Fits the full pipeline on a reference corpus.
pub fn fit_bundle(reference: &MultiViewDataset, cfg: &PipelineConfig) -> Result<ModelBundle> {
    cfg.validate()?;
    let k_list = normalize_k_list(&cfg.k_list)?;
    for v in reference.views() {
        v.require_normalized()?;
    }
    let split = split_reference(reference.len(), cfg.seed)?;
    log::info!("split {} reference points into {} + {}", reference.len(), split.half_a.len(), split.half_b.len());
    let half_a = reference.select(&split.half_a);
    let half_b = reference.select(&split.half_b);
    let indices = half_a
        .views()
        .iter()
        .map(|v| ReferenceIndex::build(v.clone(), &k_list, cfg.seed, half_b.len()))
        .collect::<Result<Vec<_>>>()?;

    let full = full_features_chunked(&indices, &half_b, cfg.batch_size)?;
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut rng_for(cfg.seed, 1));
    let n_val = ((full.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, full.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut subsets = vec![cfg.feature_subset];
    if cfg.feature_subset != FeatureSubset::PD {
        subsets.push(FeatureSubset::PD);
    }
    let mut detectors = Vec::new();
    for &subset in &subsets {
        let feats = full.iter().map(|v| restrict(v, subset).map(|r| r.values)).collect::<Result<Vec<_>>>()?;
        let train: Vec<Vec<f64>> = train_idx.iter().map(|&i| feats[i].clone()).collect();
        let val: Vec<Vec<f64>> = val_idx.iter().map(|&i| feats[i].clone()).collect();
        for &kind in cfg.detector.kinds() {
            let (detector, candidates) = match kind {
                DetectorKind::Gmm => {
                    let sel = select_gmm_bic(&train, &cfg.component_grid, cfg.seed, cfg.em)?;
                    let cands = sel.candidates.iter().map(|&(c, b)| (c as f64, b)).collect();
                    (Detector::Gmm(sel.model), cands)
                }
                DetectorKind::Ocsvm => {
                    let gamma = cfg.gamma.unwrap_or_else(|| scale_gamma(&train));
                    let sel = select_ocsvm_nu(&train, &val, &cfg.nu_grid, gamma, cfg.smo)?;
                    (Detector::Ocsvm(sel.model), sel.candidates)
                }
            };
            let calibration = ScoreCalibration::fit(&detector.raw_scores(&train)?)?;
            log::info!("fitted {kind} on {subset}: calibration {calibration:?}");
            detectors.push(FittedDetector { subset, detector, calibration, candidates });
        }
    }

    Ok(ModelBundle {
        format_version: BUNDLE_FORMAT_VERSION,
        views: indices
            .iter()
            .map(|i| BundleView { view_id: i.view_id().to_owned(), dim: i.dim(), index_file: String::new() })
            .collect(),
        k_list,
        split_seed: cfg.seed,
        reference_count: split.half_a.len(),
        counterpart_count: split.half_b.len(),
        batch_size: cfg.batch_size,
        threshold: cfg.threshold,
        primary_subset: cfg.feature_subset,
        scoring_detector: cfg.scoring_kind(),
        detectors,
        indices,
    })
}

impl ModelBundle {
    pub fn indices(&self) -> &[ReferenceIndex] {
        &self.indices
    }

    pub fn max_k(&self) -> usize {
        *self.k_list.last().expect("k_list is non-empty")
    }

    pub fn detector(&self, subset: FeatureSubset, kind: DetectorKind) -> Result<&FittedDetector> {
        self.detectors
            .iter()
            .find(|d| d.subset == subset && d.kind() == kind)
            .ok_or_else(|| Error::Parameter(format!("bundle has no {kind} detector for subset {subset}")))
    }

    /// Writes `path` and one `<stem>.<view_id>.tgi` index per view beside it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new(""));
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("bundle");
        let mut doc = self.clone();
        for (view, index) in doc.views.iter_mut().zip(&self.indices) {
            let safe: String = view
                .view_id
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            view.index_file = format!("{stem}.{safe}.tgi");
            index.save(dir.join(&view.index_file))?;
        }
        fs::write(path, serde_json::to_vec_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bundle: ModelBundle = serde_json::from_slice(&fs::read(path)?)?;
        if bundle.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported bundle version {}", bundle.format_version)));
        }
        let dir = path.parent().unwrap_or(Path::new(""));
        bundle.indices = bundle
            .views
            .iter()
            .map(|v| ReferenceIndex::load(dir.join(&v.index_file), &v.view_id, bundle.counterpart_count))
            .collect::<Result<Vec<_>>>()?;
        for (v, idx) in bundle.views.iter().zip(&bundle.indices) {
            if idx.dim() != v.dim || idx.k_list() != bundle.k_list.as_slice() {
                return Err(Error::Format(format!("index file {} does not match the bundle", v.index_file)));
            }
        }
        Ok(bundle)
    }

    fn check_views(&self, test: &MultiViewDataset) -> Result<()> {
        if test.num_views() != self.views.len() {
            return Err(Error::Alignment(format!(
                "bundle expects {} views, test set has {}",
                self.views.len(),
                test.num_views()
            )));
        }
        for (bv, tv) in self.views.iter().zip(test.views()) {
            if bv.view_id != tv.view_id() {
                return Err(Error::Alignment(format!("expected view {:?}, found {:?}", bv.view_id, tv.view_id())));
            }
            if bv.dim != tv.dim() {
                return Err(Error::Dimension { expected: bv.dim, actual: tv.dim() });
            }
        }
        Ok(())
    }

    /// Feature vectors for `test` and the subset each one ended up using.
    /// Two-sample subsets are computed per chunk; chunks below `max(k) + 1`
    /// points drop to PD.
    pub fn features(&self, test: &MultiViewDataset, subset: FeatureSubset) -> Result<Vec<PrdcVector>> {
        self.check_views(test)?;
        if !subset.needs_test_batch() {
            return compute_prdc_batch(&self.indices, test, subset);
        }
        let mut out = Vec::with_capacity(test.len());
        for r in chunk_ranges(test.len(), self.batch_size) {
            let chunk = test.select(&r.collect::<Vec<_>>());
            match compute_prdc_batch(&self.indices, &chunk, FeatureSubset::Full) {
                Ok(full) => {
                    for v in &full {
                        out.push(restrict(v, subset)?);
                    }
                }
                Err(Error::BatchTooSmall { required, actual }) => {
                    log::info!("chunk of {actual} < {required} points: scoring with PD");
                    out.extend(compute_prdc_batch(&self.indices, &chunk, FeatureSubset::PD)?);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    pub fn score(&self, test: &MultiViewDataset, opts: ScoreOptions) -> Result<Vec<ScoreRecord>> {
        let subset = opts.subset.unwrap_or(self.primary_subset);
        let kind = opts.detector.unwrap_or(self.scoring_detector);
        let threshold = opts.threshold.unwrap_or(self.threshold);
        // Fail before computing features if the requested model is missing.
        self.detector(subset, kind)?;
        let feats = self.features(test, subset)?;
        let mut out = Vec::with_capacity(feats.len());
        for s in [subset, FeatureSubset::PD] {
            let rows: Vec<usize> = (0..feats.len()).filter(|&j| feats[j].subset == s).collect();
            if rows.is_empty() {
                continue;
            }
            let det = self.detector(s, kind)?;
            let x: Vec<Vec<f64>> = rows.iter().map(|&j| feats[j].values.clone()).collect();
            for (&j, (raw, normalized)) in rows.iter().zip(det.score(&x)?) {
                out.push((
                    j,
                    ScoreRecord {
                        id: test.sample_ids()[j].clone(),
                        raw,
                        normalized,
                        label: predict_label(normalized, threshold),
                        subset: s,
                    },
                ));
            }
            if s == FeatureSubset::PD {
                break;
            }
        }
        out.sort_by_key(|(j, _)| *j);
        Ok(out.into_iter().map(|(_, r)| r).collect())
    }
}

/// Which score column the metrics use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreField {
    Raw,
    Normalized,
}

/// Metrics with OOD as positive. Raw scores from different subsets are not
/// on a common scale, so mixing them is refused.
pub fn evaluate_records(id: &[ScoreRecord], ood: &[ScoreRecord], field: ScoreField) -> Result<EvalReport> {
    if field == ScoreField::Raw {
        if let Some(first) = id.iter().chain(ood).next() {
            if id.iter().chain(ood).any(|r| r.subset != first.subset) {
                return Err(Error::Metric("raw scores from different feature subsets are not comparable".into()));
            }
        }
    }
    let pick = |r: &ScoreRecord| match field {
        ScoreField::Raw => r.raw,
        ScoreField::Normalized => r.normalized,
    };
    evaluate(&LabeledScores::new(id.iter().map(pick).collect(), ood.iter().map(pick).collect())?)
}

/// Writes score records as JSON lines.
pub fn write_score_records<W: std::io::Write>(mut out: W, records: &[ScoreRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// One line of a score file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEntry {
    pub value: f64,
    /// Present when the line is a score record.
    pub subset: Option<FeatureSubset>,
}

/// Reads a score file: JSON lines holding either score records or bare numbers.
pub fn read_score_entries(path: impl AsRef<Path>, field: ScoreField) -> Result<Vec<ScoreEntry>> {
    let text = fs::read_to_string(path)?;
    let key = match field {
        ScoreField::Raw => "raw",
        ScoreField::Normalized => "normalized",
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let entry = match &value {
            serde_json::Value::Number(n) => n.as_f64().map(|value| ScoreEntry { value, subset: None }),
            serde_json::Value::Object(o) => {
                let subset = match o.get("subset") {
                    Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| parse_err(e.to_string()))?),
                    None => None,
                };
                o.get(key).and_then(|v| v.as_f64()).map(|value| ScoreEntry { value, subset })
            }
            _ => None,
        }
        .ok_or_else(|| parse_err(format!("expected a number or an object with {key:?}")))?;
        out.push(entry);
    }
    Ok(out)
}

pub fn read_scores(path: impl AsRef<Path>, field: ScoreField) -> Result<Vec<f64>> {
    Ok(read_score_entries(path, field)?.into_iter().map(|e| e.value).collect())
}

/// Metrics over two score files, OOD positive. Raw scores tagged with
/// different subsets are refused, as in [`evaluate_records`].
pub fn evaluate_score_files(id: impl AsRef<Path>, ood: impl AsRef<Path>, field: ScoreField) -> Result<EvalReport> {
    let id = read_score_entries(id, field)?;
    let ood = read_score_entries(ood, field)?;
    if field == ScoreField::Raw {
        let mut tags = id.iter().chain(&ood).filter_map(|e| e.subset);
        if let Some(first) = tags.next() {
            if tags.any(|s| s != first) {
                return Err(Error::Metric("raw scores from different feature subsets are not comparable".into()));
            }
        }
    }
    let values = |v: &[ScoreEntry]| v.iter().map(|e| e.value).collect();
    evaluate(&LabeledScores::new(values(&id), values(&ood))?)
}
