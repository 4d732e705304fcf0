//! Per-point Precision, Recall, Density and Coverage features.
//!
//! For a test point `y` against reference half `X` (size `m`) and test batch
//! `Y`, with `r_k(x_i)` the k-NN radius of `x_i` inside `X` and `ρ_k(y)` the
//! k-NN radius of `y` inside `Y`:
//!
//! | feature   | value                                      |
//! |-----------|--------------------------------------------|
//! | Precision | `1(∃i: d(y, x_i) ≤ r_k(x_i))`              |
//! | Density   | `#{i: d(y, x_i) ≤ r_k(x_i)} / (m k)`       |
//! | Recall    | `#{i: d(x_i, y) ≤ ρ_k(y)} / m`             |
//! | Coverage  | `1(Recall > 0)`                            |
//!
//! Recall and Coverage need the batch itself (at least `k + 1` points), so
//! they are two-sample features; Precision and Density are one-sample.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingView, MultiViewDataset};
use crate::error::{Error, Result};
use crate::neighborhood::{knn_radii, ReferenceIndex};

/// Which PRDC slots a feature vector carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSubset {
    /// Recall, Density, Precision, Coverage.
    Full,
    /// Recall and Coverage (two-sample).
    RC,
    /// Density and Precision (one-sample); usable on any batch size.
    PD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Recall,
    Density,
    Precision,
    Coverage,
}

impl FeatureSubset {
    pub fn features(self) -> &'static [Feature] {
        use Feature::*;
        match self {
            FeatureSubset::Full => &[Recall, Density, Precision, Coverage],
            FeatureSubset::RC => &[Recall, Coverage],
            FeatureSubset::PD => &[Density, Precision],
        }
    }

    /// Values per (view, k) pair.
    pub fn width(self) -> usize {
        self.features().len()
    }

    pub fn needs_test_batch(self) -> bool {
        self != FeatureSubset::PD
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSubset::Full => "Full",
            FeatureSubset::RC => "RC",
            FeatureSubset::PD => "PD",
        }
    }
}

impl fmt::Display for FeatureSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(FeatureSubset::Full),
            "rc" => Ok(FeatureSubset::RC),
            "pd" => Ok(FeatureSubset::PD),
            _ => Err(Error::Parameter(format!("unknown feature subset {s:?} (full|rc|pd)"))),
        }
    }
}

/// Feature vector of one test point, laid out as
/// `(view order) × (ascending k) × subset.features()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrdcVector {
    pub values: Vec<f64>,
    pub m_used: usize,
    pub k_list: Vec<usize>,
    pub subset: FeatureSubset,
}

impl PrdcVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of views folded into this vector.
    pub fn num_views(&self) -> usize {
        self.values.len() / (self.k_list.len() * self.subset.width())
    }

    /// Value of `feature` for view `view` at `k_list[k_pos]`, if the subset
    /// carries it.
    pub fn get(&self, view: usize, k_pos: usize, feature: Feature) -> Option<f64> {
        let slot = self.subset.features().iter().position(|&f| f == feature)?;
        let w = self.subset.width();
        self.values.get((view * self.k_list.len() + k_pos) * w + slot).copied()
    }
}

/// Raw counts behind one (point, k) cell.
#[derive(Debug, Clone, Copy)]
struct Cell {
    ball_hits: usize,
    recall_hits: usize,
}

fn push_cell(values: &mut Vec<f64>, subset: FeatureSubset, cell: Cell, m: usize, k: usize) {
    let m_f = m as f64;
    for feature in subset.features() {
        values.push(match feature {
            Feature::Recall => cell.recall_hits as f64 / m_f,
            Feature::Density => cell.ball_hits as f64 / (m_f * k as f64),
            Feature::Precision => f64::from(u8::from(cell.ball_hits > 0)),
            Feature::Coverage => f64::from(u8::from(cell.recall_hits > 0)),
        });
    }
}

/// PRDC block of a single view: one vector per test point.
pub fn compute_view_block(
    index: &ReferenceIndex,
    test: &EmbeddingView,
    subset: FeatureSubset,
) -> Result<Vec<PrdcVector>> {
    test.require_normalized()?;
    if test.dim() != index.dim() {
        return Err(Error::Dimension { expected: index.dim(), actual: test.dim() });
    }
    let n = test.count();
    if n == 0 {
        return Ok(Vec::new());
    }
    let k_list = index.k_list();
    let nk = k_list.len();
    let test_radii = if subset.needs_test_batch() {
        let required = k_list[nk - 1] + 1;
        if n < required {
            return Err(Error::BatchTooSmall { required, actual: n });
        }
        Some(knn_radii(test, k_list))
    } else {
        None
    };
    let m = index.len();

    Ok((0..n)
        .into_par_iter()
        .map(|j| {
            let dists = index.distances_to(test.row(j));
            let mut values = Vec::with_capacity(nk * subset.width());
            for (k_pos, &k) in k_list.iter().enumerate() {
                let ball_hits = index.ball_count(&dists, k_pos);
                let recall_hits = match &test_radii {
                    Some(rho) => {
                        let rho = rho[j * nk + k_pos];
                        dists.iter().filter(|&&d| d <= rho).count()
                    }
                    None => 0,
                };
                push_cell(&mut values, subset, Cell { ball_hits, recall_hits }, m, k);
            }
            PrdcVector { values, m_used: m, k_list: k_list.to_vec(), subset }
        })
        .collect())
}

/// Features for every test point across all views, concatenated in view order.
pub fn compute_prdc_batch(
    indices: &[ReferenceIndex],
    test: &MultiViewDataset,
    subset: FeatureSubset,
) -> Result<Vec<PrdcVector>> {
    if indices.len() != test.num_views() {
        return Err(Error::Alignment(format!(
            "{} reference indices for {} test views",
            indices.len(),
            test.num_views()
        )));
    }
    for (idx, view) in indices.iter().zip(test.views()) {
        if idx.view_id() != view.view_id() {
            return Err(Error::Alignment(format!(
                "reference view {:?} paired with test view {:?}",
                idx.view_id(),
                view.view_id()
            )));
        }
        if idx.k_list() != indices[0].k_list() {
            return Err(Error::Alignment("reference indices disagree on k_list".into()));
        }
    }
    let blocks = indices
        .iter()
        .zip(test.views())
        .map(|(idx, view)| compute_view_block(idx, view, subset))
        .collect::<Result<Vec<_>>>()?;
    (0..test.len())
        .map(|j| {
            let per_view: Vec<PrdcVector> = blocks.iter().map(|b| b[j].clone()).collect();
            assemble_features(&per_view)
        })
        .collect()
}

/// Concatenates per-view blocks of one test point.
pub fn assemble_features(per_view: &[PrdcVector]) -> Result<PrdcVector> {
    let first = per_view.first().ok_or_else(|| Error::Alignment("no per-view PRDC blocks to assemble".into()))?;
    for b in per_view {
        if b.k_list != first.k_list || b.subset != first.subset || b.m_used != first.m_used {
            return Err(Error::Alignment(format!(
                "inconsistent PRDC blocks: k_list {:?}/{:?}, subset {}/{}, m {}/{}",
                first.k_list, b.k_list, first.subset, b.subset, first.m_used, b.m_used
            )));
        }
        if b.values.len() != first.k_list.len() * first.subset.width() {
            return Err(Error::Alignment("PRDC block has the wrong number of values".into()));
        }
    }
    Ok(PrdcVector {
        values: per_view.iter().flat_map(|b| b.values.iter().copied()).collect(),
        m_used: first.m_used,
        k_list: first.k_list.clone(),
        subset: first.subset,
    })
}

/// Drops the slots not in `subset` from a `Full` vector.
pub fn restrict(full: &PrdcVector, subset: FeatureSubset) -> Result<PrdcVector> {
    if full.subset == subset {
        return Ok(full.clone());
    }
    if full.subset != FeatureSubset::Full {
        return Err(Error::Parameter(format!("cannot derive {subset} from {}", full.subset)));
    }
    let all = FeatureSubset::Full.features();
    let keep: Vec<usize> = subset.features().iter().map(|f| all.iter().position(|g| g == f).unwrap()).collect();
    let values = full.values.chunks_exact(all.len()).flat_map(|cell| keep.iter().map(move |&s| cell[s])).collect();
    Ok(PrdcVector { values, m_used: full.m_used, k_list: full.k_list.clone(), subset })
}

#[derive(Serialize)]
struct DumpLine<'a> {
    id: &'a str,
    subset: FeatureSubset,
    k_list: &'a [usize],
    values: &'a [f64],
}

/// Writes the JSON-lines feature dump.
pub fn write_feature_dump<W: Write>(mut out: W, ids: &[String], vectors: &[PrdcVector]) -> Result<()> {
    if ids.len() != vectors.len() {
        return Err(Error::Alignment(format!("{} ids for {} feature vectors", ids.len(), vectors.len())));
    }
    for (id, v) in ids.iter().zip(vectors) {
        serde_json::to_writer(&mut out, &DumpLine { id, subset: v.subset, k_list: &v.k_list, values: &v.values })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Direct pooled evaluation of the PRDC definitions, for testing.
pub mod oracle {
    use super::*;

    /// Largest reference or test set the oracle accepts.
    pub const MAX_ORACLE_POINTS: usize = 1000;

    fn dist(a: &[f32], b: &[f32]) -> f32 {
        let mut acc = 0.0f64;
        for i in 0..a.len() {
            let d = a[i] as f64 - b[i] as f64;
            acc += d * d;
        }
        acc.sqrt() as f32
    }

    fn kth_smallest(mut v: Vec<f32>, k: usize) -> f32 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[k - 1]
    }

    /// Full-subset PRDC at a single `k` by exhaustive pairwise distances over
    /// the pooled set. `O((m + n)² d)`.
    pub fn brute_force_prdc(reference: &EmbeddingView, test: &EmbeddingView, k: usize) -> Result<Vec<PrdcVector>> {
        let (m, n) = (reference.count(), test.count());
        if m > MAX_ORACLE_POINTS || n > MAX_ORACLE_POINTS {
            return Err(Error::Parameter(format!(
                "oracle is limited to {MAX_ORACLE_POINTS} points per set (m = {m}, n = {n})"
            )));
        }
        if k == 0 || k + 1 > m {
            return Err(Error::Parameter(format!("k = {k} must satisfy 1 ≤ k ≤ m − 1 (m = {m})")));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        if k + 1 > n {
            return Err(Error::BatchTooSmall { required: k + 1, actual: n });
        }

        let pooled: Vec<&[f32]> = reference.rows().chain(test.rows()).collect();
        let total = m + n;
        let mut d = vec![0f32; total * total];
        for a in 0..total {
            for b in 0..total {
                d[a * total + b] = dist(pooled[a], pooled[b]);
            }
        }
        let within = |a: usize, range: std::ops::Range<usize>| -> f32 {
            let v = range.filter(|&b| b != a).map(|b| d[a * total + b]).collect();
            kth_smallest(v, k)
        };
        let r: Vec<f32> = (0..m).map(|i| within(i, 0..m)).collect();
        let rho: Vec<f32> = (m..total).map(|j| within(j, m..total)).collect();

        Ok((0..n)
            .map(|j| {
                let row = &d[(m + j) * total..(m + j) * total + m];
                let mut in_ref_balls = 0usize;
                let mut refs_in_ball = 0usize;
                for i in 0..m {
                    if row[i] <= r[i] {
                        in_ref_balls += 1;
                    }
                    if row[i] <= rho[j] {
                        refs_in_ball += 1;
                    }
                }
                let recall = refs_in_ball as f64 / m as f64;
                let density = in_ref_balls as f64 / (m as f64 * k as f64);
                let precision = if in_ref_balls > 0 { 1.0 } else { 0.0 };
                let coverage = if refs_in_ball > 0 { 1.0 } else { 0.0 };
                PrdcVector {
                    values: vec![recall, density, precision, coverage],
                    m_used: m,
                    k_list: vec![k],
                    subset: FeatureSubset::Full,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f32::consts::FRAC_1_SQRT_2;

    fn circle() -> EmbeddingView {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
        EmbeddingView::from_rows("v", &rows, true).unwrap()
    }

    fn diagonal_pair() -> EmbeddingView {
        let rows = vec![vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2], vec![-FRAC_1_SQRT_2, -FRAC_1_SQRT_2]];
        EmbeddingView::from_rows("v", &rows, true).unwrap()
    }

    #[test]
    fn diagonal_pair_against_circle() {
        let idx = ReferenceIndex::build(circle(), &[1], 0, 0).unwrap();
        let out = compute_view_block(&idx, &diagonal_pair(), FeatureSubset::Full).unwrap();
        // Two anchors within √2 of the diagonal; test radius is 2, which covers all four.
        assert_eq!(out[0].values, vec![1.0, 0.5, 1.0, 1.0]);
        let oracle = oracle::brute_force_prdc(&circle(), &diagonal_pair(), 1).unwrap();
        assert_eq!(out, oracle);
    }

    #[test]
    fn duplicate_of_reference_point_is_dense() {
        let idx = ReferenceIndex::build(circle(), &[1], 0, 0).unwrap();
        let test = EmbeddingView::from_rows("v", &[vec![0.0, 1.0]], true).unwrap();
        let out = compute_view_block(&idx, &test, FeatureSubset::PD).unwrap();
        assert_eq!(out[0].get(0, 0, Feature::Precision), Some(1.0));
        assert!(out[0].get(0, 0, Feature::Density).unwrap() >= 1.0 / 4.0);
        assert_eq!(out[0].get(0, 0, Feature::Recall), None);
    }

    #[test]
    fn far_tight_batch_scores_zero_everywhere() {
        let a = 0.01f32;
        let rows = vec![vec![1.0, 0.0], vec![a.cos(), a.sin()], vec![a.cos(), -a.sin()]];
        let tight = EmbeddingView::from_rows("v", &rows, true).unwrap();
        let idx = ReferenceIndex::build(tight.clone(), &[1], 0, 0).unwrap();
        let far_rows: Vec<Vec<f32>> = tight.rows().map(|r| vec![-r[0], -r[1]]).collect();
        let far = EmbeddingView::from_rows("v", &far_rows, true).unwrap();
        for v in compute_view_block(&idx, &far, FeatureSubset::Full).unwrap() {
            assert_eq!(v.values, vec![0.0; 4]);
        }
    }

    #[test]
    fn small_batch_requires_pd() {
        let idx = ReferenceIndex::build(circle(), &[2], 0, 0).unwrap();
        let one = EmbeddingView::from_rows("v", &[vec![1.0, 0.0], vec![0.0, 1.0]], true).unwrap();
        let err = compute_view_block(&idx, &one, FeatureSubset::RC).unwrap_err();
        assert!(matches!(err, Error::BatchTooSmall { required: 3, actual: 2 }));
        assert!(err.to_string().contains("PD"));
        assert_eq!(compute_view_block(&idx, &one, FeatureSubset::PD).unwrap().len(), 2);
    }

    #[test]
    fn unnormalized_test_rows_are_rejected() {
        let idx = ReferenceIndex::build(circle(), &[1], 0, 0).unwrap();
        let raw = EmbeddingView::from_rows("v", &[vec![3.0, 4.0], vec![1.0, 0.0]], false).unwrap();
        assert!(matches!(compute_view_block(&idx, &raw, FeatureSubset::PD), Err(Error::Contract(_))));
    }

    #[test]
    fn assembly_lengths_and_checks() {
        let block =
            PrdcVector { values: vec![0.1, 0.2, 1.0, 1.0], m_used: 4, k_list: vec![5], subset: FeatureSubset::Full };
        let three = assemble_features(&[block.clone(), block.clone(), block.clone()]).unwrap();
        assert_eq!(three.len(), 12);
        assert_eq!(three.num_views(), 3);
        assert_eq!(assemble_features(std::slice::from_ref(&block)).unwrap(), block);

        let other_k = PrdcVector { k_list: vec![3], ..block.clone() };
        assert!(matches!(assemble_features(&[block, other_k]), Err(Error::Alignment(_))));
    }

    #[test]
    fn restrict_picks_named_slots() {
        let full =
            PrdcVector { values: vec![0.1, 0.2, 1.0, 0.0], m_used: 4, k_list: vec![5], subset: FeatureSubset::Full };
        assert_eq!(restrict(&full, FeatureSubset::PD).unwrap().values, vec![0.2, 1.0]);
        assert_eq!(restrict(&full, FeatureSubset::RC).unwrap().values, vec![0.1, 0.0]);
    }

    #[test]
    fn oracle_guards() {
        let empty = EmbeddingView::new("v", 2, vec![], true).unwrap();
        assert!(oracle::brute_force_prdc(&circle(), &empty, 1).unwrap().is_empty());
        assert!(matches!(oracle::brute_force_prdc(&circle(), &diagonal_pair(), 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn subset_parses_case_insensitively() {
        assert_eq!("pd".parse::<FeatureSubset>().unwrap(), FeatureSubset::PD);
        assert_eq!("Full".parse::<FeatureSubset>().unwrap(), FeatureSubset::Full);
        assert!("xyz".parse::<FeatureSubset>().is_err());
    }

    #[test]
    fn dump_format() {
        let v = PrdcVector { values: vec![0.5, 1.0], m_used: 2, k_list: vec![5], subset: FeatureSubset::PD };
        let mut buf = Vec::new();
        write_feature_dump(&mut buf, &["a".into()], &[v]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"id\":\"a\",\"subset\":\"PD\",\"k_list\":[5],\"values\":[0.5,1.0]}\n"
        );
    }
}
