//! Reference split, exact k-NN ball radii, and ball-containment queries.
//!
//! A ball around reference point `x_i` has radius `r_k(x_i)`, the distance to
//! its k-th nearest neighbor inside the reference half (self excluded).
//! Membership is closed: a query exactly on the boundary is inside.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedding::{distance, ByteReader, EmbeddingView};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"TGI1";
pub const INDEX_FORMAT_VERSION: u32 = 1;

/// A random two-way partition of a reference corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceSplit {
    pub half_a: Vec<usize>,
    pub half_b: Vec<usize>,
    pub seed: u64,
}

/// Shuffles `0..count` with a seeded generator and cuts it in two.
/// When `count` is odd, `half_a` gets the extra point.
pub fn split_reference(count: usize, seed: u64) -> Result<ReferenceSplit> {
    if count < 2 {
        return Err(Error::InsufficientData { needed: 2, got: count });
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half_b = order.split_off(count.div_ceil(2));
    Ok(ReferenceSplit { half_a: order, half_b, seed })
}

/// Checks and canonicalises a neighborhood-size list: positive, ascending, unique.
pub fn normalize_k_list(k_list: &[usize]) -> Result<Vec<usize>> {
    if k_list.is_empty() {
        return Err(Error::Parameter("k_list must not be empty".into()));
    }
    if k_list.contains(&0) {
        return Err(Error::Parameter("neighborhood sizes must be positive".into()));
    }
    let mut ks = k_list.to_vec();
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

/// Distances from every row of `rows` to its `k`-th nearest other row, for
/// each `k` in `k_list` (ascending). Output is row-major `count × |k_list|`.
pub(crate) fn knn_radii(rows: &EmbeddingView, k_list: &[usize]) -> Vec<f32> {
    let max_k = *k_list.last().expect("k_list is non-empty");
    let n = rows.count();
    debug_assert!(max_k < n);
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let me = rows.row(i);
            let mut dists: Vec<f32> =
                rows.rows().enumerate().filter(|&(j, _)| j != i).map(|(_, other)| distance(me, other)).collect();
            // Only the max_k smallest matter; the k-th order statistic does
            // not depend on how equal distances are ordered.
            let (head, kth, _) = dists.select_nth_unstable_by(max_k - 1, f32::total_cmp);
            let kth = *kth;
            head.sort_unstable_by(f32::total_cmp);
            let head = head.to_vec();
            k_list.iter().map(move |&k| if k == max_k { kth } else { head[k - 1] }).collect::<Vec<_>>()
        })
        .collect()
}

/// Per-point radii inside a test batch, self excluded.
pub fn test_set_radii(test: &EmbeddingView, k: usize) -> Result<Vec<f32>> {
    test.require_normalized()?;
    if k == 0 {
        return Err(Error::Parameter("k must be positive".into()));
    }
    if test.count() < k + 1 {
        return Err(Error::BatchTooSmall { required: k + 1, actual: test.count() });
    }
    Ok(knn_radii(test, &[k]))
}

/// The reference half of one view, with cached k-NN radii.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceIndex {
    view_id: String,
    k_list: Vec<usize>,
    vectors: EmbeddingView,
    radii: Vec<f32>,
    split_seed: u64,
    counterpart_count: usize,
}

impl ReferenceIndex {
    /// Builds the index with exact pairwise distances: `O(m² d)`.
    ///
    /// `counterpart_count` is the size of the held-out half that is not
    /// indexed (it only travels with the index as metadata).
    pub fn build(half: EmbeddingView, k_list: &[usize], split_seed: u64, counterpart_count: usize) -> Result<Self> {
        half.require_normalized()?;
        let k_list = normalize_k_list(k_list)?;
        let m = half.count();
        let max_k = *k_list.last().unwrap();
        if max_k + 1 > m {
            return Err(Error::Parameter(format!(
                "k = {max_k} needs at least {} reference points, view {:?} has {m}",
                max_k + 1,
                half.view_id()
            )));
        }
        let radii = knn_radii(&half, &k_list);
        Ok(ReferenceIndex {
            view_id: half.view_id().to_owned(),
            k_list,
            vectors: half,
            radii,
            split_seed,
            counterpart_count,
        })
    }

    pub fn view_id(&self) -> &str {
        &self.view_id
    }

    pub fn k_list(&self) -> &[usize] {
        &self.k_list
    }

    pub fn vectors(&self) -> &EmbeddingView {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.count()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.count() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed
    }

    pub fn counterpart_count(&self) -> usize {
        self.counterpart_count
    }

    /// Radius of reference point `i` at `k_list[k_pos]`.
    pub fn radius(&self, i: usize, k_pos: usize) -> f32 {
        self.radii[i * self.k_list.len() + k_pos]
    }

    /// Radii of reference point `i`, one per entry of `k_list`.
    pub fn radii_of(&self, i: usize) -> &[f32] {
        let w = self.k_list.len();
        &self.radii[i * w..(i + 1) * w]
    }

    /// Position of `k` within `k_list`.
    pub fn k_position(&self, k: usize) -> Result<usize> {
        self.k_list
            .binary_search(&k)
            .map_err(|_| Error::Parameter(format!("k = {k} is not in the index k_list {:?}", self.k_list)))
    }

    pub(crate) fn check_query(&self, point: &[f32]) -> Result<()> {
        if point.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), actual: point.len() });
        }
        Ok(())
    }

    /// Distance from `point` to every reference vector: `O(m d)`.
    pub fn distances_to(&self, point: &[f32]) -> Vec<f32> {
        self.vectors.rows().map(|x| distance(point, x)).collect()
    }

    /// Number of reference balls at `k_list[k_pos]` that contain a point with
    /// the given distance profile.
    pub(crate) fn ball_count(&self, dists: &[f32], k_pos: usize) -> usize {
        dists.iter().enumerate().filter(|&(i, &d)| d <= self.radius(i, k_pos)).count()
    }

    /// Whether `point` lies in the union of the k-balls, and in how many.
    pub fn contains(&self, point: &[f32], k: usize) -> Result<(bool, usize)> {
        let k_pos = self.k_position(k)?;
        self.check_query(point)?;
        let count = self.ball_count(&self.distances_to(point), k_pos);
        Ok((count > 0, count))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.encode()?)?;
        Ok(())
    }

    /// Serialises to the `TGI1` layout. The view id and counterpart count are
    /// not part of the binary format; they travel in the model bundle.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let ks = u16::try_from(self.k_list.len()).map_err(|_| Error::Validation("k_list too long".into()))?;
        let mut buf = Vec::with_capacity(32 + (self.vectors.as_slice().len() + self.radii.len()) * 4);
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&ks.to_le_bytes());
        for &k in &self.k_list {
            let k = u32::try_from(k).map_err(|_| Error::Validation("k does not fit in u32".into()))?;
            buf.extend_from_slice(&k.to_le_bytes());
        }
        buf.extend_from_slice(&self.split_seed.to_le_bytes());
        for x in self.vectors.as_slice().iter().chain(&self.radii) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn load(path: impl AsRef<Path>, view_id: &str, counterpart_count: usize) -> Result<Self> {
        Self::decode(&fs::read(path.as_ref())?, view_id, counterpart_count)
    }

    pub fn decode(bytes: &[u8], view_id: &str, counterpart_count: usize) -> Result<Self> {
        let trunc = |_| Error::Format("truncated index header".into());
        let mut r = ByteReader::new(bytes);
        if r.take(4).map_err(trunc)? != INDEX_MAGIC {
            return Err(Error::Format("bad magic, expected \"TGI1\"".into()));
        }
        let version = r.u32().map_err(trunc)?;
        if version != INDEX_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let m = r.u64().map_err(trunc)? as usize;
        let dim = r.u32().map_err(trunc)? as usize;
        let nk = r.u16().map_err(trunc)? as usize;
        let mut k_list = Vec::with_capacity(nk);
        for _ in 0..nk {
            k_list.push(r.u32().map_err(trunc)? as usize);
        }
        let split_seed = r.u64().map_err(trunc)?;
        if normalize_k_list(&k_list)? != k_list {
            return Err(Error::Format("k_list must be ascending and unique".into()));
        }
        let expected = ((m * dim + m * nk) * 4) as u64;
        let actual = r.remaining() as u64;
        if actual != expected {
            return Err(Error::Length { expected, actual });
        }
        let floats: Vec<f32> = r.rest().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let (vecs, radii) = floats.split_at(m * dim);
        let vectors = EmbeddingView::new(view_id, dim, vecs.to_vec(), true)?;
        if radii.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Validation("radii must be finite and non-negative".into()));
        }
        Ok(ReferenceIndex {
            view_id: view_id.to_owned(),
            k_list,
            vectors,
            radii: radii.to_vec(),
            split_seed,
            counterpart_count,
        })
    }
}
