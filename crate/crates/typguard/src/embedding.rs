//! Multi-view embedding matrices and the `TGE1` on-disk vector format.
//!
//! Every view is a row-major `count × dim` matrix of `f32`. Norms and
//! distances accumulate in `f64`; distances are rounded back to `f32` once,
//! so that radii persisted to disk compare bit-identically after a reload.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"TGE1";
pub const EMBEDDING_FORMAT_VERSION: u32 = 1;

/// Tolerance on `|‖row‖ − 1|` for rows flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// One encoder's embeddings for an aligned sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingView {
    view_id: String,
    dim: usize,
    count: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingView {
    /// Builds a view from a flat row-major buffer, validating finiteness and,
    /// when `normalized` is set, unit row norms.
    pub fn new(view_id: impl Into<String>, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        let view_id = view_id.into();
        if dim == 0 {
            return Err(Error::Validation(format!("view {view_id:?}: dim must be positive")));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "view {view_id:?}: buffer of {} floats is not a multiple of dim {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "view {view_id:?}: non-finite value at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        let view = EmbeddingView { view_id, dim, count: data.len() / dim, data, normalized };
        if normalized {
            for (i, row) in view.rows().enumerate() {
                let norm = l2_norm(row);
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(Error::Validation(format!(
                        "view {:?}: row {i} flagged normalized but has norm {norm}",
                        view.view_id
                    )));
                }
            }
        }
        Ok(view)
    }

    /// Builds a view from a slice of rows.
    pub fn from_rows(view_id: impl Into<String>, rows: &[Vec<f32>], normalized: bool) -> Result<Self> {
        let view_id = view_id.into();
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() {
            return Err(Error::Validation(format!(
                "view {view_id:?}: cannot infer dim from zero rows; use EmbeddingView::new"
            )));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Validation(format!(
                "view {view_id:?}: row {bad} has length {} but row 0 has {dim}",
                rows[bad].len()
            )));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(view_id, dim, data, normalized)
    }

    pub fn view_id(&self) -> &str {
        &self.view_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    /// Returns a new view containing the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingView {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingView {
            view_id: self.view_id.clone(),
            dim: self.dim,
            count: indices.len(),
            data,
            normalized: self.normalized,
        }
    }

    /// Divides every row by its L2 norm.
    ///
    /// A zero-norm row is an error: dropping it would desynchronise the
    /// sample ids shared by all views.
    pub fn normalize_rows(&self) -> Result<EmbeddingView> {
        let mut data = Vec::with_capacity(self.data.len());
        for (i, row) in self.rows().enumerate() {
            let norm = l2_norm(row);
            if norm == 0.0 {
                return Err(Error::DegenerateVector { row: i });
            }
            data.extend(row.iter().map(|&x| (x as f64 / norm) as f32));
        }
        Ok(EmbeddingView { view_id: self.view_id.clone(), dim: self.dim, count: self.count, data, normalized: true })
    }

    /// Fails with a contract error unless the view is flagged normalized.
    pub fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "view {:?} must be unit-normalized before neighborhood computations",
                self.view_id
            )))
        }
    }
}

pub(crate) fn l2_norm(row: &[f32]) -> f64 {
    row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Euclidean distance, accumulated in `f64` and rounded once to `f32`.
///
/// All neighborhood radii and membership tests go through this function, so a
/// point compared against itself is at distance exactly zero.
#[inline]
pub fn distance(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc.sqrt() as f32
}

/// `‖a − b‖²` for unit vectors.
///
/// On the unit sphere this equals `2(1 − cos(a, b))`; the direct difference
/// form is used because it stays exact for coincident points.
pub fn squared_l2_on_sphere(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension { expected: a.len(), actual: b.len() });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum())
}

/// Cosine similarity with `f64` accumulation.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    dot / (l2_norm(a) * l2_norm(b))
}

/// `K` aligned views over the same ordered sample set.
#[derive(Debug, Clone)]
pub struct MultiViewDataset {
    views: Vec<EmbeddingView>,
    sample_ids: Vec<String>,
}

impl MultiViewDataset {
    /// Aligns views against a shared id list. Views keep the given order.
    pub fn align(views: Vec<EmbeddingView>, ids: Vec<String>) -> Result<Self> {
        let offending: Vec<&str> = views.iter().filter(|v| v.count() != ids.len()).map(|v| v.view_id()).collect();
        if !offending.is_empty() {
            return Err(Error::Alignment(format!("views {offending:?} do not match the {} sample ids", ids.len())));
        }
        for (i, v) in views.iter().enumerate() {
            if views[..i].iter().any(|u| u.view_id() == v.view_id()) {
                return Err(Error::Alignment(format!("duplicate view_id {:?}", v.view_id())));
            }
        }
        Ok(MultiViewDataset { views, sample_ids: ids })
    }

    /// Aligns views with generated ids `"0"`, `"1"`, ...
    pub fn with_index_ids(views: Vec<EmbeddingView>) -> Result<Self> {
        let n = views.first().map(EmbeddingView::count).unwrap_or(0);
        Self::align(views, (0..n).map(|i| i.to_string()).collect())
    }

    pub fn views(&self) -> &[EmbeddingView] {
        &self.views
    }

    pub fn view(&self, i: usize) -> &EmbeddingView {
        &self.views[i]
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn view_ids(&self) -> Vec<String> {
        self.views.iter().map(|v| v.view_id().to_owned()).collect()
    }

    /// Subset of samples, in the given order, across all views.
    pub fn select(&self, indices: &[usize]) -> MultiViewDataset {
        MultiViewDataset {
            views: self.views.iter().map(|v| v.select(indices)).collect(),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
        }
    }

    pub fn normalize_rows(&self) -> Result<MultiViewDataset> {
        Ok(MultiViewDataset {
            views: self.views.iter().map(|v| v.normalize_rows()).collect::<Result<_>>()?,
            sample_ids: self.sample_ids.clone(),
        })
    }
}

/// Writes a view in the `TGE1` format.
pub fn save_embedding_file(view: &EmbeddingView, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
    w.write_all(&encode_embedding(view)?)?;
    w.flush()?;
    Ok(())
}

pub fn encode_embedding(view: &EmbeddingView) -> Result<Vec<u8>> {
    let id = view.view_id.as_bytes();
    let id_len = u16::try_from(id.len()).map_err(|_| Error::Validation("view_id longer than 65535 bytes".into()))?;
    let dim = u32::try_from(view.dim).map_err(|_| Error::Validation("dim does not fit in u32".into()))?;
    let mut buf = Vec::with_capacity(23 + id.len() + view.data.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&EMBEDDING_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&(view.count as u64).to_le_bytes());
    buf.push(u8::from(view.normalized));
    buf.extend_from_slice(&id_len.to_le_bytes());
    buf.extend_from_slice(id);
    for x in &view.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(buf)
}

/// Reads a `TGE1` file.
pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingView> {
    decode_embedding(&fs::read(path.as_ref())?)
}

pub fn decode_embedding(bytes: &[u8]) -> Result<EmbeddingView> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4).map_err(|_| Error::Format("file shorter than magic".into()))?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"TGE1\"")));
    }
    let version = r.u32().map_err(header_err)?;
    if version != EMBEDDING_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let dim = r.u32().map_err(header_err)? as usize;
    let count = r.u64().map_err(header_err)?;
    let normalized = match r.u8().map_err(header_err)? {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("normalized flag must be 0 or 1, got {other}"))),
    };
    let id_len = r.u16().map_err(header_err)? as usize;
    let view_id = std::str::from_utf8(r.take(id_len).map_err(header_err)?)
        .map_err(|e| Error::Format(format!("view_id is not UTF-8: {e}")))?
        .to_owned();
    if dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    let expected = count
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("count × dim overflows".into()))?;
    let actual = r.remaining() as u64;
    if actual != expected {
        return Err(Error::Length { expected, actual });
    }
    let data = r.rest().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    EmbeddingView::new(view_id, dim, data, normalized)
}

fn header_err(_: ()) -> Error {
    Error::Format("truncated header".into())
}

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ()> {
        let end = self.pos.checked_add(n).ok_or(())?;
        let s = self.bytes.get(self.pos..end).ok_or(())?;
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> std::result::Result<u8, ()> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> std::result::Result<u16, ()> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, ()> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, ()> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }
}

/// One line of the sibling id file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdRecord {
    pub i: u64,
    pub id: String,
}

/// Sibling id path for an embedding file: `views/a.tge` → `views/a.ids.jsonl`.
pub fn ids_path_for(embedding_path: impl AsRef<Path>) -> PathBuf {
    embedding_path.as_ref().with_extension("ids.jsonl")
}

pub fn save_ids(ids: &[String], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
    for (i, id) in ids.iter().enumerate() {
        serde_json::to_writer(&mut w, &IdRecord { i: i as u64, id: id.clone() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an id file; rows must appear exactly once each, in any order.
pub fn load_ids(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let reader = BufReader::new(fs::File::open(path.as_ref())?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IdRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: n + 1, message: e.to_string() })?;
        records.push(rec);
    }
    let mut ids = vec![None; records.len()];
    for rec in records {
        let slot = ids
            .get_mut(rec.i as usize)
            .ok_or_else(|| Error::Validation(format!("id row index {} out of range", rec.i)))?;
        if slot.is_some() {
            return Err(Error::Validation(format!("id row index {} repeated", rec.i)));
        }
        *slot = Some(rec.id);
    }
    Ok(ids.into_iter().map(|s| s.expect("every slot filled")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(rows: &[Vec<f32>]) -> EmbeddingView {
        EmbeddingView::from_rows("v", rows, false).unwrap()
    }

    #[test]
    fn identity_payload_round_trips() {
        let v = EmbeddingView::from_rows("qwen", &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]], true).unwrap();
        let back = decode_embedding(&encode_embedding(&v).unwrap()).unwrap();
        assert_eq!(back.dim(), 4);
        assert_eq!(back.count(), 2);
        assert!(back.is_normalized());
        assert_eq!(back, v);
    }

    #[test]
    fn zero_count_file_is_valid() {
        let v = EmbeddingView::new("empty", 3, vec![], false).unwrap();
        let back = decode_embedding(&encode_embedding(&v).unwrap()).unwrap();
        assert_eq!(back.count(), 0);
        assert_eq!(back.dim(), 3);
    }

    #[test]
    fn payload_one_float_short_is_a_length_error() {
        let v = view(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut bytes = encode_embedding(&v).unwrap();
        bytes.truncate(bytes.len() - 4);
        match decode_embedding(&bytes) {
            Err(Error::Length { expected, actual }) => assert_eq!(expected - actual, 4),
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_header_is_a_format_error() {
        let v = view(&[vec![1.0, 2.0]]);
        let mut bytes = encode_embedding(&v).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_embedding(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_embedding(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_payload_is_a_validation_error() {
        let v = view(&[vec![1.0, 2.0]]);
        let mut bytes = encode_embedding(&v).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_embedding(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let v = EmbeddingView::new("ab", 1, vec![1.5], false).unwrap();
        let bytes = encode_embedding(&v).unwrap();
        let mut expected = b"TGE1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.push(0);
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn normalize_three_four_five() {
        let n = view(&[vec![3.0, 4.0], vec![1.0, 0.0]]).normalize_rows().unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(n.row(1), &[1.0, 0.0]);
        assert!(n.is_normalized());
    }

    #[test]
    fn zero_row_names_its_index() {
        let err = view(&[vec![1.0, 0.0], vec![0.0, 0.0]]).normalize_rows().unwrap_err();
        assert!(matches!(err, Error::DegenerateVector { row: 1 }));
    }

    #[test]
    fn unnormalized_rows_flagged_normalized_are_rejected() {
        assert!(EmbeddingView::from_rows("v", &[vec![3.0, 4.0]], true).is_err());
    }

    #[test]
    fn align_checks_counts_and_ids() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let a = EmbeddingView::new("a", 1, vec![1.0; 10], false).unwrap();
        let b = EmbeddingView::new("b", 2, vec![1.0; 20], false).unwrap();
        let short = EmbeddingView::new("c", 1, vec![1.0; 9], false).unwrap();

        let ds = MultiViewDataset::align(vec![a.clone(), b], ids.clone()).unwrap();
        assert_eq!(ds.num_views(), 2);

        let err = MultiViewDataset::align(vec![a.clone(), short], ids.clone()).unwrap_err();
        assert!(matches!(&err, Error::Alignment(msg) if msg.contains("\"c\"")));

        let err = MultiViewDataset::align(vec![a.clone(), a], ids).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    #[test]
    fn sphere_distance_special_cases() {
        let e1 = [1.0f32, 0.0];
        let e2 = [0.0f32, 1.0];
        let neg = [-1.0f32, 0.0];
        assert_eq!(squared_l2_on_sphere(&e1, &e1).unwrap(), 0.0);
        assert_eq!(squared_l2_on_sphere(&e1, &neg).unwrap(), 4.0);
        assert_eq!(squared_l2_on_sphere(&e1, &e2).unwrap(), 2.0);
        assert!(matches!(
            squared_l2_on_sphere(&e1, &[1.0, 0.0, 0.0]),
            Err(Error::Dimension { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn ids_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ids.jsonl");
        let ids = vec!["x".to_string(), "y".into(), "z".into()];
        save_ids(&ids, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"i":0,"id":"x"}"#);
        assert_eq!(load_ids(&path).unwrap(), ids);
        assert_eq!(ids_path_for("dir/a.tge"), PathBuf::from("dir/a.ids.jsonl"));
    }
}
