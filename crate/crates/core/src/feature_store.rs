//! Feature matrices, dataset manifests and the labeled/unlabeled pool.
//!
//! Features are persisted in the ALFV1 container:
//!
//! ```text
//! "ALFV1" | n: u32 LE | d: u32 LE | n*d f32 LE, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAGIC: &[u8; 5] = b"ALFV1";
pub const HEADER_LEN: usize = 13;
const UNIT_NORM_TOL: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl FeatureMatrix {
    /// Builds a matrix, checking shape and finiteness. `normalized` is set when
    /// every row already has unit norm.
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Validation(format!(
                "matrix must be at least 1x1, got {n}x{d}"
            )));
        }
        if data.len() != n * d {
            return Err(Error::Validation(format!(
                "buffer of {} values does not match {n}x{d}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        let mut m = FeatureMatrix {
            n,
            d,
            data,
            normalized: false,
        };
        m.normalized = m.rows_are_unit();
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Validation("ragged rows".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.d)
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<FeatureMatrix> {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.n {
                return Err(Error::Argument(format!(
                    "row {i} out of range for {} rows",
                    self.n
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix::new(indices.len(), self.d, data)
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn rows_are_unit(&self) -> bool {
        self.rows().all(|r| (norm(r) - 1.0).abs() <= UNIT_NORM_TOL)
    }
}

fn norm(row: &[f32]) -> f32 {
    row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt() as f32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub ids: Vec<String>,
    pub labels: Option<Vec<u32>>,
    pub num_classes: u32,
    pub feature_path: String,
    pub provenance: String,
    pub feature_version: u32,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::with_capacity(self.ids.len());
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id {id:?}")));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.ids.len() {
                return Err(Error::Manifest(format!(
                    "{} labels for {} ids",
                    labels.len(),
                    self.ids.len()
                )));
            }
            if let Some((i, &y)) = labels
                .iter()
                .enumerate()
                .find(|(_, &y)| y >= self.num_classes)
            {
                return Err(Error::Manifest(format!(
                    "label {y} of sample {i} is not below num_classes = {}",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::storage(path, e))
    }

    /// Resolves `feature_path` relative to the manifest's directory.
    pub fn resolve_feature_path(&self, manifest_path: &Path) -> std::path::PathBuf {
        let p = Path::new(&self.feature_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(p)
        }
    }
}

pub fn encode_features(matrix: &FeatureMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + matrix.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(matrix.n as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.d as u32).to_le_bytes());
    for v in &matrix.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..bytes.len().min(MAGIC.len())].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + n * d * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(n, d, data)
}

pub fn save_features(matrix: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    // fields are crate-visible, so check again before writing
    FeatureMatrix::new(matrix.n, matrix.d, matrix.data.clone())?;
    let path = path.as_ref();
    fs::write(path, encode_features(matrix)).map_err(|e| Error::storage(path, e))
}

/// Reads an ALFV1 file and checks its row count against the manifest.
pub fn load_features(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<FeatureMatrix> {
    let m = read_features(path)?;
    if m.n != manifest.ids.len() {
        return Err(Error::ShapeMismatch {
            expected: manifest.ids.len(),
            found: m.n,
        });
    }
    Ok(m)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_features(&bytes)
}

pub fn l2_normalize_rows(matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut data = matrix.data.clone();
    for (i, row) in data.chunks_exact_mut(matrix.d).enumerate() {
        let nrm = row
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if nrm == 0.0 {
            return Err(Error::DegenerateRow { row: i });
        }
        for v in row.iter_mut() {
            *v = (f64::from(*v) / nrm) as f32;
        }
    }
    Ok(FeatureMatrix {
        n: matrix.n,
        d: matrix.d,
        data,
        normalized: true,
    })
}

/// Labeled set L and unlabeled set U over sample indices `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    n: usize,
    labeled: IndexSet<usize>,
    unlabeled: IndexSet<usize>,
    acquired_labels: BTreeMap<usize, u32>,
}

impl PoolState {
    /// Builds a pool whose labeled set is exactly `labeled` (in the given order).
    pub fn from_labeled(n: usize, labeled: &[(usize, u32)]) -> Result<Self> {
        let mut pool = PoolState {
            n,
            labeled: IndexSet::new(),
            unlabeled: IndexSet::new(),
            acquired_labels: BTreeMap::new(),
        };
        for &(i, y) in labeled {
            if i >= n || !pool.labeled.insert(i) {
                return Err(Error::Pool(format!("invalid or duplicate labeled index {i}")));
            }
            pool.acquired_labels.insert(i, y);
        }
        pool.unlabeled = (0..n).filter(|i| !pool.labeled.contains(i)).collect();
        Ok(pool)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn labeled(&self) -> &IndexSet<usize> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &IndexSet<usize> {
        &self.unlabeled
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labeled.iter().copied().collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    pub fn acquired_labels(&self) -> &BTreeMap<usize, u32> {
        &self.acquired_labels
    }

    /// Labels of L in insertion order.
    pub fn labels_in_order(&self) -> Vec<u32> {
        self.labeled
            .iter()
            .map(|i| self.acquired_labels[i])
            .collect()
    }

    pub fn is_unlabeled(&self, i: usize) -> bool {
        self.unlabeled.contains(&i)
    }

    /// Checks L ∩ U = ∅, L ∪ U = {0..n-1} and that labels are defined exactly on L.
    pub fn check_invariants(&self) -> Result<()> {
        if self.labeled.len() + self.unlabeled.len() != self.n {
            return Err(Error::Pool(format!(
                "|L| + |U| = {} != n = {}",
                self.labeled.len() + self.unlabeled.len(),
                self.n
            )));
        }
        if let Some(i) = self.labeled.iter().find(|i| self.unlabeled.contains(*i)) {
            return Err(Error::Pool(format!("index {i} is in both L and U")));
        }
        if self
            .labeled
            .iter()
            .chain(self.unlabeled.iter())
            .any(|&i| i >= self.n)
        {
            return Err(Error::Pool("index out of range".into()));
        }
        if self.acquired_labels.len() != self.labeled.len()
            || self
                .labeled
                .iter()
                .any(|i| !self.acquired_labels.contains_key(i))
        {
            return Err(Error::Pool("acquired labels not defined exactly on L".into()));
        }
        Ok(())
    }
}

/// Draws `n_init` indices uniformly without replacement as the initial L.
/// The oracle labels them immediately.
pub fn init_pools(
    n: usize,
    n_init: usize,
    seed: u64,
    oracle: impl Fn(usize) -> u32,
) -> Result<PoolState> {
    if n_init == 0 || n_init > n {
        return Err(Error::Argument(format!(
            "initial pool size {n_init} must be in 1..={n}"
        )));
    }
    let mut rng = rng::derived(seed, &[rng::tag::INIT]);
    let labeled: IndexSet<usize> = rand::seq::index::sample(&mut rng, n, n_init)
        .into_iter()
        .collect();
    let unlabeled = (0..n).filter(|i| !labeled.contains(i)).collect();
    let acquired_labels = labeled.iter().map(|&i| (i, oracle(i))).collect();
    Ok(PoolState {
        n,
        labeled,
        unlabeled,
        acquired_labels,
    })
}

/// Moves `indices` from U to L, labeling each through `oracle`.
pub fn acquire_labels(
    pool: &PoolState,
    indices: &[usize],
    oracle: impl Fn(usize) -> u32,
) -> Result<PoolState> {
    let mut seen = std::collections::HashSet::with_capacity(indices.len());
    for &i in indices {
        if i >= pool.n {
            return Err(Error::Pool(format!("index {i} out of range (n = {})", pool.n)));
        }
        if pool.labeled.contains(&i) {
            return Err(Error::Pool(format!("index {i} is already labeled")));
        }
        if !seen.insert(i) {
            return Err(Error::Pool(format!("index {i} requested twice")));
        }
    }
    let mut next = pool.clone();
    for &i in indices {
        next.unlabeled.shift_remove(&i);
        next.labeled.insert(i);
        next.acquired_labels.insert(i, oracle(i));
    }
    Ok(next)
}
