//! Binary embedding store: the on-disk format for precomputed vectors.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic  "EMB1"                  4 bytes
//! version u32 = 1
//! dim     u32
//! count   u64
//! ids     count x (u32 length + UTF-8 bytes)
//! payload count x dim f32 values, row-major
//! ```
//!
//! Rows are re-normalized on load; lookups by id are O(1) expected.

use crate::embedding::{EmbeddingVector, ZERO_NORM_THRESHOLD};
use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const STORE_MAGIC: [u8; 4] = *b"EMB1";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: bad magic {found:?}, expected {expected:?}", expected = STORE_MAGIC)]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported version {found}, expected {}", STORE_VERSION)]
    BadVersion { path: PathBuf, found: u32 },
    #[error("{path}: header dim {found} does not match expected {expected}")]
    DimMismatchHeader {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: header dim must be positive")]
    ZeroDim { path: PathBuf },
    #[error("{path}: payload truncated ({found} of {expected} bytes)")]
    TruncatedPayload {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: u64 },
    #[error("{path}: duplicate id {id}")]
    DuplicateId { path: PathBuf, id: String },
    #[error("{path}: id at index {index} is not valid UTF-8")]
    BadId { path: PathBuf, index: u64 },
    #[error("{path}: row {id} is a zero vector and cannot be normalized")]
    ZeroRow { path: PathBuf, id: String },
    #[error("{path}: row {id} contains a non-finite value")]
    NonFiniteRow { path: PathBuf, id: String },
    #[error("row {id} has {found} values, expected dim {expected}")]
    RowLength {
        id: String,
        expected: usize,
        found: usize,
    },
}

/// An immutable, fully loaded embedding store. Rows are unit-normalized.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::load_with_dim(path, None)
    }

    /// Load, additionally checking the header dim against `expected_dim`.
    pub fn load_with_dim(
        path: impl AsRef<Path>,
        expected_dim: Option<u32>,
    ) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let io_err = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::open(path).map_err(io_err)?;
        let file_len = file.metadata().map_err(io_err)?.len();
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if magic != STORE_MAGIC {
            return Err(StoreError::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        let version = read_u32(&mut r).map_err(io_err)?;
        if version != STORE_VERSION {
            return Err(StoreError::BadVersion {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let dim = read_u32(&mut r).map_err(io_err)?;
        if dim == 0 {
            return Err(StoreError::ZeroDim {
                path: path.to_path_buf(),
            });
        }
        if let Some(expected) = expected_dim {
            if dim != expected {
                return Err(StoreError::DimMismatchHeader {
                    path: path.to_path_buf(),
                    expected,
                    found: dim,
                });
            }
        }
        let count = read_u64(&mut r).map_err(io_err)?;

        let mut ids = Vec::with_capacity(count as usize);
        let mut index = HashMap::with_capacity(count as usize);
        let mut id_bytes_total = 0u64;
        for i in 0..count {
            let len = read_u32(&mut r).map_err(io_err)?;
            let mut buf = vec![0u8; len as usize];
            r.read_exact(&mut buf).map_err(io_err)?;
            id_bytes_total += 4 + u64::from(len);
            let id = String::from_utf8(buf).map_err(|_| StoreError::BadId {
                path: path.to_path_buf(),
                index: i,
            })?;
            if index.insert(id.clone(), i as usize).is_some() {
                return Err(StoreError::DuplicateId {
                    path: path.to_path_buf(),
                    id,
                });
            }
            ids.push(id);
        }

        let expected_payload = count * u64::from(dim) * 4;
        let header_len = 4 + 4 + 4 + 8 + id_bytes_total;
        let available = file_len.saturating_sub(header_len);
        if available < expected_payload {
            return Err(StoreError::TruncatedPayload {
                path: path.to_path_buf(),
                expected: expected_payload,
                found: available,
            });
        }
        if available > expected_payload {
            return Err(StoreError::TrailingBytes {
                path: path.to_path_buf(),
                extra: available - expected_payload,
            });
        }

        let mut payload = vec![0u8; expected_payload as usize];
        r.read_exact(&mut payload).map_err(io_err)?;
        let mut data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        // Re-normalize every row; reject zero and non-finite rows outright.
        let dim = dim as usize;
        for (row_ix, id) in ids.iter().enumerate() {
            let row = &mut data[row_ix * dim..(row_ix + 1) * dim];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(StoreError::NonFiniteRow {
                    path: path.to_path_buf(),
                    id: id.clone(),
                });
            }
            let norm = row
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm <= ZERO_NORM_THRESHOLD {
                return Err(StoreError::ZeroRow {
                    path: path.to_path_buf(),
                    id: id.clone(),
                });
            }
            let inv = 1.0 / norm;
            for v in row.iter_mut() {
                *v = (f64::from(*v) * inv) as f32;
            }
        }

        Ok(Self {
            dim,
            ids,
            index,
            data,
        })
    }

    /// Write a store file. Rows are written as given (normalization happens
    /// on load); lengths must match `dim` and ids must be unique.
    pub fn write(
        path: impl AsRef<Path>,
        dim: usize,
        entries: &[(String, Vec<f32>)],
    ) -> Result<(), StoreError> {
        let path = path.as_ref();
        let io_err = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        assert!(dim > 0, "store dim must be positive");
        let mut seen = HashMap::new();
        for (i, (id, row)) in entries.iter().enumerate() {
            if row.len() != dim {
                return Err(StoreError::RowLength {
                    id: id.clone(),
                    expected: dim,
                    found: row.len(),
                });
            }
            if seen.insert(id.as_str(), i).is_some() {
                return Err(StoreError::DuplicateId {
                    path: path.to_path_buf(),
                    id: id.clone(),
                });
            }
        }

        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        w.write_all(&STORE_MAGIC).map_err(io_err)?;
        w.write_all(&STORE_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(entries.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        for (id, _) in entries {
            w.write_all(&(id.len() as u32).to_le_bytes())
                .map_err(io_err)?;
            w.write_all(id.as_bytes()).map_err(io_err)?;
        }
        for (_, row) in entries {
            for v in row {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&ix| self.row_slice(ix))
    }

    pub fn row(&self, ix: usize) -> Option<&[f32]> {
        (ix < self.ids.len()).then(|| self.row_slice(ix))
    }

    pub fn id_at(&self, ix: usize) -> Option<&str> {
        self.ids.get(ix).map(String::as_str)
    }

    pub fn vector(&self, id: &str) -> Option<EmbeddingVector> {
        self.get(id)
            .map(|row| EmbeddingVector::new(row.to_vec()).expect("rows validated on load"))
    }

    pub fn vector_at(&self, ix: usize) -> Option<EmbeddingVector> {
        self.row(ix)
            .map(|row| EmbeddingVector::new(row.to_vec()).expect("rows validated on load"))
    }

    fn row_slice(&self, ix: usize) -> &[f32] {
        &self.data[ix * self.dim..(ix + 1) * self.dim]
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_store(path: &Path, dim: usize, entries: &[(&str, Vec<f32>)]) {
        let owned: Vec<(String, Vec<f32>)> = entries
            .iter()
            .map(|(id, row)| (id.to_string(), row.clone()))
            .collect();
        EmbeddingStore::write(path, dim, &owned).unwrap();
    }

    #[test]
    fn rows_are_normalized_on_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.emb");
        write_store(&path, 4, &[("a", vec![2.0, 0.0, 0.0, 0.0])]);
        let store = EmbeddingStore::load(&path).unwrap();
        assert_eq!(store.get("a").unwrap(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(store.dim(), 4);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn duplicate_ids_rejected_on_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.emb");
        // hand-roll a file with a duplicated id
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&STORE_MAGIC);
        bytes.extend_from_slice(&STORE_VERSION.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        for _ in 0..2 {
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.extend_from_slice(b"a");
        }
        for v in [1.0f32, 0.0, 0.0, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            EmbeddingStore::load(&path).unwrap_err(),
            StoreError::DuplicateId { .. }
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.emb");
        write_store(&path, 4, &[("a", vec![1.0, 0.0, 0.0, 0.0])]);
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 4]).unwrap();
        assert!(matches!(
            EmbeddingStore::load(&path).unwrap_err(),
            StoreError::TruncatedPayload { .. }
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.emb");
        write_store(&path, 2, &[("a", vec![1.0, 0.0])]);
        let mut full = std::fs::read(&path).unwrap();
        full.extend_from_slice(&[0, 0, 0]);
        std::fs::write(&path, full).unwrap();
        assert!(matches!(
            EmbeddingStore::load(&path).unwrap_err(),
            StoreError::TrailingBytes { extra: 3, .. }
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.emb");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(
            EmbeddingStore::load(&path).unwrap_err(),
            StoreError::BadMagic { .. }
        ));
    }

    #[test]
    fn header_dim_checked_when_expected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.emb");
        write_store(&path, 4, &[("a", vec![1.0, 0.0, 0.0, 0.0])]);
        assert!(matches!(
            EmbeddingStore::load_with_dim(&path, Some(8)).unwrap_err(),
            StoreError::DimMismatchHeader {
                expected: 8,
                found: 4,
                ..
            }
        ));
        assert!(EmbeddingStore::load_with_dim(&path, Some(4)).is_ok());
    }

    #[test]
    fn zero_row_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.emb");
        write_store(&path, 2, &[("a", vec![0.0, 0.0])]);
        assert!(matches!(
            EmbeddingStore::load(&path).unwrap_err(),
            StoreError::ZeroRow { .. }
        ));
    }

    #[test]
    fn lookup_by_id_and_index_agree() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.emb");
        write_store(&path, 2, &[("a", vec![1.0, 0.0]), ("b", vec![0.0, 2.0])]);
        let store = EmbeddingStore::load(&path).unwrap();
        assert_eq!(store.get("b").unwrap(), store.row(1).unwrap());
        assert_eq!(store.id_at(1), Some("b"));
        assert!(store.get("missing").is_none());
        assert!(store.row(2).is_none());
    }

    #[test]
    fn round_trip_preserves_normalized_rows() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.emb");
        let b = dir.path().join("b.emb");
        let entries: Vec<(String, Vec<f32>)> = (0..10)
            .map(|i| {
                let row: Vec<f32> = (0..6)
                    .map(|j| {
                        let h = crate::hash::hash_with_seed(3, format!("{i}:{j}").as_bytes());
                        (crate::hash::unit_f64(h) * 2.0 - 1.0) as f32
                    })
                    .collect();
                (format!("row-{i}"), row)
            })
            .collect();
        EmbeddingStore::write(&a, 6, &entries).unwrap();
        let first = EmbeddingStore::load(&a).unwrap();
        // write the normalized rows and reload: a fixed point
        let normalized: Vec<(String, Vec<f32>)> = first
            .ids()
            .iter()
            .map(|id| (id.clone(), first.get(id).unwrap().to_vec()))
            .collect();
        EmbeddingStore::write(&b, 6, &normalized).unwrap();
        let second = EmbeddingStore::load(&b).unwrap();
        for id in first.ids() {
            assert_eq!(first.get(id).unwrap(), second.get(id).unwrap());
        }
    }
}
