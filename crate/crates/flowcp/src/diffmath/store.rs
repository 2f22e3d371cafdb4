//! Named parameter storage with deterministic iteration order and a
//! versioned binary checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::diffmath::matrix::Matrix;
use crate::diffmath::DiffError;
use crate::scalar::Real;

const MAGIC: &[u8; 8] = b"FCPSTOR\0";
const FORMAT_VERSION: u32 = 1;

/// Named parameter leaves. Iteration follows insertion order, so gradient
/// vectors, optimizer state and checkpoints all align by index.
#[derive(Debug, Clone)]
pub struct ParamStore<R: Real> {
    names: Vec<String>,
    mats: Vec<Matrix<R>>,
    index: HashMap<String, usize>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            mats: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a new leaf. Names are unique; shapes are fixed afterwards.
    pub fn insert(&mut self, name: impl Into<String>, mat: Matrix<R>) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.mats.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.mats.push(mat);
        id
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<R>> {
        self.id_of(name).map(|id| &self.mats[id])
    }

    pub fn by_id(&self, id: usize) -> &Matrix<R> {
        &self.mats[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Matrix<R> {
        &mut self.mats[id]
    }

    /// Overwrite the values of an existing leaf; the shape must match.
    pub fn set(&mut self, name: &str, mat: Matrix<R>) {
        let id = self
            .id_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(
            self.mats[id].shape(),
            mat.shape(),
            "parameter shapes are fixed"
        );
        self.mats[id] = mat;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<R>)> {
        self.names.iter().map(String::as_str).zip(self.mats.iter())
    }

    /// Total scalar count across all leaves.
    pub fn num_scalars(&self) -> usize {
        self.mats.iter().map(Matrix::len).sum()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), DiffError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.mats.len() as u64).to_le_bytes())?;
        for (name, mat) in self.iter() {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(mat.rows() as u64).to_le_bytes())?;
            w.write_all(&(mat.cols() as u64).to_le_bytes())?;
            for &v in mat.data() {
                w.write_all(&v.f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, DiffError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DiffError::BadCheckpoint("bad magic header".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(DiffError::BadCheckpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let count = read_u64(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| DiffError::BadCheckpoint("non-utf8 parameter name".into()))?;
            let rows = read_u64(r)? as usize;
            let cols = read_u64(r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(R::of(f64::from_le_bytes(buf)));
            }
            if store.index.contains_key(&name) {
                return Err(DiffError::BadCheckpoint(format!("duplicate leaf {name}")));
            }
            store.insert(name, Matrix::from_vec(rows, cols, data));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DiffError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DiffError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, DiffError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, DiffError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Gradients aligned with a [`ParamStore`] by index.
#[derive(Debug, Clone)]
pub struct Gradients<R: Real> {
    mats: Vec<Matrix<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn zeros_like(store: &ParamStore<R>) -> Self {
        Gradients {
            mats: (0..store.len())
                .map(|i| {
                    let (r, c) = store.by_id(i).shape();
                    Matrix::zeros(r, c)
                })
                .collect(),
        }
    }

    pub fn by_id(&self, id: usize) -> &Matrix<R> {
        &self.mats[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Matrix<R> {
        &mut self.mats[id]
    }

    pub fn get<'a>(&'a self, store: &ParamStore<R>, name: &str) -> Option<&'a Matrix<R>> {
        store.id_of(name).map(|id| &self.mats[id])
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn accumulate(&mut self, other: &Gradients<R>) {
        assert_eq!(self.mats.len(), other.mats.len());
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            a.add_assign(b);
        }
    }

    pub fn scale_in_place(&mut self, s: R) {
        for m in &mut self.mats {
            for v in m.data_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn global_norm(&self) -> R {
        self.mats
            .iter()
            .fold(R::zero(), |acc, m| acc + m.frobenius_sq())
            .sqrt()
    }

    /// Scale all gradients so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: R) {
        let norm = self.global_norm();
        if norm > max_norm && norm > R::zero() {
            self.scale_in_place(max_norm / norm);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("b", Matrix::zeros(1, 2));
        s.insert("a", Matrix::zeros(2, 2));
        let names: Vec<_> = s.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["b", "a"]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("w", Matrix::from_vec(2, 2, vec![0.1, -0.25, 1e-300, 3.5]));
        s.insert(
            "h_null",
            Matrix::row_vector(vec![std::f64::consts::PI, -0.0]),
        );
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let loaded = ParamStore::<f64>::read_from(&mut buf.as_slice()).unwrap();
        for ((n1, m1), (n2, m2)) in s.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            for (a, b) in m1.data().iter().zip(m2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOTMAGIC\x01\x00\x00\x00".to_vec();
        assert!(ParamStore::<f64>::read_from(&mut buf.as_slice()).is_err());
    }
}
