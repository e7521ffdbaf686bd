//! Exhaustive cosine-similarity index over (embedding, report) pairs.
//!
//! Vectors are normalised at insert so that search is a dot product. File
//! layout (little-endian):
//!
//! ```text
//! "ECIX"  u32 version (=1)  u32 dim  u64 count
//! repeat count times:
//!   u64 id, dim × f32 vector, u32 report byte length, UTF-8 report
//! ```

use std::cmp::Ordering;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{read_exact_or_format, read_f32, read_file, read_u32, read_u64, write_atomic};

pub const DEFAULT_K: usize = 3;

const MAGIC: &[u8; 4] = b"ECIX";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub score: f32,
    pub report: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<f32>,
    reports: Vec<String>,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("index dimension must be positive"));
        }
        Ok(Self { dim, ..Self::default() })
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

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn report(&self, i: usize) -> &str {
        &self.reports[i]
    }

    fn normalized(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.dim {
            return Err(Error::shape(format!("vector of length {} for index of dim {}", v.len(), self.dim)));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("vector contains non-finite values"));
        }
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("cannot index a zero vector"));
        }
        Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
    }

    /// Insert and return the assigned id (`0, 1, 2, …`).
    pub fn add(&mut self, embedding: &[f32], report: impl Into<String>) -> Result<u64> {
        let v = self.normalized(embedding)?;
        let id = self.ids.last().map_or(0, |&last| last + 1);
        self.ids.push(id);
        self.vectors.extend_from_slice(&v);
        self.reports.push(report.into());
        Ok(id)
    }

    /// Exact top-`k` by cosine similarity, highest first; equal scores are
    /// ordered by smaller id. Returns `min(k, len)` hits.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let q = self.normalized(query)?;
        let k = k.min(self.len());
        let scores: Vec<f32> = self.vectors.chunks_exact(self.dim).map(|v| dot(v, &q)).collect();
        let better = |a: usize, b: usize| -> Ordering {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then(self.ids[a].cmp(&self.ids[b]))
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, |&a, &b| better(a, b));
            order.truncate(k);
        }
        order.sort_unstable_by(|&a, &b| better(a, b));
        Ok(order
            .into_iter()
            .map(|i| Hit {
                id: self.ids[i],
                score: scores[i],
                report: self.reports[i].clone(),
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.ids[i].to_le_bytes());
            for v in self.vector(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let r = self.reports[i].as_bytes();
            out.extend_from_slice(&(r.len() as u32).to_le_bytes());
            out.extend_from_slice(r);
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact_or_format(r, &mut magic, "index magic")?;
        if &magic != MAGIC {
            return Err(Error::format("not a ECIX index (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported ECIX version {version}")));
        }
        let dim = read_u32(r)? as usize;
        if dim == 0 {
            return Err(Error::format("index dimension is zero"));
        }
        let count = read_u64(r)?;
        let mut index = Self::new(dim)?;
        for _ in 0..count {
            let id = read_u64(r)?;
            if index.ids.last().is_some_and(|&last| id <= last) {
                return Err(Error::format("index ids are not increasing"));
            }
            if r.len() < dim * 4 {
                return Err(Error::format("index truncated in vector"));
            }
            for _ in 0..dim {
                index.vectors.push(read_f32(r)?);
            }
            let len = read_u32(r)? as usize;
            if r.len() < len {
                return Err(Error::format("index truncated in report"));
            }
            let mut buf = vec![0u8; len];
            read_exact_or_format(r, &mut buf, "report")?;
            let report = String::from_utf8(buf).map_err(|_| Error::format("report is not UTF-8"))?;
            index.ids.push(id);
            index.reports.push(report);
        }
        if !r.is_empty() {
            return Err(Error::format("trailing bytes after index"));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
