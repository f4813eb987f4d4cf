//! Descriptor nearest-neighbor localization baseline.
//!
//! Index files are the magic `ANNI`, the entry count and dimension as
//! little-endian `u64`, the descriptors row-major as little-endian `f64`,
//! and finally one `(lat, lon)` pair of `f64` per entry.

use std::path::Path;

use thiserror::Error;

use crate::geo::{planar_distance_m, GeoPoint, RegionFrame};
use crate::metrics::{localization_errors, LocStats, MetricsError};
use crate::net::EncoderOutput;

pub const DESCRIPTOR_DIM: usize = 512;
pub const INDEX_MAGIC: &[u8; 4] = b"ANNI";

#[derive(Error, Debug)]
pub enum NnError {
    #[error("encoder map has {got} channels, expected {expected}")]
    BadChannels { expected: usize, got: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("descriptor has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("descriptor contains a non-finite value")]
    NonFinite,
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-channel global average of the final encoder map.
pub fn extract_descriptor(enc: &EncoderOutput) -> Result<Vec<f64>, NnError> {
    extract_descriptor_dim(enc, DESCRIPTOR_DIM)
}

/// [`extract_descriptor`] for encoders of non-default width.
pub fn extract_descriptor_dim(enc: &EncoderOutput, dim: usize) -> Result<Vec<f64>, NnError> {
    if enc.final_map.c != dim {
        return Err(NnError::BadChannels {
            expected: dim,
            got: enc.final_map.c,
        });
    }
    Ok(enc.final_map.global_average_pool())
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    dim: usize,
    data: Vec<f64>,
    locations: Vec<GeoPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index: usize,
    pub location: GeoPoint,
    pub distance: f64,
}

impl DescriptorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            locations: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn location(&self, i: usize) -> GeoPoint {
        self.locations[i]
    }

    fn check(&self, d: &[f64]) -> Result<(), NnError> {
        if d.len() != self.dim {
            return Err(NnError::DimensionMismatch {
                expected: self.dim,
                got: d.len(),
            });
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(())
    }

    pub fn push(&mut self, descriptor: &[f64], location: GeoPoint) -> Result<(), NnError> {
        self.check(descriptor)?;
        self.data.extend_from_slice(descriptor);
        self.locations.push(location);
        Ok(())
    }

    /// Exhaustive Euclidean search; the lowest index wins ties.
    pub fn query_1nn(&self, q: &[f64]) -> Result<Match, NnError> {
        if self.is_empty() {
            return Err(NnError::EmptyIndex);
        }
        self.check(q)?;
        let mut best = (0, f64::INFINITY);
        for (i, row) in self.data.chunks_exact(self.dim).enumerate() {
            let d2: f64 = row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        Ok(Match {
            index: best.0,
            location: self.locations[best.0],
            distance: best.1.sqrt(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * (self.data.len() + 2 * self.len()));
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.locations {
            out.extend_from_slice(&p.lat.to_le_bytes());
            out.extend_from_slice(&p.lon.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, NnError> {
        if b.len() < 20 || &b[..4] != INDEX_MAGIC {
            return Err(NnError::Format("missing magic header".into()));
        }
        let word = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().expect("8 bytes"));
        let real = |i: usize| f64::from_le_bytes(b[i..i + 8].try_into().expect("8 bytes"));
        let (count, dim) = (word(4) as usize, word(12) as usize);
        if dim == 0 {
            return Err(NnError::Format("zero dimension".into()));
        }
        let expected = count
            .checked_mul(dim + 2)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(20))
            .ok_or_else(|| NnError::Format("header overflows".into()))?;
        if b.len() != expected {
            return Err(NnError::Format(format!(
                "expected {expected} bytes, found {}",
                b.len()
            )));
        }
        let data: Vec<f64> = (0..count * dim).map(|i| real(20 + 8 * i)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite);
        }
        let base = 20 + 8 * count * dim;
        let locations = (0..count)
            .map(|i| GeoPoint::new(real(base + 16 * i), real(base + 16 * i + 8)))
            .collect();
        Ok(Self {
            dim,
            data,
            locations,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Planar errors of matching every query, summarized.
pub fn evaluate_nn_localization(
    idx: &DescriptorIndex,
    queries: &[(Vec<f64>, GeoPoint)],
    frame: &RegionFrame,
) -> Result<(Vec<f64>, LocStats), NnError> {
    if idx.is_empty() {
        return Err(NnError::EmptyIndex);
    }
    let errors = queries
        .iter()
        .map(|(q, truth)| Ok(planar_distance_m(idx.query_1nn(q)?.location, *truth, frame)))
        .collect::<Result<Vec<f64>, NnError>>()?;
    let stats = localization_errors(&errors)?;
    Ok((errors, stats))
}
