//! Dense row-major `f32` tensors and the portable TSR1 file format.
//!
//! TSR1 layout: the 4-byte magic `TSR1`, one `u8` rank, `rank` little-endian
//! `u32` extents, then the elements as little-endian `f32` in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TSR1_MAGIC: &[u8; 4] = b"TSR1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sum with 64-bit accumulation.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&x| f64::from(x)).sum()
    }

    /// Inner product with 64-bit accumulation.
    pub fn dot_f64(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }

    /// FNV-1a over the raw little-endian bytes; used for frozen-weight checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for x in &self.data {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }

    pub fn to_tsr1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(TSR1_MAGIC);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Decode a TSR1 blob. `origin` only labels errors.
    pub fn from_tsr1_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |offset: usize, reason: &str| Error::Format {
            path: origin.to_path_buf(),
            offset: offset as u64,
            reason: reason.to_string(),
        };
        if bytes.len() < 5 {
            return Err(fail(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != TSR1_MAGIC {
            return Err(fail(0, "bad magic (expected TSR1)"));
        }
        let rank = bytes[4] as usize;
        if rank == 0 {
            return Err(fail(4, "rank must be at least 1"));
        }
        let mut pos = 5;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let Some(chunk) = bytes.get(pos..pos + 4) else {
                return Err(fail(bytes.len(), "truncated extents"));
            };
            let d = u32::from_le_bytes(chunk.try_into().unwrap()) as usize;
            if d == 0 {
                return Err(fail(pos, "zero extent"));
            }
            shape.push(d);
            pos += 4;
        }
        let n: usize = shape.iter().product();
        let need = pos + 4 * n;
        if bytes.len() < need {
            return Err(fail(bytes.len(), "truncated data"));
        }
        if bytes.len() > need {
            return Err(fail(need, "trailing bytes after data"));
        }
        let data = bytes[pos..need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn save_tsr1(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsr1_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_tsr1(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsr1_bytes(&bytes, path)
    }
}
