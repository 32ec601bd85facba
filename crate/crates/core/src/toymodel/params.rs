use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::RngKey;

pub const MAGIC: &[u8; 5] = b"ICXM1";

pub const EMBEDDING: usize = 0;
pub const W_Q: usize = 1;
pub const W_K: usize = 2;
pub const W_V: usize = 3;
/// Scalar gain on the exact-token-match attention bias.
pub const MATCH_GAIN: usize = 4;
pub const FF_W1: usize = 5;
pub const FF_B1: usize = 6;
pub const FF_W2: usize = 7;
pub const FF_B2: usize = 8;
pub const HEAD_W: usize = 9;
pub const HEAD_B: usize = 10;
pub const N_TENSORS: usize = 11;

pub const TENSOR_NAMES: [&str; N_TENSORS] = [
    "embedding", "w_q", "w_k", "w_v", "match_gain", "ff_w1", "ff_b1", "ff_w2", "ff_b2", "head_w",
    "head_b",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_labels: usize,
}

impl Dims {
    /// Label head width: one class per label plus EOS.
    pub fn n_classes(&self) -> usize {
        self.n_labels + 1
    }

    pub fn shapes(&self) -> [Vec<usize>; N_TENSORS] {
        let (v, d, f, c) = (self.vocab_size, self.d_model, self.d_ff, self.n_classes());
        [
            vec![v, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![1],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
            vec![d, c],
            vec![c],
        ]
    }
}

/// Model weights, also used as the container for gradients and optimizer
/// moments. Tensors are row-major `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub tensors: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        let tensors = dims
            .shapes()
            .iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        ModelParams { dims, tensors }
    }

    /// Uniform in `[-0.1/sqrt(d), 0.1/sqrt(d)]`, drawn tensor by tensor.
    pub fn init(dims: Dims, key: &RngKey) -> Self {
        let mut p = Self::zeros(dims);
        let bound = 0.1 / (dims.d_model as f64).sqrt();
        let mut rng = key.stream();
        for t in &mut p.tensors {
            for x in t.iter_mut() {
                *x = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    pub fn t(&self, i: usize) -> &[f64] {
        &self.tensors[i]
    }

    pub fn t_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|x| x.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|x| *x = value);
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    /// Little-endian bytes of every tensor; used for no-mutation audits.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flatten()
            .flat_map(|x| x.to_le_bytes())
            .collect()
    }

    /// Write `ICXM1`, the tensor count, each shape, then row-major `f32`
    /// data, all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.num_params());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(N_TENSORS as u32).to_le_bytes());
        for shape in self.dims.shapes() {
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for x in self.tensors.iter().flatten() {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|e| Error::io(path, e))?;
        Self::from_file_bytes(&raw)
    }

    pub fn from_file_bytes(raw: &[u8]) -> Result<Self> {
        let mut cur = raw;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::ModelFormat("truncated file".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(5)? != MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let count = u32_at(take(4)?);
        if count != N_TENSORS {
            return Err(Error::ModelFormat(format!("expected {N_TENSORS} tensors, found {count}")));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = u32_at(take(4)?);
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32_at(take(4)?));
            }
            shapes.push(shape);
        }
        let dims = Dims {
            vocab_size: shapes[EMBEDDING][0],
            d_model: shapes[EMBEDDING][1],
            d_ff: shapes[FF_B1][0],
            n_labels: shapes[HEAD_B][0]
                .checked_sub(1)
                .ok_or_else(|| Error::ModelFormat("empty head".into()))?,
        };
        if dims.shapes().to_vec() != shapes {
            return Err(Error::ShapeError(format!("inconsistent tensor shapes {shapes:?}")));
        }
        let mut p = Self::zeros(dims);
        for t in &mut p.tensors {
            for x in t.iter_mut() {
                *x = f32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as f64;
            }
        }
        if !cur.is_empty() {
            return Err(Error::ModelFormat(format!("{} trailing bytes", cur.len())));
        }
        Ok(p)
    }

    /// Round every weight through `f32`, matching what a save/load cycle yields.
    pub fn quantize_f32(&mut self) {
        for x in self.tensors.iter_mut().flatten() {
            *x = *x as f32 as f64;
        }
    }
}
