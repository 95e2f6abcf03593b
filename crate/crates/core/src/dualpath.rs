//! Chunking of frame sequences into overlapping windows and the inverse
//! overlap-add. The same windowing is applied to features and to the
//! per-frame utilization so both stay positionally aligned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub chunk_size: usize,
    pub hop: usize,
    pub length: usize,
    pub pad: usize,
}

impl ChunkSpec {
    /// Right-pads the frame axis so that windows tile it exactly and at
    /// least two chunks exist (the inter-chunk path needs a sequence).
    pub fn new(length: usize, chunk_size: usize, hop: usize) -> Result<Self> {
        if chunk_size == 0 || hop == 0 {
            return Err(Error::contract("chunk size and hop must be positive"));
        }
        if hop > chunk_size {
            return Err(Error::contract(format!(
                "chunk hop {hop} exceeds chunk size {chunk_size}"
            )));
        }
        if length == 0 {
            return Err(Error::contract("cannot chunk an empty sequence"));
        }
        let mut padded = length.max(chunk_size + hop);
        let rem = (padded - chunk_size) % hop;
        if rem != 0 {
            padded += hop - rem;
        }
        Ok(Self {
            chunk_size,
            hop,
            length,
            pad: padded - length,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.length + self.pad
    }

    pub fn n_chunks(&self) -> usize {
        (self.padded_len() - self.chunk_size) / self.hop + 1
    }

    /// Original frame at position `c` of chunk `s`, or `None` for padding.
    #[inline]
    pub fn frame(&self, s: usize, c: usize) -> Option<usize> {
        let t = s * self.hop + c;
        (t < self.length).then_some(t)
    }

    /// Number of windows covering original frame `t`.
    pub fn coverage(&self, t: usize) -> usize {
        let first = (t + 1).saturating_sub(self.chunk_size).div_ceil(self.hop);
        let last = (t / self.hop).min(self.n_chunks() - 1);
        last + 1 - first
    }

    fn check(&self) -> Result<()> {
        let fresh = ChunkSpec::new(self.length, self.chunk_size, self.hop)?;
        if fresh != *self {
            return Err(Error::contract(format!("inconsistent chunk spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedTensor<T> {
    /// `[F, S, C]`
    pub data: Tensor<T>,
    pub spec: ChunkSpec,
}

/// Windows of a feature-major `[F, T]` tensor into `[F, S, C]`.
pub fn chunk<T: Scalar>(x: &Tensor<T>, spec: ChunkSpec) -> Result<ChunkedTensor<T>> {
    spec.check()?;
    if x.rank() != 2 || x.dim(1) != spec.length {
        return Err(Error::contract(format!(
            "chunk expects [F, {}], got {:?}",
            spec.length,
            x.shape()
        )));
    }
    let f = x.dim(0);
    let (s_n, c_n) = (spec.n_chunks(), spec.chunk_size);
    let mut out = vec![T::zero(); f * s_n * c_n];
    for fi in 0..f {
        let row = x.row(fi);
        for s in 0..s_n {
            for c in 0..c_n {
                if let Some(t) = spec.frame(s, c) {
                    out[(fi * s_n + s) * c_n + c] = row[t];
                }
            }
        }
    }
    Ok(ChunkedTensor {
        data: Tensor::new(vec![f, s_n, c_n], out)?,
        spec,
    })
}

/// Inverse of [`chunk`]: averages overlapping windows and drops padding.
pub fn overlap_add<T: Scalar>(x: &ChunkedTensor<T>) -> Result<Tensor<T>> {
    let spec = x.spec;
    spec.check()?;
    let (s_n, c_n) = (spec.n_chunks(), spec.chunk_size);
    if x.data.rank() != 3 || x.data.dim(1) != s_n || x.data.dim(2) != c_n {
        return Err(Error::contract(format!(
            "chunked tensor {:?} does not match spec {spec:?}",
            x.data.shape()
        )));
    }
    let f = x.data.dim(0);
    let mut out = vec![T::zero(); f * spec.length];
    let mut seen = vec![0usize; spec.length];
    for fi in 0..f {
        seen.iter_mut().for_each(|n| *n = 0);
        let orow = &mut out[fi * spec.length..(fi + 1) * spec.length];
        for s in 0..s_n {
            for c in 0..c_n {
                if let Some(t) = spec.frame(s, c) {
                    let v = x.data.data()[(fi * s_n + s) * c_n + c];
                    running_mean(&mut orow[t], &mut seen[t], v);
                }
            }
        }
    }
    Tensor::new(vec![f, spec.length], out)
}

/// Incremental mean; identical inputs reproduce themselves bit-exactly.
#[inline]
fn running_mean<T: Scalar>(acc: &mut T, n: &mut usize, v: T) {
    *n += 1;
    if *n == 1 {
        *acc = v;
    } else {
        *acc = *acc + (v - *acc) / T::cast(*n as f64);
    }
}

/// Frame-major windowing: `[T, F]` rows into `[S, C, F]`. Padded frames are
/// filled with `pad_row` (zeros when `None`).
pub fn unfold_frames<T: Scalar>(
    x: &[T],
    width: usize,
    spec: &ChunkSpec,
    pad_row: Option<&[T]>,
) -> Vec<T> {
    debug_assert_eq!(x.len(), spec.length * width);
    let (s_n, c_n) = (spec.n_chunks(), spec.chunk_size);
    let mut out = vec![T::zero(); s_n * c_n * width];
    for s in 0..s_n {
        for c in 0..c_n {
            let dst = &mut out[(s * c_n + c) * width..(s * c_n + c + 1) * width];
            match spec.frame(s, c) {
                Some(t) => dst.copy_from_slice(&x[t * width..(t + 1) * width]),
                None => {
                    if let Some(p) = pad_row {
                        dst.copy_from_slice(p);
                    }
                }
            }
        }
    }
    out
}

/// Frame-major overlap-add: `[S, C, F]` into `[T, F]`, averaging overlaps.
pub fn fold_frames<T: Scalar>(x: &[T], width: usize, spec: &ChunkSpec) -> Vec<T> {
    let (s_n, c_n) = (spec.n_chunks(), spec.chunk_size);
    debug_assert_eq!(x.len(), s_n * c_n * width);
    let mut out = vec![T::zero(); spec.length * width];
    let mut seen = vec![0usize; spec.length];
    for s in 0..s_n {
        for c in 0..c_n {
            if let Some(t) = spec.frame(s, c) {
                let src = &x[(s * c_n + c) * width..(s * c_n + c + 1) * width];
                let n = seen[t] + 1;
                seen[t] = n;
                let dst = &mut out[t * width..(t + 1) * width];
                for (d, &v) in dst.iter_mut().zip(src) {
                    let mut k = n - 1;
                    running_mean(d, &mut k, v);
                }
            }
        }
    }
    out
}

/// Adjoint of [`unfold_frames`]: sums window gradients back onto frames.
pub(crate) fn unfold_frames_adjoint<T: Scalar>(g: &[T], width: usize, spec: &ChunkSpec) -> Vec<T> {
    let (s_n, c_n) = (spec.n_chunks(), spec.chunk_size);
    let mut out = vec![T::zero(); spec.length * width];
    for s in 0..s_n {
        for c in 0..c_n {
            if let Some(t) = spec.frame(s, c) {
                let src = &g[(s * c_n + c) * width..(s * c_n + c + 1) * width];
                for (d, &v) in out[t * width..(t + 1) * width].iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`fold_frames`]: each window position receives its frame's
/// gradient divided by that frame's coverage.
pub(crate) fn fold_frames_adjoint<T: Scalar>(g: &[T], width: usize, spec: &ChunkSpec) -> Vec<T> {
    let (s_n, c_n) = (spec.n_chunks(), spec.chunk_size);
    let mut out = vec![T::zero(); s_n * c_n * width];
    for s in 0..s_n {
        for c in 0..c_n {
            if let Some(t) = spec.frame(s, c) {
                let inv = T::one() / T::cast(spec.coverage(t) as f64);
                let src = &g[t * width..(t + 1) * width];
                for (d, &v) in out[(s * c_n + c) * width..(s * c_n + c + 1) * width]
                    .iter_mut()
                    .zip(src)
                {
                    *d = v * inv;
                }
            }
        }
    }
    out
}

/// Windows a `1×T` utilization sequence into `1×S×C`; padded frames carry
/// the smallest level so they cost the least.
pub fn chunk_utilization(u: &[f64], levels: &[f64], spec: ChunkSpec) -> Result<Tensor<f64>> {
    spec.check()?;
    if u.len() != spec.length {
        return Err(Error::contract(format!(
            "utilization length {} differs from chunk spec length {}",
            u.len(),
            spec.length
        )));
    }
    if let Some(bad) = u.iter().find(|v| !levels.contains(v)) {
        return Err(Error::contract(format!(
            "utilization value {bad} is not a member of {levels:?}"
        )));
    }
    let min = levels.iter().copied().fold(f64::INFINITY, f64::min);
    let data = unfold_frames(u, 1, &spec, Some(&[min]));
    Tensor::new(vec![1, spec.n_chunks(), spec.chunk_size], data)
}
