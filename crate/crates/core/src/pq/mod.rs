//! Product quantization of the d-dimensional channel vectors inside latent
//! tensors.
//!
//! A vector is split into `n_codebooks` contiguous subvectors; each subspace
//! quantizes against its own k-means codebook and stores a single byte code.
//! An optional learned orthogonal rotation (applied before splitting) can be
//! fitted to reduce quantization error.

mod kmeans;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::LatentTensor;

pub use kmeans::{kmeans, KMeansFit};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PqConfig {
    pub n_codebooks: usize,
    pub codebook_size: usize,
    pub kmeans_iters: usize,
    pub restarts: usize,
}

impl Default for PqConfig {
    fn default() -> Self {
        Self { n_codebooks: 8, codebook_size: 256, kmeans_iters: 25, restarts: 3 }
    }
}

/// A fitted product quantizer. Immutable once fitted; freely shared.
#[derive(Debug, Clone)]
pub struct PqCodec {
    n_codebooks: usize,
    codebook_size: usize,
    dim: usize,
    sub_dim: usize,
    /// One `codebook_size x sub_dim` matrix per subspace.
    codebooks: Vec<Array2<f64>>,
    rotation: Option<Array2<f64>>,
}

/// A compressed latent tensor: one byte per (position, codebook) plus the
/// class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTensor {
    pub codes: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    pub n_codebooks: usize,
    pub label: u32,
}

impl EncodedTensor {
    /// Exact storage cost: one byte per code plus a 4-byte label.
    pub fn stored_bytes(&self) -> usize {
        self.codes.len() + 4
    }
}

impl PqCodec {
    /// Fit one codebook per subspace with restarted, seeded k-means
    /// (best-of-`restarts` by objective). `vectors` is `N x d`.
    pub fn fit(config: &PqConfig, vectors: ArrayView2<f64>, seed: u64) -> Result<Self> {
        let dim = vectors.ncols();
        Self::check_config(config, dim)?;
        if vectors.nrows() < config.codebook_size {
            return Err(Error::Config(format!(
                "need at least codebook_size ({}) vectors, got {}",
                config.codebook_size,
                vectors.nrows()
            )));
        }
        let sub_dim = dim / config.n_codebooks;

        // Subspaces are independent: fit them in parallel, each restart on
        // its own derived seed so thread scheduling cannot change results.
        let codebooks: Vec<Array2<f64>> = (0..config.n_codebooks)
            .into_par_iter()
            .map(|m| {
                let sub = vectors.slice(ndarray::s![.., m * sub_dim..(m + 1) * sub_dim]);
                let mut best: Option<KMeansFit> = None;
                for restart in 0..config.restarts.max(1) {
                    let sub_seed = rng::derive(seed, (m * 1000 + restart) as u64);
                    let fit = kmeans(
                        sub,
                        config.codebook_size,
                        config.kmeans_iters,
                        &mut rng::seeded(sub_seed),
                    );
                    if best.as_ref().map_or(true, |b| fit.objective < b.objective) {
                        best = Some(fit);
                    }
                }
                best.expect("at least one restart").centroids
            })
            .collect();

        Ok(Self {
            n_codebooks: config.n_codebooks,
            codebook_size: config.codebook_size,
            dim,
            sub_dim,
            codebooks,
            rotation: None,
        })
    }

    fn check_config(config: &PqConfig, dim: usize) -> Result<()> {
        if config.n_codebooks == 0 || dim == 0 || dim % config.n_codebooks != 0 {
            return Err(Error::Config(format!(
                "channel dim {dim} not divisible into {} codebooks",
                config.n_codebooks
            )));
        }
        if config.codebook_size == 0 || config.codebook_size > 256 {
            return Err(Error::Config(format!(
                "codebook_size must be in 1..=256 (codes are single bytes), got {}",
                config.codebook_size
            )));
        }
        Ok(())
    }

    pub fn n_codebooks(&self) -> usize {
        self.n_codebooks
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn codebooks(&self) -> &[Array2<f64>] {
        &self.codebooks
    }

    pub fn rotation(&self) -> Option<&Array2<f64>> {
        self.rotation.as_ref()
    }

    /// Storage cost of one encoded `r x s` tensor.
    pub fn encoded_bytes(&self, r: usize, s: usize) -> usize {
        r * s * self.n_codebooks + 4
    }

    fn rotate_forward(&self, v: &[f64]) -> Vec<f64> {
        match &self.rotation {
            None => v.to_vec(),
            Some(rot) => {
                let x = Array1::from(v.to_vec());
                x.dot(rot).to_vec()
            }
        }
    }

    fn rotate_back(&self, v: Vec<f64>) -> Vec<f64> {
        match &self.rotation {
            None => v,
            Some(rot) => {
                let x = Array1::from(v);
                x.dot(&rot.t()).to_vec()
            }
        }
    }

    fn encode_vector(&self, v: &[f64], out: &mut [u8]) {
        let rotated = self.rotate_forward(v);
        for (m, code) in out.iter_mut().enumerate() {
            let sub = &rotated[m * self.sub_dim..(m + 1) * self.sub_dim];
            let (idx, _) = kmeans::nearest(&self.codebooks[m], sub);
            *code = idx as u8;
        }
    }

    fn decode_codes(&self, codes: &[u8]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for (m, &code) in codes.iter().enumerate() {
            if code as usize >= self.codebook_size {
                return Err(Error::Data(format!(
                    "code {code} out of range for codebook size {}",
                    self.codebook_size
                )));
            }
            let c = self.codebooks[m].row(code as usize);
            v[m * self.sub_dim..(m + 1) * self.sub_dim]
                .copy_from_slice(c.as_slice().unwrap());
        }
        Ok(self.rotate_back(v))
    }

    /// Compress a latent tensor position by position.
    pub fn encode(&self, tensor: &LatentTensor, label: u32) -> Result<EncodedTensor> {
        let (r, s, d) = tensor.dims();
        if d != self.dim {
            return Err(Error::Config(format!(
                "tensor channel dim {d} does not match codec dim {}",
                self.dim
            )));
        }
        let mut codes = vec![0u8; r * s * self.n_codebooks];
        for i in 0..r {
            for j in 0..s {
                let v = tensor.data().slice(ndarray::s![i, j, ..]);
                let at = (i * s + j) * self.n_codebooks;
                self.encode_vector(
                    v.as_slice().unwrap(),
                    &mut codes[at..at + self.n_codebooks],
                );
            }
        }
        Ok(EncodedTensor { codes, rows: r, cols: s, n_codebooks: self.n_codebooks, label })
    }

    /// Reconstruct a tensor from its codes (concatenated centroids, then the
    /// inverse rotation if one is fitted).
    pub fn decode(&self, enc: &EncodedTensor) -> Result<LatentTensor> {
        if enc.n_codebooks != self.n_codebooks {
            return Err(Error::Data("encoded tensor does not match codec layout".into()));
        }
        let (r, s) = (enc.rows, enc.cols);
        let mut data = Array3::zeros((r, s, self.dim));
        for i in 0..r {
            for j in 0..s {
                let at = (i * s + j) * self.n_codebooks;
                let v = self.decode_codes(&enc.codes[at..at + self.n_codebooks])?;
                for (c, val) in v.into_iter().enumerate() {
                    data[(i, j, c)] = val;
                }
            }
        }
        LatentTensor::new(data)
    }

    /// Mean squared reconstruction error per vector over `N x d` rows.
    pub fn quantization_error(&self, vectors: ArrayView2<f64>) -> Result<f64> {
        if vectors.ncols() != self.dim {
            return Err(Error::Config("vector dim does not match codec".into()));
        }
        if vectors.nrows() == 0 {
            return Ok(0.0);
        }
        let mut codes = vec![0u8; self.n_codebooks];
        let mut total = 0.0;
        for row in vectors.rows() {
            let v = row.as_slice().unwrap();
            self.encode_vector(v, &mut codes);
            let rec = self.decode_codes(&codes)?;
            total += v.iter().zip(&rec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / vectors.nrows() as f64)
    }

    /// Alternating refinement of an orthogonal input rotation and the
    /// codebooks. Keeps whichever (rotation, codebooks) state had the lowest
    /// training error, so the result is never worse than the unrotated fit.
    pub fn fit_rotation(mut self, vectors: ArrayView2<f64>, iterations: usize) -> Result<Self> {
        if vectors.ncols() != self.dim {
            return Err(Error::Config("vector dim does not match codec".into()));
        }
        let n = vectors.nrows();
        let d = self.dim;
        let mut rotation = self.rotation.clone().unwrap_or_else(|| Array2::eye(d));

        let mut best_err = self.quantization_error(vectors)?;
        let mut best_state = (rotation.clone(), self.codebooks.clone());

        for _ in 0..iterations {
            let rotated = vectors.dot(&rotation);

            // Re-assign codes and recentre each codebook in the rotated space.
            let mut reconstructed = Array2::zeros((n, d));
            for m in 0..self.n_codebooks {
                let cols = m * self.sub_dim..(m + 1) * self.sub_dim;
                let sub = rotated.slice(ndarray::s![.., cols.clone()]);
                let mut sums = Array2::<f64>::zeros((self.codebook_size, self.sub_dim));
                let mut counts = vec![0usize; self.codebook_size];
                let mut assign = vec![0usize; n];
                for (i, row) in sub.rows().into_iter().enumerate() {
                    let (idx, _) = kmeans::nearest(&self.codebooks[m], row.as_slice().unwrap());
                    assign[i] = idx;
                    counts[idx] += 1;
                    let mut srow = sums.row_mut(idx);
                    srow += &row;
                }
                for c in 0..self.codebook_size {
                    if counts[c] > 0 {
                        let mut row = self.codebooks[m].row_mut(c);
                        row.assign(&(&sums.row(c) / counts[c] as f64));
                    }
                }
                for (i, &a) in assign.iter().enumerate() {
                    // Nearest centroid may have shifted; use the updated one.
                    let (idx, _) = kmeans::nearest(
                        &self.codebooks[m],
                        sub.row(i).as_slice().unwrap(),
                    );
                    let _ = a;
                    reconstructed
                        .slice_mut(ndarray::s![i, cols.clone()])
                        .assign(&self.codebooks[m].row(idx));
                }
            }

            // Procrustes step: rotation minimizing |X R - X_hat|_F.
            let m = vectors.t().dot(&reconstructed);
            match procrustes(&m) {
                Some(r) => rotation = r,
                None => rotation = Array2::eye(d), // degenerate data: reset
            }

            self.rotation = Some(rotation.clone());
            let err = self.quantization_error(vectors)?;
            if err < best_err {
                best_err = err;
                best_state = (rotation.clone(), self.codebooks.clone());
            }
        }

        self.rotation = Some(best_state.0);
        self.codebooks = best_state.1;
        Ok(self)
    }
}

/// Orthogonal factor of `m` via SVD (`U V^T`). `None` when the SVD fails to
/// converge on degenerate input.
fn procrustes(m: &Array2<f64>) -> Option<Array2<f64>> {
    let d = m.nrows();
    let nm = nalgebra::DMatrix::from_row_iterator(d, d, m.iter().copied());
    let svd = nm.try_svd(true, true, 1e-12, 1000)?;
    let u = svd.u?;
    let v_t = svd.v_t?;
    let r = u * v_t;
    Some(Array2::from_shape_fn((d, d), |(i, j)| r[(i, j)]))
}

// ---------------------------------------------------------------------------
// Codec file format: four u32 LE header fields (n_codebooks, codebook_size,
// d, rotation flag) followed by little-endian f64 codebooks in subspace
// order (each codebook_size x sub_dim, row-major), then the d x d rotation
// row-major when the flag is 1.
// ---------------------------------------------------------------------------

impl PqCodec {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend((self.n_codebooks as u32).to_le_bytes());
        out.extend((self.codebook_size as u32).to_le_bytes());
        out.extend((self.dim as u32).to_le_bytes());
        out.extend((self.rotation.is_some() as u32).to_le_bytes());
        for cb in &self.codebooks {
            for v in cb.iter() {
                out.extend(v.to_le_bytes());
            }
        }
        if let Some(rot) = &self.rotation {
            for v in rot.iter() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0usize;
        let mut read_u32 = |bytes: &[u8]| -> Result<u32> {
            let end = at + 4;
            let chunk = bytes
                .get(at..end)
                .ok_or_else(|| Error::Data("codec file truncated in header".into()))?;
            at = end;
            Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
        };
        let n_codebooks = read_u32(bytes)? as usize;
        let codebook_size = read_u32(bytes)? as usize;
        let dim = read_u32(bytes)? as usize;
        let rotation_flag = read_u32(bytes)?;

        if n_codebooks == 0 || dim == 0 || dim % n_codebooks != 0 {
            return Err(Error::Data("codec header has inconsistent dims".into()));
        }
        if codebook_size == 0 || codebook_size > 256 {
            return Err(Error::Data("codec header codebook_size out of range".into()));
        }
        let sub_dim = dim / n_codebooks;

        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let end = at + count * 8;
            let chunk = bytes
                .get(at..end)
                .ok_or_else(|| Error::Data("codec file truncated in payload".into()))?;
            at = end;
            Ok(chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };

        let mut codebooks = Vec::with_capacity(n_codebooks);
        for _ in 0..n_codebooks {
            let vals = read_f64s(codebook_size * sub_dim)?;
            codebooks.push(Array2::from_shape_vec((codebook_size, sub_dim), vals).unwrap());
        }
        let rotation = if rotation_flag == 1 {
            let vals = read_f64s(dim * dim)?;
            Some(Array2::from_shape_vec((dim, dim), vals).unwrap())
        } else {
            None
        };
        if at != bytes.len() {
            return Err(Error::Data("codec file has trailing bytes".into()));
        }
        Ok(Self { n_codebooks, codebook_size, dim, sub_dim, codebooks, rotation })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Test/seed constructor from explicit codebooks.
    pub fn from_codebooks(codebooks: Vec<Array2<f64>>, rotation: Option<Array2<f64>>) -> Result<Self> {
        if codebooks.is_empty() {
            return Err(Error::Config("codec needs at least one codebook".into()));
        }
        let codebook_size = codebooks[0].nrows();
        let sub_dim = codebooks[0].ncols();
        if codebooks.iter().any(|c| c.dim() != (codebook_size, sub_dim)) {
            return Err(Error::Config("codebook shapes must agree".into()));
        }
        if codebook_size > 256 {
            return Err(Error::Config("codebook_size must be <= 256".into()));
        }
        let n_codebooks = codebooks.len();
        let dim = n_codebooks * sub_dim;
        if let Some(rot) = &rotation {
            if rot.dim() != (dim, dim) {
                return Err(Error::Config("rotation must be d x d".into()));
            }
        }
        Ok(Self { n_codebooks, codebook_size, dim, sub_dim, codebooks, rotation })
    }
}
