use ndarray::{Array1, Array3};

use crate::error::{Error, Result};

/// A mid-network feature tensor: `r x s` spatial positions, each a
/// `d`-dimensional channel vector. This is the unit of storage, rehearsal,
/// and augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    data: Array3<f64>,
}

impl LatentTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (r, s, d) = data.dim();
        if r == 0 || s == 0 || d == 0 {
            return Err(Error::Config(format!(
                "latent tensor dims must be >= 1, got {r}x{s}x{d}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent tensor contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(r: usize, s: usize, d: usize) -> Self {
        Self { data: Array3::zeros((r, s, d)) }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn channel_dim(&self) -> usize {
        self.data.dim().2
    }

    /// Number of spatial positions (`r * s`).
    pub fn positions(&self) -> usize {
        let (r, s, _) = self.data.dim();
        r * s
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    /// Channel vector at spatial position (i, j).
    pub fn vector_at(&self, i: usize, j: usize) -> Array1<f64> {
        self.data.slice(ndarray::s![i, j, ..]).to_owned()
    }
}
