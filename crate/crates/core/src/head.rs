//! Cosine-softmax output layer.
//!
//! Scores are temperature-scaled cosines between the embedding and per-class
//! weight rows. While awake the rows are updated as running class means (no
//! backprop); during sleep the same rows and the temperature train by
//! gradient descent through the cross-entropy loss.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Lower bound for the learnable temperature; keeps tau > 0 under gradient
/// updates.
const TAU_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CosineHead {
    weights: Array2<f64>,
    counters: Vec<u64>,
    tau: f64,
}

/// Gradients for the head: weight rows plus the temperature.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub weights: Array2<f64>,
    pub tau: f64,
}

/// A possibly mixed training target: weight `lambda` on `class_a` and
/// `1 - lambda` on `class_b`. Plain labels use `lambda = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftLabel {
    pub class_a: usize,
    pub class_b: usize,
    pub lambda: f64,
}

impl SoftLabel {
    pub fn pure(class: usize) -> Self {
        Self { class_a: class, class_b: class, lambda: 1.0 }
    }
}

fn cosine(f: ArrayView1<f64>, z: ArrayView1<f64>) -> f64 {
    let nf = f.dot(&f).sqrt();
    let nz = z.dot(&z).sqrt();
    if nf == 0.0 || nz == 0.0 {
        // Freshly allocated classes have zero rows; define their cosine as 0.
        0.0
    } else {
        f.dot(&z) / (nf * nz)
    }
}

impl CosineHead {
    pub fn new(n_classes: usize, embed_dim: usize, tau: f64) -> Result<Self> {
        if n_classes == 0 || embed_dim == 0 {
            return Err(Error::Config("head needs n_classes and embed_dim >= 1".into()));
        }
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { weights: Array2::zeros((n_classes, embed_dim)), counters: vec![0; n_classes], tau })
    }

    pub fn from_parts(weights: Array2<f64>, counters: Vec<u64>, tau: f64) -> Result<Self> {
        if weights.nrows() != counters.len() {
            return Err(Error::Config("counter count must match class rows".into()));
        }
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        if !weights.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("head weights".into()));
        }
        Ok(Self { weights, counters, tau })
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub(crate) fn set_tau(&mut self, tau: f64) {
        self.tau = tau.max(TAU_FLOOR);
    }

    /// Cosine scores and softmax probabilities for one embedding.
    pub fn scores(&self, z: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        if z.len() != self.embed_dim() {
            return Err(Error::Config(format!(
                "embedding dim {} does not match head ({})",
                z.len(),
                self.embed_dim()
            )));
        }
        let a = Array1::from_iter(self.weights.rows().into_iter().map(|f| cosine(f, z)));
        let scaled = a.mapv(|v| v / self.tau);
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp = scaled.mapv(|v| (v - max).exp());
        let sum: f64 = exp.sum();
        Ok((a, exp / sum))
    }

    /// Predicted class: argmax score, lowest id on ties.
    pub fn predict(&self, z: ArrayView1<f64>) -> Result<usize> {
        self.predict_among(z, 0..self.n_classes())
    }

    /// Argmax restricted to `classes` (the usual seen-classes-so-far mask).
    pub fn predict_among(
        &self,
        z: ArrayView1<f64>,
        classes: impl IntoIterator<Item = usize>,
    ) -> Result<usize> {
        let (a, _) = self.scores(z)?;
        let mut best: Option<(usize, f64)> = None;
        let mut any_nonzero = false;
        for k in classes {
            if k >= self.n_classes() {
                return Err(Error::Usage(format!("class {k} out of range")));
            }
            let row = self.weights.row(k);
            if row.iter().any(|v| *v != 0.0) {
                any_nonzero = true;
            }
            if best.map_or(true, |(_, s)| a[k] > s) {
                best = Some((k, a[k]));
            }
        }
        let (k, _) = best.ok_or_else(|| Error::Usage("no classes to predict among".into()))?;
        if !any_nonzero {
            return Err(Error::Usage("all candidate class rows are zero".into()));
        }
        Ok(k)
    }

    /// Wake-phase running-mean update for one labeled embedding:
    /// `f_k <- (c_k f_k + z) / (c_k + 1)`, then `c_k <- c_k + 1`.
    pub fn online_update(&mut self, z: ArrayView1<f64>, label: usize) -> Result<()> {
        if label >= self.n_classes() {
            return Err(Error::Usage(format!(
                "label {label} outside allocated classes ({})",
                self.n_classes()
            )));
        }
        if z.len() != self.embed_dim() {
            return Err(Error::Config("embedding dim mismatch in online update".into()));
        }
        let c = self.counters[label] as f64;
        let mut row = self.weights.row_mut(label);
        for (w, zi) in row.iter_mut().zip(z.iter()) {
            *w = (c * *w + zi) / (c + 1.0);
        }
        self.counters[label] += 1;
        Ok(())
    }

    /// Mean cross-entropy over a batch with exact gradients for the weight
    /// rows, the temperature, and each input embedding.
    pub fn backward(
        &self,
        zs: &Array2<f64>,
        targets: &[SoftLabel],
    ) -> Result<(f64, HeadGrads, Array2<f64>)> {
        let batch = zs.nrows();
        if batch == 0 {
            return Err(Error::Usage("head backward on an empty batch".into()));
        }
        if targets.len() != batch {
            return Err(Error::Usage("targets length must match batch".into()));
        }
        if zs.ncols() != self.embed_dim() {
            return Err(Error::Config("embedding dim mismatch in head backward".into()));
        }
        let k_classes = self.n_classes();
        for t in targets {
            if t.class_a >= k_classes || t.class_b >= k_classes {
                return Err(Error::Usage("target class out of range".into()));
            }
            if !(0.0..=1.0).contains(&t.lambda) {
                return Err(Error::Usage(format!("lambda {} outside [0,1]", t.lambda)));
            }
        }

        let inv_b = 1.0 / batch as f64;
        let mut loss = 0.0;
        let mut w_grad = Array2::zeros(self.weights.raw_dim());
        let mut tau_grad = 0.0;
        let mut z_grad = Array2::zeros(zs.raw_dim());

        let row_norms: Vec<f64> =
            self.weights.rows().into_iter().map(|f| f.dot(&f).sqrt()).collect();

        for (i, target) in targets.iter().enumerate() {
            let z = zs.row(i);
            let nz = z.dot(&z).sqrt();
            let a = Array1::from_iter(self.weights.rows().into_iter().map(|f| cosine(f, z)));
            let scaled = a.mapv(|v| v / self.tau);
            let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = scaled.mapv(|v| (v - max).exp()).sum().ln() + max;

            let mut add_target = |k: usize, mass: f64| {
                if mass > 0.0 {
                    loss += -mass * (scaled[k] - logsum) * inv_b;
                }
            };
            if target.class_a == target.class_b {
                add_target(target.class_a, 1.0);
            } else {
                add_target(target.class_a, target.lambda);
                add_target(target.class_b, 1.0 - target.lambda);
            }

            for k in 0..k_classes {
                let p = (scaled[k] - logsum).exp();
                let mut t_k = 0.0;
                if k == target.class_a {
                    t_k += target.lambda;
                }
                if k == target.class_b {
                    t_k += 1.0 - target.lambda;
                }
                let ds = (p - t_k) * inv_b; // d(loss)/d(scaled_k)
                tau_grad += ds * (-a[k] / (self.tau * self.tau));
                let da = ds / self.tau;

                let nf = row_norms[k];
                if nf == 0.0 || nz == 0.0 {
                    continue; // guarded cosine is constant 0 here
                }
                let f = self.weights.row(k);
                let denom = nf * nz;
                for j in 0..self.embed_dim() {
                    w_grad[(k, j)] += da * (z[j] / denom - a[k] * f[j] / (nf * nf));
                    z_grad[(i, j)] += da * (f[j] / denom - a[k] * z[j] / (nz * nz));
                }
            }
        }

        if !loss.is_finite() {
            return Err(Error::NonFinite("head loss".into()));
        }
        Ok((loss, HeadGrads { weights: w_grad, tau: tau_grad }, z_grad))
    }
}
