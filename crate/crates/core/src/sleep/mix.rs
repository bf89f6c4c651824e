//! Latent-space mixup and cutmix: weighted combinations of reconstructed
//! tensors instead of raw images.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMode {
    Mixup,
    Cutmix,
}

/// A mixed tensor with the convex weight actually applied: the label carries
/// mass `lambda` on the first sample's class and `1 - lambda` on the second.
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub tensor: LatentTensor,
    pub lambda: f64,
}

pub fn mix_tensors(
    a: &LatentTensor,
    b: &LatentTensor,
    mode: MixMode,
    mixup_alpha: f64,
    cutmix_beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MixedSample> {
    if a.dims() != b.dims() {
        return Err(Error::Config(format!(
            "cannot mix tensors of dims {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    match mode {
        MixMode::Mixup => {
            let beta = Beta::new(mixup_alpha, mixup_alpha)
                .map_err(|e| Error::Config(format!("bad mixup alpha: {e}")))?;
            let lambda: f64 = beta.sample(rng);
            let data = a.data() * lambda + b.data() * (1.0 - lambda);
            Ok(MixedSample { tensor: LatentTensor::new(data)?, lambda })
        }
        MixMode::Cutmix => {
            let (r, s, _) = a.dims();
            let beta = Beta::new(cutmix_beta, cutmix_beta)
                .map_err(|e| Error::Config(format!("bad cutmix beta: {e}")))?;
            let lam_target: f64 = beta.sample(rng);
            let cut = (1.0 - lam_target).sqrt();
            let cut_h = (r as f64 * cut) as usize;
            let cut_w = (s as f64 * cut) as usize;
            let cy = rng.random_range(0..r);
            let cx = rng.random_range(0..s);
            let y1 = cy.saturating_sub(cut_h / 2);
            let y2 = (cy + cut_h / 2).min(r);
            let x1 = cx.saturating_sub(cut_w / 2);
            let x2 = (cx + cut_w / 2).min(s);

            let mut data = a.data().clone();
            for i in y1..y2 {
                for j in x1..x2 {
                    data.slice_mut(ndarray::s![i, j, ..])
                        .assign(&b.data().slice(ndarray::s![i, j, ..]));
                }
            }
            // Report the fraction actually kept from `a`, not the Beta draw.
            let area = (y2 - y1) * (x2 - x1);
            let lambda = 1.0 - area as f64 / (r * s) as f64;
            Ok(MixedSample { tensor: LatentTensor::new(data)?, lambda })
        }
    }
}
