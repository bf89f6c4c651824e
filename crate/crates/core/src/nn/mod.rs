//! Minimal differentiable network for the trainable top layers.
//!
//! Four layer kinds are supported: pointwise (1x1) convolutions and GELU on
//! the tensor-shaped stage, a single global average pool, then dense layers
//! on the vector stage. Forward keeps an activation tape sufficient for
//! exact backpropagation; there is no general autodiff.

pub mod checkpoint;
pub mod optim;

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    PointwiseConv,
    GlobalAvgPool,
    Gelu,
}

/// Shape declaration for one layer. `in_dim`/`out_dim` are only present for
/// the trainable kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: Option<usize>,
    pub out_dim: Option<usize>,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        Self { kind: LayerKind::Dense, in_dim: Some(in_dim), out_dim: Some(out_dim) }
    }

    pub fn pointwise_conv(in_dim: usize, out_dim: usize) -> Self {
        Self { kind: LayerKind::PointwiseConv, in_dim: Some(in_dim), out_dim: Some(out_dim) }
    }

    pub fn global_avg_pool() -> Self {
        Self { kind: LayerKind::GlobalAvgPool, in_dim: None, out_dim: None }
    }

    pub fn gelu() -> Self {
        Self { kind: LayerKind::Gelu, in_dim: None, out_dim: None }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.kind, LayerKind::Dense | LayerKind::PointwiseConv)
    }
}

/// Parameters of one trainable layer: `weight` is `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients mirroring [`LayerParams`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Per-layer parameter gradients; `None` for non-trainable layers.
#[derive(Debug, Clone)]
pub struct NetworkGrads {
    pub layers: Vec<Option<LayerGrads>>,
}

impl NetworkGrads {
    pub fn zeros_like(net: &Network) -> Self {
        let layers = net
            .params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| LayerGrads {
                    weight: Array2::zeros(p.weight.raw_dim()),
                    bias: Array1::zeros(p.bias.raw_dim()),
                })
            })
            .collect();
        Self { layers }
    }
}

/// The trainable top-layer stack. Layers are stored input-to-output;
/// `depth_index` counts trainable layers from the output side (0 is the
/// output-adjacent trainable layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    specs: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    depth_index: Vec<Option<usize>>,
    input_dim: usize,
    embed_dim: usize,
    version: u64,
}

/// Activation record from one forward pass. `inputs[i]` is the input to
/// layer `i` in the flattened row representation.
pub struct ForwardTape {
    inputs: Vec<Stage>,
    n_samples: usize,
    version: u64,
}

#[derive(Clone)]
struct Stage {
    rows: Array2<f64>,
    rows_per_sample: usize,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Network {
    /// Build a network from layer specs with Kaiming fan-in init (seeded).
    pub fn new(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_specs(&specs)?;
        let mut rng = rng::seeded(seed);
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            if spec.is_trainable() {
                let (in_dim, out_dim) = (spec.in_dim.unwrap(), spec.out_dim.unwrap());
                let std = (2.0 / in_dim as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid normal");
                let weight =
                    Array2::from_shape_fn((out_dim, in_dim), |_| normal.sample(&mut rng));
                params.push(Some(LayerParams { weight, bias: Array1::zeros(out_dim) }));
            } else {
                params.push(None);
            }
        }
        Self::from_parts(specs, params)
    }

    /// Assemble a network from explicit parameters (checkpoint load, tests).
    pub fn from_parts(specs: Vec<LayerSpec>, params: Vec<Option<LayerParams>>) -> Result<Self> {
        validate_specs(&specs)?;
        if specs.len() != params.len() {
            return Err(Error::Config("specs/params length mismatch".into()));
        }
        for (spec, p) in specs.iter().zip(&params) {
            match (spec.is_trainable(), p) {
                (true, Some(p)) => {
                    let (in_dim, out_dim) = (spec.in_dim.unwrap(), spec.out_dim.unwrap());
                    if p.weight.dim() != (out_dim, in_dim) || p.bias.len() != out_dim {
                        return Err(Error::Config(format!(
                            "parameter shape {:?} does not match spec {}x{}",
                            p.weight.dim(),
                            out_dim,
                            in_dim
                        )));
                    }
                    if !p.weight.iter().chain(p.bias.iter()).all(|v| v.is_finite()) {
                        return Err(Error::NonFinite("network parameters".into()));
                    }
                }
                (false, None) => {}
                _ => return Err(Error::Config("trainable flag / params mismatch".into())),
            }
        }

        let mut depth_index = vec![None; specs.len()];
        let mut depth = 0usize;
        for (i, spec) in specs.iter().enumerate().rev() {
            if spec.is_trainable() {
                depth_index[i] = Some(depth);
                depth += 1;
            }
        }

        let (input_dim, embed_dim) = chain_dims(&specs)?;
        Ok(Self { specs, params, depth_index, input_dim, embed_dim, version: 0 })
    }

    /// Default desk-scale stack: conv(d -> mult*d), gelu, pool,
    /// dense(mult*d -> e), gelu, dense(e -> e).
    pub fn default_stack(channel_dim: usize, hidden_multiplier: usize, embed_dim: usize) -> Vec<LayerSpec> {
        let hidden = channel_dim * hidden_multiplier;
        vec![
            LayerSpec::pointwise_conv(channel_dim, hidden),
            LayerSpec::gelu(),
            LayerSpec::global_avg_pool(),
            LayerSpec::dense(hidden, embed_dim),
            LayerSpec::gelu(),
            LayerSpec::dense(embed_dim, embed_dim),
        ]
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    pub fn depth_indices(&self) -> &[Option<usize>] {
        &self.depth_index
    }

    /// Channel dimension the input tensors must have.
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Dimension of the output embedding.
    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn n_trainable(&self) -> usize {
        self.specs.iter().filter(|s| s.is_trainable()).count()
    }

    /// Forward a batch of latent tensors to embeddings, recording the tape.
    pub fn forward(&self, batch: &[LatentTensor]) -> Result<(Array2<f64>, ForwardTape)> {
        if batch.is_empty() {
            return Err(Error::Usage("forward called with an empty batch".into()));
        }
        let dims = batch[0].dims();
        if batch.iter().any(|t| t.dims() != dims) {
            return Err(Error::Config("batch tensors have mixed dims".into()));
        }
        let (r, s, d) = dims;
        if d != self.input_dim {
            return Err(Error::Config(format!(
                "tensor channel dim {d} does not match first layer ({})",
                self.input_dim
            )));
        }

        let n = batch.len();
        let positions = r * s;
        let mut rows = Array2::zeros((n * positions, d));
        for (b, t) in batch.iter().enumerate() {
            for i in 0..r {
                for j in 0..s {
                    for c in 0..d {
                        rows[(b * positions + i * s + j, c)] = t.data()[(i, j, c)];
                    }
                }
            }
        }

        let mut stage = Stage { rows, rows_per_sample: positions };
        let mut inputs = Vec::with_capacity(self.specs.len());
        for (spec, params) in self.specs.iter().zip(&self.params) {
            inputs.push(stage.clone());
            stage = apply_layer(spec, params.as_ref(), &stage)?;
        }
        debug_assert_eq!(stage.rows_per_sample, 1);
        let tape = ForwardTape { inputs, n_samples: n, version: self.version };
        Ok((stage.rows, tape))
    }

    /// Exact backprop through the tape. `output_grad` is d(loss)/d(embedding),
    /// shape `batch x e`. Returns parameter gradients; the gradient w.r.t. the
    /// network input is discarded (the extractor below is frozen).
    pub fn backward(&self, tape: &ForwardTape, output_grad: &Array2<f64>) -> Result<NetworkGrads> {
        if tape.version != self.version {
            return Err(Error::Usage(format!(
                "stale tape: network version {} vs tape version {}",
                self.version, tape.version
            )));
        }
        if output_grad.dim() != (tape.n_samples, self.embed_dim) {
            return Err(Error::Usage(format!(
                "output_grad shape {:?} does not match batch ({}, {})",
                output_grad.dim(),
                tape.n_samples,
                self.embed_dim
            )));
        }

        let mut grads: Vec<Option<LayerGrads>> = vec![None; self.specs.len()];
        let mut grad_rows = output_grad.clone();
        for i in (0..self.specs.len()).rev() {
            let input = &tape.inputs[i];
            match self.specs[i].kind {
                LayerKind::Dense | LayerKind::PointwiseConv => {
                    let p = self.params[i].as_ref().expect("trainable layer has params");
                    let weight_grad = grad_rows.t().dot(&input.rows);
                    let bias_grad = grad_rows.sum_axis(Axis(0));
                    let input_grad = grad_rows.dot(&p.weight);
                    grads[i] = Some(LayerGrads { weight: weight_grad, bias: bias_grad });
                    grad_rows = input_grad;
                }
                LayerKind::Gelu => {
                    grad_rows = &grad_rows * &input.rows.mapv(gelu_grad);
                }
                LayerKind::GlobalAvgPool => {
                    let per = input.rows_per_sample;
                    let scale = 1.0 / per as f64;
                    let mut expanded = Array2::zeros(input.rows.raw_dim());
                    for b in 0..tape.n_samples {
                        for k in 0..per {
                            for c in 0..input.rows.ncols() {
                                expanded[(b * per + k, c)] = grad_rows[(b, c)] * scale;
                            }
                        }
                    }
                    grad_rows = expanded;
                }
            }
        }
        Ok(NetworkGrads { layers: grads })
    }
}

fn apply_layer(spec: &LayerSpec, params: Option<&LayerParams>, input: &Stage) -> Result<Stage> {
    match spec.kind {
        LayerKind::Dense | LayerKind::PointwiseConv => {
            let p = params.expect("trainable layer has params");
            let mut out = input.rows.dot(&p.weight.t());
            out += &p.bias;
            Ok(Stage { rows: out, rows_per_sample: input.rows_per_sample })
        }
        LayerKind::Gelu => Ok(Stage {
            rows: input.rows.mapv(gelu),
            rows_per_sample: input.rows_per_sample,
        }),
        LayerKind::GlobalAvgPool => {
            let per = input.rows_per_sample;
            let n = input.rows.nrows() / per;
            let d = input.rows.ncols();
            let mut out = Array2::zeros((n, d));
            for b in 0..n {
                for k in 0..per {
                    for c in 0..d {
                        out[(b, c)] += input.rows[(b * per + k, c)];
                    }
                }
            }
            out.mapv_inplace(|v| v / per as f64);
            Ok(Stage { rows: out, rows_per_sample: 1 })
        }
    }
}

/// Walk the spec chain: dims must connect, exactly one pool, convs before it,
/// denses after it, at least one trainable layer.
fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    let pools = specs.iter().filter(|s| s.kind == LayerKind::GlobalAvgPool).count();
    if pools != 1 {
        return Err(Error::Config(format!(
            "exactly one global_avg_pool stage required, found {pools}"
        )));
    }
    if !specs.iter().any(|s| s.is_trainable()) {
        return Err(Error::Config("network needs at least one trainable layer".into()));
    }
    let pool_at = specs.iter().position(|s| s.kind == LayerKind::GlobalAvgPool).unwrap();
    for (i, spec) in specs.iter().enumerate() {
        match spec.kind {
            LayerKind::PointwiseConv if i > pool_at => {
                return Err(Error::Config("pointwise_conv after the pooling stage".into()))
            }
            LayerKind::Dense if i < pool_at => {
                return Err(Error::Config("dense layer before the pooling stage".into()))
            }
            _ => {}
        }
    }
    chain_dims(specs)?;
    Ok(())
}

/// Returns (input channel dim, output embedding dim) or a chaining error.
fn chain_dims(specs: &[LayerSpec]) -> Result<(usize, usize)> {
    let mut current: Option<usize> = None;
    let mut input_dim: Option<usize> = None;
    for spec in specs {
        if spec.is_trainable() {
            let in_dim = spec.in_dim.ok_or_else(|| Error::Config("missing in_dim".into()))?;
            let out_dim = spec.out_dim.ok_or_else(|| Error::Config("missing out_dim".into()))?;
            if in_dim == 0 || out_dim == 0 {
                return Err(Error::Config("layer dims must be positive".into()));
            }
            if let Some(cur) = current {
                if cur != in_dim {
                    return Err(Error::Config(format!(
                        "layer dims do not chain: {cur} -> {in_dim}"
                    )));
                }
            }
            input_dim.get_or_insert(in_dim);
            current = Some(out_dim);
        }
    }
    let out = current.expect("at least one trainable layer");
    // A leading gelu/pool before any trainable layer leaves the input dim
    // pinned by the first trainable layer; pool and gelu preserve it.
    Ok((input_dim.unwrap(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn tensor_from(vals: &[f64], r: usize, s: usize, d: usize) -> LatentTensor {
        LatentTensor::new(
            ndarray::Array3::from_shape_vec((r, s, d), vals.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_dense_passes_pooled_vector_through() {
        // pool then a dense with identity weights: embedding == pooled input
        let specs = vec![LayerSpec::global_avg_pool(), LayerSpec::dense(3, 3)];
        let params = vec![
            None,
            Some(LayerParams { weight: Array2::eye(3), bias: Array1::zeros(3) }),
        ];
        let net = Network::from_parts(specs, params).unwrap();
        let t = tensor_from(&[1.0, 2.0, 3.0, 3.0, 2.0, 1.0], 1, 2, 3);
        let (emb, _) = net.forward(&[t]).unwrap();
        assert_abs_diff_eq!(emb[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(emb[(0, 1)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(emb[(0, 2)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_input_through_zero_bias_stack_is_zero() {
        let net = Network::new(Network::default_stack(4, 2, 5), 9).unwrap();
        let t = LatentTensor::zeros(2, 3, 4);
        let (emb, _) = net.forward(&[t]).unwrap();
        // gelu(0) = 0 and biases start at zero
        for v in emb.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_matches_straight_line_reevaluation() {
        // Two-layer net re-evaluated with independent loop arithmetic.
        let specs = vec![LayerSpec::global_avg_pool(), LayerSpec::dense(2, 2), LayerSpec::dense(2, 1)];
        let w1 = array![[0.5, -1.0], [2.0, 0.25]];
        let b1 = array![0.1, -0.2];
        let w2 = array![[1.5, -0.5]];
        let b2 = array![0.05];
        let params = vec![
            None,
            Some(LayerParams { weight: w1.clone(), bias: b1.clone() }),
            Some(LayerParams { weight: w2.clone(), bias: b2.clone() }),
        ];
        let net = Network::from_parts(specs, params).unwrap();
        let t = tensor_from(&[0.3, 0.7, -0.5, 0.9], 2, 1, 2);
        let (emb, _) = net.forward(&[t]).unwrap();

        let pooled = [(0.3 - 0.5) / 2.0, (0.7 + 0.9) / 2.0];
        let mut h = [0.0f64; 2];
        for o in 0..2 {
            h[o] = b1[o] + w1[(o, 0)] * pooled[0] + w1[(o, 1)] * pooled[1];
        }
        let out = b2[0] + w2[(0, 0)] * h[0] + w2[(0, 1)] * h[1];
        assert_abs_diff_eq!(emb[(0, 0)], out, epsilon = 1e-12);
    }

    #[test]
    fn zero_output_grad_gives_zero_parameter_grads() {
        let net = Network::new(Network::default_stack(3, 2, 4), 1).unwrap();
        let t = LatentTensor::new(ndarray::Array3::from_shape_fn((2, 2, 3), |(i, j, k)| {
            (i + j + k) as f64 * 0.1
        }))
        .unwrap();
        let (emb, tape) = net.forward(&[t]).unwrap();
        let grads = net.backward(&tape, &Array2::zeros(emb.raw_dim())).unwrap();
        for g in grads.layers.iter().flatten() {
            assert!(g.weight.iter().all(|v| *v == 0.0));
            assert!(g.bias.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn single_dense_weight_grad_is_input() {
        // L = w . x for a 1-output dense on a pooled 1-position tensor.
        let specs = vec![LayerSpec::global_avg_pool(), LayerSpec::dense(3, 1)];
        let params = vec![
            None,
            Some(LayerParams { weight: Array2::zeros((1, 3)), bias: Array1::zeros(1) }),
        ];
        let net = Network::from_parts(specs, params).unwrap();
        let t = tensor_from(&[0.4, -0.6, 1.2], 1, 1, 3);
        let (_, tape) = net.forward(std::slice::from_ref(&t)).unwrap();
        let grads = net.backward(&tape, &array![[1.0]]).unwrap();
        let g = grads.layers[1].as_ref().unwrap();
        assert_abs_diff_eq!(g.weight[(0, 0)], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(g.weight[(0, 1)], -0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(g.weight[(0, 2)], 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(g.bias[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = Network::new(Network::default_stack(3, 2, 4), 1).unwrap();
        let t = LatentTensor::zeros(2, 2, 3);
        let (emb, tape) = net.forward(&[t]).unwrap();
        net.bump_version();
        let err = net.backward(&tape, &Array2::zeros(emb.raw_dim())).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn rejects_bad_stacks() {
        assert!(Network::new(vec![LayerSpec::gelu()], 0).is_err());
        assert!(Network::new(vec![LayerSpec::dense(2, 2)], 0).is_err()); // no pool
        assert!(Network::new(
            vec![LayerSpec::dense(2, 2), LayerSpec::global_avg_pool()],
            0
        )
        .is_err()); // dense before pool
        assert!(Network::new(
            vec![
                LayerSpec::pointwise_conv(2, 3),
                LayerSpec::global_avg_pool(),
                LayerSpec::dense(4, 2), // dims do not chain
            ],
            0
        )
        .is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::seeded(42);
        for _ in 0..10 {
            let net = Network::new(Network::default_stack(3, 2, 4), rng.random::<u64>()).unwrap();
            let batch: Vec<LatentTensor> = (0..2)
                .map(|_| {
                    LatentTensor::new(ndarray::Array3::from_shape_fn((2, 2, 3), |_| {
                        rng.random_range(-1.0..1.0)
                    }))
                    .unwrap()
                })
                .collect();
            let target: Array2<f64> =
                Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));

            // loss = 0.5 * sum((emb - target)^2); dL/demb = emb - target
            let (emb, tape) = net.forward(&batch).unwrap();
            let grads = net.backward(&tape, &(&emb - &target)).unwrap();

            let loss_of = |n: &Network| -> f64 {
                let (e, _) = n.forward(&batch).unwrap();
                0.5 * (&e - &target).mapv(|v| v * v).sum()
            };
            let h = 1e-4;
            for (li, g) in grads.layers.iter().enumerate() {
                let Some(g) = g else { continue };
                for (idx, &analytic) in g.weight.iter().enumerate() {
                    let (r, c) = (idx / g.weight.ncols(), idx % g.weight.ncols());
                    let mut plus = net.clone();
                    plus.params_mut()[li].as_mut().unwrap().weight[(r, c)] += h;
                    let mut minus = net.clone();
                    minus.params_mut()[li].as_mut().unwrap().weight[(r, c)] -= h;
                    let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                    let denom = analytic.abs().max(fd.abs()).max(1.0);
                    assert!(
                        ((analytic - fd) / denom).abs() < 1e-5,
                        "layer {li} weight ({r},{c}): analytic {analytic} vs fd {fd}"
                    );
                }
            }
        }
    }
}
