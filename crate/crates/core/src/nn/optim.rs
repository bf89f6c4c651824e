//! SGD with momentum, weight decay, layer-wise LR decay, and the one-cycle
//! schedule used for every consolidation phase.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{CosineHead, HeadGrads};
use crate::nn::{Network, NetworkGrads};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-depth LR multiplier: layer at depth `i` trains at `base * decay^i`.
    pub layer_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { base_lr: 0.2, momentum: 0.9, weight_decay: 1e-5, layer_decay: 0.99 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OneCycleConfig {
    pub pct_start: f64,
    pub div_start: f64,
    pub div_final: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        Self { pct_start: 0.3, div_start: 25.0, div_final: 1e4 }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LrSchedule {
    /// Constant `base_lr` (used by the per-sample rehearsal mode).
    Fixed,
    OneCycle(OneCycleConfig),
}

fn cos_interp(from: f64, to: f64, t: f64) -> f64 {
    from + (to - from) * (1.0 - (std::f64::consts::PI * t).cos()) / 2.0
}

/// One-cycle LR at `step` of `total`: cosine warmup from `max_lr/div_start`
/// to `max_lr` over the first `pct_start` fraction of steps, then cosine
/// anneal down to `max_lr/div_final`.
pub fn onecycle_lr(step: usize, total: usize, max_lr: f64, cfg: &OneCycleConfig) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("one-cycle schedule needs total > 0 steps".into()));
    }
    if step > total {
        return Err(Error::Usage(format!("schedule step {step} past total {total}")));
    }
    let peak = cfg.pct_start * total as f64;
    let start_lr = max_lr / cfg.div_start;
    let final_lr = max_lr / cfg.div_final;
    let t = step as f64;
    if peak > 0.0 && t <= peak {
        Ok(cos_interp(start_lr, max_lr, t / peak))
    } else if peak >= total as f64 {
        Ok(max_lr)
    } else {
        Ok(cos_interp(max_lr, final_lr, (t - peak) / (total as f64 - peak)))
    }
}

struct ArrayMomentum {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

struct HeadMomentum {
    weight: Array2<f64>,
    tau: f64,
}

/// Momentum buffers plus schedule position for one training phase. Buffers
/// mirror the parameter arrays they were built for; when a cosine head is
/// attached it sits at depth 0 and network layers shift one step deeper.
pub struct OptimizerState {
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    pub step: usize,
    pub total_steps: usize,
    net_depth_offset: usize,
    layer_bufs: Vec<Option<ArrayMomentum>>,
    head_buf: Option<HeadMomentum>,
}

impl OptimizerState {
    pub fn for_network(net: &Network, sgd: SgdConfig, schedule: LrSchedule, total_steps: usize) -> Self {
        Self {
            sgd,
            schedule,
            step: 0,
            total_steps,
            net_depth_offset: 0,
            layer_bufs: Self::zero_bufs(net),
            head_buf: None,
        }
    }

    /// Joint training of network and head: the head is the output-adjacent
    /// parameter group (depth 0), so it trains at the full schedule LR.
    pub fn for_network_and_head(
        net: &Network,
        head: &CosineHead,
        sgd: SgdConfig,
        schedule: LrSchedule,
        total_steps: usize,
    ) -> Self {
        Self {
            sgd,
            schedule,
            step: 0,
            total_steps,
            net_depth_offset: 1,
            layer_bufs: Self::zero_bufs(net),
            head_buf: Some(HeadMomentum {
                weight: Array2::zeros(head.weights().raw_dim()),
                tau: 0.0,
            }),
        }
    }

    fn zero_bufs(net: &Network) -> Vec<Option<ArrayMomentum>> {
        net.params()
            .iter()
            .map(|p| {
                p.as_ref().map(|p| ArrayMomentum {
                    weight: Array2::zeros(p.weight.raw_dim()),
                    bias: Array1::zeros(p.bias.raw_dim()),
                })
            })
            .collect()
    }

    /// Schedule LR at the current step.
    pub fn schedule_lr(&self) -> Result<f64> {
        match self.schedule {
            LrSchedule::Fixed => Ok(self.sgd.base_lr),
            LrSchedule::OneCycle(cfg) => {
                onecycle_lr(self.step, self.total_steps, self.sgd.base_lr, &cfg)
            }
        }
    }

    /// Effective LR for a parameter group at `depth` (0 = output-adjacent).
    pub fn lr_at_depth(&self, depth: usize) -> Result<f64> {
        Ok(self.schedule_lr()? * self.sgd.layer_decay.powi(depth as i32))
    }
}

fn check_finite(name: &str, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("gradient for {name}")));
        }
    }
    Ok(())
}

/// v <- momentum*v + g + wd*theta; theta <- theta - lr*v, elementwise.
fn apply(param: &mut f64, buf: &mut f64, grad: f64, lr: f64, momentum: f64, wd: f64) {
    *buf = momentum * *buf + grad + wd * *param;
    *param -= lr * *buf;
}

fn update_network(
    net: &mut Network,
    state: &mut OptimizerState,
    grads: &NetworkGrads,
) -> Result<()> {
    let depths: Vec<Option<usize>> = net.depth_indices().to_vec();
    let (momentum, wd) = (state.sgd.momentum, state.sgd.weight_decay);
    for (li, grad) in grads.layers.iter().enumerate() {
        let Some(grad) = grad else { continue };
        check_finite(
            &format!("network layer {li}"),
            grad.weight.iter().chain(grad.bias.iter()).copied(),
        )?;
        let depth = depths[li].ok_or_else(|| {
            Error::Usage(format!("gradient supplied for non-trainable layer {li}"))
        })?;
        let lr = state.lr_at_depth(depth + state.net_depth_offset)?;
        let buf = state.layer_bufs[li].as_mut().expect("buffer mirrors params");
        let params = net.params_mut()[li].as_mut().expect("trainable layer");
        for (p, (b, g)) in params
            .weight
            .iter_mut()
            .zip(buf.weight.iter_mut().zip(grad.weight.iter()))
        {
            apply(p, b, *g, lr, momentum, wd);
        }
        for (p, (b, g)) in params
            .bias
            .iter_mut()
            .zip(buf.bias.iter_mut().zip(grad.bias.iter()))
        {
            apply(p, b, *g, lr, momentum, wd);
        }
    }
    Ok(())
}

/// One SGD step on network parameters only.
pub fn sgd_step(net: &mut Network, state: &mut OptimizerState, grads: &NetworkGrads) -> Result<()> {
    if state.step >= state.total_steps {
        return Err(Error::Usage(format!(
            "optimizer exhausted: step {} of {}",
            state.step, state.total_steps
        )));
    }
    if state.head_buf.is_some() {
        return Err(Error::Usage("state was built for joint net+head updates".into()));
    }
    update_network(net, state, grads)?;
    state.step += 1;
    net.bump_version();
    Ok(())
}

/// One SGD step on network and cosine head together (the sleep-phase update).
pub fn sgd_step_joint(
    net: &mut Network,
    head: &mut CosineHead,
    state: &mut OptimizerState,
    net_grads: &NetworkGrads,
    head_grads: &HeadGrads,
) -> Result<()> {
    if state.step >= state.total_steps {
        return Err(Error::Usage(format!(
            "optimizer exhausted: step {} of {}",
            state.step, state.total_steps
        )));
    }
    check_finite(
        "cosine head",
        head_grads.weights.iter().copied().chain([head_grads.tau]),
    )?;
    update_network(net, state, net_grads)?;

    let lr = state.lr_at_depth(0)?;
    let (momentum, wd) = (state.sgd.momentum, state.sgd.weight_decay);
    let buf = state
        .head_buf
        .as_mut()
        .ok_or_else(|| Error::Usage("state was built without a head slot".into()))?;
    {
        let weights = head.weights_mut();
        for (p, (b, g)) in weights
            .iter_mut()
            .zip(buf.weight.iter_mut().zip(head_grads.weights.iter()))
        {
            apply(p, b, *g, lr, momentum, wd);
        }
    }
    let mut tau = head.tau();
    apply(&mut tau, &mut buf.tau, head_grads.tau, lr, momentum, wd);
    head.set_tau(tau);

    state.step += 1;
    net.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerParams, LayerSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn one_param_net(w: f64) -> Network {
        Network::from_parts(
            vec![LayerSpec::global_avg_pool(), LayerSpec::dense(1, 1)],
            vec![
                None,
                Some(LayerParams { weight: array![[w]], bias: array![0.0] }),
            ],
        )
        .unwrap()
    }

    fn grads_of(net: &Network, w: f64, b: f64) -> NetworkGrads {
        let mut g = NetworkGrads::zeros_like(net);
        let lg = g.layers[1].as_mut().unwrap();
        lg.weight[(0, 0)] = w;
        lg.bias[0] = b;
        g
    }

    #[test]
    fn onecycle_endpoints_and_peak() {
        let cfg = OneCycleConfig::default();
        // step 0 -> max/div_start
        assert_abs_diff_eq!(onecycle_lr(0, 100, 0.2, &cfg).unwrap(), 0.008, epsilon = 1e-12);
        // peak at pct_start * total
        assert_abs_diff_eq!(onecycle_lr(30, 100, 0.2, &cfg).unwrap(), 0.2, epsilon = 1e-12);
        // end -> max/div_final
        assert_abs_diff_eq!(onecycle_lr(100, 100, 0.2, &cfg).unwrap(), 0.2 / 1e4, epsilon = 1e-15);
        assert!(onecycle_lr(0, 0, 0.2, &cfg).is_err());
        assert!(onecycle_lr(101, 100, 0.2, &cfg).is_err());
    }

    #[test]
    fn zero_grad_zero_wd_leaves_params_unchanged() {
        let mut net = one_param_net(0.7);
        let sgd = SgdConfig { weight_decay: 0.0, ..SgdConfig::default() };
        let mut state = OptimizerState::for_network(&net, sgd, LrSchedule::Fixed, 10);
        let grads = grads_of(&net, 0.0, 0.0);
        sgd_step(&mut net, &mut state, &grads).unwrap();
        assert_abs_diff_eq!(net.params()[1].as_ref().unwrap().weight[(0, 0)], 0.7);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn layer_decay_matches_closed_form_at_peak() {
        let net = one_param_net(0.0);
        let state = OptimizerState::for_network(
            &net,
            SgdConfig::default(),
            LrSchedule::OneCycle(OneCycleConfig::default()),
            100,
        );
        let mut state = state;
        state.step = 30; // schedule peak
        assert_abs_diff_eq!(state.lr_at_depth(1).unwrap(), 0.198, epsilon = 1e-12);
    }

    #[test]
    fn momentum_unrolls_as_expected() {
        // lr 1, wd 0, momentum 0.9, constant grad g: total delta after two
        // steps is -(g + (0.9 g + g)) = -2.9 g.
        let g = 0.31;
        let mut net = one_param_net(1.0);
        let sgd = SgdConfig { base_lr: 1.0, momentum: 0.9, weight_decay: 0.0, layer_decay: 1.0 };
        let mut state = OptimizerState::for_network(&net, sgd, LrSchedule::Fixed, 10);
        let grads = grads_of(&net, g, 0.0);
        sgd_step(&mut net, &mut state, &grads).unwrap();
        sgd_step(&mut net, &mut state, &grads).unwrap();
        let w = net.params()[1].as_ref().unwrap().weight[(0, 0)];
        assert_abs_diff_eq!(w, 1.0 - 2.9 * g, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut net = one_param_net(1.0);
        let mut state =
            OptimizerState::for_network(&net, SgdConfig::default(), LrSchedule::Fixed, 10);
        let grads = grads_of(&net, f64::NAN, 0.0);
        assert!(matches!(
            sgd_step(&mut net, &mut state, &grads),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn effective_lr_non_increasing_in_depth() {
        let net = one_param_net(1.0);
        let state = OptimizerState::for_network(
            &net,
            SgdConfig::default(),
            LrSchedule::OneCycle(OneCycleConfig::default()),
            50,
        );
        let mut last = f64::INFINITY;
        for depth in 0..8 {
            let lr = state.lr_at_depth(depth).unwrap();
            assert!(lr <= last);
            last = lr;
        }
    }
}
