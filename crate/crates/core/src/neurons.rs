//! Multi-step LIF / IF neurons with hard reset and a rectangular surrogate.

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronKind {
    Lif,
    If,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub kind: NeuronKind,
    pub tau_m: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub surrogate_width: f64,
}

impl Default for NeuronParams {
    fn default() -> Self {
        NeuronParams {
            kind: NeuronKind::Lif,
            tau_m: 2.0,
            v_th: 1.0,
            v_reset: 0.0,
            surrogate_width: 1.0,
        }
    }
}

impl NeuronParams {
    pub fn lif() -> Self {
        Self::default()
    }

    pub fn if_neuron() -> Self {
        NeuronParams {
            kind: NeuronKind::If,
            ..Self::default()
        }
    }

    pub fn with_threshold(mut self, v_th: f64) -> Self {
        self.v_th = v_th;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m > 1.0) {
            return Err(Error::InvalidConfig(format!("tau_m must exceed 1, got {}", self.tau_m)));
        }
        if !(self.v_th > self.v_reset) {
            return Err(Error::InvalidConfig(format!(
                "v_th ({}) must exceed v_reset ({})",
                self.v_th, self.v_reset
            )));
        }
        if !(self.surrogate_width > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "surrogate_width must be positive, got {}",
                self.surrogate_width
            )));
        }
        Ok(())
    }

    /// Charge update before firing.
    #[inline]
    pub fn integrate(&self, v: f64, i: f64) -> f64 {
        match self.kind {
            NeuronKind::Lif => v + (i - (v - self.v_reset)) / self.tau_m,
            NeuronKind::If => v + i,
        }
    }

    /// ∂H[t]/∂V[t−1].
    #[inline]
    pub fn leak_factor(&self) -> f64 {
        match self.kind {
            NeuronKind::Lif => 1.0 - 1.0 / self.tau_m,
            NeuronKind::If => 1.0,
        }
    }

    /// ∂H[t]/∂I[t].
    #[inline]
    pub fn input_gain(&self) -> f64 {
        match self.kind {
            NeuronKind::Lif => 1.0 / self.tau_m,
            NeuronKind::If => 1.0,
        }
    }

    /// Heaviside with Θ(0) = 1.
    #[inline]
    pub fn fire(&self, h: f64) -> f64 {
        if h >= self.v_th {
            1.0
        } else {
            0.0
        }
    }

    #[inline]
    pub fn surrogate(&self, h: f64) -> f64 {
        let w = self.surrogate_width;
        if (h - self.v_th).abs() < w / 2.0 {
            1.0 / w
        } else {
            0.0
        }
    }

    /// Distance from `h` to the nearest discontinuity of the forward spike
    /// or of the surrogate window.
    #[inline]
    pub fn knife_edge_distance(&self, h: f64) -> f64 {
        let d = (h - self.v_th).abs();
        d.min((d - self.surrogate_width / 2.0).abs())
    }
}

/// Membrane state of one neuron layer.
///
/// `v` is `None` until the first step fixes the spatial shape; an absent
/// potential reads as `v_reset` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    pub v: Option<Tensor>,
    /// Pre-spike potential of the most recent step.
    pub h: Option<Tensor>,
    pub t: usize,
    pub timesteps: usize,
}

impl NeuronState {
    pub fn new(timesteps: usize) -> Self {
        NeuronState {
            v: None,
            h: None,
            t: 0,
            timesteps,
        }
    }

    pub fn is_fresh(&self) -> bool {
        self.t == 0
    }

    /// Membrane potential as a tensor of `shape`, materializing `v_reset`.
    pub fn potential(&self, params: &NeuronParams, shape: &[usize], precision: Precision) -> Tensor {
        match &self.v {
            Some(v) => v.clone(),
            None => Tensor::full(shape, params.v_reset, precision),
        }
    }
}

/// Puts the neuron back at its initial state. Idempotent.
/// The potential is dropped, so the next step may use any batch shape.
pub fn reset_state(_params: &NeuronParams, state: &mut NeuronState) {
    state.v = None;
    state.h = None;
    state.t = 0;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub spikes: Tensor,
    pub hidden: Tensor,
}

fn step(params: &NeuronParams, state: &mut NeuronState, input: &Tensor) -> Result<StepOutput> {
    if state.t >= state.timesteps {
        return Err(Error::UnresetState(format!(
            "time index {} reached the horizon T={} without a reset",
            state.t, state.timesteps
        )));
    }
    if let Some(v) = &state.v {
        if v.shape() != input.shape() {
            return Err(Error::dim(
                "neuron_step",
                "input",
                format!("{:?}", v.shape()),
                format!("{:?}", input.shape()),
            ));
        }
        v.check_precision(input, "neuron_step")?;
    }
    let p = input.precision();
    let v_prev = state.potential(params, input.shape(), p);
    let n = input.len();
    let mut h = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (&vp, &i) in v_prev.data().iter().zip(input.data()) {
        let hv = p.round(params.integrate(vp, i));
        let sv = params.fire(hv);
        h.push(hv);
        s.push(sv);
        v.push(hv * (1.0 - sv) + params.v_reset * sv);
    }
    let shape = input.shape().to_vec();
    let hidden = Tensor::from_vec(shape.clone(), h, p)?;
    state.v = Some(Tensor::from_vec(shape.clone(), v, p)?);
    state.h = Some(hidden.clone());
    state.t += 1;
    Ok(StepOutput {
        spikes: Tensor::from_vec(shape, s, p)?,
        hidden,
    })
}

/// One leaky integrate-and-fire step.
pub fn lif_step(params: &NeuronParams, state: &mut NeuronState, input: &Tensor) -> Result<StepOutput> {
    let p = NeuronParams {
        kind: NeuronKind::Lif,
        ..*params
    };
    step(&p, state, input)
}

/// One integrate-and-fire step (no leak).
pub fn if_step(params: &NeuronParams, state: &mut NeuronState, input: &Tensor) -> Result<StepOutput> {
    let p = NeuronParams {
        kind: NeuronKind::If,
        ..*params
    };
    step(&p, state, input)
}

/// Elementwise rectangular surrogate `(1/w)·[|H − V_th| < w/2]`.
pub fn surrogate_grad(params: &NeuronParams, hidden: &Tensor) -> Tensor {
    hidden.map(|h| params.surrogate(h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultistepOutput {
    /// `[L, ...]` spikes.
    pub spikes: Tensor,
    /// `[L, ...]` pre-spike potentials, kept for the backward pass.
    pub hidden: Tensor,
}

/// Steps the neuron over the leading (time) axis of `inputs`.
pub fn multistep_forward(params: &NeuronParams, state: &mut NeuronState, inputs: &Tensor) -> Result<MultistepOutput> {
    let steps = inputs.outer();
    if state.t + steps > state.timesteps {
        return Err(Error::UnresetState(format!(
            "{} more steps from t={} exceed T={}",
            steps, state.t, state.timesteps
        )));
    }
    let inner: Vec<usize> = inputs.shape()[1..].to_vec();
    let inner_n: usize = inner.iter().product();
    let p = inputs.precision();
    let mut spikes = Vec::with_capacity(inputs.len());
    let mut hidden = Vec::with_capacity(inputs.len());
    for t in 0..steps {
        let slice = &inputs.data()[t * inner_n..(t + 1) * inner_n];
        let it = Tensor::from_vec(inner.clone(), slice.to_vec(), p)?;
        let out = step(params, state, &it)?;
        spikes.extend_from_slice(out.spikes.data());
        hidden.extend_from_slice(out.hidden.data());
    }
    Ok(MultistepOutput {
        spikes: Tensor::from_vec(inputs.shape().to_vec(), spikes, p)?,
        hidden: Tensor::from_vec(inputs.shape().to_vec(), hidden, p)?,
    })
}

/// Backpropagation through time for one neuron layer.
///
/// `hidden` and `grad_spikes` are `[L, ...]`. The reset path treats the
/// spike as a constant: ∂V[t]/∂H[t] = 1 − S[t].
pub fn bptt_backward(params: &NeuronParams, hidden: &Tensor, grad_spikes: &Tensor) -> Result<Tensor> {
    if hidden.shape() != grad_spikes.shape() {
        return Err(Error::dim(
            "neuron_backward",
            "grad_spikes",
            format!("{:?}", hidden.shape()),
            format!("{:?}", grad_spikes.shape()),
        ));
    }
    let steps = hidden.outer();
    let inner = hidden.len() / steps;
    let (hd, gs) = (hidden.data(), grad_spikes.data());
    let mut gi = vec![0.0; hidden.len()];
    let mut dv = vec![0.0; inner];
    let (leak, gain) = (params.leak_factor(), params.input_gain());
    for t in (0..steps).rev() {
        for k in 0..inner {
            let idx = t * inner + k;
            let h = hd[idx];
            let dh = gs[idx] * params.surrogate(h) + dv[k] * (1.0 - params.fire(h));
            gi[idx] = dh * gain;
            dv[k] = dh * leak;
        }
    }
    Ok(hidden.with_data(hidden.shape().to_vec(), gi))
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: Precision = Precision::F64;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v, P)
    }

    fn state_at(v: f64) -> NeuronState {
        let mut s = NeuronState::new(8);
        s.v = Some(scalar(v));
        s
    }

    #[test]
    fn lif_fires_at_threshold() {
        let mut s = state_at(0.0);
        let out = lif_step(&NeuronParams::lif(), &mut s, &scalar(2.0)).unwrap();
        assert_eq!(out.hidden.data(), &[1.0]);
        assert_eq!(out.spikes.data(), &[1.0]);
        assert_eq!(s.v.unwrap().data(), &[0.0]);
    }

    #[test]
    fn lif_subthreshold_leak() {
        let mut s = state_at(0.5);
        let out = lif_step(&NeuronParams::lif(), &mut s, &scalar(0.2)).unwrap();
        assert!((out.hidden.data()[0] - 0.35).abs() < 1e-15);
        assert_eq!(out.spikes.data(), &[0.0]);
        assert!((s.v.unwrap().data()[0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn quiescent_neuron() {
        let mut s = state_at(0.0);
        let out = lif_step(&NeuronParams::lif(), &mut s, &scalar(0.0)).unwrap();
        assert_eq!((out.hidden.data()[0], out.spikes.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn if_integrates_without_leak() {
        let p = NeuronParams::if_neuron();
        let mut s = state_at(0.5);
        let out = if_step(&p, &mut s, &scalar(0.3)).unwrap();
        assert!((out.hidden.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(out.spikes.data(), &[0.0]);

        let mut s = state_at(0.9);
        let out = if_step(&p, &mut s, &scalar(0.3)).unwrap();
        assert!((out.hidden.data()[0] - 1.2).abs() < 1e-15);
        assert_eq!(out.spikes.data(), &[1.0]);
        assert_eq!(s.v.unwrap().data(), &[0.0]);

        let mut s = NeuronState::new(1);
        let out = if_step(&p, &mut s, &Tensor::zeros(&[3], P)).unwrap();
        assert!(out.spikes.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn step_shape_mismatch() {
        let mut s = state_at(0.0);
        let err = lif_step(&NeuronParams::lif(), &mut s, &Tensor::zeros(&[2], P)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn surrogate_window() {
        let p = NeuronParams::lif();
        let h = Tensor::from_vec(vec![4], vec![1.0, 2.0, 0.6, 1.4], P).unwrap();
        let g = surrogate_grad(&p, &h);
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[2], g.data()[3]);
    }

    #[test]
    fn two_step_if_trace() {
        let p = NeuronParams::if_neuron();
        let mut s = NeuronState::new(2);
        let i = Tensor::from_vec(vec![2, 1], vec![0.6, 0.6], P).unwrap();
        let out = multistep_forward(&p, &mut s, &i).unwrap();
        assert_eq!(out.spikes.data(), &[0.0, 1.0]);
        assert!((out.hidden.data()[1] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn multistep_zeros_and_single_step() {
        let p = NeuronParams::lif();
        let mut s = NeuronState::new(3);
        let out = multistep_forward(&p, &mut s, &Tensor::zeros(&[3, 2, 2], P)).unwrap();
        assert!(out.spikes.data().iter().all(|&x| x == 0.0));

        let x = Tensor::from_vec(vec![1, 2], vec![2.5, 0.4], P).unwrap();
        let mut a = NeuronState::new(1);
        let mut b = NeuronState::new(1);
        let ms = multistep_forward(&p, &mut a, &x).unwrap();
        let single = lif_step(&p, &mut b, &x.index0(0).unwrap()).unwrap();
        assert_eq!(ms.spikes.data(), single.spikes.data());
        assert_eq!(a, b);
    }

    #[test]
    fn horizon_requires_reset() {
        let p = NeuronParams::lif();
        let mut s = NeuronState::new(2);
        let x = Tensor::ones(&[2, 1], P);
        multistep_forward(&p, &mut s, &x).unwrap();
        assert!(matches!(multistep_forward(&p, &mut s, &x), Err(Error::UnresetState(_))));
        reset_state(&p, &mut s);
        assert!(multistep_forward(&p, &mut s, &x).is_ok());
    }

    #[test]
    fn reset_is_idempotent_and_replays_bit_exactly() {
        let p = NeuronParams::lif();
        let x = Tensor::from_vec(vec![4, 3], vec![0.3, 1.7, -0.2, 0.9, 0.8, 2.2, 1.1, 0.05, 0.6, 0.4, 1.3, 0.0], P).unwrap();
        let mut s = NeuronState::new(4);
        let first = multistep_forward(&p, &mut s, &x).unwrap();
        let after_first = s.clone();
        reset_state(&p, &mut s);
        assert_eq!(s.t, 0);
        assert!(s.potential(&p, &[3], P).data().iter().all(|&v| v == p.v_reset));
        let once = s.clone();
        reset_state(&p, &mut s);
        assert_eq!(s, once);
        let second = multistep_forward(&p, &mut s, &x).unwrap();
        assert_eq!(first, second);
        assert_eq!(s, after_first);
    }

    #[test]
    fn bptt_matches_hand_derivation() {
        // I = w·x with w = 1, x = (1.8, 0.6), LIF τ = 2, loss L = c1·S1 + c2·S2
        let p = NeuronParams::lif();
        let mut s = NeuronState::new(2);
        let i = Tensor::from_vec(vec![2, 1], vec![1.8, 0.6], P).unwrap();
        let out = multistep_forward(&p, &mut s, &i).unwrap();
        let (h1, h2) = (out.hidden.data()[0], out.hidden.data()[1]);
        assert!((h1 - 0.9).abs() < 1e-15 && (h2 - 0.75).abs() < 1e-15);
        let (c1, c2) = (0.7, -1.3);
        let g = bptt_backward(&p, &out.hidden, &Tensor::from_vec(vec![2, 1], vec![c1, c2], P).unwrap()).unwrap();
        // dL/dI2 = c2·σ'(H2)/τ ; dL/dI1 = c1·σ'(H1)/τ + c2·σ'(H2)·(1 − 1/τ)(1 − S1)/τ
        let e2 = c2 * 1.0 * 0.5;
        let e1 = c1 * 1.0 * 0.5 + c2 * 1.0 * 0.5 * 1.0 * 0.5;
        assert!((g.data()[1] - e2).abs() <= 1e-10 * e2.abs());
        assert!((g.data()[0] - e1).abs() <= 1e-10 * e1.abs());
    }

    #[test]
    fn params_validate() {
        assert!(NeuronParams::default().validate().is_ok());
        let bad = NeuronParams { tau_m: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = NeuronParams { v_th: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
