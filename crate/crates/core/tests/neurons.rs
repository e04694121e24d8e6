use proptest::prelude::*;
use revsnn_core::neurons::{
    bptt_backward, if_step, lif_step, multistep_forward, reset_state, surrogate_grad, NeuronKind, NeuronParams, NeuronState,
};
use revsnn_core::{Precision, Tensor};

const P: Precision = Precision::F64;

fn scalar_state(v: f64, timesteps: usize) -> NeuronState {
    let mut s = NeuronState::new(timesteps);
    s.v = Some(Tensor::from_vec(vec![1], vec![v], P).unwrap());
    s
}

fn one(x: f64) -> Tensor {
    Tensor::from_vec(vec![1], vec![x], P).unwrap()
}

#[test]
fn lif_hand_traces() {
    let p = NeuronParams::lif();
    let mut s = NeuronState::new(1);
    let out = lif_step(&p, &mut s, &one(2.0)).unwrap();
    assert_eq!((out.hidden.data()[0], out.spikes.data()[0]), (1.0, 1.0));
    assert_eq!(s.v.as_ref().unwrap().data(), [0.0]);

    let mut s = scalar_state(0.5, 1);
    let out = lif_step(&p, &mut s, &one(0.2)).unwrap();
    assert!((out.hidden.data()[0] - 0.35).abs() < 1e-15);
    assert_eq!(out.spikes.data(), [0.0]);
    assert!((s.v.as_ref().unwrap().data()[0] - 0.35).abs() < 1e-15);
}

#[test]
fn if_hand_traces() {
    let p = NeuronParams::if_neuron();
    let mut s = scalar_state(0.5, 1);
    let out = if_step(&p, &mut s, &one(0.3)).unwrap();
    assert!((out.hidden.data()[0] - 0.8).abs() < 1e-15);
    assert_eq!(out.spikes.data(), [0.0]);

    let mut s = scalar_state(0.9, 1);
    let out = if_step(&p, &mut s, &one(0.3)).unwrap();
    assert!((out.hidden.data()[0] - 1.2).abs() < 1e-15);
    assert_eq!(out.spikes.data(), [1.0]);
    assert_eq!(s.v.as_ref().unwrap().data(), [0.0]);
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
fn if_two_step_trace() {
    let p = NeuronParams::if_neuron();
    let mut s = NeuronState::new(2);
    let out = multistep_forward(&p, &mut s, &Tensor::from_vec(vec![2, 1], vec![0.6, 0.6], P).unwrap()).unwrap();
    assert_eq!(out.spikes.data(), [0.0, 1.0]);
    assert!((out.hidden.data()[1] - 1.2).abs() < 1e-15);
}

#[test]
fn stepping_past_the_horizon_requires_a_reset() {
    let p = NeuronParams::lif();
    let mut s = NeuronState::new(1);
    lif_step(&p, &mut s, &one(0.1)).unwrap();
    assert!(lif_step(&p, &mut s, &one(0.1)).is_err());
    reset_state(&p, &mut s);
    assert!(lif_step(&p, &mut s, &one(0.1)).is_ok());
}

/// Reverse-time recursion for one neuron written out scalar by scalar:
/// dH[t] = g[t]·σ'(H[t]) + dV[t]·(1 − S[t]); dV[t−1] = dH[t]·leak;
/// dI[t] = dH[t]·gain.
fn reference_bptt(p: &NeuronParams, hidden: &[f64], grad: &[f64]) -> Vec<f64> {
    let (leak, gain) = match p.kind {
        NeuronKind::Lif => (1.0 - 1.0 / p.tau_m, 1.0 / p.tau_m),
        NeuronKind::If => (1.0, 1.0),
    };
    let mut out = vec![0.0; hidden.len()];
    let mut dv = 0.0;
    for t in (0..hidden.len()).rev() {
        let h = hidden[t];
        let s = if h >= p.v_th { 1.0 } else { 0.0 };
        let sg = if (h - p.v_th).abs() < p.surrogate_width / 2.0 { 1.0 / p.surrogate_width } else { 0.0 };
        let dh = grad[t] * sg + dv * (1.0 - s);
        out[t] = dh * gain;
        dv = dh * leak;
    }
    out
}

fn params(lif: bool) -> NeuronParams {
    if lif {
        NeuronParams::lif()
    } else {
        NeuronParams::if_neuron()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spikes_are_binary_and_reset_is_idempotent(
        lif in any::<bool>(),
        inputs in prop::collection::vec(-1.0f64..3.0, 1..9),
    ) {
        let p = params(lif);
        let steps = inputs.len();
        let x = Tensor::from_vec(vec![steps, 1], inputs, P).unwrap();
        let mut s = NeuronState::new(steps);
        let first = multistep_forward(&p, &mut s, &x).unwrap();
        prop_assert!(first.spikes.all_binary());
        for (h, sp) in first.hidden.data().iter().zip(first.spikes.data()) {
            prop_assert_eq!(*sp, if *h >= p.v_th { 1.0 } else { 0.0 });
        }
        reset_state(&p, &mut s);
        let once = s.clone();
        reset_state(&p, &mut s);
        prop_assert_eq!(&once, &s);
        prop_assert!(s.is_fresh());
        let again = multistep_forward(&p, &mut s, &x).unwrap();
        prop_assert_eq!(first, again);
    }

    #[test]
    fn bptt_matches_scalar_recursion(
        lif in any::<bool>(),
        pairs in prop::collection::vec((-1.0f64..3.0, -2.0f64..2.0), 1..9),
    ) {
        let p = params(lif);
        let steps = pairs.len();
        let (inputs, grads): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut s = NeuronState::new(steps);
        let out = multistep_forward(&p, &mut s, &Tensor::from_vec(vec![steps, 1], inputs, P).unwrap()).unwrap();
        let got = bptt_backward(&p, &out.hidden, &Tensor::from_vec(vec![steps, 1], grads.clone(), P).unwrap()).unwrap();
        let want = reference_bptt(&p, out.hidden.data(), &grads);
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}
