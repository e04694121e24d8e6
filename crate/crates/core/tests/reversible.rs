use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use revsnn_core::layers::stub::{spike_probe, Identity};
use revsnn_core::layers::{MlpBlock, ModelRng, Module, ResidualFn, SsaBlock};
use revsnn_core::memtrack::Category;
use revsnn_core::neurons::NeuronParams;
use revsnn_core::reveng::{
    compare_block_tapes, oracle_step, rev_forward, rev_reverse, sequence_train_step, BlockTape, CouplingBlock,
    ReversibleSequence,
};
use revsnn_core::{ExecCtx, Precision, Result, Tensor};

const P: Precision = Precision::F64;
const KNIFE_EDGE: f64 = 1e-6;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ModelRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect(), P).unwrap()
}

fn grads(seq: &mut ReversibleSequence) -> Vec<f64> {
    let mut out = Vec::new();
    seq.visit_params(&mut |p| out.extend_from_slice(p.grad.data()));
    out
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, Copy)]
enum Body {
    Residual,
    Ssa,
    Mlp,
}

#[derive(Debug, Clone, Copy)]
struct Case {
    f: Body,
    g: Body,
    lif: bool,
    timesteps: usize,
    seed: u64,
}

impl Case {
    fn spatial(&self) -> bool {
        matches!(self.f, Body::Residual)
    }

    fn stream_shape(&self) -> Vec<usize> {
        if self.spatial() {
            vec![self.timesteps, 2, 3, 4, 4]
        } else {
            vec![self.timesteps, 2, 5, 8]
        }
    }

    fn body(&self, b: Body, rng: &mut ModelRng) -> Box<dyn Module> {
        let n = if self.lif { NeuronParams::lif() } else { NeuronParams::if_neuron() };
        match b {
            Body::Residual => Box::new(ResidualFn::new(3, n, self.timesteps, rng, P)),
            Body::Ssa => Box::new(SsaBlock::new(8, 2, n, self.timesteps, rng, P).unwrap()),
            Body::Mlp => Box::new(MlpBlock::new(8, 2, n, self.timesteps, rng, P)),
        }
    }

    fn block(&self, rng: &mut ModelRng) -> CouplingBlock {
        CouplingBlock {
            f: self.body(self.f, rng),
            g: self.body(self.g, rng),
        }
    }

    fn sequence(&self, depth: usize) -> ReversibleSequence {
        let mut rng = ModelRng::seed_from_u64(self.seed);
        ReversibleSequence::new((0..depth).map(|_| self.block(&mut rng)).collect())
    }

    fn inputs(&self) -> (Tensor, Tensor) {
        let mut rng = ModelRng::seed_from_u64(self.seed ^ 0x5eed);
        let s = self.stream_shape();
        (uniform(&s, -1.0, 2.0, &mut rng), uniform(&s, -1.0, 2.0, &mut rng))
    }
}

fn case_strategy() -> impl Strategy<Value = Case> {
    let bodies = prop_oneof![
        Just((Body::Residual, Body::Residual)),
        Just((Body::Ssa, Body::Mlp)),
        Just((Body::Mlp, Body::Ssa)),
        Just((Body::Ssa, Body::Ssa)),
    ];
    (bodies, any::<bool>(), prop_oneof![Just(1usize), Just(2), Just(4)], any::<u64>())
        .prop_map(|((f, g), lif, timesteps, seed)| Case { f, g, lif, timesteps, seed })
}

#[test]
fn identity_stub_coupling_by_hand() {
    let ctx = ExecCtx::new(P);
    let mut block = CouplingBlock::new(Identity, Identity);
    let one = |v: f64| Tensor::from_vec(vec![1, 1], vec![v], P).unwrap();
    let (y1, y2) = block.forward(&one(1.0), &one(2.0), None, &ctx).unwrap();
    assert_eq!((y1.data(), y2.data()), (&[3.0][..], &[5.0][..]));
    let (x1, x2) = block.reverse(&y1, &y2, None, &ctx).unwrap();
    assert_eq!((x1.data(), x2.data()), (&[1.0][..], &[2.0][..]));

    let mut seq = ReversibleSequence::new(vec![CouplingBlock::new(Identity, Identity)]);
    let mut d_out = |_: &Tensor, _: &Tensor| Ok((one(1.0), one(1.0)));
    let (dx1, dx2) = oracle_step(&mut seq, &one(1.0), &one(2.0), &mut d_out, &ctx).unwrap();
    // Y1 = X1 + X2, Y2 = X1 + 2·X2.
    assert_eq!((dx1.data(), dx2.data()), (&[2.0][..], &[3.0][..]));
    let (rx1, rx2) = sequence_train_step(&mut seq, &one(1.0), &one(2.0), &mut d_out, &ctx).unwrap();
    assert_eq!((rx1.data(), rx2.data()), (&[2.0][..], &[3.0][..]));
}

#[test]
fn hand_derived_bptt_through_one_neuron() {
    // F(x) = SN(w·x), G ≡ 0, LIF τ = 2, T = 2, x2 = (1.8, 0.6):
    // H = (0.9, 0.75), no spikes, surrogate slope 1 at both steps.
    let (c1, c2) = (0.7, -1.3);
    let expected_w = c1 * 0.9 + c2 * (0.3 + 0.5 * 0.9);
    let expected_x2 = [0.5 * (c1 + 0.5 * c2), 0.5 * c2];
    let shape = [2, 1, 1, 1, 1];
    let x1 = Tensor::zeros(&shape, P);
    let x2 = Tensor::from_vec(shape.to_vec(), vec![1.8, 0.6], P).unwrap();
    let dy1 = Tensor::from_vec(shape.to_vec(), vec![c1, c2], P).unwrap();
    for reversible in [false, true] {
        let ctx = ExecCtx::new(P);
        let lif = NeuronParams::lif();
        let mut seq = ReversibleSequence::new(vec![CouplingBlock::new(spike_probe(1.0, lif, 2, P), spike_probe(0.0, lif, 2, P))]);
        let mut d_out = |_: &Tensor, _: &Tensor| Ok((dy1.clone(), Tensor::zeros(&shape, P)));
        let (_, dx2) = if reversible {
            sequence_train_step(&mut seq, &x1, &x2, &mut d_out, &ctx).unwrap()
        } else {
            oracle_step(&mut seq, &x1, &x2, &mut d_out, &ctx).unwrap()
        };
        assert!((grads(&mut seq)[0] - expected_w).abs() < 1e-12);
        assert!(rel(dx2.data(), &expected_x2) < 1e-12);
    }
}

#[test]
fn rev_forward_matches_cached_forward_and_replays() {
    let case = Case { f: Body::Residual, g: Body::Residual, lif: true, timesteps: 4, seed: 11 };
    let ctx = ExecCtx::new(P);
    let (x1, x2) = case.inputs();
    let mut block = case.block(&mut ModelRng::seed_from_u64(case.seed));
    let mut tape = BlockTape::tracked(&ctx);
    let cached = block.forward(&x1, &x2, Some(&mut tape), &ctx).unwrap();
    block.reset_all();
    let first = rev_forward(&mut block, &x1, &x2, &ctx).unwrap();
    block.reset_all();
    let second = rev_forward(&mut block, &x1, &x2, &ctx).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&cached.0), bits(&first.0));
    assert_eq!(bits(&cached.1), bits(&first.1));
    assert_eq!(bits(&first.0), bits(&second.0));
    assert_eq!(bits(&first.1), bits(&second.1));
}

#[test]
fn reverse_without_reset_is_rejected() {
    let case = Case { f: Body::Residual, g: Body::Residual, lif: false, timesteps: 2, seed: 3 };
    let ctx = ExecCtx::new(P);
    let (x1, x2) = case.inputs();
    let mut block = case.block(&mut ModelRng::seed_from_u64(case.seed));
    let (y1, y2) = rev_forward(&mut block, &x1, &x2, &ctx).unwrap();
    assert!(rev_reverse(&mut block, &y1, &y2, &ctx).is_err());
}

#[test]
fn reversible_memory_is_flat_in_depth_and_oracle_memory_grows() {
    let case = Case { f: Body::Residual, g: Body::Residual, lif: false, timesteps: 4, seed: 5 };
    let (x1, x2) = case.inputs();
    let peak = |depth: usize, reversible: bool| -> f64 {
        let ctx = ExecCtx::new(P);
        let mut seq = case.sequence(depth);
        let mut d_out = |y1: &Tensor, y2: &Tensor| -> Result<(Tensor, Tensor)> { Ok((y1.clone(), y2.clone())) };
        if reversible {
            sequence_train_step(&mut seq, &x1, &x2, &mut d_out, &ctx).unwrap();
        } else {
            oracle_step(&mut seq, &x1, &x2, &mut d_out, &ctx).unwrap();
        }
        ctx.ledger.peak_working_set() as f64
    };
    let (r1, r8) = (peak(1, true), peak(8, true));
    assert!(r8 / r1 <= 1.05, "reversible 1 block {r1}, 8 blocks {r8}");
    let oracle: Vec<f64> = [1, 2, 4, 8].iter().map(|&d| peak(d, false)).collect();
    let step = oracle[1] - oracle[0];
    assert!(step > 0.0);
    for (d, o) in [1.0, 2.0, 4.0, 8.0].iter().zip(&oracle) {
        assert!((o - (oracle[0] + (d - 1.0) * step)).abs() <= 1e-9 * o, "{oracle:?}");
    }
}

#[test]
fn cached_activations_equal_hand_sum() {
    // One IF probe in F and G over [T=2, B=1, C=1, 1, 1]: each caches its
    // conv input (activations) and its neuron's hidden potentials (neuron
    // state), 2 doubles apiece.
    let ctx = ExecCtx::new(P);
    let n = NeuronParams::if_neuron();
    let mut seq = ReversibleSequence::new(vec![CouplingBlock::new(spike_probe(1.0, n, 2, P), spike_probe(1.0, n, 2, P))]);
    let x = Tensor::full(&[2, 1, 1, 1, 1], 0.25, P);
    seq.reset_all();
    seq.forward(&x, &x, revsnn_core::Engine::Oracle, true, &ctx).unwrap();
    assert_eq!(ctx.ledger.live(Category::Activations), 2 * 2 * 8);
    assert_eq!(ctx.ledger.live(Category::NeuronState), 2 * 2 * 8);
}

#[test]
fn reversible_step_costs_four_thirds_of_cached_step() {
    for (depth, f, g) in [(1, Body::Residual, Body::Residual), (3, Body::Ssa, Body::Mlp)] {
        let case = Case { f, g, lif: true, timesteps: 2, seed: 9 };
        let (x1, x2) = case.inputs();
        let count = |reversible: bool| {
            let ctx = ExecCtx::new(P);
            let mut seq = case.sequence(depth);
            let mut d_out = |y1: &Tensor, y2: &Tensor| -> Result<(Tensor, Tensor)> { Ok((y1.clone(), y2.clone())) };
            if reversible {
                sequence_train_step(&mut seq, &x1, &x2, &mut d_out, &ctx).unwrap();
            } else {
                oracle_step(&mut seq, &x1, &x2, &mut d_out, &ctx).unwrap();
            }
            ctx.ops.total() as f64
        };
        let ratio = count(true) / count(false);
        assert!((ratio - 4.0 / 3.0).abs() < 1e-12, "depth {depth}: {ratio}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reverse_reconstructs_inputs_and_tapes(case in case_strategy()) {
        let ctx = ExecCtx::new(P);
        let (x1, x2) = case.inputs();
        let mut seq = case.sequence(2);
        seq.reset_all();
        ctx.reset_knife_edge();
        let (y1, y2) = seq.forward_both(&x1, &x2, &ctx).unwrap();
        prop_assume!(ctx.knife_edge() >= KNIFE_EDGE);
        let originals = seq.take_oracle_tapes();
        let mut worst: f64 = 0.0;
        let mut spikes_equal = true;
        let mut inputs_error: f64 = 0.0;
        seq.reversible_backward(&y1.scale(0.0), &y2.scale(0.0), &ctx, &mut |view| {
            let diff = compare_block_tapes(&originals[view.block], view.tape);
            worst = worst.max(diff.max_real_diff);
            spikes_equal &= diff.spikes_equal && diff.layout_equal;
            if view.block == 0 {
                inputs_error = view.x1.max_abs_diff(&x1)?.max(view.x2.max_abs_diff(&x2)?);
            }
            Ok(())
        }).unwrap();
        prop_assert!(spikes_equal);
        prop_assert!(worst <= 1e-9, "intermediate error {worst}");
        prop_assert!(inputs_error <= 1e-9, "input error {inputs_error}");
    }

    #[test]
    fn engines_agree_on_gradients(case in case_strategy(), depth in 1usize..5) {
        let (x1, x2) = case.inputs();
        let mut c_rng = ModelRng::seed_from_u64(case.seed ^ 0xc0ffee);
        let s = case.stream_shape();
        let (c1, c2) = (uniform(&s, -1.0, 1.0, &mut c_rng), uniform(&s, -1.0, 1.0, &mut c_rng));
        let run = |reversible: bool| {
            let ctx = ExecCtx::new(P);
            ctx.reset_knife_edge();
            let mut seq = case.sequence(depth);
            let mut d_out = |_: &Tensor, _: &Tensor| -> Result<(Tensor, Tensor)> { Ok((c1.clone(), c2.clone())) };
            let (d1, d2) = if reversible {
                sequence_train_step(&mut seq, &x1, &x2, &mut d_out, &ctx).unwrap()
            } else {
                oracle_step(&mut seq, &x1, &x2, &mut d_out, &ctx).unwrap()
            };
            let mut all = grads(&mut seq);
            all.extend_from_slice(d1.data());
            all.extend_from_slice(d2.data());
            (all, ctx.knife_edge())
        };
        let (oracle, edge) = run(false);
        prop_assume!(edge >= KNIFE_EDGE);
        let (reversible, _) = run(true);
        prop_assert!(rel(&reversible, &oracle) <= 1e-8);
    }
}
