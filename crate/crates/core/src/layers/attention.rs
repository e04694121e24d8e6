use super::{BatchNorm, LayerProfile, Linear, ModelRng, Module, NormLayout, Param, Sequential, SpikingNeuron};
use crate::error::{Error, Result};
use crate::exec::ExecCtx;
use crate::memtrack::Category;
use crate::neurons::NeuronParams;
use crate::tape::{LayerId, Tape, TapeEntry};
use crate::tensor::{self, OpCounter, Precision, Tensor};
use rayon::prelude::*;

/// Default attention scale.
pub const ATTENTION_SCALE: f64 = 0.125;

fn attention_geometry(q: &Tensor, heads: usize) -> Result<(usize, usize, usize, usize)> {
    if q.ndim() < 3 {
        return Err(Error::dim("spike_attention", "input rank", ">= 3", q.ndim()));
    }
    let n = q.ndim();
    let (tokens, dim) = (q.dim(n - 2), q.dim(n - 1));
    if heads == 0 || dim % heads != 0 {
        return Err(Error::dim("spike_attention", "heads", format!("a divisor of {dim}"), heads));
    }
    Ok((q.len() / (tokens * dim), tokens, dim, dim / heads))
}

fn head_slice(x: &[f64], g: usize, h: usize, tokens: usize, dim: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(tokens * dh);
    for i in 0..tokens {
        let base = (g * tokens + i) * dim + h * dh;
        out.extend_from_slice(&x[base..base + dh]);
    }
    out
}

fn scatter_heads(parts: Vec<Vec<f64>>, groups: usize, heads: usize, tokens: usize, dh: usize) -> Vec<f64> {
    let dim = heads * dh;
    let mut out = vec![0.0; groups * tokens * dim];
    for (idx, part) in parts.into_iter().enumerate() {
        let (g, h) = (idx / heads, idx % heads);
        for i in 0..tokens {
            let base = (g * tokens + i) * dim + h * dh;
            out[base..base + dh].copy_from_slice(&part[i * dh..(i + 1) * dh]);
        }
    }
    out
}

/// Softmax-free attention `scale · (Q Kᵀ) V` per head over `[..., N, D]`
/// operands. Returns the output and the `Q Kᵀ` scores `[G, heads, N, N]`.
pub fn spike_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    scale: f64,
    ops: &OpCounter,
) -> Result<(Tensor, Tensor)> {
    q.check_precision(k, "spike_attention")?;
    q.check_precision(v, "spike_attention")?;
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::dim(
            "spike_attention",
            "operands",
            format!("{:?}", q.shape()),
            format!("{:?} / {:?}", k.shape(), v.shape()),
        ));
    }
    let (groups, tokens, dim, dh) = attention_geometry(q, heads)?;
    let p = q.precision();
    let results: Vec<(Vec<f64>, Vec<f64>)> = (0..groups * heads)
        .into_par_iter()
        .map(|idx| {
            let (g, h) = (idx / heads, idx % heads);
            let qh = head_slice(q.data(), g, h, tokens, dim, dh);
            let kh = head_slice(k.data(), g, h, tokens, dim, dh);
            let vh = head_slice(v.data(), g, h, tokens, dim, dh);
            let a: Vec<f64> = tensor::matmul_nt(&qh, &kh, tokens, dh, tokens, ops)
                .into_iter()
                .map(|x| p.round(x))
                .collect();
            let o = tensor::matmul(&a, &vh, tokens, tokens, dh, ops)
                .into_iter()
                .map(|x| x * scale)
                .collect();
            (o, a)
        })
        .collect();
    let (outs, scores): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let out = Tensor::from_vec(q.shape().to_vec(), scatter_heads(outs, groups, heads, tokens, dh), p)?;
    let scores = Tensor::from_vec(vec![groups, heads, tokens, tokens], scores.concat(), p)?;
    Ok((out, scores))
}

/// Gradients of [`spike_attention`] w.r.t. `(q, k, v)`.
#[allow(clippy::too_many_arguments)]
pub fn spike_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scores: &Tensor,
    heads: usize,
    scale: f64,
    grad_out: &Tensor,
    ops: &OpCounter,
) -> Result<(Tensor, Tensor, Tensor)> {
    if grad_out.shape() != q.shape() {
        return Err(Error::dim(
            "spike_attention_backward",
            "grad_out",
            format!("{:?}", q.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (groups, tokens, dim, dh) = attention_geometry(q, heads)?;
    let p = q.precision();
    let nn = tokens * tokens;
    let results: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..groups * heads)
        .into_par_iter()
        .map(|idx| {
            let (g, h) = (idx / heads, idx % heads);
            let qh = head_slice(q.data(), g, h, tokens, dim, dh);
            let kh = head_slice(k.data(), g, h, tokens, dim, dh);
            let vh = head_slice(v.data(), g, h, tokens, dim, dh);
            let go: Vec<f64> = head_slice(grad_out.data(), g, h, tokens, dim, dh)
                .into_iter()
                .map(|x| x * scale)
                .collect();
            let a = &scores.data()[idx * nn..(idx + 1) * nn];
            let da: Vec<f64> = tensor::matmul_nt(&go, &vh, tokens, dh, tokens, ops)
                .into_iter()
                .map(|x| p.round(x))
                .collect();
            let dv = tensor::matmul_tn(a, &go, tokens, tokens, dh, ops);
            let dq = tensor::matmul(&da, &kh, tokens, tokens, dh, ops);
            let dk = tensor::matmul_tn(&da, &qh, tokens, tokens, dh, ops);
            (dq, dk, dv)
        })
        .collect();
    let mut dqs = Vec::with_capacity(results.len());
    let mut dks = Vec::with_capacity(results.len());
    let mut dvs = Vec::with_capacity(results.len());
    for (a, b, c) in results {
        dqs.push(a);
        dks.push(b);
        dvs.push(c);
    }
    let shape = q.shape().to_vec();
    Ok((
        Tensor::from_vec(shape.clone(), scatter_heads(dqs, groups, heads, tokens, dh), p)?,
        Tensor::from_vec(shape.clone(), scatter_heads(dks, groups, heads, tokens, dh), p)?,
        Tensor::from_vec(shape, scatter_heads(dvs, groups, heads, tokens, dh), p)?,
    ))
}

/// Spiking self-attention over `[T, B, N, D]` token sequences.
///
/// `s = SN(x)`; `q, k, v = SN(BN(W s))` from one fused projection; the
/// softmax-free product is followed by a linear projection and BN.
#[derive(Debug)]
pub struct SsaBlock {
    id: LayerId,
    pub dim: usize,
    pub heads: usize,
    pub scale: f64,
    front: SpikingNeuron,
    qkv: Sequential,
    proj: Sequential,
}

impl SsaBlock {
    pub fn new(
        dim: usize,
        heads: usize,
        neuron: NeuronParams,
        timesteps: usize,
        rng: &mut ModelRng,
        precision: Precision,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::dim("ssa", "heads", format!("a divisor of {dim}"), heads));
        }
        let mut qkv = Sequential::default();
        qkv.push(Linear::new(dim, 3 * dim, false, rng, precision));
        qkv.push(BatchNorm::new(3 * dim, NormLayout::Features, precision));
        qkv.push(SpikingNeuron::new(neuron, timesteps));
        let mut proj = Sequential::default();
        proj.push(Linear::new(dim, dim, false, rng, precision));
        proj.push(BatchNorm::new(dim, NormLayout::Features, precision));
        Ok(SsaBlock {
            id: LayerId::next(),
            dim,
            heads,
            scale: ATTENTION_SCALE,
            front: SpikingNeuron::new(neuron, timesteps),
            qkv,
            proj,
        })
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[3] != self.dim {
            return Err(Error::dim("ssa", "embedding", format!("[T, B, N, {}]", self.dim), format!("{shape:?}")));
        }
        Ok(())
    }
}

impl Module for SsaBlock {
    fn kind(&self) -> &'static str {
        "ssa"
    }

    fn forward(&mut self, x: &Tensor, mut tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let s = self.front.forward(x, tape.as_deref_mut(), ctx)?;
        let qkv = self.qkv.forward(&s, tape.as_deref_mut(), ctx)?;
        let (q, kv) = qkv.split_axis(3, self.dim)?;
        let (k, v) = kv.split_axis(3, self.dim)?;
        let (att, scores) = spike_attention(&q, &k, &v, self.heads, self.scale, &ctx.ops)?;
        if let Some(t) = tape.as_deref_mut() {
            t.push(
                TapeEntry::new(self.id, "ssa", x.dim(0))
                    .with(Category::Activations, q)
                    .with(Category::Activations, k)
                    .with(Category::Activations, v)
                    .with(Category::Activations, scores),
            )?;
        }
        self.proj.forward(&att, tape, ctx)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, ctx: &ExecCtx) -> Result<Tensor> {
        let g_att = self.proj.backward(grad, tape, ctx)?;
        let entry = tape.pop(self.id, "ssa")?;
        let (dq, dk, dv) = spike_attention_backward(
            entry.tensor(0)?,
            entry.tensor(1)?,
            entry.tensor(2)?,
            entry.tensor(3)?,
            self.heads,
            self.scale,
            &g_att,
            &ctx.ops,
        )?;
        let dqkv = Tensor::concat_axis(&Tensor::concat_axis(&dq, &dk, 3)?, &dv, 3)?;
        let ds = self.qkv.backward(&dqkv, tape, ctx)?;
        self.front.backward(&ds, tape, ctx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.qkv.visit_params(f);
        self.proj.visit_params(f);
    }

    fn visit_neurons(&mut self, f: &mut dyn FnMut(&mut SpikingNeuron)) {
        f(&mut self.front);
        self.qkv.visit_neurons(f);
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.qkv.visit_norms(f);
        self.proj.visit_norms(f);
    }

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        self.check_input(input)?;
        let s = self.front.profile(input, out)?;
        self.qkv.profile(&s, out)?;
        let groups = input[0] * input[1];
        let tokens = input[2];
        out.push(LayerProfile {
            kind: "spike_attention",
            output: input.to_vec(),
            params: 0,
            macs: (2 * groups * tokens * tokens * self.dim) as u64,
            weight_layer: false,
        });
        self.proj.profile(input, out)
    }
}

/// `SN → Linear(D→rD) → BN → SN → Linear(rD→D) → BN` over the last axis.
#[derive(Debug)]
pub struct MlpBlock {
    pub dim: usize,
    pub hidden: usize,
    body: Sequential,
}

impl MlpBlock {
    pub fn new(
        dim: usize,
        ratio: usize,
        neuron: NeuronParams,
        timesteps: usize,
        rng: &mut ModelRng,
        precision: Precision,
    ) -> Self {
        let hidden = dim * ratio;
        let mut body = Sequential::default();
        body.push(SpikingNeuron::new(neuron, timesteps));
        body.push(Linear::new(dim, hidden, false, rng, precision));
        body.push(BatchNorm::new(hidden, NormLayout::Features, precision));
        body.push(SpikingNeuron::new(neuron, timesteps));
        body.push(Linear::new(hidden, dim, false, rng, precision));
        body.push(BatchNorm::new(dim, NormLayout::Features, precision));
        MlpBlock { dim, hidden, body }
    }

    /// Builds the block from explicit weights `[hidden, dim]` and `[dim, hidden]`.
    pub fn from_weights(w1: Tensor, w2: Tensor, neuron: NeuronParams, timesteps: usize) -> Result<Self> {
        let (hidden, dim) = (w1.dim(0), w1.dim(1));
        if w2.shape() != [dim, hidden] {
            return Err(Error::dim("mlp", "second weight", format!("[{dim}, {hidden}]"), format!("{:?}", w2.shape())));
        }
        let p = w1.precision();
        let mut body = Sequential::default();
        body.push(SpikingNeuron::new(neuron, timesteps));
        body.push(Linear::from_weight(w1, None));
        body.push(BatchNorm::new(hidden, NormLayout::Features, p));
        body.push(SpikingNeuron::new(neuron, timesteps));
        body.push(Linear::from_weight(w2, None));
        body.push(BatchNorm::new(dim, NormLayout::Features, p));
        Ok(MlpBlock { dim, hidden, body })
    }
}

impl Module for MlpBlock {
    fn kind(&self) -> &'static str {
        "mlp"
    }

    fn forward(&mut self, x: &Tensor, tape: Option<&mut Tape>, ctx: &ExecCtx) -> Result<Tensor> {
        if x.dim(x.ndim() - 1) != self.dim {
            return Err(Error::dim("mlp", "embedding", self.dim, x.dim(x.ndim() - 1)));
        }
        self.body.forward(x, tape, ctx)
    }

    fn backward(&mut self, grad: &Tensor, tape: &mut Tape, ctx: &ExecCtx) -> Result<Tensor> {
        self.body.backward(grad, tape, ctx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.body.visit_params(f);
    }

    fn visit_neurons(&mut self, f: &mut dyn FnMut(&mut SpikingNeuron)) {
        self.body.visit_neurons(f);
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        self.body.visit_norms(f);
    }

    fn profile(&self, input: &[usize], out: &mut Vec<LayerProfile>) -> Result<Vec<usize>> {
        self.body.profile(input, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    const P: Precision = Precision::F64;

    #[test]
    fn zero_spikes_give_zero_attention() {
        let z = Tensor::zeros(&[1, 1, 3, 4], P);
        let (o, _) = spike_attention(&z, &z, &z, 2, 0.125, &OpCounter::new()).unwrap();
        assert_eq!(o.max_abs(), 0.0);
    }

    #[test]
    fn two_token_product_by_hand() {
        // Q = K = [[1,0],[1,1]], V = [[1,1],[0,1]]
        let q = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 1.0], P).unwrap();
        let v = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 1.0, 0.0, 1.0], P).unwrap();
        let ops = OpCounter::new();
        let (o, a) = spike_attention(&q, &q, &v, 1, 1.0, &ops).unwrap();
        // QKᵀ = [[1,1],[1,2]]; (QKᵀ)V = [[1,2],[1,3]]
        assert_eq!(a.data(), &[1.0, 1.0, 1.0, 2.0]);
        assert_eq!(o.data(), &[1.0, 2.0, 1.0, 3.0]);
        assert_eq!(ops.total(), 16);
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = ModelRng::seed_from_u64(3);
        let shape = [2, 3, 4];
        let q = super::super::uniform(&shape, 1.0, &mut rng, P);
        let k = super::super::uniform(&shape, 1.0, &mut rng, P);
        let v = super::super::uniform(&shape, 1.0, &mut rng, P);
        let c = super::super::uniform(&shape, 1.0, &mut rng, P);
        let ops = OpCounter::new();
        let loss = |q: &Tensor, k: &Tensor, v: &Tensor| {
            let (o, _) = spike_attention(q, k, v, 2, 0.125, &ops).unwrap();
            o.mul(&c).unwrap().sum()
        };
        let (_, a) = spike_attention(&q, &k, &v, 2, 0.125, &ops).unwrap();
        let (dq, dk, dv) = spike_attention_backward(&q, &k, &v, &a, 2, 0.125, &c, &ops).unwrap();
        let h = 1e-6;
        for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
            for i in 0..q.len() {
                let mut ins = [q.clone(), k.clone(), v.clone()];
                ins[which].data_mut()[i] += h;
                let up = loss(&ins[0], &ins[1], &ins[2]);
                ins[which].data_mut()[i] -= 2.0 * h;
                let dn = loss(&ins[0], &ins[1], &ins[2]);
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - grad.data()[i]).abs() < 1e-7, "operand {which} idx {i}");
            }
        }
    }

    #[test]
    fn blocks_preserve_shape() {
        let ctx = ExecCtx::new(P);
        let mut rng = ModelRng::seed_from_u64(5);
        let x = super::super::uniform(&[2, 2, 4, 8], 2.0, &mut rng, P);
        let mut ssa = SsaBlock::new(8, 2, NeuronParams::lif(), 2, &mut rng, P).unwrap();
        assert_eq!(ssa.forward(&x, None, &ctx).unwrap().shape(), x.shape());
        let mut mlp = MlpBlock::new(8, 4, NeuronParams::lif(), 2, &mut rng, P);
        assert_eq!(mlp.forward(&x, None, &ctx).unwrap().shape(), x.shape());
        assert!(SsaBlock::new(8, 3, NeuronParams::lif(), 2, &mut rng, P).is_err());
    }

    #[test]
    fn mlp_identity_trace() {
        // r = 1, identity weights, v_th = 0.5: binary input passes through.
        let ctx = ExecCtx::new(P);
        ctx.set_bn_mode(tensor::BnMode::Eval);
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], P).unwrap();
        let n = NeuronParams::if_neuron().with_threshold(0.5);
        let mut mlp = MlpBlock::from_weights(eye.clone(), eye, n, 1).unwrap();
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0], P).unwrap();
        let y = mlp.forward(&x, None, &ctx).unwrap();
        let expect = x.scale(1.0 / (1.0 + tensor::BN_EPS).sqrt());
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-12);
    }
}
