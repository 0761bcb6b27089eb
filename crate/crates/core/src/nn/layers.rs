//! Parameterised building blocks evaluated inside a [`Session`].

use dualtrack_autograd::{ParamId, ParamStore, Scalar, Session, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::TransformerConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform(+-1/sqrt(fan_in)).
    Default,
    /// Uniform(+-sqrt(6/fan_in)), for layers followed by ReLU.
    He,
    Zero,
    /// Normal(0, std).
    Normal(f64),
}

pub fn init_param<F: Scalar>(
    store: &mut ParamStore<F>,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut impl Rng,
) -> ParamId {
    let fan = fan_in.max(1) as f64;
    match init {
        Init::Default => store.add_uniform(name, shape, 1.0 / fan.sqrt(), rng),
        Init::He => store.add_uniform(name, shape, (6.0 / fan).sqrt(), rng),
        Init::Zero => store.add_const(name, shape, 0.0),
        Init::Normal(std) => {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).expect("valid std");
            let data = (0..n).map(|_| F::c(dist.sample(rng))).collect();
            store.add(name, Tensor::new(shape.to_vec(), data))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = init_param(store, &format!("{name}.w"), &[out_dim, in_dim], in_dim, init, rng);
        let b = bias.then(|| store.add_const(format!("{name}.b"), &[out_dim], 0.0));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let w = s.param(self.w);
        let y = s.graph.linear(x, w);
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_bcast(y, b)
            }
            None => y,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    g: ParamId,
    b: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self { g: store.add_const(format!("{name}.g"), &[dim], 1.0), b: store.add_const(format!("{name}.b"), &[dim], 0.0) }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let (g, b) = (s.param(self.g), s.param(self.b));
        s.graph.layer_norm(x, g, b, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, Init::Default, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, Init::Default, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let h = self.fc1.forward(s, x);
        let h = s.graph.gelu(h);
        self.fc2.forward(s, h)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "attention: dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, Init::Default, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, Init::Default, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, Init::Default, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, Init::Default, rng),
            heads,
            dim,
        }
    }

    fn split_heads<F: Scalar>(&self, s: &mut Session<F>, x: Var, b: usize, l: usize) -> Var {
        let dh = self.dim / self.heads;
        let x = s.graph.reshape(x, &[b, l, self.heads, dh]);
        let x = s.graph.permute(x, &[0, 2, 1, 3]);
        s.graph.reshape(x, &[b * self.heads, l, dh])
    }

    /// `query [B, Lq, D]` attends over `context [B, Lk, D]`; `keep` marks
    /// valid context positions (`B * Lk`).
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, query: Var, context: Var, keep: Option<&[bool]>) -> Var {
        let (qs, ks) = (s.graph.shape(query).to_vec(), s.graph.shape(context).to_vec());
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        let q = self.q.forward(s, query);
        let k = self.k.forward(s, context);
        let v = self.v.forward(s, context);
        let q = self.split_heads(s, q, b, lq);
        let k = self.split_heads(s, k, b, lk);
        let v = self.split_heads(s, v, b, lk);
        let scores = s.graph.bmm(q, k, false, true);
        let scores = s.graph.scale(scores, 1.0 / ((self.dim / self.heads) as f64).sqrt());
        let scores = match keep {
            Some(m) => s.graph.mask_keys(scores, m, self.heads),
            None => scores,
        };
        let p = s.graph.softmax(scores);
        let out = s.graph.bmm(p, v, false, false);
        let out = s.graph.reshape(out, &[b, self.heads, lq, self.dim / self.heads]);
        let out = s.graph.permute(out, &[0, 2, 1, 3]);
        let out = s.graph.reshape(out, &[b, lq, self.dim]);
        self.o.forward(s, out)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.hidden),
            attn: Attention::new(store, &format!("{name}.attn"), cfg.hidden, cfg.heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.hidden),
            mlp: Mlp::new(store, &format!("{name}.mlp"), cfg.hidden, cfg.intermediate, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var, keep: Option<&[bool]>) -> Var {
        let h = self.ln1.forward(s, x);
        let a = self.attn.forward(s, h, h, keep);
        let x = s.graph.add(x, a);
        let h = self.ln2.forward(s, x);
        let m = self.mlp.forward(s, h);
        s.graph.add(x, m)
    }
}

/// Stack of [`EncoderBlock`]s followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<EncoderBlock>,
    ln_f: LayerNorm,
}

impl Encoder {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        Self {
            blocks: (0..cfg.layers).map(|i| EncoderBlock::new(store, &format!("{name}.layer{i}"), cfg, rng)).collect(),
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), cfg.hidden),
        }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, mut x: Var, keep: Option<&[bool]>) -> Var {
        for b in &self.blocks {
            x = b.forward(s, x, keep);
        }
        self.ln_f.forward(s, x)
    }
}

/// Pre-norm decoder block: self-attention, cross-attention, MLP.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    mlp: Mlp,
}

impl DecoderBlock {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.hidden),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), cfg.hidden, cfg.heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.hidden),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), cfg.hidden, cfg.heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), cfg.hidden),
            mlp: Mlp::new(store, &format!("{name}.mlp"), cfg.hidden, cfg.intermediate, rng),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        s: &mut Session<F>,
        x: Var,
        keep: Option<&[bool]>,
        memory: Var,
        memory_keep: Option<&[bool]>,
    ) -> Var {
        let h = self.ln1.forward(s, x);
        let a = self.self_attn.forward(s, h, h, keep);
        let x = s.graph.add(x, a);
        let h = self.ln2.forward(s, x);
        let c = self.cross_attn.forward(s, h, memory, memory_keep);
        let x = s.graph.add(x, c);
        let h = self.ln3.forward(s, x);
        let m = self.mlp.forward(s, h);
        s.graph.add(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = init_param(store, &format!("{name}.w"), &[out_ch, in_ch, kernel, kernel], fan_in, Init::He, rng);
        let b = store.add_const(format!("{name}.b"), &[out_ch], 0.0);
        Self { w, b, stride, pad: kernel / 2 }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var) -> Var {
        let (w, b) = (s.param(self.w), s.param(self.b));
        s.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Convolution along the frame axis of `[seqs * seq_len, C, H, W]` maps.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    w: ParamId,
    b: ParamId,
    pub kernel: usize,
    pub causal: bool,
}

impl TemporalConv {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        kernel: usize,
        causal: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = channels * kernel;
        let w = init_param(store, &format!("{name}.w"), &[kernel, channels, channels], fan_in, Init::Default, rng);
        let b = store.add_const(format!("{name}.b"), &[channels], 0.0);
        Self { w, b, kernel, causal }
    }

    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var, seq_len: usize, valid: &[usize]) -> Var {
        let (w, b) = (s.param(self.w), s.param(self.b));
        s.graph.temporal_conv(x, w, Some(b), seq_len, valid, self.causal)
    }
}

/// Sinusoidal encoding of real-valued positions, `[positions.len(), dim]`.
pub fn sinusoidal<F: Scalar>(positions: &[f64], dim: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = p * freq;
            data.push(F::c(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(vec![positions.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_values() {
        let pe = sinusoidal::<f64>(&[0.0, 1.0], 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.data()[6] - 0.01f64.sin()).abs() < 1e-15);
    }
}
