use dualtrack_autograd::{ParamStore, Scalar, Session, Var};
use rand::Rng;

use super::global::positional_batch;
use super::layers::{DecoderBlock, Encoder, Init, LayerNorm, Linear};
use crate::config::{FusionConfig, TransformerConfig};

/// Fusion module: local embeddings pass through a small interposed
/// transformer, then a decoder whose cross-attention reads the global
/// states.
pub struct Fusion {
    cfg: FusionConfig,
    interp_in: Linear,
    interposer: Encoder,
    interp_out: Linear,
    memory_proj: Linear,
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

/// Local and global sequences entering the fusion module.
pub struct FusionInputs<'a> {
    /// `[B, N, local_dim]`.
    pub local: Var,
    pub local_indices: &'a [Vec<usize>],
    pub local_keep: Option<&'a [bool]>,
    /// `[B, L, global_dim]`.
    pub global: Var,
    pub global_indices: &'a [Vec<usize>],
    pub global_keep: Option<&'a [bool]>,
}

impl Fusion {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &FusionConfig,
        local_dim: usize,
        global_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let (ih, dh) = (cfg.interposer.hidden, cfg.decoder.hidden);
        Self {
            cfg: cfg.clone(),
            interp_in: Linear::new(store, "fusion.interposer.in_proj", local_dim, ih, true, Init::Default, rng),
            interposer: Encoder::new(store, "fusion.interposer", &cfg.interposer, rng),
            interp_out: Linear::new(store, "fusion.interposer.out_proj", ih, dh, true, Init::Default, rng),
            memory_proj: Linear::new(store, "fusion.memory_proj", global_dim, dh, true, Init::Default, rng),
            blocks: (0..cfg.decoder.layers)
                .map(|i| DecoderBlock::new(store, &format!("fusion.decoder.layer{i}"), &cfg.decoder, rng))
                .collect(),
            ln_f: LayerNorm::new(store, "fusion.decoder.ln_f", dh),
            head: Linear::new(store, "fusion.head", dh, 6, true, Init::Zero, rng),
        }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    fn pos_scale(&self) -> f64 {
        1.0 / self.cfg.stride as f64
    }

    /// Fused states, `[B, N, decoder.hidden]`.
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, inp: &FusionInputs) -> Var {
        let n = s.graph.shape(inp.local)[1];
        let l = s.graph.shape(inp.global)[1];
        let TransformerConfig { hidden: ih, .. } = self.cfg.interposer;
        let dh = self.cfg.decoder.hidden;
        let scale = self.pos_scale();

        let x = self.interp_in.forward(s, inp.local);
        let pe = s.input(positional_batch(inp.local_indices, n, ih, scale));
        let x = s.graph.add(x, pe);
        let x = self.interposer.forward(s, x, inp.local_keep);
        let x = self.interp_out.forward(s, x);
        let pe = s.input(positional_batch(inp.local_indices, n, dh, scale));
        let mut x = s.graph.add(x, pe);

        let m = self.memory_proj.forward(s, inp.global);
        let pe = s.input(positional_batch(inp.global_indices, l, dh, scale));
        let m = s.graph.add(m, pe);

        for b in &self.blocks {
            x = b.forward(s, x, inp.local_keep, m, inp.global_keep);
        }
        self.ln_f.forward(s, x)
    }

    pub fn head<F: Scalar>(&self, s: &mut Session<F>, states: Var) -> Var {
        self.head.forward(s, states)
    }
}

/// Temporal self-attention stacked directly on the local encoder, used by
/// the coupled ablation.
pub struct Coupled {
    in_proj: Linear,
    encoder: Encoder,
    head: Linear,
    hidden: usize,
    pos_scale: f64,
}

impl Coupled {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &TransformerConfig,
        local_dim: usize,
        pos_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            in_proj: Linear::new(store, "coupled.in_proj", local_dim, cfg.hidden, true, Init::Default, rng),
            encoder: Encoder::new(store, "coupled.temporal", cfg, rng),
            head: Linear::new(store, "coupled.head", cfg.hidden, 6, true, Init::Zero, rng),
            hidden: cfg.hidden,
            pos_scale,
        }
    }

    /// `[B, N, local_dim]` embeddings to `[B, N, 6]`.
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, local: Var, indices: &[Vec<usize>], keep: Option<&[bool]>) -> Var {
        let n = s.graph.shape(local)[1];
        let x = self.in_proj.forward(s, local);
        let pe = s.input(positional_batch(indices, n, self.hidden, self.pos_scale));
        let x = s.graph.add(x, pe);
        let x = self.encoder.forward(s, x, keep);
        self.head.forward(s, x)
    }
}
