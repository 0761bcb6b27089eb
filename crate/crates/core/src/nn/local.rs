use dualtrack_autograd::{ParamId, ParamStore, Scalar, Session, Var};
use rand::Rng;

use super::layers::{init_param, Attention, Conv2d, Init, LayerNorm, Linear, Mlp, TemporalConv};
use crate::config::LocalConfig;
use crate::error::{Error, Result};

struct Stage {
    conv: Conv2d,
    temporal: Option<TemporalConv>,
}

/// Local encoder: a 2D+1D CNN with a short temporal receptive field
/// followed by attention pooling of each frame's feature map.
pub struct LocalEncoder {
    cfg: LocalConfig,
    image_size: usize,
    stages: Vec<Stage>,
    cnn_head: Linear,
    proj: Linear,
    pos: ParamId,
    query: ParamId,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: Attention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
    ln_f: LayerNorm,
    head: Linear,
}

impl LocalEncoder {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &LocalConfig, image_size: usize, rng: &mut impl Rng) -> Self {
        let mut stages = Vec::new();
        let mut in_ch = 1;
        for (i, (&ch, &kt)) in cfg.channels.iter().zip(&cfg.temporal_kernels).enumerate() {
            let conv = Conv2d::new(store, &format!("local.cnn.stage{i}.conv"), in_ch, ch, 3, 2, rng);
            let temporal = (kt > 1).then(|| TemporalConv::new(store, &format!("local.cnn.stage{i}.temporal"), ch, kt, cfg.causal, rng));
            stages.push(Stage { conv, temporal });
            in_ch = ch;
        }
        let side = image_size / cfg.downsample();
        let tokens = side * side;
        let c = in_ch;
        let d = cfg.pooled_dim;
        Self {
            cfg: cfg.clone(),
            image_size,
            stages,
            cnn_head: Linear::new(store, "local.cnn_head", c * tokens, 6, true, Init::Zero, rng),
            proj: Linear::new(store, "local.pool.proj", c, d, true, Init::Default, rng),
            pos: init_param(store, "local.pool.pos", &[tokens, d], d, Init::Normal(0.02), rng),
            query: init_param(store, "local.pool.query", &[1, d], d, Init::Normal(0.02), rng),
            ln_q: LayerNorm::new(store, "local.pool.ln_q", d),
            ln_kv: LayerNorm::new(store, "local.pool.ln_kv", d),
            attn: Attention::new(store, "local.pool.attn", d, cfg.pool_heads, rng),
            ln_mlp: LayerNorm::new(store, "local.pool.ln_mlp", d),
            mlp: Mlp::new(store, "local.pool.mlp", d, 2 * d, rng),
            ln_f: LayerNorm::new(store, "local.pool.ln_f", d),
            head: Linear::new(store, "local.head", d, 6, true, Init::Zero, rng),
        }
    }

    pub fn config(&self) -> &LocalConfig {
        &self.cfg
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.pooled_dim
    }

    /// Validates a `[M, 1, H, W]` frame stack.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.cfg.downsample();
        match shape {
            [m, 1, h, w] if *m > 0 && h % f == 0 && w % f == 0 && *h == self.image_size && *w == self.image_size => Ok(()),
            _ => Err(Error::invalid(format!(
                "local encoder expects [M, 1, {s}, {s}] frames with sides divisible by {f}, got {shape:?}",
                s = self.image_size
            ))),
        }
    }

    /// `[B * seq_len, 1, H, W]` normalised frames to `[B * seq_len, C, H/16, W/16]`.
    pub fn features<F: Scalar>(&self, s: &mut Session<F>, frames: Var, seq_len: usize, valid: &[usize]) -> Var {
        let mut x = frames;
        for st in &self.stages {
            x = st.conv.forward(s, x);
            x = s.graph.relu(x);
            if let Some(t) = &st.temporal {
                let y = t.forward(s, x, seq_len, valid);
                let y = s.graph.add(x, y);
                x = s.graph.relu(y);
            }
        }
        x
    }

    /// Temporary linear head on flattened feature maps, `[M, 6]`.
    pub fn cnn_head<F: Scalar>(&self, s: &mut Session<F>, features: Var) -> Var {
        let m = s.graph.shape(features)[0];
        let n = s.graph.value(features).numel() / m;
        let flat = s.graph.reshape(features, &[m, n]);
        self.cnn_head.forward(s, flat)
    }

    /// Attention pooling of each feature map to one `pooled_dim` vector.
    pub fn pool<F: Scalar>(&self, s: &mut Session<F>, features: Var) -> Var {
        let shape = s.graph.shape(features).to_vec();
        let (m, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let d = self.cfg.pooled_dim;
        let tokens = s.graph.reshape(features, &[m, c, hw]);
        let tokens = s.graph.permute(tokens, &[0, 2, 1]);
        let tokens = self.proj.forward(s, tokens);
        let pos = s.param(self.pos);
        let tokens = s.graph.add_bcast(tokens, pos);
        let tokens = self.ln_kv.forward(s, tokens);
        let q = s.param(self.query);
        let q = s.graph.repeat0(q, m);
        let h = self.ln_q.forward(s, q);
        let a = self.attn.forward(s, h, tokens, None);
        let q = s.graph.add(q, a);
        let h = self.ln_mlp.forward(s, q);
        let h = self.mlp.forward(s, h);
        let q = s.graph.add(q, h);
        let q = self.ln_f.forward(s, q);
        s.graph.reshape(q, &[m, d])
    }

    pub fn head<F: Scalar>(&self, s: &mut Session<F>, embeddings: Var) -> Var {
        self.head.forward(s, embeddings)
    }

    /// Frames to embeddings, `[B * seq_len, pooled_dim]`.
    pub fn embed<F: Scalar>(&self, s: &mut Session<F>, frames: Var, seq_len: usize, valid: &[usize]) -> Var {
        let f = self.features(s, frames, seq_len, valid);
        self.pool(s, f)
    }
}
