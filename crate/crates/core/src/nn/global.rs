use std::collections::BTreeMap;
use std::sync::Arc;

use dualtrack_autograd::{ParamStore, Scalar, Session, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::layers::{sinusoidal, Conv2d, Encoder, Init, Linear};
use crate::config::GlobalConfig;
use crate::error::{Error, Result};

/// Per-frame image encoder of the global branch: maps
/// `[M, 1, r, r]` frames to `[M, feature_dim]` independently per frame.
pub trait Backbone<F: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn feature_dim(&self) -> usize;
    fn resolution(&self) -> usize;
    fn forward(&self, s: &mut Session<F>, frames: Var) -> Var;
}

/// Stride-2 convolutions, flatten, linear projection.
pub struct SmallCnn {
    convs: Vec<Conv2d>,
    proj: Linear,
    feature_dim: usize,
    resolution: usize,
}

pub const SMALL_CNN: &str = "small-2d-cnn";

impl SmallCnn {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &GlobalConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut in_ch = 1;
        let mut convs = Vec::new();
        for (i, &ch) in cfg.channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("global.backbone.conv{i}"), in_ch, ch, 3, 2, rng));
            in_ch = ch;
        }
        let side = cfg.resolution >> cfg.channels.len();
        let proj = Linear::new(store, "global.backbone.proj", in_ch * side * side, cfg.feature_dim, true, Init::Default, rng);
        Self { convs, proj, feature_dim: cfg.feature_dim, resolution: cfg.resolution }
    }
}

impl<F: Scalar> Backbone<F> for SmallCnn {
    fn name(&self) -> &str {
        SMALL_CNN
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn forward(&self, s: &mut Session<F>, frames: Var) -> Var {
        let mut x = frames;
        for c in &self.convs {
            x = c.forward(s, x);
            x = s.graph.relu(x);
        }
        let m = s.graph.shape(x)[0];
        let n = s.graph.value(x).numel() / m;
        let x = s.graph.reshape(x, &[m, n]);
        self.proj.forward(s, x)
    }
}

/// Frozen external feature extractor: one image (row-major, `r x r`) in,
/// one feature vector out. Contributes no trainable parameters.
pub type FeatureFn = Arc<dyn Fn(&[f32], usize) -> Vec<f32> + Send + Sync>;

pub struct ExternalBackbone {
    name: String,
    feature_dim: usize,
    resolution: usize,
    extract: FeatureFn,
}

impl ExternalBackbone {
    pub fn new(name: impl Into<String>, feature_dim: usize, resolution: usize, extract: FeatureFn) -> Self {
        Self { name: name.into(), feature_dim, resolution, extract }
    }
}

impl<F: Scalar> Backbone<F> for ExternalBackbone {
    fn name(&self) -> &str {
        &self.name
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn forward(&self, s: &mut Session<F>, frames: Var) -> Var {
        let x = s.graph.value(frames);
        let m = x.shape()[0];
        let px = self.resolution * self.resolution;
        let mut out = Vec::with_capacity(m * self.feature_dim);
        for img in x.data().chunks(px) {
            let img: Vec<f32> = img.iter().map(|v| v.f64() as f32).collect();
            let f = (self.extract)(&img, self.resolution);
            assert_eq!(f.len(), self.feature_dim, "external backbone {} returned {} features", self.name, f.len());
            out.extend(f.into_iter().map(|v| F::c(v as f64)));
        }
        s.input(Tensor::new(vec![m, self.feature_dim], out))
    }
}

pub type BackboneCtor<F> =
    Arc<dyn Fn(&mut ParamStore<F>, &GlobalConfig, &mut ChaCha8Rng) -> Result<Box<dyn Backbone<F>>> + Send + Sync>;

/// Global backbones selectable by name from the configuration.
#[derive(Clone)]
pub struct BackboneRegistry<F: Scalar> {
    ctors: BTreeMap<String, BackboneCtor<F>>,
}

impl<F: Scalar> Default for BackboneRegistry<F> {
    fn default() -> Self {
        let mut r = Self { ctors: BTreeMap::new() };
        r.register(SMALL_CNN, Arc::new(|store, cfg, rng| Ok(Box::new(SmallCnn::new(store, cfg, rng)) as Box<dyn Backbone<F>>)));
        r
    }
}

impl<F: Scalar> BackboneRegistry<F> {
    pub fn register(&mut self, name: impl Into<String>, ctor: BackboneCtor<F>) {
        self.ctors.insert(name.into(), ctor);
    }

    /// Registers a frozen extractor under `name`.
    pub fn register_external(&mut self, name: impl Into<String>, extract: FeatureFn) {
        let name = name.into();
        let label = name.clone();
        self.register(
            name,
            Arc::new(move |_store, cfg, _rng| {
                Ok(Box::new(ExternalBackbone::new(label.clone(), cfg.feature_dim, cfg.resolution, extract.clone()))
                    as Box<dyn Backbone<F>>)
            }),
        );
    }

    pub fn names(&self) -> Vec<&str> {
        self.ctors.keys().map(String::as_str).collect()
    }

    pub fn build(&self, store: &mut ParamStore<F>, cfg: &GlobalConfig, rng: &mut ChaCha8Rng) -> Result<Box<dyn Backbone<F>>> {
        let ctor = self.ctors.get(&cfg.backbone).ok_or_else(|| {
            Error::Config(format!("unknown global backbone {:?} (registered: {})", cfg.backbone, self.names().join(", ")))
        })?;
        ctor(store, cfg, rng)
    }
}

/// Positional encodings for a padded batch of index rows, `[B, L, dim]`.
pub fn positional_batch<F: Scalar>(indices: &[Vec<usize>], len: usize, dim: usize, scale: f64) -> Tensor<F> {
    let mut data = Vec::with_capacity(indices.len() * len * dim);
    for row in indices {
        let mut pos: Vec<f64> = row.iter().map(|&i| i as f64 * scale).collect();
        pos.resize(len, 0.0);
        data.extend(sinusoidal::<F>(&pos, dim).into_data());
    }
    Tensor::new(vec![indices.len(), len, dim], data)
}

/// Global encoder: per-frame backbone plus temporal self-attention.
pub struct GlobalEncoder<F: Scalar> {
    cfg: GlobalConfig,
    pub backbone: Box<dyn Backbone<F>>,
    in_proj: Linear,
    temporal: Encoder,
    head: Linear,
}

impl<F: Scalar> GlobalEncoder<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        cfg: &GlobalConfig,
        registry: &BackboneRegistry<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let backbone = registry.build(store, cfg, rng)?;
        let h = cfg.temporal.hidden;
        Ok(Self {
            cfg: cfg.clone(),
            in_proj: Linear::new(store, "global.temporal.in_proj", backbone.feature_dim(), h, true, Init::Default, rng),
            temporal: Encoder::new(store, "global.temporal", &cfg.temporal, rng),
            head: Linear::new(store, "global.head", h, 6, true, Init::Zero, rng),
            backbone,
        })
    }

    pub fn config(&self) -> &GlobalConfig {
        &self.cfg
    }

    pub fn hidden(&self) -> usize {
        self.cfg.temporal.hidden
    }

    /// Validates a `[M, 1, r, r]` frame stack at the configured resolution.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.backbone.resolution();
        match shape {
            [m, 1, h, w] if *m > 0 && *h == r && *w == r => Ok(()),
            _ => Err(Error::invalid(format!("global encoder expects [M, 1, {r}, {r}] frames, got {shape:?}"))),
        }
    }

    /// Per-frame features, `[M, feature_dim]`.
    pub fn backbone_features(&self, s: &mut Session<F>, frames: Var) -> Var {
        self.backbone.forward(s, frames)
    }

    /// `[B * L, 1, r, r]` frames with absolute `indices` (one row per
    /// sequence, padded rows marked in `keep`) to `[B, L, hidden]`.
    pub fn encode(
        &self,
        s: &mut Session<F>,
        frames: Var,
        indices: &[Vec<usize>],
        len: usize,
        keep: Option<&[bool]>,
        pos_scale: f64,
    ) -> Var {
        let b = indices.len();
        let f = self.backbone_features(s, frames);
        let f = s.graph.reshape(f, &[b, len, self.backbone.feature_dim()]);
        let x = self.in_proj.forward(s, f);
        let pe = s.input(positional_batch(indices, len, self.hidden(), pos_scale));
        let x = s.graph.add(x, pe);
        self.temporal.forward(s, x, keep)
    }

    pub fn head(&self, s: &mut Session<F>, states: Var) -> Var {
        self.head.forward(s, states)
    }
}
