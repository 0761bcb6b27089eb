use std::collections::BTreeMap;
use std::sync::Arc;

use dualtrack_autograd::{ParamStore, Scalar, Session, Tensor, TrainMask, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fusion::{Coupled, Fusion, FusionInputs};
use super::global::{BackboneRegistry, GlobalEncoder};
use super::local::LocalEncoder;
use crate::config::ModelConfig;
use crate::dataset::{gather_frames, relative_targets, subsample_evenly, Sweep};
use crate::error::{Error, Result};
use crate::geometry::PoseParams;

/// Maps raw intensities in `[0, 1]` to roughly zero-mean unit-range inputs.
pub fn normalize_frames<F: Scalar>(frames: &[f32]) -> Vec<F> {
    frames.iter().map(|&v| F::c((v as f64 - 0.5) * 4.0)).collect()
}

/// All submodules over one parameter store.
pub struct DualTrackModel<F: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub local: LocalEncoder,
    pub global: GlobalEncoder<F>,
    pub fusion: Fusion,
    pub coupled: Coupled,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl<F: Scalar> DualTrackModel<F> {
    pub fn new(config: &ModelConfig, seed: u64, backbones: &BackboneRegistry<F>) -> Result<Self> {
        let l = &config.local;
        if config.image_size == 0 || config.image_size % l.downsample() != 0 {
            return Err(Error::invalid(format!("image size {} not divisible by {}", config.image_size, l.downsample())));
        }
        let mut store = ParamStore::new();
        let local = LocalEncoder::new(&mut store, l, config.image_size, &mut stream(seed, 1));
        let global = GlobalEncoder::new(&mut store, &config.global, backbones, &mut stream(seed, 2))?;
        let fusion = Fusion::new(&mut store, &config.fusion, l.pooled_dim, global.hidden(), &mut stream(seed, 3));
        let scale = 1.0 / config.fusion.stride as f64;
        let coupled = Coupled::new(&mut store, &config.coupled, l.pooled_dim, scale, &mut stream(seed, 4));
        Ok(Self { config: config.clone(), store, local, global, fusion, coupled })
    }

    /// Same architecture and weights in another precision.
    pub fn cast<G: Scalar>(&self, backbones: &BackboneRegistry<G>) -> Result<DualTrackModel<G>> {
        let mut m = DualTrackModel::<G>::new(&self.config, 0, backbones)?;
        m.store = self.store.cast();
        Ok(m)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    pub fn global_stride(&self) -> usize {
        self.config.fusion.stride
    }
}

/// Local branch input: raw normalised frames or precomputed CNN features.
#[derive(Clone, Debug)]
pub enum LocalInput<F> {
    /// `[B * len, 1, H, W]`.
    Frames(Tensor<F>),
    /// `[B * len, C, H/16, W/16]`.
    Features(Tensor<F>),
}

#[derive(Clone, Debug)]
pub struct GlobalInput<F> {
    /// `[B * len, 1, r, r]`.
    pub frames: Tensor<F>,
    pub len: usize,
    pub indices: Vec<Vec<usize>>,
    pub keep: Vec<bool>,
}

/// A padded batch of whole sweeps.
#[derive(Clone, Debug)]
pub struct SweepBatch<F> {
    pub len: usize,
    pub valid: Vec<usize>,
    pub local: LocalInput<F>,
    pub indices: Vec<Vec<usize>>,
    pub keep: Vec<bool>,
    pub global: Option<GlobalInput<F>>,
    /// `[B, len, 6]` relative targets (row `k` is `p_{k+1<-k}`), zero-padded.
    pub targets: Tensor<F>,
    /// Loss mask over `targets`.
    pub target_mask: Vec<bool>,
}

/// Concatenates per-sweep `[n_b, ...]` tensors, zero-padding each to `len`.
pub fn pad_stack<F: Scalar>(parts: &[Tensor<F>], len: usize) -> Tensor<F> {
    let inner: Vec<usize> = parts[0].shape()[1..].to_vec();
    let per: usize = inner.iter().product();
    let mut data = Vec::with_capacity(parts.len() * len * per);
    for p in parts {
        assert_eq!(&p.shape()[1..], &inner[..], "pad_stack: inner shape");
        data.extend_from_slice(p.data());
        data.resize(data.len() + (len - p.shape()[0]) * per, F::zero());
    }
    let mut shape = vec![parts.len() * len];
    shape.extend(inner);
    Tensor::new(shape, data)
}

fn keep_mask(valid: &[usize], len: usize) -> Vec<bool> {
    valid.iter().flat_map(|&v| (0..len).map(move |t| t < v)).collect()
}

/// Full-resolution frames of a sweep as a `[N, 1, H, W]` tensor.
pub fn sweep_frames<F: Scalar>(sweep: &Sweep) -> Tensor<F> {
    Tensor::new(vec![sweep.len(), 1, sweep.height(), sweep.width()], normalize_frames(sweep.frames()))
}

impl<F: Scalar> SweepBatch<F> {
    /// `local[b]` is either the frames or cached CNN features of `sweeps[b]`;
    /// `global` is the `(resolution, stride)` of the global path when needed.
    pub fn build(sweeps: &[&Sweep], local: Option<&[Tensor<F>]>, global: Option<(usize, usize)>) -> Result<Self> {
        if sweeps.is_empty() {
            return Err(Error::invalid("empty sweep batch"));
        }
        if let Some(s) = sweeps.iter().find(|s| s.len() < 2) {
            return Err(Error::invalid(format!("sweep {} has fewer than 2 frames", s.id)));
        }
        let valid: Vec<usize> = sweeps.iter().map(|s| s.len()).collect();
        let len = *valid.iter().max().expect("non-empty");
        let local = match local {
            Some(feats) => {
                if feats.len() != sweeps.len() || feats.iter().zip(&valid).any(|(f, &n)| f.shape()[0] != n) {
                    return Err(Error::invalid("cached features do not match the sweeps"));
                }
                LocalInput::Features(pad_stack(feats, len))
            }
            None => {
                let frames: Vec<Tensor<F>> = sweeps.iter().map(|s| sweep_frames(s)).collect();
                if frames.iter().any(|f| f.shape()[1..] != frames[0].shape()[1..]) {
                    return Err(Error::invalid("sweeps in a batch must share the frame size"));
                }
                LocalInput::Frames(pad_stack(&frames, len))
            }
        };
        let global = match global {
            Some((res, stride)) => {
                let indices: Vec<Vec<usize>> = valid.iter().map(|&n| subsample_evenly(n, stride)).collect();
                let gvalid: Vec<usize> = indices.iter().map(Vec::len).collect();
                let glen = *gvalid.iter().max().expect("non-empty");
                let parts: Vec<Tensor<F>> = sweeps
                    .iter()
                    .zip(&indices)
                    .map(|(s, idx)| {
                        let (f, h, w) = gather_frames(s, idx, Some((res, res)));
                        Tensor::new(vec![idx.len(), 1, h, w], normalize_frames(&f))
                    })
                    .collect();
                Some(GlobalInput { frames: pad_stack(&parts, glen), len: glen, keep: keep_mask(&gvalid, glen), indices })
            }
            None => None,
        };
        let indices: Vec<Vec<usize>> = valid.iter().map(|&n| (0..n).collect()).collect();
        let mut targets = Vec::with_capacity(sweeps.len() * len * 6);
        let mut target_mask = Vec::with_capacity(sweeps.len() * len * 6);
        for (s, idx) in sweeps.iter().zip(&indices) {
            let rel = relative_targets(&s.poses, idx);
            for t in 0..len {
                let p = rel.get(t).copied();
                targets.extend(p.unwrap_or(PoseParams::ZERO).to_array().map(F::c));
                target_mask.extend([p.is_some(); 6]);
            }
        }
        Ok(Self {
            len,
            keep: keep_mask(&valid, len),
            valid,
            local,
            indices,
            global,
            targets: Tensor::new(vec![sweeps.len(), len, 6], targets),
            target_mask,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.valid.len()
    }
}

/// Local embeddings `[B, len, pooled_dim]` from either input form.
pub fn local_embeddings<F: Scalar>(model: &DualTrackModel<F>, s: &mut Session<F>, batch: &SweepBatch<F>) -> Var {
    let feats = match &batch.local {
        LocalInput::Frames(t) => {
            let x = s.input(t.clone());
            model.local.features(s, x, batch.len, &batch.valid)
        }
        LocalInput::Features(t) => s.input(t.clone()),
    };
    let e = model.local.pool(s, feats);
    s.graph.reshape(e, &[batch.batch_size(), batch.len, model.local.embedding_dim()])
}

/// A model variant: which submodules produce the per-state relative-pose
/// estimates and which parameters its final training stage updates.
pub trait Variant<F: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    /// Training stage whose checkpoint holds the variant's weights.
    fn stage(&self) -> &'static str;
    fn uses_global(&self) -> bool;
    fn trainable_prefixes(&self, freeze_local_cnn: bool) -> Vec<&'static str>;
    /// `[B, len, 6]`; row `k` estimates `p_{k+1<-k}`.
    fn forward(&self, model: &DualTrackModel<F>, s: &mut Session<F>, batch: &SweepBatch<F>) -> Var;
}

pub struct LocalOnly;
pub struct CoupledVariant;
pub struct DualTrack;

impl<F: Scalar> Variant<F> for LocalOnly {
    fn name(&self) -> &'static str {
        "local_only"
    }

    fn stage(&self) -> &'static str {
        "local_pool"
    }

    fn uses_global(&self) -> bool {
        false
    }

    fn trainable_prefixes(&self, _freeze_local_cnn: bool) -> Vec<&'static str> {
        vec!["local.pool.", "local.head."]
    }

    fn forward(&self, model: &DualTrackModel<F>, s: &mut Session<F>, batch: &SweepBatch<F>) -> Var {
        let e = local_embeddings(model, s, batch);
        model.local.head(s, e)
    }
}

impl<F: Scalar> Variant<F> for CoupledVariant {
    fn name(&self) -> &'static str {
        "coupled"
    }

    fn stage(&self) -> &'static str {
        "coupled"
    }

    fn uses_global(&self) -> bool {
        false
    }

    fn trainable_prefixes(&self, freeze_local_cnn: bool) -> Vec<&'static str> {
        let mut p = vec!["local.pool.", "coupled."];
        if !freeze_local_cnn {
            p.push("local.cnn.");
        }
        p
    }

    fn forward(&self, model: &DualTrackModel<F>, s: &mut Session<F>, batch: &SweepBatch<F>) -> Var {
        let e = local_embeddings(model, s, batch);
        model.coupled.forward(s, e, &batch.indices, Some(&batch.keep))
    }
}

impl<F: Scalar> Variant<F> for DualTrack {
    fn name(&self) -> &'static str {
        "dualtrack"
    }

    fn stage(&self) -> &'static str {
        "fusion"
    }

    fn uses_global(&self) -> bool {
        true
    }

    fn trainable_prefixes(&self, freeze_local_cnn: bool) -> Vec<&'static str> {
        let mut p = vec!["local.pool.", "global.", "fusion."];
        if !freeze_local_cnn {
            p.push("local.cnn.");
        }
        p
    }

    fn forward(&self, model: &DualTrackModel<F>, s: &mut Session<F>, batch: &SweepBatch<F>) -> Var {
        let g = batch.global.as_ref().expect("dualtrack batches carry a global path");
        let e = local_embeddings(model, s, batch);
        let gx = s.input(g.frames.clone());
        let scale = 1.0 / model.global_stride() as f64;
        let gs = model.global.encode(s, gx, &g.indices, g.len, Some(&g.keep), scale);
        let inputs = FusionInputs {
            local: e,
            local_indices: &batch.indices,
            local_keep: Some(&batch.keep),
            global: gs,
            global_indices: &g.indices,
            global_keep: Some(&g.keep),
        };
        let x = model.fusion.forward(s, &inputs);
        model.fusion.head(s, x)
    }
}

/// Variants selectable by name.
#[derive(Clone)]
pub struct VariantRegistry<F: Scalar> {
    variants: BTreeMap<String, Arc<dyn Variant<F>>>,
}

impl<F: Scalar> Default for VariantRegistry<F> {
    fn default() -> Self {
        let mut r = Self { variants: BTreeMap::new() };
        r.register(Arc::new(LocalOnly));
        r.register(Arc::new(CoupledVariant));
        r.register(Arc::new(DualTrack));
        r
    }
}

impl<F: Scalar> VariantRegistry<F> {
    pub fn register(&mut self, v: Arc<dyn Variant<F>>) {
        self.variants.insert(v.name().to_string(), v);
    }

    pub fn names(&self) -> Vec<&str> {
        self.variants.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Variant<F>>> {
        self.variants
            .get(name)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("unknown variant {name:?} (expected one of {})", self.names().join(", "))))
    }
}

/// Trainable mask for a variant's final stage.
pub fn variant_mask<F: Scalar>(model: &DualTrackModel<F>, v: &dyn Variant<F>, freeze_local_cnn: bool) -> TrainMask {
    TrainMask::prefixes(&model.store, &v.trainable_prefixes(freeze_local_cnn))
}

/// Relative-pose estimates for one sweep in inference mode, `N - 1` rows.
pub fn predict_sweep<F: Scalar>(model: &DualTrackModel<F>, v: &dyn Variant<F>, sweep: &Sweep) -> Result<Vec<PoseParams>> {
    if sweep.height() != model.config.image_size || sweep.width() != model.config.image_size {
        return Err(Error::invalid(format!(
            "sweep {} frames are {}x{}, model expects {}",
            sweep.id,
            sweep.height(),
            sweep.width(),
            model.config.image_size
        )));
    }
    let global = v.uses_global().then(|| (model.config.global.resolution, model.global_stride()));
    let batch = SweepBatch::<F>::build(&[sweep], None, global)?;
    let mut s = Session::inference(&model.store);
    let out = v.forward(model, &mut s, &batch);
    Ok(out_to_params(s.value(out), sweep.len()))
}

/// First `n - 1` rows of a `[1, len, 6]` prediction.
pub fn out_to_params<F: Scalar>(out: &Tensor<F>, n: usize) -> Vec<PoseParams> {
    out.data()[..(n - 1) * 6]
        .chunks(6)
        .map(|c| PoseParams::from_array([c[0], c[1], c[2], c[3], c[4], c[5]].map(|v| v.f64())))
        .collect()
}
