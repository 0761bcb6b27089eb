//! Single-file weight checkpoints: a magic line, a JSON manifest and a
//! little-endian `f32` payload of parameters and optimizer moments.

use std::io::Write;
use std::path::Path;

use dualtrack_autograd::{AdamW, AdamWConfig, ParamStore, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"DTCK1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: crate::config::hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Schema { path: "checkpoint".into(), reason: "malformed rng state".into() };
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether first and second optimizer moments follow the parameter.
    pub moments: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub model_hash: String,
    pub stage: String,
    pub step: u64,
    pub epoch: usize,
    pub complete: bool,
    pub best_val_gpe: Option<f64>,
    /// Full configuration (TOML) the weights were trained with.
    pub config: String,
    pub optimizer_step: Option<u64>,
    pub rng: Option<RngState>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: Vec<Tensor<f32>>,
    /// Per parameter `(first, second)` moments when present.
    pub moments: Vec<Option<(Tensor<f32>, Tensor<f32>)>>,
}

impl Checkpoint {
    pub fn from_store(
        store: &ParamStore<f32>,
        opt: Option<&AdamW<f32>>,
        rng: Option<&ChaCha8Rng>,
        model_hash: &str,
        stage: &str,
        config: &str,
    ) -> Self {
        let mut entries = Vec::new();
        let mut params = Vec::new();
        let mut moments = Vec::new();
        let state = opt.map(|o| o.state());
        for (id, name, t) in store.iter() {
            let m = state.and_then(|(_, first, second)| {
                Some((first[id.index()].clone()?, second[id.index()].clone()?))
            });
            entries.push(ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), moments: m.is_some() });
            params.push(t.clone());
            moments.push(m);
        }
        Self {
            manifest: Manifest {
                format: "DTCK1".into(),
                model_hash: model_hash.to_string(),
                stage: stage.to_string(),
                step: 0,
                epoch: 0,
                complete: false,
                best_val_gpe: None,
                config: config.to_string(),
                optimizer_step: state.map(|s| s.0),
                rng: rng.map(RngState::capture),
                params: entries,
            },
            params,
            moments,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serialises");
        let mut buf = Vec::with_capacity(manifest.len() + 16 + self.params.iter().map(|p| p.numel() * 12).sum::<usize>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        buf.extend_from_slice(&manifest);
        for (p, m) in self.params.iter().zip(&self.moments) {
            p.data().iter().for_each(|v| v.write_le(&mut buf));
            if let Some((a, b)) = m {
                a.data().iter().chain(b.data()).for_each(|v| v.write_le(&mut buf));
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::Schema { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < 14 || &bytes[..6] != MAGIC {
            return Err(bad("not a DTCK1 checkpoint"));
        }
        let n = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(14..14 + n).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(&format!("manifest: {e}")))?;
        let mut pos = 14 + n;
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let count: usize = shape.iter().product();
            let end = pos + count * 4;
            let raw = bytes.get(pos..end).ok_or_else(|| bad("truncated payload"))?;
            pos = end;
            Ok(Tensor::new(shape.to_vec(), raw.chunks_exact(4).map(f32::read_le).collect()))
        };
        let mut params = Vec::new();
        let mut moments = Vec::new();
        for e in &manifest.params {
            params.push(take(&e.shape)?);
            moments.push(if e.moments { Some((take(&e.shape)?, take(&e.shape)?)) } else { None });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self { manifest, params, moments })
    }

    /// Copies parameters whose names start with one of `prefixes` into
    /// `store`; all of them must exist with matching shapes.
    pub fn apply_to(&self, store: &mut ParamStore<f32>, prefixes: &[&str]) -> Result<usize> {
        let mut copied = 0;
        for (e, t) in self.manifest.params.iter().zip(&self.params) {
            if !prefixes.iter().any(|p| e.name.starts_with(p)) {
                continue;
            }
            let id = store.id(&e.name).ok_or_else(|| {
                Error::Incompatible(format!("checkpoint parameter {} does not exist in the model", e.name))
            })?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Incompatible(format!("parameter {} has shape {:?} in the checkpoint", e.name, t.shape())));
            }
            *store.get_mut(id) = t.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Optimizer with the stored moments, mapped onto `store`'s layout.
    pub fn optimizer(&self, store: &ParamStore<f32>, config: AdamWConfig) -> Result<AdamW<f32>> {
        let step = self.manifest.optimizer_step.ok_or_else(|| Error::Incompatible("checkpoint has no optimizer state".into()))?;
        let mut first = vec![None; store.len()];
        let mut second = vec![None; store.len()];
        for (e, m) in self.manifest.params.iter().zip(&self.moments) {
            if let Some((a, b)) = m {
                let id = store.id(&e.name).ok_or_else(|| Error::Incompatible(format!("unknown parameter {}", e.name)))?;
                first[id.index()] = Some(a.clone());
                second[id.index()] = Some(b.clone());
            }
        }
        Ok(AdamW::restore(config, step, first, second))
    }
}
