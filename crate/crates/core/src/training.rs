//! Staged training: local CNN with a temporary head, attention pooling on
//! the frozen CNN, global encoder, then fusion (or the coupled ablation).

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use dualtrack_autograd::{clip_grad_norm, AdamW, AdamWConfig, CosineSchedule, Session, Tensor, TrainMask, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{Config, StagePlan, TrainConfig};
use crate::dataset::{sample_global_subsequence, sample_local_subsequence, subsample_evenly, DatasetIndex, Split, Sweep};
use crate::error::{Error, Result};
use crate::geometry::{compose_trajectory, PoseParams, Trajectory};
use crate::metrics::{evaluate, mean_report, MetricsReport};
use crate::nn::{
    normalize_frames, out_to_params, sweep_frames, BackboneRegistry, CoupledVariant, DualTrack, DualTrackModel, LocalOnly,
    SweepBatch, Variant,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    LocalCnn,
    LocalPool,
    Global,
    Fusion,
    Coupled,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::LocalCnn, Stage::LocalPool, Stage::Global, Stage::Fusion, Stage::Coupled];

    pub fn name(self) -> &'static str {
        match self {
            Stage::LocalCnn => "local_cnn",
            Stage::LocalPool => "local_pool",
            Stage::Global => "global",
            Stage::Fusion => "fusion",
            Stage::Coupled => "coupled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?} (expected local_cnn, local_pool, global, fusion or coupled)")))
    }

    /// Stages whose weights this stage starts from, with the parameter
    /// prefixes taken from each.
    pub fn inherits(self) -> &'static [(Stage, &'static str)] {
        match self {
            Stage::LocalCnn | Stage::Global => &[],
            Stage::LocalPool => &[(Stage::LocalCnn, "local.cnn.")],
            Stage::Fusion => &[(Stage::LocalPool, "local."), (Stage::Global, "global.")],
            Stage::Coupled => &[(Stage::LocalPool, "local.")],
        }
    }

    pub fn plan(self, t: &TrainConfig) -> &StagePlan {
        match self {
            Stage::LocalCnn => &t.local_cnn,
            Stage::LocalPool => &t.local_pool,
            Stage::Global => &t.global,
            Stage::Fusion => &t.fusion,
            Stage::Coupled => &t.coupled,
        }
    }

    pub fn trainable(self, freeze_local_cnn: bool) -> Vec<&'static str> {
        match self {
            Stage::LocalCnn => vec!["local.cnn.", "local.cnn_head."],
            Stage::LocalPool => <LocalOnly as Variant<f32>>::trainable_prefixes(&LocalOnly, true),
            Stage::Global => vec!["global."],
            Stage::Fusion => <DualTrack as Variant<f32>>::trainable_prefixes(&DualTrack, freeze_local_cnn),
            Stage::Coupled => <CoupledVariant as Variant<f32>>::trainable_prefixes(&CoupledVariant, freeze_local_cnn),
        }
    }

    fn cached_features(self, freeze_local_cnn: bool) -> bool {
        match self {
            Stage::LocalPool => true,
            Stage::Fusion | Stage::Coupled => freeze_local_cnn,
            Stage::LocalCnn | Stage::Global => false,
        }
    }

    pub fn checkpoint_file(self) -> String {
        format!("{}.ckpt", self.name())
    }

    /// Weights of the epoch with the lowest validation GPE.
    pub fn best_file(self) -> String {
        format!("{}.best.ckpt", self.name())
    }
}

/// Stage that produces the weights of a named variant.
pub fn variant_stage(variant: &str) -> Result<Stage> {
    match variant {
        "local_only" => Ok(Stage::LocalPool),
        "coupled" => Ok(Stage::Coupled),
        "dualtrack" => Ok(Stage::Fusion),
        other => Err(Error::invalid(format!("unknown variant {other:?}"))),
    }
}

/// Element-mean squared error between equally shaped predictions and
/// targets (translations in mm and rotations in degrees weighted equally).
pub fn tracking_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::invalid(format!("loss operands have {} and {} elements", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

pub struct TrainData {
    pub train: Vec<Sweep>,
    pub val: Vec<Sweep>,
}

impl TrainData {
    pub fn load(root: &Path) -> Result<Self> {
        let index = DatasetIndex::read(root)?;
        let train = index.load_split(root, Split::Train)?;
        if train.is_empty() {
            return Err(Error::invalid(format!("dataset {} has no training sweeps", root.display())));
        }
        Ok(Self { train, val: index.load_split(root, Split::Val)? })
    }
}

#[derive(Clone)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume: bool,
    pub force: bool,
    /// Stop after this many epochs of the current run (simulated interruption).
    pub stop_after: Option<usize>,
    pub verbose: bool,
    pub backbones: BackboneRegistry<f32>,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            resume: false,
            force: false,
            stop_after: None,
            verbose: false,
            backbones: BackboneRegistry::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    /// Training losses of the steps run by this call.
    pub losses: Vec<f64>,
    pub best_val_gpe: Option<f64>,
    pub complete: bool,
}

pub const LOG_FILE: &str = "train_log.csv";
const LOG_HEADER: &str = "step,stage,epoch,loss,lr,val_gpe_mm,val_lpe_um\n";

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100 + stage as u64);
    rng
}

fn adamw(plan: &StagePlan) -> AdamWConfig {
    AdamWConfig { weight_decay: plan.weight_decay, ..AdamWConfig::default() }
}

/// Loads a finished stage's best weights, checking the architecture hash.
pub fn load_stage_weights(cfg: &Config, dir: &Path, stage: Stage) -> Result<Checkpoint> {
    let main = dir.join(stage.checkpoint_file());
    let required = || {
        Error::MissingPrerequisite(format!("stage {} must be trained first (no completed {} in {})", stage.name(), stage.checkpoint_file(), dir.display()))
    };
    if !main.exists() {
        return Err(required());
    }
    let head = Checkpoint::load(&main)?;
    if !head.manifest.complete {
        return Err(required());
    }
    let best = Checkpoint::load(&dir.join(stage.best_file()))?;
    let hash = cfg.model_hash();
    if best.manifest.model_hash != hash {
        return Err(Error::Incompatible(format!(
            "{} was trained for model {} but the configuration describes {}",
            stage.best_file(),
            &best.manifest.model_hash[..12],
            &hash[..12]
        )));
    }
    Ok(best)
}

/// Model with the weights of `stage`'s best checkpoint in `dir`.
pub fn load_model(cfg: &Config, dir: &Path, stage: Stage, backbones: &BackboneRegistry<f32>) -> Result<DualTrackModel<f32>> {
    let ck = load_stage_weights(cfg, dir, stage)?;
    let mut model = DualTrackModel::new(&cfg.model, cfg.seed, backbones)?;
    ck.apply_to(&mut model.store, &[""])?;
    Ok(model)
}

enum Batch {
    Windows { input: Tensor<f32>, seq_len: usize, rows: usize, targets: Tensor<f32>, mask: Vec<bool> },
    Global { frames: Tensor<f32>, indices: Vec<Vec<usize>>, len: usize, targets: Tensor<f32>, mask: Vec<bool> },
    Sweeps(SweepBatch<f32>),
}

fn padded_targets(rows: &[Vec<PoseParams>], len: usize) -> (Tensor<f32>, Vec<bool>) {
    let mut t = Vec::with_capacity(rows.len() * len * 6);
    let mut m = Vec::with_capacity(rows.len() * len * 6);
    for r in rows {
        for k in 0..len {
            let p = r.get(k);
            t.extend(p.copied().unwrap_or(PoseParams::ZERO).to_array().map(|v| v as f32));
            m.extend([p.is_some(); 6]);
        }
    }
    (Tensor::new(vec![rows.len() * len, 6], t), m)
}

fn select_rows(t: &Tensor<f32>, start: usize, len: usize) -> Vec<f32> {
    let per: usize = t.shape()[1..].iter().product();
    t.data()[start * per..(start + len) * per].to_vec()
}

/// CNN features of a whole sweep in inference mode.
pub fn sweep_features(model: &DualTrackModel<f32>, sweep: &Sweep) -> Tensor<f32> {
    let mut s = Session::inference(&model.store);
    let x = s.input(sweep_frames(sweep));
    let f = model.local.features(&mut s, x, sweep.len(), &[sweep.len()]);
    s.value(f).clone()
}

/// Frame indices and relative-pose estimates of a stage's own head on a
/// whole sweep.
pub fn stage_predictions(
    model: &DualTrackModel<f32>,
    stage: Stage,
    sweep: &Sweep,
    cached: Option<&Tensor<f32>>,
) -> Result<(Vec<usize>, Vec<PoseParams>)> {
    let n = sweep.len();
    let all: Vec<usize> = (0..n).collect();
    let mut s = Session::inference(&model.store);
    match stage {
        Stage::LocalCnn => {
            let x = s.input(sweep_frames(sweep));
            let f = model.local.features(&mut s, x, n, &[n]);
            let out = model.local.cnn_head(&mut s, f);
            Ok((all, out_to_params(s.value(out), n)))
        }
        Stage::Global => {
            let idx = subsample_evenly(n, model.global_stride());
            let r = model.config.global.resolution;
            let (f, _, _) = crate::dataset::gather_frames(sweep, &idx, Some((r, r)));
            let x = s.input(Tensor::new(vec![idx.len(), 1, r, r], normalize_frames(&f)));
            let scale = 1.0 / model.global_stride() as f64;
            let y = model.global.encode(&mut s, x, std::slice::from_ref(&idx), idx.len(), None, scale);
            let out = model.global.head(&mut s, y);
            let rel = out_to_params(s.value(out), idx.len());
            Ok((idx, rel))
        }
        Stage::LocalPool | Stage::Fusion | Stage::Coupled => {
            let v: &dyn Variant<f32> = match stage {
                Stage::LocalPool => &LocalOnly,
                Stage::Fusion => &DualTrack,
                _ => &CoupledVariant,
            };
            let global = v.uses_global().then(|| (model.config.global.resolution, model.global_stride()));
            let feats = cached.map(|c| vec![c.clone()]);
            let batch = SweepBatch::build(&[sweep], feats.as_deref(), global)?;
            let out = v.forward(model, &mut s, &batch);
            Ok((all, out_to_params(s.value(out), n)))
        }
    }
}

/// Metrics of a stage's predictions against ground truth on the predicted
/// frames.
pub fn stage_report(
    model: &DualTrackModel<f32>,
    stage: Stage,
    sweep: &Sweep,
    cached: Option<&Tensor<f32>>,
) -> Result<MetricsReport> {
    let (idx, rel) = stage_predictions(model, stage, sweep, cached)?;
    let gt = sweep.poses.select(&idx)?;
    let pred = compose_trajectory(&rel, gt.first())?;
    evaluate(&gt, &pred, &sweep.cal, sweep.width(), sweep.height())
}

struct Runner<'a> {
    cfg: &'a Config,
    stage: Stage,
    data: &'a TrainData,
    model: DualTrackModel<f32>,
    mask: TrainMask,
    opt: AdamW<f32>,
    sched: CosineSchedule,
    rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
    best: Option<f64>,
    train_cache: Option<Vec<Tensor<f32>>>,
    val_cache: Option<Vec<Tensor<f32>>>,
}

impl<'a> Runner<'a> {
    fn batch_size(&self) -> usize {
        let t = &self.cfg.train;
        match self.stage {
            Stage::LocalCnn | Stage::LocalPool => t.local_batch,
            Stage::Global => t.global_batch,
            Stage::Fusion | Stage::Coupled => t.fusion_batch,
        }
    }

    fn steps_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.batch_size())
    }

    fn make_batch(&mut self, chunk: &[usize]) -> Result<Batch> {
        let t = &self.cfg.train;
        let sweeps: Vec<&Sweep> = chunk.iter().map(|&i| &self.data.train[i]).collect();
        match self.stage {
            Stage::LocalCnn | Stage::LocalPool => {
                let w = t.window;
                let mut input = Vec::new();
                let mut targets = Vec::new();
                let mut shape = Vec::new();
                for (&i, sw) in chunk.iter().zip(&sweeps) {
                    let row = sample_local_subsequence(sw, w, &mut self.rng)?;
                    match &self.train_cache {
                        Some(cache) => {
                            input.extend(select_rows(&cache[i], row.frame_indices[0], w));
                            shape = cache[i].shape()[1..].to_vec();
                        }
                        None => {
                            input.extend(normalize_frames::<f32>(&row.frames));
                            shape = vec![1, row.height, row.width];
                        }
                    }
                    targets.push(row.targets);
                }
                let rows = chunk.len();
                let mut full = vec![rows * w];
                full.extend(shape);
                let (targets, mask) = padded_targets(&targets, w);
                Ok(Batch::Windows { input: Tensor::new(full, input), seq_len: w, rows, targets, mask })
            }
            Stage::Global => {
                let r = self.cfg.model.global.resolution;
                let l = t.global_count;
                let mut frames = Vec::new();
                let mut indices = Vec::new();
                let mut targets = Vec::new();
                for sw in &sweeps {
                    let row = sample_global_subsequence(sw, l, (r, r), &mut self.rng)?;
                    frames.extend(normalize_frames::<f32>(&row.frames));
                    indices.push(row.frame_indices);
                    targets.push(row.targets);
                }
                let (targets, mask) = padded_targets(&targets, l);
                let frames = Tensor::new(vec![sweeps.len() * l, 1, r, r], frames);
                Ok(Batch::Global { frames, indices, len: l, targets, mask })
            }
            Stage::Fusion | Stage::Coupled => {
                let feats: Option<Vec<Tensor<f32>>> =
                    self.train_cache.as_ref().map(|c| chunk.iter().map(|&i| c[i].clone()).collect());
                let global = (self.stage == Stage::Fusion).then(|| (self.cfg.model.global.resolution, self.model.global_stride()));
                Ok(Batch::Sweeps(SweepBatch::build(&sweeps, feats.as_deref(), global)?))
            }
        }
    }

    fn loss(&self, s: &mut Session<f32>, batch: &Batch) -> Var {
        let m = &self.model;
        match batch {
            Batch::Windows { input, seq_len, rows, targets, mask } => {
                let x = s.input(input.clone());
                let out = if self.stage == Stage::LocalCnn {
                    let f = m.local.features(s, x, *seq_len, &vec![*seq_len; *rows]);
                    m.local.cnn_head(s, f)
                } else {
                    let e = m.local.pool(s, x);
                    m.local.head(s, e)
                };
                s.graph.mse(out, targets, Some(mask))
            }
            Batch::Global { frames, indices, len, targets, mask } => {
                let x = s.input(frames.clone());
                let y = m.global.encode(s, x, indices, *len, None, 1.0 / m.global_stride() as f64);
                let out = m.global.head(s, y);
                let out = s.graph.reshape(out, &[indices.len() * len, 6]);
                s.graph.mse(out, targets, Some(mask))
            }
            Batch::Sweeps(b) => {
                let out = if self.stage == Stage::Fusion {
                    DualTrack.forward(m, s, b)
                } else {
                    CoupledVariant.forward(m, s, b)
                };
                s.graph.mse(out, &b.targets, Some(&b.target_mask))
            }
        }
    }

    fn train_step(&mut self, chunk: &[usize]) -> Result<f64> {
        let batch = self.make_batch(chunk)?;
        let lr = self.sched.lr(self.step);
        let (value, mut grads) = {
            let mut s = Session::train(&self.model.store, &self.mask);
            let l = self.loss(&mut s, &batch);
            let value = s.value(l).item() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage {} step {}: loss is {value} (lr {lr:.3e})",
                    self.stage.name(),
                    self.step
                )));
            }
            (value, s.backward(l))
        };
        let norm = clip_grad_norm(&mut grads, self.cfg.train.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Divergence(format!(
                "stage {} step {}: gradient norm is {norm} at loss {value}",
                self.stage.name(),
                self.step
            )));
        }
        self.opt.apply(&mut self.model.store, &grads, lr);
        self.step += 1;
        Ok(value)
    }

    fn validate(&self) -> Result<Option<(f64, f64)>> {
        if self.data.val.is_empty() {
            return Ok(None);
        }
        let mut reports = Vec::with_capacity(self.data.val.len());
        for (i, sw) in self.data.val.iter().enumerate() {
            let cached = self.val_cache.as_ref().map(|c| &c[i]);
            reports.push(stage_report(&self.model, self.stage, sw, cached)?);
        }
        let mean = mean_report(&reports).expect("non-empty");
        Ok(Some((mean[0], mean[1])))
    }

    fn checkpoint(&self, complete: bool, with_state: bool) -> Checkpoint {
        let (opt, rng) = if with_state { (Some(&self.opt), Some(&self.rng)) } else { (None, None) };
        let mut ck =
            Checkpoint::from_store(&self.model.store, opt, rng, &self.cfg.model_hash(), self.stage.name(), &self.cfg.to_toml());
        ck.manifest.step = self.step;
        ck.manifest.epoch = self.epoch;
        ck.manifest.complete = complete;
        ck.manifest.best_val_gpe = self.best;
        ck
    }
}

fn log_line(path: &Path, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    if fresh {
        f.write_all(LOG_HEADER.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains one stage, writing `<stage>.ckpt` (resumable, updated every
/// epoch), `<stage>.best.ckpt` and appending to the training log.
pub fn train_stage(cfg: &Config, stage: Stage, data: &TrainData, opts: &TrainOptions) -> Result<StageOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("no training sweeps"));
    }
    let dir = &opts.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let main = dir.join(stage.checkpoint_file());
    let best_path = dir.join(stage.best_file());
    let log = dir.join(LOG_FILE);
    let plan = stage.plan(&cfg.train).clone();
    let freeze = cfg.train.freeze_local_cnn;

    let mut model = DualTrackModel::<f32>::new(&cfg.model, cfg.seed, &opts.backbones)?;
    let resume_from = if main.exists() {
        if !opts.resume && !opts.force {
            return Err(Error::Refused(main));
        }
        if opts.resume {
            let ck = Checkpoint::load(&main)?;
            if ck.manifest.model_hash != cfg.model_hash() {
                return Err(Error::Incompatible(format!("{} belongs to a different model configuration", main.display())));
            }
            Some(ck)
        } else {
            None
        }
    } else {
        None
    };

    if let Some(ck) = &resume_from {
        if ck.manifest.complete {
            return Ok(StageOutcome {
                stage,
                checkpoint: main,
                best_checkpoint: best_path,
                losses: Vec::new(),
                best_val_gpe: ck.manifest.best_val_gpe,
                complete: true,
            });
        }
    }
    for &(prev, prefix) in stage.inherits() {
        let ck = load_stage_weights(cfg, dir, prev)?;
        ck.apply_to(&mut model.store, &[prefix])?;
    }

    let mask = TrainMask::prefixes(&model.store, &stage.trainable(freeze));
    let mut runner = Runner {
        cfg,
        stage,
        data,
        opt: AdamW::new(adamw(&plan), model.store.len()),
        mask,
        sched: CosineSchedule::new(plan.lr, 0),
        rng: stage_rng(cfg.seed, stage),
        step: 0,
        epoch: 0,
        best: None,
        model,
        train_cache: None,
        val_cache: None,
    };
    runner.sched = CosineSchedule::new(plan.lr, (plan.epochs * runner.steps_per_epoch()) as u64);
    if let Some(ck) = &resume_from {
        ck.apply_to(&mut runner.model.store, &[""])?;
        runner.opt = ck.optimizer(&runner.model.store, adamw(&plan))?;
        runner.rng = ck
            .manifest
            .rng
            .as_ref()
            .ok_or_else(|| Error::Incompatible("checkpoint has no rng state".into()))?
            .restore()?;
        runner.step = ck.manifest.step;
        runner.epoch = ck.manifest.epoch;
        runner.best = ck.manifest.best_val_gpe;
    }
    if stage.cached_features(freeze) {
        runner.train_cache = Some(data.train.iter().map(|s| sweep_features(&runner.model, s)).collect());
        runner.val_cache = Some(data.val.iter().map(|s| sweep_features(&runner.model, s)).collect());
    }

    let mut losses = Vec::new();
    let mut run_epochs = 0;
    let bs = runner.batch_size();
    while runner.epoch < plan.epochs {
        if opts.stop_after.is_some_and(|k| run_epochs >= k) {
            break;
        }
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut runner.rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(bs) {
            let lr = runner.sched.lr(runner.step);
            let loss = runner.train_step(chunk)?;
            log_line(&log, &format!("{},{},{},{loss:.9e},{lr:.6e},,\n", runner.step, stage.name(), runner.epoch))?;
            losses.push(loss);
            epoch_loss += loss;
        }
        runner.epoch += 1;
        run_epochs += 1;
        let mut line = format!(
            "[{}] epoch {}/{} loss {:.5}",
            stage.name(),
            runner.epoch,
            plan.epochs,
            epoch_loss / order.len().div_ceil(bs) as f64
        );
        if runner.epoch % cfg.train.val_every == 0 || runner.epoch == plan.epochs {
            if let Some((gpe, lpe)) = runner.validate()? {
                log_line(&log, &format!("{},{},{},,,{gpe:.6},{lpe:.6}\n", runner.step, stage.name(), runner.epoch))?;
                line.push_str(&format!(" val GPE {gpe:.3} mm LPE {lpe:.1} um"));
                if runner.best.map_or(true, |b| gpe < b) {
                    runner.best = Some(gpe);
                    runner.checkpoint(false, false).save(&best_path)?;
                }
            }
        }
        if data.val.is_empty() {
            runner.checkpoint(false, false).save(&best_path)?;
        }
        let done = runner.epoch == plan.epochs;
        runner.checkpoint(done, true).save(&main)?;
        if opts.verbose {
            eprintln!("{line}");
        }
    }
    if plan.epochs == 0 {
        runner.checkpoint(false, false).save(&best_path)?;
        runner.checkpoint(true, true).save(&main)?;
    }
    let complete = runner.epoch >= plan.epochs;
    if complete {
        let mut best = Checkpoint::load(&best_path)?;
        best.manifest.complete = true;
        best.save(&best_path)?;
    }
    Ok(StageOutcome { stage, checkpoint: main, best_checkpoint: best_path, losses, best_val_gpe: runner.best, complete })
}

/// Stages needed to produce a variant, in training order.
pub fn stages_for(variant: &str) -> Result<Vec<Stage>> {
    Ok(match variant_stage(variant)? {
        Stage::LocalPool => vec![Stage::LocalCnn, Stage::LocalPool],
        Stage::Coupled => vec![Stage::LocalCnn, Stage::LocalPool, Stage::Coupled],
        _ => vec![Stage::LocalCnn, Stage::LocalPool, Stage::Global, Stage::Fusion],
    })
}

/// Per-sweep reports of a trained variant on `sweeps`.
pub fn evaluate_variant(model: &DualTrackModel<f32>, variant: &dyn Variant<f32>, sweeps: &[Sweep]) -> Result<Vec<MetricsReport>> {
    sweeps
        .iter()
        .map(|sw| {
            let rel = crate::nn::predict_sweep(model, variant, sw)?;
            let pred = compose_trajectory(&rel, sw.poses.first())?;
            evaluate(&sw.poses, &pred, &sw.cal, sw.width(), sw.height())
        })
        .collect()
}

/// Trains whatever stages of `variant` are missing (resuming unfinished
/// ones) and reports it on `test`.
pub fn run_ablation(
    cfg: &Config,
    data: &TrainData,
    test: &[Sweep],
    variant: &str,
    opts: &TrainOptions,
) -> Result<Vec<MetricsReport>> {
    let mut o = opts.clone();
    o.resume = true;
    for stage in stages_for(variant)? {
        train_stage(cfg, stage, data, &o)?;
    }
    let model = load_model(cfg, &opts.out_dir, variant_stage(variant)?, &opts.backbones)?;
    let v = crate::nn::VariantRegistry::<f32>::default().get(variant)?;
    evaluate_variant(&model, v.as_ref(), test)
}

/// Ground-truth and estimated trajectories (both starting at the true
/// first pose) of a variant on one sweep.
pub fn variant_trajectories(model: &DualTrackModel<f32>, variant: &dyn Variant<f32>, sweep: &Sweep) -> Result<(Trajectory, Trajectory)> {
    let rel = crate::nn::predict_sweep(model, variant, sweep)?;
    Ok((sweep.poses.clone(), compose_trajectory(&rel, sweep.poses.first())?))
}
