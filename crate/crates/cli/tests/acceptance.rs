//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Desk-scale training for criteria 5 and 6 is written under
//! `DUALTRACK_ACCEPTANCE_DIR` (default `target/tmp/acceptance-desk`) and
//! reused on later runs only when the stored configuration is identical.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dualtrack_autograd::{Session, Tensor, TrainMask};
use dualtrack_cli::{reconstruct_into, Predictor};
use dualtrack_core::checkpoint::Checkpoint;
use dualtrack_core::compound::{compound, Volume};
use dualtrack_core::config::{Config, ModelConfig, TransformerConfig};
use dualtrack_core::dataset::{load_sweep, save_sweep, DatasetIndex, Split, Sweep};
use dualtrack_core::geometry::{
    compose_trajectory, matrix_to_params, params_to_matrix, rebase_trajectory, relative_transform, Pose, PoseParams,
    Trajectory,
};
use dualtrack_core::metrics::{evaluate, Calibration, MetricsReport};
use dualtrack_core::nn::{BackboneRegistry, DualTrackModel, FusionInputs, SweepBatch, VariantRegistry};
use dualtrack_core::reconstruct::{out_of_plane_series, report, Baseline};
use dualtrack_core::synth::{generate_dataset, make_phantom, synth_sweep, Family, Phantom};
use dualtrack_core::training::{train_stage, Stage, StageOutcome, TrainData, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type M4 = [[f64; 4]; 4];

fn m4(p: &Pose) -> M4 {
    let r = p.to_row_major();
    std::array::from_fn(|i| std::array::from_fn(|j| r[4 * i + j]))
}

fn mul(a: &M4, b: &M4) -> M4 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..4).map(|k| a[i][k] * b[k][j]).sum()))
}

fn rigid_inv(a: &M4) -> M4 {
    let mut o = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = a[j][i];
        }
        o[i][3] = -(0..3).map(|k| a[k][i] * a[k][3]).sum::<f64>();
    }
    o[3][3] = 1.0;
    o
}

fn apply(a: &M4, p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| a[i][0] * p[0] + a[i][1] * p[1] + a[i][2] * p[2] + a[i][3])
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn max_diff(a: &M4, b: &M4) -> f64 {
    (0..4).flat_map(|i| (0..4).map(move |j| (a[i][j] - b[i][j]).abs())).fold(0.0, f64::max)
}

/// Z-Y-X rotation written out element by element.
fn closed_form(p: &PoseParams) -> M4 {
    let [y, pi, r] = p.r.map(f64::to_radians);
    let (sy, cy) = y.sin_cos();
    let (sp, cp) = pi.sin_cos();
    let (sr, cr) = r.sin_cos();
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr, p.t[0]],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr, p.t[1]],
        [-sp, cp * sr, cp * cr, p.t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn random_params(rng: &mut impl Rng) -> PoseParams {
    PoseParams::new(
        [rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)],
        [rng.gen_range(-179.9..179.9), rng.gen_range(-89.0..89.0), rng.gen_range(-179.9..179.9)],
    )
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

fn random_walk(n: usize, step_mm: f64, step_deg: f64, rng: &mut impl Rng) -> Trajectory {
    let mut poses = vec![params_to_matrix(&random_params(rng)).unwrap()];
    for _ in 1..n {
        let rel = PoseParams::new(
            std::array::from_fn(|_| rng.gen_range(-step_mm..step_mm)),
            std::array::from_fn(|_| rng.gen_range(-step_deg..step_deg)),
        );
        let next = poses.last().unwrap().compose(&params_to_matrix(&rel).unwrap());
        poses.push(next);
    }
    Trajectory::new(poses).unwrap()
}

fn criterion_geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_fwd, mut worst_back, mut worst_params) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let p = random_params(&mut rng);
        let m = params_to_matrix(&p).unwrap();
        worst_fwd = worst_fwd.max(max_diff(&m4(&m), &closed_form(&p)));
        let q = matrix_to_params(&m).params;
        for k in 0..3 {
            worst_params = worst_params.max((p.t[k] - q.t[k]).abs()).max(angle_gap(p.r[k], q.r[k]));
        }
        worst_back = worst_back.max(max_diff(&m4(&params_to_matrix(&q).unwrap()), &m4(&m)));
    }
    let mut worst_rel = 0.0f64;
    for _ in 0..10_000 {
        let [a, b, c] = [0; 3].map(|_| params_to_matrix(&random_params(&mut rng)).unwrap());
        let rab = relative_transform(&a, &b);
        let want = mul(&rigid_inv(&m4(&a)), &m4(&b));
        let chained = mul(&m4(&rab), &m4(&relative_transform(&b, &c)));
        worst_rel = worst_rel
            .max(max_diff(&m4(&rab), &want))
            .max(max_diff(&mul(&m4(&a), &m4(&rab)), &m4(&b)))
            .max(max_diff(&m4(&relative_transform(&b, &a)), &rigid_inv(&m4(&rab))))
            .max(max_diff(&chained, &m4(&relative_transform(&a, &c))));
    }
    let traj = random_walk(547, 1.0, 1.0, &mut rng);
    let rel = traj.adjacent_relatives();
    let back = compose_trajectory(&rel, traj.first()).unwrap();
    let chain = traj.translations().iter().zip(back.translations()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let pass = worst_fwd < 1e-9 && worst_back < 1e-9 && worst_params < 1e-9 && worst_rel < 1e-9 && chain < 1e-6 && rel.len() == 546;
    outcome(
        pass,
        format!(
            "round-trip matrix {worst_back:.1e}, params {worst_params:.1e}, closed form {worst_fwd:.1e}; relative algebra {worst_rel:.1e}; 546-step chain {chain:.1e} mm"
        ),
    )
}

struct Brute {
    gpe: f64,
    lpe: f64,
    fdr: f64,
    max_drift: f64,
}

/// Metrics from raw 4x4 arrays, independent of the library's pose types.
fn brute_metrics(gt: &Trajectory, pred: &Trajectory, cal: &Calibration, w: usize, h: usize) -> Brute {
    let base = |t: &Trajectory| -> Vec<M4> {
        let inv0 = rigid_inv(&m4(t.first()));
        t.poses().iter().map(|p| mul(&inv0, &m4(p))).collect()
    };
    let (g, p) = (base(gt), base(pred));
    let [sx, sy] = cal.pixel_spacing();
    let i2p = m4(cal.image_to_probe());
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    let pts: Vec<[f64; 3]> = [(0.0, 0.0), (wf, 0.0), (0.0, hf), (wf, hf), (wf / 2.0, hf / 2.0)]
        .iter()
        .map(|&(u, v)| apply(&i2p, [u * sx, v * sy, 0.0]))
        .collect();
    let mut gsum = 0.0;
    for (a, b) in g.iter().zip(&p) {
        for q in &pts {
            gsum += dist(apply(a, *q), apply(b, *q));
        }
    }
    let mut lsum = 0.0;
    for k in 1..g.len() {
        let ra = mul(&rigid_inv(&g[k - 1]), &g[k]);
        let rb = mul(&rigid_inv(&p[k - 1]), &p[k]);
        for q in &pts {
            lsum += dist(apply(&ra, *q), apply(&rb, *q));
        }
    }
    let tr = |m: &M4| [m[0][3], m[1][3], m[2][3]];
    let n = g.len();
    let span = dist(tr(&g[n - 1]), tr(&g[0]));
    let max_drift = g.iter().zip(&p).map(|(a, b)| dist(tr(a), tr(b))).fold(0.0, f64::max);
    Brute {
        gpe: gsum / (5 * n) as f64,
        lpe: lsum / (5 * (n - 1)) as f64 * 1000.0,
        fdr: dist(tr(&p[n - 1]), tr(&g[n - 1])) / span * 100.0,
        max_drift,
    }
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 4];
    let mut worst_offset = 0.0f64;
    let mut worst_units = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..120);
        let (w, h) = (rng.gen_range(2..300), rng.gen_range(2..300));
        let cal = Calibration::centered([rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5)], w).unwrap();
        let gt = random_walk(n, 1.0, 1.0, &mut rng);
        let pred = Trajectory::new(
            gt.poses()
                .iter()
                .map(|p| {
                    let noise = PoseParams::new(
                        std::array::from_fn(|_| rng.gen_range(-2.0..2.0)),
                        std::array::from_fn(|_| rng.gen_range(-3.0..3.0)),
                    );
                    p.compose(&params_to_matrix(&noise).unwrap())
                })
                .collect(),
        )
        .unwrap();
        let lib = evaluate(&gt, &pred, &cal, w, h).unwrap();
        let b = brute_metrics(&gt, &pred, &cal, w, h);
        for (k, (x, y)) in [(lib.gpe_mm, b.gpe), (lib.lpe_um, b.lpe), (lib.fdr_percent, b.fdr), (lib.max_drift_mm, b.max_drift)]
            .into_iter()
            .enumerate()
        {
            worst[k] = worst[k].max((x - y).abs());
        }
        // conversions: lpe in um is 1000x the mm mean, fdr is 100x the ratio
        let gp = rebase_trajectory(&gt);
        let pp = rebase_trajectory(&pred);
        let ratio = (pp.last().translation() - gp.last().translation()).norm() / (gp.last().translation() - gp.first().translation()).norm();
        worst_units = worst_units.max((lib.fdr_percent - 100.0 * ratio).abs());

        let offset = params_to_matrix(&random_params(&mut rng)).unwrap();
        let shifted = Trajectory::new(pred.poses().iter().map(|p| offset.compose(p)).collect()).unwrap();
        let lpe2 = dualtrack_core::metrics::local_point_error(&gt, &shifted, &cal, w, h).unwrap();
        let lpe1 = dualtrack_core::metrics::local_point_error(&gt, &pred, &cal, w, h).unwrap();
        worst_offset = worst_offset.max((lpe1 - lpe2).abs());
    }
    let pass = worst.iter().all(|&v| v < 1e-9) && worst_offset < 1e-9 && worst_units < 1e-9;
    outcome(
        pass,
        format!(
            "max |lib - brute|: GPE {:.1e} mm, LPE {:.1e} um, FDR {:.1e} %, drift {:.1e} mm; LPE offset shift {worst_offset:.1e} um; unit check {worst_units:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn desk_model() -> ModelConfig {
    Config::preset("desk").unwrap().model
}

fn tiny_model() -> ModelConfig {
    let tf = |hidden, intermediate| TransformerConfig { hidden, intermediate, layers: 1, heads: 2 };
    let mut m = desk_model();
    m.image_size = 32;
    m.local.channels = vec![4, 4, 6, 8];
    m.local.pooled_dim = 8;
    m.local.pool_heads = 2;
    m.global.resolution = 16;
    m.global.channels = vec![4, 8];
    m.global.feature_dim = 8;
    m.global.temporal = tf(8, 16);
    m.fusion.stride = 2;
    m.fusion.interposer = tf(8, 8);
    m.fusion.decoder = tf(8, 16);
    m.coupled = tf(8, 16);
    m
}

fn noise_frames<F: dualtrack_autograd::Scalar>(n: usize, side: usize, rng: &mut impl Rng) -> Tensor<F> {
    Tensor::new(vec![n, 1, side, side], (0..n * side * side).map(|_| F::c(rng.gen_range(-2.0..2.0))).collect())
}

fn criterion_architecture() -> Outcome {
    let cfg = desk_model();
    let model = DualTrackModel::<f32>::new(&cfg, 3, &BackboneRegistry::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let side = cfg.image_size;
    let px = side * side;

    let mut s = Session::inference(&model.store);
    let x = s.input(noise_frames::<f32>(2, side, &mut rng));
    let f = model.local.features(&mut s, x, 2, &[2]);
    let fshape = s.graph.shape(f).to_vec();
    let factor_ok = fshape[2] * 16 == side && fshape[3] * 16 == side;

    let r = cfg.local.radius();
    let n = 14;
    let base: Tensor<f32> = noise_frames(n, side, &mut rng);
    let embed = |t: &Tensor<f32>| -> Vec<Vec<f32>> {
        let mut s = Session::inference(&model.store);
        let x = s.input(t.clone());
        let e = model.local.embed(&mut s, x, n, &[n]);
        s.value(e).data().chunks(model.local.embedding_dim()).map(<[f32]>::to_vec).collect()
    };
    let reference = embed(&base);
    let mut locality_ok = true;
    for t in 0..n {
        let mut outside = base.clone();
        for j in (0..n).filter(|&j| j + r < t || j > t + r) {
            for v in &mut outside.data_mut()[j * px..(j + 1) * px] {
                *v = rng.gen_range(-2.0..2.0);
            }
        }
        let mut inside = base.clone();
        let j = (t + r).min(n - 1);
        for v in &mut inside.data_mut()[j * px..(j + 1) * px] {
            *v = -*v;
        }
        locality_ok &= embed(&outside)[t] == reference[t] && embed(&inside)[t] != reference[t];
    }

    let l = 6;
    let frames: Tensor<f32> = noise_frames(l, cfg.global.resolution, &mut rng);
    let gpx = cfg.global.resolution.pow(2);
    let feats = |t: &Tensor<f32>| -> Vec<Vec<f32>> {
        let mut s = Session::inference(&model.store);
        let x = s.input(t.clone());
        let f = model.global.backbone_features(&mut s, x);
        s.value(f).data().chunks(model.global.backbone.feature_dim()).map(<[f32]>::to_vec).collect()
    };
    let gref = feats(&frames);
    let mut independent = true;
    for j in 0..l {
        let mut changed = frames.clone();
        for v in &mut changed.data_mut()[j * gpx..(j + 1) * gpx] {
            *v = rng.gen_range(-2.0..2.0);
        }
        let out = feats(&changed);
        independent &= (0..l).all(|k| (k == j) != (out[k] == gref[k]));
    }

    let tiny = DualTrackModel::<f64>::new(&tiny_model(), 6, &BackboneRegistry::default()).unwrap();
    let local = Tensor::new(vec![1, 6, 8], (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let global = Tensor::new(vec![1, 3, 8], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
    let gidx = vec![vec![0, 2, 5]];
    let lidx = vec![(0..6).collect::<Vec<_>>()];
    let fused = |g: &Tensor<f64>| -> Vec<f64> {
        let mut s = Session::inference(&tiny.store);
        let lv = s.input(local.clone());
        let gv = s.input(g.clone());
        let inputs = FusionInputs { local: lv, local_indices: &lidx, local_keep: None, global: gv, global_indices: &gidx, global_keep: None };
        let y = tiny.fusion.forward(&mut s, &inputs);
        s.value(y).data().to_vec()
    };
    let h = 1e-5;
    let mut sens = 0.0f64;
    for i in 0..24 {
        let (mut a, mut b) = (global.clone(), global.clone());
        a.data_mut()[i] += h;
        b.data_mut()[i] -= h;
        for (x, y) in fused(&a).iter().zip(&fused(&b)) {
            sens = sens.max(((x - y) / (2.0 * h)).abs());
        }
    }
    let pass = factor_ok && locality_ok && independent && sens > 0.0;
    outcome(
        pass,
        format!(
            "feature map {fshape:?} from {side}x{side} (x16 {factor_ok}); locality r={r} bit-identical {locality_ok}; backbone per-frame {independent}; cross-attention sensitivity {sens:.3e}"
        ),
    )
}

fn random_sweep(n: usize, side: usize, seed: u64) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..n * side * side).map(|_| rng.gen::<f32>()).collect();
    let traj = random_walk(n, 1.0, 2.0, &mut rng);
    Sweep::new(format!("r{seed}"), [n, side, side], frames, traj, Calibration::centered([0.3, 0.3], side).unwrap()).unwrap()
}

fn criterion_gradcheck() -> Outcome {
    let mut model = DualTrackModel::<f64>::new(&tiny_model(), 10, &BackboneRegistry::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let v = VariantRegistry::<f64>::default().get("dualtrack").unwrap();
    let sweep = random_sweep(4, 32, 13);
    let batch = SweepBatch::<f64>::build(&[&sweep], None, Some((16, 2))).unwrap();
    let loss = |m: &DualTrackModel<f64>| {
        let mut s = Session::inference(&m.store);
        let out = v.forward(m, &mut s, &batch);
        let l = s.graph.mse(out, &batch.targets, Some(&batch.target_mask));
        s.value(l).item()
    };
    let mask = TrainMask::all(&model.store);
    let grads = {
        let mut s = Session::train(&model.store, &mask);
        let out = v.forward(&model, &mut s, &batch);
        let l = s.graph.mse(out, &batch.targets, Some(&batch.target_mask));
        s.backward(l)
    };
    let h = 1e-6;
    let (mut checked, mut passed) = (0usize, 0usize);
    for (id, g) in &grads {
        if model.store.name(*id).starts_with("coupled.") {
            continue;
        }
        for _ in 0..g.numel().min(4) {
            let i = rng.gen_range(0..g.numel());
            let orig = model.store.get(*id).data()[i];
            model.store.get_mut(*id).data_mut()[i] = orig + h;
            let lp = loss(&model);
            model.store.get_mut(*id).data_mut()[i] = orig - h;
            let lm = loss(&model);
            model.store.get_mut(*id).data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.data()[i];
            let scale = an.abs().max(fd.abs());
            let rel = if scale < 1e-9 { 0.0 } else { (an - fd).abs() / scale };
            checked += 1;
            passed += usize::from(rel < 1e-3);
        }
    }
    let frac = passed as f64 / checked as f64;
    outcome(frac >= 0.99 && checked >= 200, format!("{passed}/{checked} sampled parameters within 1e-3 ({:.2} %)", frac * 100.0))
}

const TINY: &str = r#"
seed = 3
[data]
train = 4
val = 2
test = 2
num_frames = 24
image_size = 32
phantom_size = 64
sweeps_per_subject = 2
linear_length_mm = [6.0, 10.0]
c_shape_length_mm = [4.0, 8.0]
s_shape_length_mm = [4.0, 5.0]
[model]
image_size = 32
[model.local]
channels = [4, 4, 6, 8]
pooled_dim = 8
pool_heads = 2
[model.global]
resolution = 16
channels = [4, 8]
feature_dim = 8
temporal = { hidden = 8, intermediate = 16, layers = 1, heads = 2 }
[model.fusion]
stride = 2
interposer = { hidden = 8, intermediate = 8, layers = 1, heads = 2 }
decoder = { hidden = 8, intermediate = 16, layers = 1, heads = 2 }
[model.coupled]
hidden = 8
intermediate = 16
layers = 1
heads = 2
[train]
window = 8
global_count = 8
local_cnn = { epochs = 14, lr = 1e-3, weight_decay = 1e-3 }
local_pool = { epochs = 3, lr = 1e-3, weight_decay = 0.0 }
global = { epochs = 3, lr = 1e-3, weight_decay = 0.0 }
fusion = { epochs = 14, lr = 5e-4, weight_decay = 0.0 }
coupled = { epochs = 3, lr = 5e-4, weight_decay = 0.0 }
"#;

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn criterion_determinism() -> Outcome {
    let cfg = Config::from_toml_str(TINY, "tiny").unwrap();
    let data_dir = tempfile::tempdir().unwrap();
    generate_dataset(&cfg.data, cfg.seed, data_dir.path(), false).unwrap();
    let data = TrainData::load(data_dir.path()).unwrap();
    let run = |dir: &Path, stages: &[Stage]| -> Vec<StageOutcome> {
        stages.iter().map(|&s| train_stage(&cfg, s, &data, &TrainOptions::new(dir)).unwrap()).collect()
    };
    let order = [Stage::LocalCnn, Stage::LocalPool, Stage::Global, Stage::Fusion];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(a.path(), &order);
    let rb = run(b.path(), &order);
    let steps: usize = ra.iter().map(|o| o.losses.len()).sum();
    let identical = ra.iter().zip(&rb).all(|(x, y)| bits(&x.losses) == bits(&y.losses));

    let mut resumed = Vec::new();
    for (stage, before) in [(Stage::LocalCnn, &order[..0]), (Stage::Fusion, &order[..3])] {
        let part = tempfile::tempdir().unwrap();
        run(part.path(), before);
        let mut o = TrainOptions::new(part.path());
        o.stop_after = Some(4);
        let first = train_stage(&cfg, stage, &data, &o).unwrap();
        o.stop_after = None;
        o.resume = true;
        let rest = train_stage(&cfg, stage, &data, &o).unwrap();
        let reference = &ra[order.iter().position(|&s| s == stage).unwrap()].losses;
        let k = first.losses.len();
        let ok = rest.losses.len() >= 10 && bits(&rest.losses[..10]) == bits(&reference[k..k + 10]);
        resumed.push(format!("{} {}", stage.name(), if ok { "identical" } else { "DIFFERENT" }));
        if !ok {
            return outcome(false, format!("resume of {} diverged from the uninterrupted run", stage.name()));
        }
    }
    outcome(
        identical,
        format!("retraining {steps} steps over 4 stages bit-identical {identical}; next 10 losses after resume: {}", resumed.join(", ")),
    )
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

fn phantom_r(vol: &Volume, ph: &Phantom) -> f64 {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for k in 0..vol.shape[2] {
        for j in 0..vol.shape[1] {
            for i in 0..vol.shape[0] {
                let v = vol.data[vol.index(i, j, k)];
                if let (false, Some(p)) = (v.is_nan(), ph.sample(&vol.center(i, j, k))) {
                    a.push(v as f64);
                    b.push(p);
                }
            }
        }
    }
    pearson(&a, &b)
}

fn criterion_formats() -> Outcome {
    let cfg = Config::preset("desk").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut frames_ok = true;
    let mut pose_err = 0.0f64;
    let mut rs = Vec::new();
    for (k, family) in Family::ALL.into_iter().enumerate() {
        let ph = make_phantom(100 + k as u64, cfg.data.phantom_size, cfg.data.voxel_spacing_mm, cfg.data.n_landmarks).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let sw = synth_sweep(family.name(), &cfg.data, &ph, family, &mut rng).unwrap();
        let path = dir.path().join(family.name());
        save_sweep(&sw, &path).unwrap();
        let back = load_sweep(&path).unwrap();
        frames_ok &= sw.frames().iter().zip(back.frames()).all(|(a, b)| a.to_bits() == b.to_bits()) && sw.shape() == back.shape();
        for (a, b) in sw.poses.poses().iter().zip(back.poses.poses()) {
            pose_err = pose_err.max(a.max_abs_diff(b));
        }
        let vol = compound(back.frames(), back.shape(), &back.cal, back.poses.poses(), ph.spacing(), None).unwrap();
        rs.push(phantom_r(&vol, &ph));
    }
    let r_min = rs.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        frames_ok && pose_err <= 1e-12 && r_min > 0.8,
        format!("frames bitwise {frames_ok}; pose error {pose_err:.1e}; compounding r = {}", rs.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" / ")),
    )
}

struct DeskRun {
    test: Vec<Sweep>,
    run: PathBuf,
    root: PathBuf,
    train_secs: Option<f64>,
    cached: bool,
    cfg: Config,
}

fn acceptance_root() -> PathBuf {
    std::env::var_os("DUALTRACK_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk"))
}

/// Desk dataset plus trained local-only and dualtrack stages.
fn desk_run() -> Result<DeskRun, String> {
    let cfg = Config::preset("desk").map_err(|e| e.to_string())?;
    let root = acceptance_root();
    let data = root.join("data");
    let run = root.join("run");
    let cfg_text = cfg.to_toml();
    let stamp = root.join("config.toml");
    let same = std::fs::read_to_string(&stamp).ok().as_deref() == Some(cfg_text.as_str());
    if !same {
        if root.exists() {
            std::fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
        }
        std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
    }
    // generation plus training wall time, accumulated across interrupted runs
    let secs_file = root.join("seconds.txt");
    let recorded: Option<f64> = std::fs::read_to_string(&secs_file).ok().and_then(|s| s.trim().parse().ok());
    let mut secs = recorded.unwrap_or(0.0);
    let mut timed = true;
    if data.join("index.json").exists() {
        timed &= recorded.is_some();
    } else {
        let t = Instant::now();
        generate_dataset(&cfg.data, cfg.seed, &data, true).map_err(|e| e.to_string())?;
        secs += t.elapsed().as_secs_f64();
        std::fs::write(&secs_file, format!("{secs}")).map_err(|e| e.to_string())?;
    }
    std::fs::write(&stamp, &cfg_text).map_err(|e| e.to_string())?;
    let td = TrainData::load(&data).map_err(|e| e.to_string())?;
    let mut cached = true;
    let mut opts = TrainOptions::new(&run);
    opts.resume = true;
    opts.verbose = std::env::var_os("DUALTRACK_VERBOSE").is_some();
    for stage in [Stage::LocalCnn, Stage::LocalPool, Stage::Global, Stage::Fusion] {
        let done = run.join(stage.checkpoint_file());
        if done.exists() && Checkpoint::load(&done).map(|c| c.manifest.complete).unwrap_or(false) {
            timed &= recorded.is_some();
            continue;
        }
        cached = false;
        let t = Instant::now();
        train_stage(&cfg, stage, &td, &opts).map_err(|e| e.to_string())?;
        secs += t.elapsed().as_secs_f64();
        std::fs::write(&secs_file, format!("{secs}")).map_err(|e| e.to_string())?;
    }
    let test = DatasetIndex::read(&data).and_then(|i| i.load_split(&data, Split::Test)).map_err(|e| e.to_string())?;
    Ok(DeskRun { test, run, root, train_secs: timed.then_some(secs), cached, cfg })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

struct Predictions {
    zero: Vec<MetricsReport>,
    local: Vec<MetricsReport>,
    dual: Vec<MetricsReport>,
    /// local_only, dualtrack
    models: Vec<Predictor>,
}

fn predictions(d: &DeskRun) -> Result<Predictions, String> {
    let local_p = Predictor::trained(&d.cfg, &d.run, "local_only").map_err(|e| e.to_string())?;
    let dual_p = Predictor::trained(&d.cfg, &d.run, "dualtrack").map_err(|e| e.to_string())?;
    let zero_p = Predictor::baseline(Baseline::Zero);
    let eval = |p: &Predictor| -> Result<Vec<MetricsReport>, String> {
        d.test.iter().map(|s| p.estimate(s).and_then(|e| report(s, &e)).map_err(|e| e.to_string())).collect()
    };
    Ok(Predictions { zero: eval(&zero_p)?, local: eval(&local_p)?, dual: eval(&dual_p)?, models: vec![local_p, dual_p] })
}

fn criterion_learning(d: &DeskRun, p: &Predictions) -> Outcome {
    let g = |r: &[MetricsReport]| mean(r.iter().map(|m| m.gpe_mm));
    let (z, l, du) = (g(&p.zero), g(&p.local), g(&p.dual));
    let reduction = 1.0 - du / z;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let budget = d.train_secs.is_some_and(|t| t <= 3600.0);
    let timing = match d.train_secs {
        Some(t) => format!("generation + training {:.1} min", t / 60.0),
        None => "training time not recorded".to_string(),
    };
    outcome(
        reduction >= 0.30 && du <= l && budget,
        format!(
            "test GPE zero {z:.3} mm, local-only {l:.3} mm, dualtrack {du:.3} mm ({:.1} % below zero); {timing} on {cores} core(s){}",
            reduction * 100.0,
            if d.cached { ", reused from an identical earlier run" } else { "" }
        ),
    )
}

/// Per-frame |estimated - true| out-of-plane displacement.
fn oop_gap(p: &Predictor, s: &Sweep) -> Vec<f64> {
    let est = p.estimate(s).unwrap().trajectory().unwrap();
    let truth = out_of_plane_series(&s.poses);
    out_of_plane_series(&est).iter().zip(&truth).map(|(a, b)| (a - b).abs()).collect()
}

/// First frame where the true elevational motion reverses direction.
fn first_turn(s: &Sweep) -> usize {
    let z = out_of_plane_series(&s.poses);
    let sign = (z[1] - z[0]).signum();
    (1..z.len() - 1).find(|&i| (z[i + 1] - z[i]).signum() != sign).unwrap_or(z.len() - 1)
}

fn criterion_figure(d: &DeskRun, p: &Predictions) -> Outcome {
    let (local_p, dual_p) = (&p.models[0], &p.models[1]);
    let family = |f: &str| -> Vec<&Sweep> { d.test.iter().filter(|s| s.family.as_deref() == Some(f)).collect() };
    let linear = family("linear");
    let s_shape = family("s-shape");
    if linear.is_empty() || s_shape.is_empty() {
        return outcome(false, "test split lacks linear or s-shape sweeps");
    }
    let peak = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let envelope = mean(linear.iter().map(|s| peak(&oop_gap(dual_p, s))));
    let dual_s = mean(s_shape.iter().map(|s| peak(&oop_gap(dual_p, s))));
    let local_s = mean(s_shape.iter().map(|s| peak(&oop_gap(local_p, s))));
    let growth = mean(s_shape.iter().map(|s| {
        let g = oop_gap(local_p, s);
        g[g.len() - 1] - g[first_turn(s)]
    }));
    let worst = s_shape
        .iter()
        .max_by(|a, b| peak(&oop_gap(local_p, a)).total_cmp(&peak(&oop_gap(local_p, b))))
        .unwrap();
    let fig = d.root.join("figure");
    let plotted = std::fs::create_dir_all(&fig)
        .map_err(|e| e.to_string())
        .and_then(|_| reconstruct_into(&fig, worst, &p.models).map_err(|e| e.to_string()));
    if let Err(e) = &plotted {
        return outcome(false, format!("plotting failed: {e}"));
    }
    let pass = dual_s <= 2.0 * envelope && local_s > 2.0 * envelope && growth > 0.0;
    outcome(
        pass,
        format!(
            "linear drift envelope {envelope:.3} mm; s-shape peak out-of-plane gap dualtrack {dual_s:.3} mm (limit {:.3}), local-only {local_s:.3} mm, local-only growth after first turn {growth:+.3} mm; plot {}",
            2.0 * envelope,
            fig.join("out_of_plane.svg").display()
        ),
    )
}

fn run(n: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let o = f();
    let el = t.elapsed();
    let in_time = budget.map_or(true, |b| el <= b);
    let pass = o.pass && in_time;
    let limit = budget.map_or(String::new(), |b| format!(" (limit {:.0} s)", b.as_secs_f64()));
    println!("criterion {n} {name}: {} - {} [{:.1} s{limit}]", if pass { "PASS" } else { "FAIL" }, o.detail, el.as_secs_f64());
    pass
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let mut results = Vec::new();
    if wanted(1) {
        results.push(run(1, "geometry oracles", Some(Duration::from_secs(30)), criterion_geometry));
    }
    if wanted(2) {
        results.push(run(2, "metric oracles", Some(Duration::from_secs(30)), criterion_metrics));
    }
    if wanted(3) {
        results.push(run(3, "architecture invariants", Some(Duration::from_secs(120)), criterion_architecture));
    }
    if wanted(4) {
        results.push(run(4, "gradient check", Some(Duration::from_secs(300)), criterion_gradcheck));
    }
    if wanted(5) || wanted(6) {
        match desk_run().and_then(|d| predictions(&d).map(|p| (d, p))) {
            Ok((d, p)) => {
                if wanted(5) {
                    results.push(run(5, "learning effect", None, || criterion_learning(&d, &p)));
                }
                if wanted(6) {
                    results.push(run(6, "out-of-plane drift figure", None, || criterion_figure(&d, &p)));
                }
            }
            Err(e) => {
                for n in [5, 6].into_iter().filter(|&n| wanted(n)) {
                    println!("criterion {n}: FAIL - desk training failed: {e}");
                    results.push(false);
                }
            }
        }
    }
    if wanted(7) {
        results.push(run(7, "determinism and resume", None, criterion_determinism));
    }
    if wanted(8) {
        results.push(run(8, "format round-trips", None, criterion_formats));
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
