use dualtrack_core::compound::{compound, Volume};
use dualtrack_core::config::Config;
use dualtrack_core::dataset::Sweep;
use dualtrack_core::geometry::{compose_trajectory, params_to_matrix, Pose, PoseParams, Trajectory};
use dualtrack_core::metrics::{evaluate, mean_report, Calibration};
use dualtrack_core::reconstruct::{out_of_plane_series, report, summary_csv, Baseline, TrajectoryEstimate};
use dualtrack_core::synth::{make_phantom, synth_sweep, Family, Phantom};
use dualtrack_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk_sweep(family: Family, seed: u64) -> (Phantom, Sweep) {
    let cfg = Config::preset("desk").unwrap();
    let ph = make_phantom(seed, cfg.data.phantom_size, cfg.data.voxel_spacing_mm, cfg.data.n_landmarks).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sw = synth_sweep("s", &cfg.data, &ph, family, &mut rng).unwrap();
    (ph, sw)
}

fn random_rel(n: usize, rng: &mut impl Rng) -> Vec<PoseParams> {
    (0..n)
        .map(|_| {
            PoseParams::new(
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
            )
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn estimates_compose_from_identity(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rel = random_rel(n, &mut rng);
        let est = TrajectoryEstimate::new("x", "v", "m", &rel).unwrap();
        let want = compose_trajectory(&rel, &Pose::IDENTITY).unwrap();
        let got = est.trajectory().unwrap();
        prop_assert_eq!(got.len(), n + 1);
        prop_assert_eq!(got.first().max_abs_diff(&Pose::IDENTITY), 0.0);
        for (a, b) in got.poses().iter().zip(want.poses()) {
            prop_assert!(a.max_abs_diff(b) < 1e-12);
            Pose::from_matrix(*a.matrix()).unwrap();
        }
        prop_assert_eq!(est.relatives(), rel);
    }
}

#[test]
fn estimate_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let est = TrajectoryEstimate::new("sweep", "dualtrack", "abc", &random_rel(9, &mut rng)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.json");
    est.save(&p).unwrap();
    assert_eq!(TrajectoryEstimate::load(&p).unwrap(), est);
    let mut broken = est.clone();
    broken.composed.pop();
    broken.save(&p).unwrap();
    assert!(matches!(TrajectoryEstimate::load(&p), Err(Error::Schema { .. })));
}

#[test]
fn ground_truth_passthrough_scores_zero() {
    for (k, f) in Family::ALL.into_iter().enumerate() {
        let (_, sw) = desk_sweep(f, 20 + k as u64);
        let est = TrajectoryEstimate::new(&sw.id, "gt", "baseline:ground-truth", &Baseline::GroundTruth.predict(&sw)).unwrap();
        let r = report(&sw, &est).unwrap();
        assert!(r.gpe_mm < 1e-9 && r.lpe_um < 1e-6 && r.fdr_percent < 1e-9 && r.max_drift_mm < 1e-9, "{r:?}");

        // estimated and true out-of-plane curves coincide
        let truth = out_of_plane_series(&sw.poses);
        let mine = out_of_plane_series(&est.trajectory().unwrap());
        let gap = truth.iter().zip(&mine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-6, "{gap}");
    }
}

#[test]
fn zero_motion_has_full_drift_rate() {
    for seed in 0..3 {
        let (_, sw) = desk_sweep(Family::Linear, 40 + seed);
        let est = TrajectoryEstimate::new(&sw.id, "zero", "baseline:zero", &Baseline::Zero.predict(&sw)).unwrap();
        let r = report(&sw, &est).unwrap();
        assert!((r.fdr_percent - 100.0).abs() < 1e-9, "{}", r.fdr_percent);
        // every frame sits at the start, so the last drift is the start-to-end distance
        let t = sw.poses.translations();
        let d = (t[t.len() - 1] - t[0]).norm();
        assert!((r.per_frame_drift_mm.last().unwrap() - d).abs() < 1e-9);
    }
}

#[test]
fn reports_use_the_metric_definitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (_, sw) = desk_sweep(Family::CShape, 31);
    let rel: Vec<PoseParams> = sw
        .poses
        .adjacent_relatives()
        .iter()
        .map(|p| PoseParams::new(p.t.map(|v| v + rng.gen_range(-0.05..0.05)), p.r.map(|v| v + rng.gen_range(-0.2..0.2))))
        .collect();
    let est = TrajectoryEstimate::new(&sw.id, "noisy", "m", &rel).unwrap();
    let a = report(&sw, &est).unwrap();
    let pred = compose_trajectory(&rel, sw.poses.first()).unwrap();
    let b = evaluate(&sw.poses, &pred, &sw.cal, sw.width(), sw.height()).unwrap();
    for (x, y) in [(a.gpe_mm, b.gpe_mm), (a.lpe_um, b.lpe_um), (a.fdr_percent, b.fdr_percent), (a.max_drift_mm, b.max_drift_mm)] {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
    assert!(a.gpe_mm > 0.0);
}

#[test]
fn summary_means_match_hand_averages() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let reports: Vec<_> = (0..5)
        .map(|_| dualtrack_core::metrics::MetricsReport {
            gpe_mm: rng.gen_range(0.0..10.0),
            lpe_um: rng.gen_range(0.0..500.0),
            fdr_percent: rng.gen_range(0.0..100.0),
            max_drift_mm: rng.gen_range(0.0..20.0),
            per_frame_drift_mm: vec![],
        })
        .collect();
    let mut hand = [0.0; 4];
    for r in &reports {
        hand[0] += r.gpe_mm / 5.0;
        hand[1] += r.lpe_um / 5.0;
        hand[2] += r.fdr_percent / 5.0;
        hand[3] += r.max_drift_mm / 5.0;
    }
    let m = mean_report(&reports).unwrap();
    for k in 0..4 {
        assert!((m[k] - hand[k]).abs() < 1e-12);
    }
    let csv = summary_csv(&[("m".into(), reports)]);
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    for k in 0..4 {
        assert!((row[k] - hand[k]).abs() < 1e-9);
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Correlation between filled voxels and the phantom sampled at their centres.
pub fn phantom_correlation(vol: &Volume, ph: &Phantom) -> (f64, usize) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for k in 0..vol.shape[2] {
        for j in 0..vol.shape[1] {
            for i in 0..vol.shape[0] {
                let v = vol.data[vol.index(i, j, k)];
                if v.is_nan() {
                    continue;
                }
                if let Some(p) = ph.sample(&vol.center(i, j, k)) {
                    a.push(v as f64);
                    b.push(p);
                }
            }
        }
    }
    (pearson(&a, &b), a.len())
}

#[test]
fn ground_truth_compounding_matches_phantom() {
    for (k, f) in Family::ALL.into_iter().enumerate() {
        let (ph, sw) = desk_sweep(f, 60 + k as u64);
        let vol = compound(sw.frames(), sw.shape(), &sw.cal, sw.poses.poses(), ph.spacing(), None).unwrap();
        let (r, n) = phantom_correlation(&vol, &ph);
        println!("{}: r = {r:.4} over {n} voxels", f.name());
        assert!(n > 10_000);
        assert!(r > 0.8, "{r}");
    }
}

#[test]
fn compounding_is_deterministic_and_round_trips() {
    let (ph, sw) = desk_sweep(Family::SShape, 70);
    let a = compound(sw.frames(), sw.shape(), &sw.cal, sw.poses.poses(), 0.4, None).unwrap();
    let b = compound(sw.frames(), sw.shape(), &sw.cal, sw.poses.poses(), 0.4, None).unwrap();
    assert_eq!(a.shape, b.shape);
    assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let c = Volume::load(dir.path()).unwrap();
    assert_eq!(c.shape, a.shape);
    assert!(c.data.iter().zip(&a.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(std::fs::metadata(dir.path().join("volume.bin")).unwrap().len() as usize, a.data.len() * 4);
    let _ = ph;
}

#[test]
fn single_frame_gives_one_slice() {
    let cal = Calibration::centered([0.3, 0.3], 16).unwrap();
    let frame: Vec<f32> = (0..16 * 16).map(|i| (i % 7) as f32 / 7.0).collect();
    let pose = params_to_matrix(&PoseParams::new([5.0, -2.0, 3.0], [0.0, 0.0, 0.0])).unwrap();
    let v = compound(&frame, [1, 16, 16], &cal, &[pose], 0.3, None).unwrap();
    assert_eq!(v.shape[2], 1);
    assert_eq!(v.shape[0] * v.shape[1], 256);
    assert_eq!(v.filled(), 256);
}

#[test]
fn compounding_rejects_bad_inputs() {
    let cal = Calibration::centered([0.3, 0.3], 8).unwrap();
    let frame = vec![0.5f32; 64];
    let far = Some(([1000.0, 1000.0, 1000.0], [4, 4, 4]));
    assert!(matches!(compound(&frame, [1, 8, 8], &cal, &[Pose::IDENTITY], 0.5, far), Err(Error::InvalidArgument(_))));
    assert!(compound(&frame, [1, 8, 8], &cal, &[Pose::IDENTITY], 0.0, None).is_err());
    assert!(compound(&frame, [2, 8, 8], &cal, &[Pose::IDENTITY], 0.5, None).is_err());
    let _ = Trajectory::new(vec![Pose::IDENTITY]);
}
