use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{make_phantom, make_trajectory, render_sweep, Family, Phantom, Placement, RenderOptions, TrajectorySpec};
use crate::config::DataConfig;
use crate::dataset::{save_sweep, DatasetIndex, Split, Sweep};
use crate::error::{Error, Result};
use crate::metrics::Calibration;

const ATTEMPTS: usize = 20;

/// Family counts for `n` sweeps by largest remainder of the mix weights.
pub fn family_counts(data: &DataConfig, n: usize) -> [usize; 3] {
    let m = &data.family_mix;
    let w = [m.linear, m.c_shape, m.s_shape];
    let total: f64 = w.iter().sum();
    let exact: Vec<f64> = w.iter().map(|x| x / total * n as f64).collect();
    let mut counts = exact.iter().map(|x| x.floor() as usize).collect::<Vec<_>>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if w[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    [counts[0], counts[1], counts[2]]
}

fn length_range(data: &DataConfig, f: Family) -> [f64; 2] {
    match f {
        Family::Linear => data.linear_length_mm,
        Family::CShape => data.c_shape_length_mm,
        Family::SShape => data.s_shape_length_mm,
    }
}

pub fn calibration(data: &DataConfig) -> Result<Calibration> {
    Calibration::centered([data.pixel_spacing_mm; 2], data.image_size)
}

/// Renders one sweep of `family`, redrawing the trajectory when a draw
/// leaves the phantom or breaks the step bounds.
pub fn synth_sweep(
    id: &str,
    data: &DataConfig,
    phantom: &Phantom,
    family: Family,
    rng: &mut ChaCha8Rng,
) -> Result<Sweep> {
    let cal = calibration(data)?;
    let place = Placement::new(phantom.extent(), &cal, data.image_size, data.image_size)?;
    let [lo, hi] = length_range(data, family);
    let mut last = None;
    for _ in 0..ATTEMPTS {
        let spec = TrajectorySpec {
            family,
            length_mm: if hi > lo { rng.gen_range(lo..=hi) } else { lo },
            num_frames: data.num_frames,
            rot_amplitude_deg: data.rot_amplitude_deg,
            seed: rng.gen(),
        };
        let traj = match make_trajectory(&spec, &place) {
            Ok(t) => t,
            Err(e @ Error::Generation(_)) => {
                last = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let opts =
            RenderOptions { width: data.image_size, height: data.image_size, noise_level: data.noise_level, noise_seed: rng.gen() };
        let mut sweep = render_sweep(id, phantom, &traj, &cal, &opts)?;
        sweep.family = Some(family.name().to_string());
        return Ok(sweep);
    }
    Err(last.unwrap_or_else(|| Error::Generation(format!("could not place a {} sweep", family.name()))))
}

fn is_empty_dir(root: &Path) -> Result<bool> {
    if !root.exists() {
        return Ok(true);
    }
    let mut it = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    Ok(it.next().is_none())
}

/// Writes a dataset of subject phantoms and their sweeps under `root`:
/// one directory per sweep plus `index.json`. Subjects never straddle
/// splits.
pub fn generate_dataset(data: &DataConfig, seed: u64, root: &Path, force: bool) -> Result<DatasetIndex> {
    if !is_empty_dir(root)? {
        if !force {
            return Err(Error::Refused(root.to_path_buf()));
        }
        std::fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut index = DatasetIndex::default();
    let mut subject = 0u64;
    for (k, (split, count)) in [(Split::Train, data.train), (Split::Val, data.val), (Split::Test, data.test)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(10 + k as u64);
        let counts = family_counts(data, count);
        let mut families: Vec<Family> =
            Family::ALL.iter().zip(counts).flat_map(|(&f, c)| std::iter::repeat(f).take(c)).collect();
        families.shuffle(&mut rng);
        let mut phantom: Option<Phantom> = None;
        for (i, family) in families.into_iter().enumerate() {
            if i % data.sweeps_per_subject == 0 {
                subject += 1;
                let ph_seed = seed.wrapping_mul(1_000_003).wrapping_add(subject);
                phantom = Some(make_phantom(ph_seed, data.phantom_size, data.voxel_spacing_mm, data.n_landmarks)?);
            }
            let id = format!("{}-{i:04}", split.name());
            let mut sweep = synth_sweep(&id, data, phantom.as_ref().expect("phantom"), family, &mut rng)?;
            sweep.subject = Some(subject);
            save_sweep(&sweep, &root.join(&id))?;
            match split {
                Split::Train => index.train.push(id),
                Split::Val => index.val.push(id),
                Split::Test => index.test.push(id),
            }
        }
    }
    index.write(root)?;
    Ok(index)
}
