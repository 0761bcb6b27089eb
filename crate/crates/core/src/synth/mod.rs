//! Procedural speckle phantoms, parametric probe trajectories and sweep
//! rendering.

mod generate;
mod phantom;
mod render;
mod trajectory;

pub use generate::{calibration, family_counts, generate_dataset, synth_sweep};
pub use phantom::{make_phantom, make_phantom_with, template_landmarks, Landmark, Phantom, MIN_PHANTOM_SIZE, OBLIQUE_SLOPE};
pub use render::{render_sweep, RenderOptions};
pub use trajectory::{make_trajectory, Family, Placement, TrajectorySpec, MAX_STEP_MM, MIN_STEP_MM};
