//! Command implementations behind the `dualtrack` binary.

pub mod plot;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use dualtrack_core::checkpoint::Checkpoint;
use dualtrack_core::compound::compound;
use dualtrack_core::config::Config;
use dualtrack_core::dataset::{load_sweep, DatasetIndex, Split, Sweep};
use dualtrack_core::geometry::{rebase_trajectory, Trajectory};
use dualtrack_core::metrics::MetricsReport;
use dualtrack_core::nn::{predict_sweep, BackboneRegistry, VariantRegistry};
use dualtrack_core::reconstruct::{
    file_hash, out_of_plane_series, report, summary_csv, summary_text, Baseline, TrajectoryEstimate,
};
use dualtrack_core::synth::generate_dataset;
use dualtrack_core::training::{load_model, stages_for, train_stage, variant_stage, Stage, TrainData, TrainOptions};
use dualtrack_core::{Error, Result};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "dualtrack", version, about = "Sensorless freehand ultrasound tracking")]
pub struct Cli {
    /// TOML configuration (defaults to the desk preset).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Serial, fully seeded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Suppress progress lines.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a phantom dataset.
    Generate,
    /// Train one stage.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// local_cnn, local_pool, global, fusion or coupled.
        #[arg(long)]
        stage: String,
        /// Continue an interrupted stage from its checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs (the checkpoint stays resumable).
        #[arg(long, value_name = "N")]
        stop_after: Option<usize>,
    },
    /// Per-sweep metrics and a summary table for a model or baseline.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Run directory holding stage checkpoints.
        #[arg(long, conflicts_with = "baseline")]
        run: Option<PathBuf>,
        #[arg(long, default_value = "dualtrack")]
        variant: String,
        /// zero or ground-truth.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Estimate one sweep's trajectory and plot it against ground truth.
    Reconstruct {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sweep: String,
        #[arg(long, conflicts_with = "baseline")]
        run: Option<PathBuf>,
        /// Comma-separated variant names.
        #[arg(long, default_value = "dualtrack")]
        variants: String,
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Splat a sweep into a voxel volume at estimated or true poses.
    Compound {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sweep: String,
        /// Trajectory estimate; ground truth when omitted.
        #[arg(long)]
        estimate: Option<PathBuf>,
        /// Voxel size in mm.
        #[arg(long, default_value_t = 0.5)]
        spacing: f64,
    },
    /// Train every stage needed by the variants and compare them on the test split.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "local_only,coupled,dualtrack")]
        variants: String,
    },
}

/// Machine-parseable failure line.
pub fn error_line(e: &Error) -> String {
    format!("error: {}: {}", e.category(), e.to_string().replace(['\n', '\r'], " "))
}

struct Ctx {
    cfg: Config,
    explicit_config: bool,
    seed: Option<u64>,
    out: Option<PathBuf>,
    force: bool,
    verbose: bool,
}

impl Ctx {
    fn out(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    /// Configuration a run was trained with, unless one was given.
    fn run_config(&self, run: &Path, stage: Stage) -> Result<Config> {
        if self.explicit_config {
            return Ok(self.cfg.clone());
        }
        let path = run.join(stage.best_file());
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!("{} not found; train stage {} first", path.display(), stage.name())));
        }
        let ck = Checkpoint::load(&path)?;
        let mut cfg = Config::from_toml_str(&ck.manifest.config, &path.display().to_string())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

/// Creates `dir`, refusing a non-empty one unless forced.
fn output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut it = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if it.next().is_some() && !force {
            return Err(Error::Refused(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn variant_list(s: &str) -> Result<Vec<String>> {
    let reg = VariantRegistry::<f32>::default();
    let v: Vec<String> = s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
    if v.is_empty() {
        return Err(Error::invalid("no variants given"));
    }
    for name in &v {
        reg.get(name)?;
    }
    Ok(v)
}

fn split_sweeps(data: &Path, split: &str) -> Result<Vec<Sweep>> {
    let split = Split::parse(split)?;
    let sweeps = DatasetIndex::read(data)?.load_split(data, split)?;
    if sweeps.is_empty() {
        return Err(Error::invalid(format!("split {} of {} is empty", split.name(), data.display())));
    }
    Ok(sweeps)
}

/// Something that turns a sweep into relative-pose estimates.
pub struct Predictor {
    pub label: String,
    pub model_id: String,
    kind: PredictorKind,
}

enum PredictorKind {
    Baseline(Baseline),
    Model { model: Box<dualtrack_core::nn::DualTrackModel<f32>>, variant: String },
}

impl Predictor {
    pub fn baseline(b: Baseline) -> Self {
        Self { label: b.name().to_string(), model_id: format!("baseline:{}", b.name()), kind: PredictorKind::Baseline(b) }
    }

    pub fn trained(cfg: &Config, run: &Path, variant: &str) -> Result<Self> {
        let stage = variant_stage(variant)?;
        let model = load_model(cfg, run, stage, &BackboneRegistry::default())?;
        Ok(Self {
            label: variant.to_string(),
            model_id: file_hash(&run.join(stage.best_file()))?,
            kind: PredictorKind::Model { model: Box::new(model), variant: variant.to_string() },
        })
    }

    pub fn estimate(&self, sweep: &Sweep) -> Result<TrajectoryEstimate> {
        let rel = match &self.kind {
            PredictorKind::Baseline(b) => b.predict(sweep),
            PredictorKind::Model { model, variant } => {
                let v = VariantRegistry::<f32>::default().get(variant)?;
                predict_sweep(model, v.as_ref(), sweep)?
            }
        };
        TrajectoryEstimate::new(&sweep.id, &self.label, &self.model_id, &rel)
    }
}

#[derive(Serialize)]
struct SweepReport<'a> {
    sweep_id: &'a str,
    family: Option<&'a str>,
    variant: &'a str,
    model: &'a str,
    metrics: &'a MetricsReport,
}

/// Writes `<id>.json` per sweep into `dir` and returns the reports.
fn evaluate_into(p: &Predictor, sweeps: &[Sweep], dir: &Path) -> Result<Vec<MetricsReport>> {
    let mut out = Vec::with_capacity(sweeps.len());
    for sw in sweeps {
        let est = p.estimate(sw)?;
        let r = report(sw, &est)?;
        let rec = SweepReport { sweep_id: &sw.id, family: sw.family.as_deref(), variant: &p.label, model: &p.model_id, metrics: &r };
        write(&dir.join(format!("{}.json", sw.id)), &serde_json::to_string_pretty(&rec).expect("report serialises"))?;
        out.push(r);
    }
    Ok(out)
}

/// Overall and per-family rows for one labelled set of reports.
pub fn summary_rows(label: &str, sweeps: &[Sweep], reports: &[MetricsReport]) -> Vec<(String, Vec<MetricsReport>)> {
    let mut rows = vec![(label.to_string(), reports.to_vec())];
    let mut families: Vec<&str> = sweeps.iter().filter_map(|s| s.family.as_deref()).collect();
    families.sort();
    families.dedup();
    for f in families {
        let sel = sweeps.iter().zip(reports).filter(|(s, _)| s.family.as_deref() == Some(f)).map(|(_, r)| r.clone()).collect();
        rows.push((format!("{label}/{f}"), sel));
    }
    rows
}

fn write_summary(dir: &Path, stem: &str, rows: &[(String, Vec<MetricsReport>)]) -> Result<String> {
    let text = summary_text(rows);
    write(&dir.join(format!("{stem}.txt")), &text)?;
    write(&dir.join(format!("{stem}.csv")), &summary_csv(rows))?;
    Ok(text)
}

/// Estimates and both figures for one sweep.
pub fn reconstruct_into(dir: &Path, sweep: &Sweep, predictors: &[Predictor]) -> Result<Vec<TrajectoryEstimate>> {
    let gt = rebase_trajectory(&sweep.poses);
    let mut traj: Vec<(String, Trajectory)> = vec![("ground truth".into(), gt.clone())];
    let mut oop = vec![("ground truth".to_string(), out_of_plane_series(&gt))];
    let mut estimates = Vec::new();
    for p in predictors {
        let est = p.estimate(sweep)?;
        est.save(&dir.join(format!("{}.estimate.json", p.label)))?;
        let t = est.trajectory()?;
        oop.push((p.label.clone(), out_of_plane_series(&t)));
        traj.push((p.label.clone(), t));
        estimates.push(est);
    }
    let mut csv = String::from("frame");
    for (l, _) in &oop {
        csv.push(',');
        csv.push_str(&l.replace(' ', "_"));
    }
    csv.push('\n');
    for i in 0..sweep.len() {
        csv.push_str(&i.to_string());
        for (_, s) in &oop {
            csv.push_str(&format!(",{}", s[i]));
        }
        csv.push('\n');
    }
    write(&dir.join("out_of_plane.csv"), &csv)?;
    plot::out_of_plane_svg(&dir.join("out_of_plane.svg"), &oop)?;
    plot::trajectory_svg(&dir.join("trajectory.svg"), &traj, &sweep.cal, sweep.width())?;
    Ok(estimates)
}

/// Runs a parsed command line and returns the text to print on success.
pub fn run(cli: Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => Config::from_file(p)?,
        None => Config::preset("desk")?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ctx = Ctx { cfg, explicit_config: cli.config.is_some(), seed: cli.seed, out: cli.out, force: cli.force, verbose: !cli.quiet };
    match cli.command {
        Command::Generate => {
            let root = ctx.out("data");
            let index = generate_dataset(&ctx.cfg.data, ctx.cfg.seed, &root, ctx.force)?;
            Ok(format!(
                "generated {} train / {} val / {} test sweeps in {}",
                index.train.len(),
                index.val.len(),
                index.test.len(),
                root.display()
            ))
        }
        Command::Train { data, stage, resume, stop_after } => {
            let stage = Stage::parse(&stage)?;
            let td = TrainData::load(&data)?;
            let mut opts = TrainOptions::new(ctx.out("run"));
            opts.resume = resume;
            opts.force = ctx.force;
            opts.stop_after = stop_after;
            opts.verbose = ctx.verbose;
            let o = train_stage(&ctx.cfg, stage, &td, &opts)?;
            let best = o.best_val_gpe.map_or("n/a".to_string(), |g| format!("{g:.3} mm"));
            Ok(format!(
                "stage {} {} ({} steps this run, best val GPE {best}) -> {}",
                stage.name(),
                if o.complete { "complete" } else { "interrupted" },
                o.losses.len(),
                o.checkpoint.display()
            ))
        }
        Command::Evaluate { data, split, run, variant, baseline } => {
            let p = match (baseline, run) {
                (Some(b), _) => Predictor::baseline(Baseline::parse(&b)?),
                (None, Some(run)) => {
                    let cfg = ctx.run_config(&run, variant_stage(&variant)?)?;
                    Predictor::trained(&cfg, &run, &variant)?
                }
                (None, None) => return Err(Error::invalid("evaluate needs --run or --baseline")),
            };
            let sweeps = split_sweeps(&data, &split)?;
            let dir = ctx.out("eval");
            output_dir(&dir, ctx.force)?;
            let reports = evaluate_into(&p, &sweeps, &dir)?;
            write_summary(&dir, "summary", &summary_rows(&p.label, &sweeps, &reports))
        }
        Command::Reconstruct { data, sweep, run, variants, baseline } => {
            let sw = load_sweep(&data.join(&sweep))?;
            let predictors = match (baseline, run) {
                (Some(b), _) => vec![Predictor::baseline(Baseline::parse(&b)?)],
                (None, Some(run)) => variant_list(&variants)?
                    .iter()
                    .map(|v| Predictor::trained(&ctx.run_config(&run, variant_stage(v)?)?, &run, v))
                    .collect::<Result<_>>()?,
                (None, None) => return Err(Error::invalid("reconstruct needs --run or --baseline")),
            };
            let dir = ctx.out("reconstruct");
            output_dir(&dir, ctx.force)?;
            reconstruct_into(&dir, &sw, &predictors)?;
            Ok(format!("wrote estimates and plots for {} to {}", sw.id, dir.display()))
        }
        Command::Compound { data, sweep, estimate, spacing } => {
            let sw = load_sweep(&data.join(&sweep))?;
            let poses = match estimate {
                Some(p) => {
                    let est = TrajectoryEstimate::load(&p)?;
                    if est.composed.len() != sw.len() {
                        return Err(Error::invalid(format!("estimate has {} poses, sweep has {} frames", est.composed.len(), sw.len())));
                    }
                    est.trajectory()?
                }
                None => rebase_trajectory(&sw.poses),
            };
            let vol = compound(sw.frames(), sw.shape(), &sw.cal, poses.poses(), spacing, None)?;
            let dir = ctx.out("volume");
            output_dir(&dir, ctx.force)?;
            vol.save(&dir)?;
            Ok(format!("{:?} volume, {} of {} voxels filled, in {}", vol.shape, vol.filled(), vol.data.len(), dir.display()))
        }
        Command::Ablate { data, variants } => {
            let variants = variant_list(&variants)?;
            let td = TrainData::load(&data)?;
            let test = split_sweeps(&data, "test")?;
            let dir = ctx.out("run");
            let mut opts = TrainOptions::new(&dir);
            opts.resume = true;
            opts.force = ctx.force;
            opts.verbose = ctx.verbose;
            for v in &variants {
                for stage in stages_for(v)? {
                    train_stage(&ctx.cfg, stage, &td, &opts)?;
                }
            }
            let report_dir = dir.join("ablation");
            output_dir(&report_dir, true)?;
            let mut predictors = vec![Predictor::baseline(Baseline::Zero)];
            for v in &variants {
                predictors.push(Predictor::trained(&ctx.cfg, &dir, v)?);
            }
            let mut rows = Vec::new();
            for p in &predictors {
                let sub = report_dir.join(&p.label);
                output_dir(&sub, true)?;
                let reports = evaluate_into(p, &test, &sub)?;
                rows.extend(summary_rows(&p.label, &test, &reports));
            }
            let text = write_summary(&report_dir, "summary", &rows)?;
            if let Some(sw) = test.iter().find(|s| s.family.as_deref() == Some("s-shape")) {
                let fig = report_dir.join(format!("figure-{}", sw.id));
                output_dir(&fig, true)?;
                reconstruct_into(&fig, sw, &predictors[1..])?;
            }
            Ok(text)
        }
    }
}
