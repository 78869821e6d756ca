use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nwl::data::{PatchSetConfig, ToySceneConfig};
use nwl::harness::{self, Dataset, HarnessError, PlanarSweep, RefineExperiment, RunSpec, ToyExperiment};
use nwl::metrics::{mean_std, MetricsRecord};
use nwl::suite;
use nwl::warp::WarpVariant;

#[derive(Parser)]
#[command(name = "nwl", version, about = "Joint neural-field and camera-warp optimization", arg_required_else_help = true)]
struct Cli {
    /// Record zero wall time so repeated runs give identical records.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for sweeps (NWL_THREADS overrides).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as PNGs plus ground truth.
    GenData {
        #[command(subcommand)]
        kind: GenData,
    },
    /// Train one run from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Option<WarpVariant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against the dataset a config describes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config (typically the `resolved.toml` of the training run).
        #[arg(long)]
        data: PathBuf,
    },
    /// Planar sweep over instances and warp variants.
    Table1 {
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<WarpVariant>>,
        /// Full-resolution image, 20 instances, full-size networks.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value = "table1.csv")]
        out: PathBuf,
    },
    /// Success rate against translation noise on ground-truth initializations.
    NoiseSweep {
        /// `start:stop:step` or a comma-separated list.
        #[arg(long, default_value = "0:0.3:0.05")]
        levels: String,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[arg(long, value_delimiter = ',', default_value = "explicit,inn")]
        variants: Vec<WarpVariant>,
        #[arg(long, default_value = "noise_sweep.csv")]
        out: PathBuf,
    },
    /// Toy-scene pose recovery from perturbed initial poses.
    Pose {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long, value_delimiter = ',', default_value = "explicit,inn")]
        variants: Vec<WarpVariant>,
        #[arg(long, default_value = "pose.csv")]
        out: PathBuf,
    },
    /// Single-view pose recovery against a frozen toy field.
    PoseRefine {
        #[arg(long, default_value_t = 20.0)]
        offset_deg: f64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        field_iters: Option<u64>,
        #[arg(long, value_delimiter = ',', default_value = "explicit,inn")]
        variants: Vec<WarpVariant>,
        #[arg(long, default_value = "pose_refine.csv")]
        out: PathBuf,
    },
    /// Run the property suite.
    Check {
        /// Only checks whose name contains this.
        #[arg(long, default_value = "")]
        filter: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GenData {
    Patchset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
        #[command(flatten)]
        cfg: PatchArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Toyscene {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "blocks")]
        preset: String,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct PatchArgs {
    #[arg(long, default_value_t = 5)]
    patches: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_h: f64,
    #[arg(long, default_value_t = 0.2)]
    noise_t: f64,
    #[arg(long, default_value_t = 64)]
    patch_size: usize,
    /// Downscale the source to this long side (0 keeps it).
    #[arg(long, default_value_t = 192)]
    long_side: usize,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config { .. } | HarnessError::Usage(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    harness::configure_threads(cli.threads);
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("run failed: {m}");
            ExitCode::from(1)
        }
    }
}

fn load_spec(path: &Path) -> Result<RunSpec, Failure> {
    RunSpec::load(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn print_record(r: &MetricsRecord) {
    println!(
        "{}: corner {:.3} px (std {:.3}), psnr {:.2} dB, ssim {:.4}, rot {:.3} deg, trans {:.3}, success {}{}",
        r.run_id,
        r.corner_error_px,
        r.corner_error_std,
        r.psnr_db,
        r.ssim,
        r.rot_err_deg,
        r.trans_err_x100,
        r.success,
        if r.failed() { format!(", failure: {}", r.failure) } else { String::new() }
    );
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData { kind } => {
            let (data, out) = match kind {
                GenData::Patchset { out, image, cfg, seed } => {
                    let pc = PatchSetConfig {
                        patches: cfg.patches,
                        patch_size: cfg.patch_size,
                        long_side: cfg.long_side,
                        noise_h: cfg.noise_h,
                        noise_t: cfg.noise_t,
                    };
                    let ps = nwl::data::gen_patchset_from(image.as_deref(), &pc, *seed).map_err(|e| Failure::Usage(e.to_string()))?;
                    (Dataset::Planar(ps), out)
                }
                GenData::Toyscene { out, preset, views, size, seed } => {
                    let tc = ToySceneConfig {
                        preset: preset.clone(),
                        views: *views,
                        size: *size,
                        ..ToySceneConfig::default()
                    };
                    let scene = nwl::data::gen_toyscene(&tc, *seed).map_err(|e| Failure::Usage(e.to_string()))?;
                    (Dataset::Toy(scene), out)
                }
            };
            harness::write_dataset(&data, out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { config, variant, seed, iters, out } => {
            let mut spec = load_spec(config)?;
            if let Some(v) = variant {
                spec.train.variant = *v;
            }
            if let Some(s) = seed {
                spec.train.seed = *s;
            }
            if let Some(n) = iters {
                spec.train.iters = *n;
            }
            spec.train.deterministic |= cli.deterministic;
            let result = harness::run(&spec, out.as_deref())?;
            print_record(&result.record);
            if result.record.failed() {
                return Err(Failure::Run(result.record.failure));
            }
        }
        Command::Eval { checkpoint, data } => {
            let spec = load_spec(data)?;
            print_record(&harness::eval(&spec, checkpoint)?);
        }
        Command::Table1 {
            instances,
            iters,
            seed_base,
            variants,
            full,
            out,
        } => {
            let mut sweep = if *full { PlanarSweep::full() } else { PlanarSweep::desk() };
            if let Some(n) = instances {
                sweep.instances = *n;
            }
            if let Some(n) = iters {
                sweep.train.iters = *n;
            }
            if let Some(v) = variants {
                sweep.variants = v.clone();
            }
            sweep.seed_base = *seed_base;
            sweep.train.deterministic = cli.deterministic;
            let rows = harness::run_table1(&sweep)?;
            let summary = harness::summarize(&rows, &sweep.variants);
            harness::write_table1(out, &rows, &summary)?;
            println!("{:<10} {:>10} {:>10} {:>9} {:>9} {:>8}", "variant", "corner", "corner_sd", "psnr", "psnr_sd", "success");
            for s in &summary {
                println!(
                    "{:<10} {:>10.3} {:>10.3} {:>9.2} {:>9.2} {:>8.2}",
                    s.variant, s.corner_mean, s.corner_std, s.psnr_mean, s.psnr_std, s.success_rate
                );
            }
            println!("wrote {}", out.display());
        }
        Command::NoiseSweep {
            levels,
            runs,
            iters,
            seed_base,
            variants,
            out,
        } => {
            let levels = harness::parse_levels(levels)?;
            let mut base = PlanarSweep::desk();
            base.variants = variants.clone();
            base.seed_base = *seed_base;
            if let Some(n) = iters {
                base.train.iters = *n;
            }
            base.train.deterministic = cli.deterministic;
            let rows = harness::run_noise_sweep(&base, &levels, *runs)?;
            harness::write_sweep(out, &rows)?;
            for r in &rows {
                println!("{:<6} {:<10} {:.2} (n={})", r.level, r.variant, r.success_rate, r.n);
            }
            println!("wrote {}", out.display());
        }
        Command::Pose { seeds, iters, variants, out } => {
            let mut exp = ToyExperiment::desk();
            exp.seeds = (0..*seeds).collect();
            exp.variants = variants.clone();
            if let Some(n) = iters {
                exp.train.iters = *n;
            }
            exp.train.deterministic = cli.deterministic;
            let records = harness::run_pose_table(&exp)?;
            harness::write_pose_table(out, &records)?;
            for v in variants {
                let rot: Vec<f64> = records.iter().filter(|r| r.variant == v.as_str()).map(|r| r.rot_err_deg).collect();
                let (m, _) = mean_std(&rot);
                println!("{v:<10} rotation error median {:.3} deg, mean {m:.3} deg", harness::median(&rot));
            }
            println!("wrote {}", out.display());
        }
        Command::PoseRefine {
            offset_deg,
            seeds,
            iters,
            field_iters,
            variants,
            out,
        } => {
            let mut exp = RefineExperiment::desk(*offset_deg);
            exp.seeds = (0..*seeds).collect();
            exp.variants = variants.clone();
            if let Some(n) = iters {
                exp.refine.iters = *n;
            }
            if let Some(n) = field_iters {
                exp.field_train.iters = *n;
            }
            exp.field_train.deterministic = cli.deterministic;
            exp.refine.deterministic = cli.deterministic;
            let (field, runs) = harness::run_pose_refine(&exp)?;
            print_record(&field);
            harness::write_refine(out, &runs)?;
            for r in &runs {
                let peak = r.outcome.trajectory.iter().map(|s| s.rigidity_residual).fold(0.0, f64::max);
                let last = r.outcome.trajectory.last().expect("initial point is recorded");
                println!(
                    "{:<10} seed {} view {}: {:.2} -> {:.3} deg, peak rigidity residual {:.3e}, final {:.3e}, converged {}",
                    r.variant, r.seed, r.view, r.outcome.trajectory[0].rot_err_deg, last.rot_err_deg, peak, last.rigidity_residual, r.outcome.converged
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Check { filter, out } => {
            let results = suite::run_property_suite(filter);
            print!("{}", suite::report(&results));
            if let Some(p) = out {
                suite::write_results(p, &results).map_err(|e| Failure::Run(format!("{}: {e}", p.display())))?;
            }
            if results.iter().any(|r| !r.pass) {
                return Err(Failure::Run("property checks failed".into()));
            }
        }
    }
    Ok(())
}
