//! Run configuration files, experiment sweeps and artifact emission.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::data::{gen_patchset_from, gen_toyscene, DataError, PatchSet, PatchSetConfig, ToyScene, ToySceneConfig};
use crate::metrics::{self, mean_std, MetricsRecord};
use crate::raster::{save_png, RasterError};
use crate::train::{
    build_planar, build_toy3d, evaluate_planar, evaluate_toy3d, pose_refine_single_view, render_patch, render_with_pose,
    train_planar, train_toy3d, RefineOutcome, TrainConfig, TrainError, SUCCESS_THRESHOLD_PX,
};
use crate::warp::WarpVariant;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ── Run specification ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Planar,
    Toy3d,
}

/// Contents of a run configuration file (TOML).
///
/// Sections `[train]`, `[patchset]` and `[toyscene]` are optional; missing
/// keys take the defaults of the run kind. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub kind: RunKind,
    /// Source image for planar runs; the bundled image when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default)]
    pub data_seed: u64,
    pub train: TrainConfig,
    #[serde(default)]
    pub patchset: PatchSetConfig,
    #[serde(default)]
    pub toyscene: ToySceneConfig,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunSpec {
    pub fn new(kind: RunKind) -> Self {
        Self {
            kind,
            image: None,
            data_seed: 0,
            train: Self::default_train(kind),
            patchset: PatchSetConfig::default(),
            toyscene: ToySceneConfig::default(),
        }
    }

    pub fn default_train(kind: RunKind) -> TrainConfig {
        match kind {
            RunKind::Planar => TrainConfig::planar(),
            RunKind::Toy3d => TrainConfig::toy3d(),
        }
    }

    /// Parse a configuration; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, HarnessError> {
        let cfg_err = |message: String| HarnessError::Config {
            path: origin.to_string(),
            message,
        };
        let mut doc: toml::Value = toml::from_str(text).map_err(|e| cfg_err(e.message().to_string()))?;
        let kind: RunKind = doc
            .get("kind")
            .cloned()
            .ok_or_else(|| cfg_err("missing key `kind` (planar or toy3d)".into()))?
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err(format!("kind: {}", e.message())))?;
        let table = doc.as_table_mut().expect("document is a table");
        let mut train = toml::Value::try_from(Self::default_train(kind)).expect("defaults serialize");
        if let Some(user) = table.remove("train") {
            merge(&mut train, user);
        }
        table.insert("train".into(), train);
        let spec: RunSpec = doc.try_into().map_err(|e: toml::de::Error| cfg_err(e.message().to_string()))?;
        spec.train.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Fully expanded configuration, including every default.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run spec serializes")
    }
}

/// A dataset built from a [`RunSpec`].
#[derive(Clone, Debug)]
pub enum Dataset {
    Planar(PatchSet),
    Toy(ToyScene),
}

pub fn build_dataset(spec: &RunSpec) -> Result<Dataset, HarnessError> {
    Ok(match spec.kind {
        RunKind::Planar => Dataset::Planar(gen_patchset_from(spec.image.as_deref(), &spec.patchset, spec.data_seed)?),
        RunKind::Toy3d => Dataset::Toy(gen_toyscene(&spec.toyscene, spec.data_seed)?),
    })
}

/// Fill dataset-dependent training values so the spec is self-contained.
pub fn resolve(spec: &RunSpec, data: &Dataset) -> RunSpec {
    let mut out = spec.clone();
    if let Dataset::Toy(scene) = data {
        out.train.near.get_or_insert(scene.near);
        out.train.far.get_or_insert(scene.far);
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub record: MetricsRecord,
    pub resolved: RunSpec,
}

/// Train one run. With `out`, writes `resolved.toml`, `metrics.csv`,
/// `checkpoint.nwl` and rendered PNGs there.
pub fn run(spec: &RunSpec, out: Option<&Path>) -> Result<RunResult, HarnessError> {
    let data = build_dataset(spec)?;
    let resolved = resolve(spec, &data);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("resolved.toml");
        fs::write(&p, resolved.to_toml()).map_err(io_err(&p))?;
    }
    let cfg = &resolved.train;
    let record = match &data {
        Dataset::Planar(ps) => {
            let o = train_planar(cfg, ps)?;
            if let Some(dir) = out {
                checkpoint::save(&o.state.store, &dir.join("checkpoint.nwl"))?;
                if !o.record.failed() {
                    let alpha = cfg.anneal(cfg.field2d.frequencies, cfg.iters);
                    for t in 0..ps.len() {
                        save_png(&render_patch(&o.state.store, &o.model, ps, t, alpha)?, &dir.join(format!("patch_{t:02}.png")))?;
                    }
                }
            }
            o.record
        }
        Dataset::Toy(scene) => {
            let o = train_toy3d(cfg, scene)?;
            if let Some(dir) = out {
                checkpoint::save(&o.state.store, &dir.join("checkpoint.nwl"))?;
                if !o.record.failed() {
                    let img = render_with_pose(&o.state.store, &o.model.field, cfg, scene, &scene.poses[0])?;
                    save_png(&img, &dir.join("view_00.png"))?;
                }
            }
            o.record
        }
    };
    if let Some(dir) = out {
        let p = dir.join("metrics.csv");
        metrics::write_records(&p, std::slice::from_ref(&record)).map_err(|e| HarnessError::Config {
            path: p.display().to_string(),
            message: e.to_string(),
        })?;
    }
    Ok(RunResult { record, resolved })
}

/// Evaluate a checkpoint against the dataset described by `spec`.
pub fn eval(spec: &RunSpec, checkpoint_path: &Path) -> Result<MetricsRecord, HarnessError> {
    let data = build_dataset(spec)?;
    let resolved = resolve(spec, &data);
    let cfg = &resolved.train;
    let entries = checkpoint::load(checkpoint_path)?;
    let mut record = MetricsRecord::new(&format!("eval-{}-s{}", cfg.variant, cfg.seed), cfg.variant.as_str(), cfg.seed);
    match &data {
        Dataset::Planar(ps) => {
            let (mut store, model) = build_planar(cfg, ps)?;
            checkpoint::restore(&mut store, &entries)?;
            evaluate_planar(&store, &model, ps, cfg, &mut record)?;
        }
        Dataset::Toy(scene) => {
            let (mut store, model) = build_toy3d(cfg, scene)?;
            checkpoint::restore(&mut store, &entries)?;
            evaluate_toy3d(&store, &model, scene, cfg, &mut record)?;
        }
    }
    Ok(record)
}

/// Write a synthetic dataset as PNGs plus a ground-truth CSV.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join("ground_truth.csv");
    let cerr = |source| HarnessError::Csv {
        path: csv_path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(&csv_path).map_err(cerr)?;
    match data {
        Dataset::Planar(ps) => {
            save_png(&ps.source, &dir.join("source.png"))?;
            w.write_record(["patch", "h00", "h01", "h02", "h10", "h11", "h12", "h20", "h21", "h22"])
                .map_err(cerr)?;
            for (t, (img, h)) in ps.patches.iter().zip(&ps.homographies).enumerate() {
                save_png(img, &dir.join(format!("patch_{t:02}.png")))?;
                let mut row = vec![t.to_string()];
                row.extend((0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| h[(r, c)].to_string()));
                w.write_record(&row).map_err(cerr)?;
            }
        }
        Dataset::Toy(scene) => {
            w.write_record(["view", "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22", "tx", "ty", "tz"])
                .map_err(cerr)?;
            for (v, (img, p)) in scene.images.iter().zip(&scene.poses).enumerate() {
                save_png(img, &dir.join(format!("view_{v:02}.png")))?;
                let mut row = vec![v.to_string()];
                row.extend((0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| p.rotation[(r, c)].to_string()));
                row.extend(p.translation.iter().map(|x| x.to_string()));
                w.write_record(&row).map_err(cerr)?;
            }
        }
    }
    w.flush().map_err(|e| cerr(e.into()))
}

// ── Threads ────────────────────────────────────────────────────────────

/// Size the global worker pool. `NWL_THREADS` overrides `requested`.
/// Returns the thread count in effect.
pub fn configure_threads(requested: Option<usize>) -> usize {
    let env = std::env::var("NWL_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok());
    if let Some(n) = env.or(requested).filter(|&n| n > 0) {
        // A pool that already exists keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}

// ── Table 1 ────────────────────────────────────────────────────────────

pub const TABLE1_HEADER: [&str; 7] = ["instance", "variant", "seed", "corner_err_px", "corner_err_std", "psnr_db", "success"];
pub const SWEEP_HEADER: [&str; 4] = ["level", "variant", "success_rate", "n"];
pub const POSE_HEADER: [&str; 5] = ["run", "variant", "rot_err_deg", "trans_err_x100", "psnr_db"];

#[derive(Clone, Debug)]
pub struct PlanarSweep {
    pub instances: usize,
    pub seed_base: u64,
    pub variants: Vec<WarpVariant>,
    pub image: Option<PathBuf>,
    pub patchset: PatchSetConfig,
    pub train: TrainConfig,
}

impl PlanarSweep {
    /// Desk scale: 10 instances on the downscaled image.
    pub fn desk() -> Self {
        Self {
            instances: 10,
            seed_base: 0,
            variants: WarpVariant::ALL.to_vec(),
            image: None,
            patchset: PatchSetConfig::default(),
            train: TrainConfig::planar(),
        }
    }

    /// 20 instances on the full-resolution image with full-size networks.
    pub fn full() -> Self {
        Self {
            instances: 20,
            patchset: PatchSetConfig {
                long_side: 0,
                patch_size: 180,
                ..PatchSetConfig::default()
            },
            train: TrainConfig::planar_full(),
            ..Self::desk()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Table1Row {
    pub instance: usize,
    pub record: MetricsRecord,
}

/// Run every (instance, variant) pair. Rows are sorted by instance, then by
/// the order of `sweep.variants`. Failed runs are kept as failed rows.
pub fn run_table1(sweep: &PlanarSweep) -> Result<Vec<Table1Row>, HarnessError> {
    let data: Vec<PatchSet> = (0..sweep.instances)
        .map(|i| gen_patchset_from(sweep.image.as_deref(), &sweep.patchset, sweep.seed_base + i as u64))
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..sweep.instances)
        .flat_map(|i| (0..sweep.variants.len()).map(move |v| (i, v)))
        .collect();
    let mut rows: Vec<(usize, usize, MetricsRecord)> = jobs
        .par_iter()
        .map(|&(i, v)| {
            let cfg = TrainConfig {
                variant: sweep.variants[v],
                seed: sweep.seed_base + i as u64,
                ..sweep.train.clone()
            };
            let record = match train_planar(&cfg, &data[i]) {
                Ok(o) => o.record,
                Err(e) => failed_record(&cfg, &e),
            };
            (i, v, record)
        })
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    Ok(rows.into_iter().map(|(instance, _, record)| Table1Row { instance, record }).collect())
}

fn failed_record(cfg: &TrainConfig, e: &TrainError) -> MetricsRecord {
    let mut r = MetricsRecord::new(&format!("planar-{}-s{}", cfg.variant, cfg.seed), cfg.variant.as_str(), cfg.seed);
    r.failure = e.to_string();
    r.corner_error_px = f64::INFINITY;
    r
}

/// Per-variant statistics over instances.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub corner_mean: f64,
    pub corner_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub success_rate: f64,
    pub n: usize,
    pub failed: usize,
}

/// Corner and PSNR statistics exclude failed runs; the success rate counts
/// them as failures.
pub fn summarize(rows: &[Table1Row], variants: &[WarpVariant]) -> Vec<VariantSummary> {
    variants
        .iter()
        .map(|v| {
            let recs: Vec<MetricsRecord> = rows
                .iter()
                .filter(|r| r.record.variant == v.as_str())
                .map(|r| r.record.clone())
                .collect();
            let ok: Vec<&MetricsRecord> = recs.iter().filter(|r| !r.failed()).collect();
            let (cm, cs) = mean_std(&ok.iter().map(|r| r.corner_error_px).collect::<Vec<_>>());
            let (pm, ps) = mean_std(&ok.iter().map(|r| r.psnr_db).collect::<Vec<_>>());
            VariantSummary {
                variant: v.as_str().to_string(),
                corner_mean: cm,
                corner_std: cs,
                psnr_mean: pm,
                psnr_std: ps,
                success_rate: metrics::success_rate(&recs, SUCCESS_THRESHOLD_PX),
                n: recs.len(),
                failed: recs.len() - ok.len(),
            }
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    csv::Writer::from_path(path).map_err(|source| HarnessError::Csv {
        path: path.display().to_string(),
        source,
    })
}

fn csv_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), HarnessError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let err = |source| HarnessError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

/// Per-run rows, then per variant a `mean` row (success column: success
/// rate) and a `std` row (std-devs over instances; success column empty).
pub fn write_table1(path: &Path, rows: &[Table1Row], summary: &[VariantSummary]) -> Result<(), HarnessError> {
    let mut out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.instance.to_string(),
                r.record.variant.clone(),
                r.record.seed.to_string(),
                r.record.corner_error_px.to_string(),
                r.record.corner_error_std.to_string(),
                r.record.psnr_db.to_string(),
                (r.record.success as u8).to_string(),
            ]
        })
        .collect();
    for s in summary {
        out.push(vec![
            "mean".into(),
            s.variant.clone(),
            String::new(),
            s.corner_mean.to_string(),
            String::new(),
            s.psnr_mean.to_string(),
            s.success_rate.to_string(),
        ]);
        out.push(vec![
            "std".into(),
            s.variant.clone(),
            String::new(),
            s.corner_std.to_string(),
            String::new(),
            s.psnr_std.to_string(),
            String::new(),
        ]);
    }
    csv_rows(path, &TABLE1_HEADER, out)
}

// ── Noise sweep ────────────────────────────────────────────────────────

/// Parse `start:stop:step` (inclusive) or a comma-separated list. Levels
/// must be nonnegative and strictly increasing.
pub fn parse_levels(s: &str) -> Result<Vec<f64>, HarnessError> {
    let bad = |m: &str| HarnessError::Usage(format!("--levels {s}: {m}"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let levels = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, d] = parts.as_slice() else {
            return Err(bad("expected start:stop:step"));
        };
        let (a, b, d) = (num(a)?, num(b)?, num(d)?);
        if !(d > 0.0) || !d.is_finite() {
            return Err(bad("step must be positive"));
        }
        let n = ((b - a) / d + 1e-9).floor();
        if n < 0.0 {
            return Err(bad("stop is below start"));
        }
        (0..=n as usize).map(|i| ((a + i as f64 * d) * 1e12).round() / 1e12).collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if levels.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(bad("levels must be nonnegative"));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(bad("levels must increase"));
    }
    Ok(levels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub level: f64,
    pub variant: String,
    pub success_rate: f64,
    pub n: usize,
}

/// For every level, `runs` instances per variant start from the
/// ground-truth warps with translation noise of that level.
pub fn run_noise_sweep(base: &PlanarSweep, levels: &[f64], runs: usize) -> Result<Vec<SweepRow>, HarnessError> {
    let data: Vec<PatchSet> = (0..runs)
        .map(|r| gen_patchset_from(base.image.as_deref(), &base.patchset, base.seed_base + r as u64))
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize, usize)> = (0..levels.len())
        .flat_map(|l| (0..base.variants.len()).flat_map(move |v| (0..runs).map(move |r| (l, v, r))))
        .collect();
    let records: Vec<(usize, usize, MetricsRecord)> = jobs
        .par_iter()
        .map(|&(l, v, r)| {
            let cfg = TrainConfig {
                variant: base.variants[v],
                seed: base.seed_base + r as u64,
                gt_init: true,
                init_noise: levels[l],
                ..base.train.clone()
            };
            let rec = match train_planar(&cfg, &data[r]) {
                Ok(o) => o.record,
                Err(e) => failed_record(&cfg, &e),
            };
            (l, v, rec)
        })
        .collect();
    let mut rows = vec![];
    for (l, &level) in levels.iter().enumerate() {
        for (v, variant) in base.variants.iter().enumerate() {
            let recs: Vec<MetricsRecord> = records
                .iter()
                .filter(|x| x.0 == l && x.1 == v)
                .map(|x| x.2.clone())
                .collect();
            rows.push(SweepRow {
                level,
                variant: variant.as_str().to_string(),
                success_rate: metrics::success_rate(&recs, SUCCESS_THRESHOLD_PX),
                n: recs.len(),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<(), HarnessError> {
    csv_rows(
        path,
        &SWEEP_HEADER,
        rows.iter()
            .map(|r| vec![r.level.to_string(), r.variant.clone(), r.success_rate.to_string(), r.n.to_string()]),
    )
}

// ── Toy 3D experiments ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ToyExperiment {
    pub seeds: Vec<u64>,
    pub variants: Vec<WarpVariant>,
    pub scene: ToySceneConfig,
    pub scene_seed: u64,
    pub train: TrainConfig,
}

impl ToyExperiment {
    pub fn desk() -> Self {
        Self {
            seeds: (0..5).collect(),
            variants: vec![WarpVariant::Explicit, WarpVariant::Inn],
            scene: ToySceneConfig::default(),
            scene_seed: 0,
            train: TrainConfig::toy3d(),
        }
    }
}

/// Joint pose and field optimization from perturbed poses, one record per
/// (seed, variant), sorted by seed then variant.
pub fn run_pose_table(exp: &ToyExperiment) -> Result<Vec<MetricsRecord>, HarnessError> {
    let scene = gen_toyscene(&exp.scene, exp.scene_seed)?;
    let jobs: Vec<(usize, usize)> = (0..exp.seeds.len())
        .flat_map(|s| (0..exp.variants.len()).map(move |v| (s, v)))
        .collect();
    let mut out: Vec<(usize, usize, MetricsRecord)> = jobs
        .par_iter()
        .map(|&(s, v)| {
            let cfg = TrainConfig {
                variant: exp.variants[v],
                seed: exp.seeds[s],
                ..exp.train.clone()
            };
            let rec = match train_toy3d(&cfg, &scene) {
                Ok(o) => o.record,
                Err(e) => {
                    let mut r = MetricsRecord::new(&format!("toy3d-{}-s{}", cfg.variant, cfg.seed), cfg.variant.as_str(), cfg.seed);
                    r.failure = e.to_string();
                    r.rot_err_deg = f64::INFINITY;
                    r
                }
            };
            (s, v, rec)
        })
        .collect();
    out.sort_by_key(|r| (r.0, r.1));
    Ok(out.into_iter().map(|r| r.2).collect())
}

pub fn write_pose_table(path: &Path, records: &[MetricsRecord]) -> Result<(), HarnessError> {
    csv_rows(
        path,
        &POSE_HEADER,
        records.iter().map(|r| {
            vec![
                r.run_id.clone(),
                r.variant.clone(),
                r.rot_err_deg.to_string(),
                r.trans_err_x100.to_string(),
                r.psnr_db.to_string(),
            ]
        }),
    )
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug)]
pub struct RefineExperiment {
    pub offset_deg: f64,
    pub seeds: Vec<u64>,
    pub variants: Vec<WarpVariant>,
    pub scene: ToySceneConfig,
    pub scene_seed: u64,
    /// Field training with ground-truth poses and frozen warps.
    pub field_train: TrainConfig,
    /// Warp-only refinement.
    pub refine: TrainConfig,
    pub record_every: u64,
}

impl RefineExperiment {
    pub fn desk(offset_deg: f64) -> Self {
        let toy = TrainConfig::toy3d();
        Self {
            offset_deg,
            seeds: (0..5).collect(),
            variants: vec![WarpVariant::Explicit, WarpVariant::Inn],
            scene: ToySceneConfig::default(),
            scene_seed: 0,
            field_train: TrainConfig {
                variant: WarpVariant::Explicit,
                freeze_warp: true,
                pose_noise_deg: 0.0,
                ..toy.clone()
            },
            refine: TrainConfig {
                iters: 1200,
                lr_warp: [3e-3, 1e-4],
                c2f_start: 0.0,
                c2f_end: 0.0,
                ..toy
            },
            record_every: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RefineRun {
    pub seed: u64,
    pub variant: WarpVariant,
    pub view: usize,
    pub outcome: RefineOutcome,
}

/// Train a field with ground-truth poses, then recover single views from a
/// rotated start against the frozen field.
pub fn run_pose_refine(exp: &RefineExperiment) -> Result<(MetricsRecord, Vec<RefineRun>), HarnessError> {
    let scene = gen_toyscene(&exp.scene, exp.scene_seed)?;
    let field = train_toy3d(&exp.field_train, &scene)?;
    if field.record.failed() {
        return Err(HarnessError::Usage(format!("field training failed: {}", field.record.failure)));
    }
    let jobs: Vec<(u64, WarpVariant)> = exp
        .seeds
        .iter()
        .flat_map(|&s| exp.variants.iter().map(move |&v| (s, v)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(seed, variant)| {
            let view = 1 + (seed as usize) % (scene.len() - 1);
            let cfg = TrainConfig {
                variant,
                seed,
                ..exp.refine.clone()
            };
            let outcome = pose_refine_single_view(&field.state.store, &field.model.field, &scene, view, exp.offset_deg, &cfg, exp.record_every)?;
            Ok(RefineRun {
                seed,
                variant,
                view,
                outcome,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok((field.record, runs))
}

pub const REFINE_HEADER: [&str; 8] = ["seed", "variant", "view", "step", "rot_err_deg", "trans_err_x100", "rigidity_residual", "loss"];

pub fn write_refine(path: &Path, runs: &[RefineRun]) -> Result<(), HarnessError> {
    csv_rows(
        path,
        &REFINE_HEADER,
        runs.iter().flat_map(|r| {
            r.outcome.trajectory.iter().map(move |s| {
                vec![
                    r.seed.to_string(),
                    r.variant.as_str().to_string(),
                    r.view.to_string(),
                    s.step.to_string(),
                    s.rot_err_deg.to_string(),
                    s.trans_err_x100.to_string(),
                    s.rigidity_residual.to_string(),
                    s.loss.to_string(),
                ]
            })
        }),
    )
}
