//! Experiment orchestration: builds the context grid, trains or loads the
//! roster models, evaluates them on the test split and writes the artifacts.
//!
//! Output directory layout:
//!
//! ```text
//! config.frozen.json   effective config, reloadable
//! seeds.json           training, mask and dataset seeds
//! results.csv          one row per (context, model)
//! sweep.csv            per-image rows (unseen sweeps only)
//! models/*.macr        one checkpoint per trained roster model
//! train/*.csv          per-stage training logs
//! recon/<ctx>/<model>/ reconstructions and residuals (MACT + PGM)
//! ```

mod config;

pub use config::{
    ExperimentConfig, ExperimentKind, MaskSection, ModelSection, RosterModel, SweepSection, TrainSection,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::datagen::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, mean_std};
use crate::model::{load_checkpoint_as, save_checkpoint, ModelMode, ReconModel};
use crate::sampling::{encode_context, make_mask, AcquisitionContext, SamplingMask};
use crate::tensor::{write_mact, DType, Tensor};
use crate::training::{train_stage1, train_stage2, ContextData, RecordRow, Sample, TrainOutcome};

/// Progress sink; receives one human-readable line per event.
pub type Log<'a> = &'a mut dyn FnMut(&str);

/// Mask seed for a context, mixed from the configured base seed.
pub fn context_mask_seed(base: u64, ctx: &AcquisitionContext) -> u64 {
    let r = (ctx.acceleration * 1000.0).round() as u64;
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (r << 8 | (ctx.pattern.code() as u64) << 4 | ctx.study as u64)
}

/// One entry of the context grid.
#[derive(Clone, Debug)]
pub struct GridContext {
    pub context: AcquisitionContext,
    /// Index into the experiment's datasets.
    pub source: usize,
    pub mask: SamplingMask,
}

impl GridContext {
    pub fn label(&self) -> String {
        self.context.label()
    }
}

fn load_datasets(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    let sets = cfg.datasets.iter().map(load_dataset).collect::<Result<Vec<_>>>()?;
    let size = sets[0].manifest.size;
    if let Some(d) = sets.iter().find(|d| d.manifest.size != size) {
        return Err(Error::Config(format!(
            "dataset {} has size {}, expected {size}",
            d.root.display(),
            d.manifest.size
        )));
    }
    for d in &sets {
        if d.train.is_empty() || d.test.is_empty() {
            return Err(Error::Config(format!(
                "dataset {} needs training and test images",
                d.root.display()
            )));
        }
    }
    Ok(sets)
}

fn grid_mask(cfg: &ExperimentConfig, ctx: &AcquisitionContext, size: usize) -> Result<SamplingMask> {
    let seed = context_mask_seed(cfg.masks.seed, ctx);
    make_mask(ctx.pattern, size, size, ctx.acceleration, cfg.masks.center_fraction(ctx.pattern), seed)
}

/// Contexts the roster models are trained on, in table order.
pub fn context_grid(cfg: &ExperimentConfig, datasets: &[Dataset]) -> Result<Vec<GridContext>> {
    let encoding = cfg.effective_encoding();
    let size = datasets[0].manifest.size;
    let mut out: Vec<GridContext> = Vec::new();
    for (source, ds) in datasets.iter().enumerate() {
        for &pattern in &cfg.patterns {
            for &r in &cfg.accelerations {
                let context = AcquisitionContext::new(r, pattern, ds.study_code(), encoding)?;
                if out.iter().any(|g| g.context == context) {
                    return Err(Error::Config(format!(
                        "context {} appears twice; datasets need distinct study tags",
                        context.label()
                    )));
                }
                out.push(GridContext {
                    mask: grid_mask(cfg, &context, size)?,
                    context,
                    source,
                });
            }
        }
    }
    Ok(out)
}

/// Column `context_code`: the pattern code, or the study code when studies vary.
fn context_code(kind: ExperimentKind, ctx: &AcquisitionContext) -> u8 {
    match kind {
        ExperimentKind::FixedMask => ctx.study,
        _ => ctx.pattern.code(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub context_r: f64,
    pub context_code: u8,
    pub context: String,
    pub model: String,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub n_images: usize,
    pub best: bool,
    pub second_best: bool,
}

/// Rows keyed by (context, model), in grid × roster order.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub const HEADER: &'static str =
        "experiment,context_r,context_code,model,psnr_mean,psnr_std,ssim_mean,ssim_std,n_images,best,second_best";

    pub fn get(&self, context: &str, model: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.context == context && r.model == model)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.experiment,
                r.context_r,
                r.context_code,
                r.model,
                r.psnr_mean,
                r.psnr_std,
                r.ssim_mean,
                r.ssim_std,
                r.n_images,
                r.best,
                r.second_best
            );
        }
        s
    }

    /// Flags the best and second-best trained model of each context by mean
    /// PSNR (mean SSIM breaks ties). Zero-filled rows are never flagged.
    fn rank(&mut self) {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            if r.model != RosterModel::Zf.name() {
                groups.entry(r.context.clone()).or_default().push(i);
            }
        }
        for idx in groups.values_mut() {
            idx.sort_by(|&a, &b| {
                let (ra, rb) = (&self.rows[a], &self.rows[b]);
                rb.psnr_mean
                    .total_cmp(&ra.psnr_mean)
                    .then(rb.ssim_mean.total_cmp(&ra.ssim_mean))
                    .then(a.cmp(&b))
            });
            if let Some(&i) = idx.first() {
                self.rows[i].best = true;
            }
            if let Some(&i) = idx.get(1) {
                self.rows[i].second_best = true;
            }
        }
    }
}

/// Per-image scores for one model on one context.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

/// Exclusive ownership of an output directory for the lifetime of the guard.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string()).map_err(|e| Error::io(&path, e))?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Precondition(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// 8-bit binary PGM, min-max scaled; a constant image renders black.
pub fn pgm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
        other => return Err(Error::InvalidArgument(format!("pgm needs a 2-D image, got {other:?}"))),
    };
    let (lo, hi) = (image.min(), image.max());
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

#[derive(Serialize)]
struct SeedRecord {
    train_seed: u64,
    mask_seed_base: u64,
    masks: BTreeMap<String, u64>,
    datasets: Vec<DatasetSeed>,
}

#[derive(Serialize)]
struct DatasetSeed {
    root: PathBuf,
    seed: u64,
    study_tag: String,
}

/// Checkpoint key and file stem for a trained roster entry.
fn model_key(which: RosterModel, ctx: Option<&GridContext>) -> (String, String) {
    match (which, ctx) {
        (RosterModel::Csm, Some(c)) => (format!("csm/{}", c.label()), format!("csm_{}", c.label())),
        _ => (which.name().to_string(), which.name().to_string()),
    }
}

/// Training material for a set of grid contexts.
fn context_data(grid: &[&GridContext], datasets: &[Dataset]) -> Result<Vec<ContextData>> {
    grid.iter()
        .map(|g| {
            let ds = &datasets[g.source];
            ContextData::new(g.context, g.mask.clone(), g.source, &ds.train, &ds.val)
        })
        .collect()
}

/// Runs both training stages, writing the per-stage logs.
pub fn train_two_stage(
    cfg: &ExperimentConfig,
    mode: ModelMode,
    data: &[ContextData],
    log_stem: &str,
    log: Log,
) -> Result<(ReconModel, [TrainOutcome; 2])> {
    let context_len = cfg.effective_encoding().len();
    let model_cfg = cfg.model.model_config(mode == ModelMode::Mac, context_len);
    let out = &cfg.output_dir;
    let mut report = |stage: u8, r: &RecordRow| {
        log(&format!(
            "{log_stem} stage {stage} epoch {} {} {} loss {:.6e}{}",
            r.epoch,
            r.split,
            r.context,
            r.loss,
            r.psnr.map(|p| format!(" psnr {p:.3}")).unwrap_or_default()
        ))
    };
    let s1 = guarded(out, log_stem, train_stage1(model_cfg, data, &cfg.train.stage(1), |r| report(1, r)))?;
    write_file(&out.join("train").join(format!("{log_stem}_stage1.csv")), s1.record.to_csv())?;
    let s2 = guarded(
        out,
        log_stem,
        train_stage2(&s1.model, cfg.model.cascades, data, &cfg.train.stage(2), |r| report(2, r)),
    )?;
    write_file(&out.join("train").join(format!("{log_stem}_stage2.csv")), s2.record.to_csv())?;
    Ok((s2.model.clone(), [s1, s2]))
}

/// Saves the last good parameters of a diverged run before passing the error on.
fn guarded(out: &Path, stem: &str, r: Result<TrainOutcome>) -> Result<TrainOutcome> {
    if let Err(Error::Diverged { last_good, .. }) = &r {
        let path = out.join(format!("{stem}.last_good.macr"));
        let _ = fs::create_dir_all(out);
        save_checkpoint(last_good, &path)?;
    }
    r
}

/// Finds, loads or trains one roster model.
fn obtain_model(
    cfg: &ExperimentConfig,
    which: RosterModel,
    ctx: Option<&GridContext>,
    data: &[ContextData],
    log: Log,
) -> Result<ReconModel> {
    let (key, stem) = model_key(which, ctx);
    let mode = if which == RosterModel::Mac {
        ModelMode::Mac
    } else {
        ModelMode::Static
    };
    let local = cfg.output_dir.join("models").join(format!("{stem}.macr"));
    let existing = cfg.checkpoints.get(&key).cloned().or_else(|| local.exists().then(|| local.clone()));
    let mut model = match existing {
        Some(path) => {
            log(&format!("{key}: loading {}", path.display()));
            load_checkpoint_as(&path, mode)?
        }
        None if cfg.train_missing => {
            log(&format!("{key}: training on {} context(s)", data.len()));
            let (model, _) = train_two_stage(cfg, mode, data, &stem, log)?;
            write_file(&local, crate::model::checkpoint_bytes(&model))?;
            model
        }
        None => {
            return Err(Error::MissingFile(local));
        }
    };
    let want = cfg.model.model_config(mode == ModelMode::Mac, cfg.effective_encoding().len());
    let got = model.config();
    if got.cascades != want.cascades || got.block != want.block {
        return Err(Error::Config(format!(
            "checkpoint for {key} has {} cascades of {:?}, config asks for {} of {:?}",
            got.cascades, got.block, want.cascades, want.block
        )));
    }
    if mode == ModelMode::Mac && got.context_len != want.context_len {
        return Err(Error::ContextLength {
            expected: want.context_len,
            got: got.context_len,
        });
    }
    model.set_precision(cfg.model.precision);
    Ok(model)
}

/// Trained roster models. CSMs are indexed like the grid.
struct Roster {
    mac: Option<ReconModel>,
    jcm: Option<ReconModel>,
    csm: Vec<ReconModel>,
}

impl Roster {
    fn model_for(&self, which: RosterModel, ctx_index: Option<usize>) -> Option<&ReconModel> {
        match which {
            RosterModel::Zf => None,
            RosterModel::Mac => self.mac.as_ref(),
            RosterModel::Jcm => self.jcm.as_ref(),
            RosterModel::Csm => ctx_index.and_then(|i| self.csm.get(i)),
        }
    }
}

/// Guards against reusing checkpoints that were trained under a different
/// config in the same output directory.
fn check_frozen_compatible(cfg: &ExperimentConfig) -> Result<()> {
    let path = cfg.output_dir.join("config.frozen.json");
    if !path.exists() || !cfg.output_dir.join("models").exists() {
        return Ok(());
    }
    let old = ExperimentConfig::load(&path)?;
    let same = old.kind == cfg.kind
        && old.accelerations == cfg.accelerations
        && old.patterns == cfg.patterns
        && old.datasets == cfg.datasets
        && old.effective_encoding() == cfg.effective_encoding()
        && old.model == cfg.model
        && old.train == cfg.train
        && old.masks == cfg.masks;
    if same {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "{} holds models trained under a different config",
            cfg.output_dir.display()
        )))
    }
}

fn prepare(cfg: &ExperimentConfig, log: Log) -> Result<(Vec<Dataset>, Vec<GridContext>, Roster)> {
    cfg.validate()?;
    check_frozen_compatible(cfg)?;
    let datasets = load_datasets(cfg)?;
    let grid = context_grid(cfg, &datasets)?;

    let mut frozen = cfg.clone();
    frozen.encoding = Some(cfg.effective_encoding());
    write_file(&cfg.output_dir.join("config.frozen.json"), frozen.to_json() + "\n")?;
    let seeds = SeedRecord {
        train_seed: cfg.train.seed,
        mask_seed_base: cfg.masks.seed,
        masks: grid.iter().map(|g| (g.label(), g.mask.seed)).collect(),
        datasets: datasets
            .iter()
            .map(|d| DatasetSeed {
                root: d.root.clone(),
                seed: d.manifest.seed,
                study_tag: d.manifest.study_tag.clone(),
            })
            .collect(),
    };
    write_file(&cfg.output_dir.join("seeds.json"), serde_json::to_string_pretty(&seeds)? + "\n")?;

    let all: Vec<&GridContext> = grid.iter().collect();
    let needs_pooled = cfg.roster.iter().any(|m| matches!(m, RosterModel::Mac | RosterModel::Jcm));
    let pooled = if needs_pooled { context_data(&all, &datasets)? } else { Vec::new() };
    let mut roster = Roster {
        mac: None,
        jcm: None,
        csm: Vec::new(),
    };
    for &which in &cfg.roster {
        match which {
            RosterModel::Zf => {}
            RosterModel::Mac => roster.mac = Some(obtain_model(cfg, which, None, &pooled, log)?),
            RosterModel::Jcm => roster.jcm = Some(obtain_model(cfg, which, None, &pooled, log)?),
            RosterModel::Csm => {
                for g in &grid {
                    let data = context_data(&[g], &datasets)?;
                    roster.csm.push(obtain_model(cfg, which, Some(g), &data, log)?);
                }
            }
        }
    }
    Ok((datasets, grid, roster))
}

/// Reconstructs every test image with `model` (or returns `x_u` for zero-filled).
fn reconstruct_all(model: Option<&ReconModel>, gamma: &Tensor, mask: &SamplingMask, samples: &[Sample]) -> Result<Vec<Tensor>> {
    samples
        .par_iter()
        .map(|s| {
            let Some(m) = model else { return Ok(s.x_u.clone()) };
            let [h, w] = mask.dims();
            let x = s.x_u.clone().reshape(&[1, 1, h, w])?;
            let g = (m.mode() == ModelMode::Mac).then_some(gamma);
            m.forward(g, &x, std::slice::from_ref(&s.y), mask)?.reshape(&[1, h, w])
        })
        .collect()
}

fn score_all(recons: &[Tensor], samples: &[Sample]) -> Result<ImageScores> {
    let r = recons
        .par_iter()
        .zip(samples)
        .map(|(x, s)| metrics::evaluate(x, &s.target).map(|m| (m.psnr_db, m.ssim)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageScores {
        psnr: r.iter().map(|v| v.0).collect(),
        ssim: r.iter().map(|v| v.1).collect(),
    })
}

fn save_images(dir: &Path, recons: &[Tensor], samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (x, s)) in recons.iter().zip(samples).enumerate() {
        let residual = Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(s.target.data()).map(|(a, b)| (a - b).abs()).collect());
        for (name, t) in [("recon", x), ("residual", &residual)] {
            let stem = dir.join(format!("{name}_{i:05}"));
            write_mact(stem.with_extension("mact"), t, DType::F64)?;
            write_file(&stem.with_extension("pgm"), pgm_bytes(t)?)?;
        }
    }
    Ok(())
}

fn summary_row(cfg: &ExperimentConfig, ctx: &AcquisitionContext, model: RosterModel, s: &ImageScores) -> ResultRow {
    let (psnr_mean, psnr_std) = mean_std(&s.psnr);
    let (ssim_mean, ssim_std) = mean_std(&s.ssim);
    ResultRow {
        experiment: cfg.name.clone(),
        context_r: ctx.acceleration,
        context_code: context_code(cfg.kind, ctx),
        context: ctx.label(),
        model: model.name().to_string(),
        psnr_mean,
        psnr_std,
        ssim_mean,
        ssim_std,
        n_images: s.psnr.len(),
        best: false,
        second_best: false,
    }
}

/// Evaluates every roster model on one context's test split.
fn evaluate_context(
    cfg: &ExperimentConfig,
    roster: &Roster,
    ctx: &AcquisitionContext,
    ctx_index: Option<usize>,
    mask: &SamplingMask,
    test: &[Sample],
) -> Result<Vec<(RosterModel, ImageScores)>> {
    let gamma = encode_context(ctx);
    let mut out = Vec::with_capacity(cfg.roster.len());
    for &which in &cfg.roster {
        let model = roster.model_for(which, ctx_index);
        if which.is_trained() && model.is_none() {
            return Err(Error::Precondition(format!("{} is not available for {}", which.name(), ctx.label())));
        }
        let recons = reconstruct_all(model, &gamma, mask, test)?;
        if cfg.save_images {
            save_images(&cfg.output_dir.join("recon").join(ctx.label()).join(which.name()), &recons, test)?;
        }
        out.push((which, score_all(&recons, test)?));
    }
    Ok(out)
}

fn test_samples(ds: &Dataset, mask: &SamplingMask) -> Result<Vec<Sample>> {
    ds.test.iter().map(|img| Sample::new(img, mask)).collect()
}

pub struct ExperimentOutcome {
    pub table: ResultTable,
    /// Checkpoints written or reused under `output_dir/models`.
    pub checkpoints: Vec<PathBuf>,
}

fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let models = dir.join("models");
    if !models.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(&models)
        .map_err(|e| Error::io(&models, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "macr"))
        .collect();
    out.sort();
    Ok(out)
}

/// Trains (or loads) the roster and evaluates it on every grid context.
pub fn run_experiment(cfg: &ExperimentConfig, log: Log) -> Result<ExperimentOutcome> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let (datasets, grid, roster) = prepare(cfg, log)?;
    let mut table = ResultTable::default();
    for (i, g) in grid.iter().enumerate() {
        let test = test_samples(&datasets[g.source], &g.mask)?;
        for (which, scores) in evaluate_context(cfg, &roster, &g.context, Some(i), &g.mask, &test)? {
            table.rows.push(summary_row(cfg, &g.context, which, &scores));
        }
        log(&format!("evaluated {}", g.label()));
    }
    table.rank();
    write_file(&cfg.output_dir.join("results.csv"), table.to_csv())?;
    Ok(ExperimentOutcome {
        table,
        checkpoints: list_checkpoints(&cfg.output_dir)?,
    })
}

/// Per-image row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub image_id: usize,
    pub r: f64,
    pub model: String,
    pub psnr: f64,
    pub ssim: f64,
}

pub struct SweepOutcome {
    pub table: ResultTable,
    pub rows: Vec<SweepRow>,
    /// Grid points evaluated.
    pub unseen: Vec<f64>,
    /// Grid points dropped because a model was trained on them.
    pub excluded: Vec<f64>,
}

pub const SWEEP_HEADER: &str = "image_id,r,model,psnr,ssim";

/// Trains (or loads) the roster on the configured accelerations and evaluates
/// it on every unseen acceleration of the sweep grid.
pub fn run_unseen_sweep(cfg: &ExperimentConfig, log: Log) -> Result<SweepOutcome> {
    if cfg.kind != ExperimentKind::UnseenSweep {
        return Err(Error::Config(format!("sweep needs kind unseen_sweep, got {}", cfg.kind.name())));
    }
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let (datasets, grid, roster) = prepare(cfg, log)?;
    let (unseen, excluded) = cfg.sweep.split(&cfg.accelerations);
    if !excluded.is_empty() {
        log(&format!("sweep: skipping trained accelerations {excluded:?}"));
    }
    let base = grid[0].context;
    let size = datasets[0].manifest.size;
    let mut table = ResultTable::default();
    let mut rows = Vec::new();
    for &r in &unseen {
        let ctx = base.with_acceleration(r);
        let mask = grid_mask(cfg, &ctx, size)?;
        let test = test_samples(&datasets[0], &mask)?;
        for (which, scores) in evaluate_context(cfg, &roster, &ctx, None, &mask, &test)? {
            for (i, (&p, &s)) in scores.psnr.iter().zip(&scores.ssim).enumerate() {
                rows.push(SweepRow {
                    image_id: i,
                    r,
                    model: which.name().to_string(),
                    psnr: p,
                    ssim: s,
                });
            }
            table.rows.push(summary_row(cfg, &ctx, which, &scores));
        }
        log(&format!("sweep: evaluated R = {r}"));
    }
    table.rank();
    let mut csv = format!("{SWEEP_HEADER}\n");
    for row in &rows {
        let _ = writeln!(csv, "{},{},{},{},{}", row.image_id, row.r, row.model, row.psnr, row.ssim);
    }
    write_file(&cfg.output_dir.join("sweep.csv"), csv)?;
    write_file(&cfg.output_dir.join("results.csv"), table.to_csv())?;
    Ok(SweepOutcome {
        table,
        rows,
        unseen,
        excluded,
    })
}

/// Trains one stage of one model outside a full experiment.
///
/// Stage 1 writes `stage1/<name>.macr`; stage 2 starts from that file and
/// writes `models/<name>.macr`, where `name` is `mac` or `jcm`.
pub fn train_stage(cfg: &ExperimentConfig, stage: u8, mode: ModelMode, log: Log) -> Result<PathBuf> {
    cfg.validate()?;
    if !(1..=2).contains(&stage) {
        return Err(Error::InvalidArgument(format!("stage must be 1 or 2, got {stage}")));
    }
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let name = if mode == ModelMode::Mac { "mac" } else { "jcm" };
    let stage1_path = cfg.output_dir.join("stage1").join(format!("{name}.macr"));
    let stage1 = if stage == 2 {
        if !stage1_path.exists() {
            return Err(Error::Precondition(format!(
                "stage 2 needs the stage-1 checkpoint {}",
                stage1_path.display()
            )));
        }
        let mut m = load_checkpoint_as(&stage1_path, mode)?;
        m.set_precision(cfg.model.precision);
        Some(m)
    } else {
        None
    };
    let datasets = load_datasets(cfg)?;
    let grid = context_grid(cfg, &datasets)?;
    let data = context_data(&grid.iter().collect::<Vec<_>>(), &datasets)?;
    let mut report = |r: &RecordRow| log(&format!("{name} stage {stage} epoch {} {} {} loss {:.6e}", r.epoch, r.split, r.context, r.loss));
    let (outcome, path) = match stage1 {
        None => {
            let model_cfg = cfg.model.model_config(mode == ModelMode::Mac, cfg.effective_encoding().len());
            let o = guarded(&cfg.output_dir, name, train_stage1(model_cfg, &data, &cfg.train.stage(1), &mut report))?;
            (o, stage1_path)
        }
        Some(unit) => {
            let o = guarded(
                &cfg.output_dir,
                name,
                train_stage2(&unit, cfg.model.cascades, &data, &cfg.train.stage(2), &mut report),
            )?;
            (o, cfg.output_dir.join("models").join(format!("{name}.macr")))
        }
    };
    let csv = cfg.output_dir.join("train").join(format!("{name}_stage{stage}.csv"));
    write_file(&csv, outcome.record.to_csv())?;
    write_file(&path, crate::model::checkpoint_bytes(&outcome.model))?;
    Ok(path)
}
