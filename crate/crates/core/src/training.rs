//! Two-stage training with Adam on the per-image L2 loss.
//!
//! Stage 1 trains a single functional unit. Stage 2 copies it into every
//! cascade and trains the whole model end to end on the final output. Each
//! batch carries one context; within an epoch every training image is used
//! once and batches cycle through the contexts round-robin.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::fourier::KSpaceGrid;
use crate::metrics;
use crate::model::{ModelConfig, ReconModel};
use crate::sampling::{encode_context, undersample, AcquisitionContext, SamplingMask};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip; off unless set.
    #[serde(default)]
    pub clip: Option<f64>,
}

fn default_batch() -> usize {
    4
}

fn default_lr() -> f64 {
    1e-3
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: default_batch(),
            lr: default_lr(),
            seed: 0,
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if let Some(c) = self.clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// One retrospectively undersampled image: `x_u` and `target` are `[1, H, W]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub x_u: Tensor,
    pub y: KSpaceGrid,
    pub target: Tensor,
}

impl Sample {
    pub fn new(image: &Tensor, mask: &SamplingMask) -> Result<Self> {
        let (y, x_u) = undersample(image, mask)?;
        let [h, w] = mask.dims();
        Ok(Sample {
            x_u: x_u.reshape(&[1, h, w])?,
            y,
            target: image.clone().reshape(&[1, h, w])?,
        })
    }
}

/// Training material for one context. `train` and `val` hold every image of
/// the context's source dataset, undersampled with `mask`.
#[derive(Clone, Debug)]
pub struct ContextData {
    pub context: AcquisitionContext,
    pub gamma: Tensor,
    pub mask: SamplingMask,
    /// Index of the source dataset the images come from.
    pub source: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl ContextData {
    pub fn new(
        context: AcquisitionContext,
        mask: SamplingMask,
        source: usize,
        train_images: &[Tensor],
        val_images: &[Tensor],
    ) -> Result<Self> {
        let prep = |imgs: &[Tensor]| imgs.iter().map(|i| Sample::new(i, &mask)).collect::<Result<Vec<_>>>();
        Ok(ContextData {
            gamma: encode_context(&context),
            train: prep(train_images)?,
            val: prep(val_images)?,
            context,
            mask,
            source,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub context: usize,
    /// Image indices into the context's source dataset.
    pub indices: Vec<usize>,
}

/// Batches for one epoch.
///
/// Each source's images are shuffled with a generator keyed by `(seed,
/// epoch)` and cut into batches. Batch `j` of a source goes to that source's
/// `(j + epoch) mod n`-th context; sources are then interleaved batch by batch.
pub fn make_batches(
    source_sizes: &[usize],
    context_sources: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<BatchPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut per_source: Vec<Vec<BatchPlan>> = Vec::with_capacity(source_sizes.len());
    for (s, &n) in source_sizes.iter().enumerate() {
        let ctxs: Vec<usize> = (0..context_sources.len()).filter(|&c| context_sources[c] == s).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        if ctxs.is_empty() {
            per_source.push(Vec::new());
            continue;
        }
        per_source.push(
            order
                .chunks(batch_size.max(1))
                .enumerate()
                .map(|(j, chunk)| BatchPlan {
                    context: ctxs[(j + epoch) % ctxs.len()],
                    indices: chunk.to_vec(),
                })
                .collect(),
        );
    }
    let rounds = per_source.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for batches in &per_source {
            if let Some(b) = batches.get(r) {
                out.push(b.clone());
            }
        }
    }
    out
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub epoch: usize,
    pub split: String,
    pub context: String,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub seed: u64,
    pub rows: Vec<RecordRow>,
    /// Mean per-batch training loss of each epoch.
    pub train_loss: Vec<f64>,
    /// Mean per-image validation loss over all contexts, per epoch.
    pub val_loss: Vec<f64>,
}

impl TrainRecord {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("epoch,split,context,loss,psnr,ssim,seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.split,
                r.context,
                r.loss,
                opt(r.psnr),
                opt(r.ssim),
                r.seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    pub model: ReconModel,
    /// Parameters after the epoch with the lowest validation loss.
    pub best: ReconModel,
    pub best_epoch: usize,
    pub record: TrainRecord,
}

fn gather(samples: &[Sample], indices: &[usize]) -> Result<(Tensor, Vec<KSpaceGrid>, Tensor)> {
    let xs: Vec<Tensor> = indices.iter().map(|&i| samples[i].x_u.clone()).collect();
    let ts: Vec<Tensor> = indices.iter().map(|&i| samples[i].target.clone()).collect();
    let ys = indices.iter().map(|&i| samples[i].y.clone()).collect();
    Ok((Tensor::stack(&xs)?, ys, Tensor::stack(&ts)?))
}

fn gamma_for<'a>(model: &ReconModel, ctx: &'a ContextData) -> Option<&'a Tensor> {
    match model.mode() {
        crate::model::ModelMode::Mac => Some(&ctx.gamma),
        crate::model::ModelMode::Static => None,
    }
}

/// Loss and gradients for one batch.
fn loss_and_grads(model: &ReconModel, ctx: &ContextData, indices: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let (x_u, ys, targets) = gather(&ctx.train, indices)?;
    let mut tape = Tape::new();
    let (out, params) = model.record(&mut tape, gamma_for(model, ctx), &x_u, &ys, &ctx.mask)?;
    let target = tape.constant(targets);
    let loss = tape.l2_loss(out, target)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let g = params
        .vars
        .iter()
        .map(|&v| grads.take(v).ok_or_else(|| Error::Precondition("parameter received no gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, g))
}

fn clip_global(grads: &mut [Tensor], limit: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > limit {
        let s = limit / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Per-context validation: mean per-image loss, PSNR and SSIM.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationScore {
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn validate(model: &ReconModel, ctx: &ContextData) -> Result<ValidationScore> {
    let per_image = ctx
        .val
        .par_iter()
        .map(|s| {
            let x = s.x_u.clone().reshape(&[1, 1, s.x_u.shape()[1], s.x_u.shape()[2]])?;
            let out = model.forward(gamma_for(model, ctx), &x, std::slice::from_ref(&s.y), &ctx.mask)?;
            let out = out.reshape(s.target.shape())?;
            let loss = crate::ops::l2_loss(&out, &s.target)?;
            let r = metrics::evaluate(&out, &s.target)?;
            Ok((loss, r.psnr_db, r.ssim))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len().max(1) as f64;
    Ok(ValidationScore {
        loss: per_image.iter().map(|v| v.0).sum::<f64>() / n,
        psnr: per_image.iter().map(|v| v.1).sum::<f64>() / n,
        ssim: per_image.iter().map(|v| v.2).sum::<f64>() / n,
    })
}

fn check_data(model: &ReconModel, data: &[ContextData]) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::Config("training needs at least one context".into()));
    }
    let sources = data.iter().map(|c| c.source).max().unwrap() + 1;
    let mut sizes = vec![None; sources];
    for c in data {
        if model.mode() == crate::model::ModelMode::Mac && c.gamma.len() != model.config().context_len {
            return Err(Error::ContextLength {
                expected: model.config().context_len,
                got: c.gamma.len(),
            });
        }
        match sizes[c.source] {
            None => sizes[c.source] = Some(c.train.len()),
            Some(n) if n != c.train.len() => {
                return Err(Error::Config(format!(
                    "contexts sharing source {} disagree on its size",
                    c.source
                )))
            }
            _ => {}
        }
    }
    Ok(sizes.into_iter().map(|s| s.unwrap_or(0)).collect())
}

/// Trains `model` in place of its current parameters. `progress` sees every
/// record row as it is produced.
pub fn train(
    mut model: ReconModel,
    data: &[ContextData],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&RecordRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let source_sizes = check_data(&model, data)?;
    let context_sources: Vec<usize> = data.iter().map(|c| c.source).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.parameters(),
    );
    let mut record = TrainRecord {
        seed: cfg.seed,
        ..TrainRecord::default()
    };
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let plan = make_batches(&source_sizes, &context_sources, cfg.batch_size, cfg.seed, epoch);
        let mut losses = Vec::with_capacity(plan.len());
        for (step, b) in plan.iter().enumerate() {
            let ctx = &data[b.context];
            let diverged = |what: String, last_good: &ReconModel| Error::Diverged {
                epoch: epoch + 1,
                step,
                what,
                last_good: Box::new(last_good.clone()),
            };
            let (loss, mut grads) = loss_and_grads(&model, ctx, &b.indices)?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss} on context {}", ctx.context), &model));
            }
            if let Some(limit) = cfg.clip {
                clip_global(&mut grads, limit);
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            if let Err(e) = adam.step(&mut model.parameters_mut(), &grad_refs) {
                return Err(diverged(e.to_string(), &model));
            }
            if model.parameters().iter().any(|p| !p.is_finite()) {
                // Adam rejects non-finite gradients, so this only triggers on
                // overflow inside the update itself.
                return Err(diverged("non-finite parameter after update".into(), &model));
            }
            losses.push(loss);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        record.train_loss.push(train_loss);
        let row = RecordRow {
            epoch: epoch + 1,
            split: "train".into(),
            context: "all".into(),
            loss: train_loss,
            psnr: None,
            ssim: None,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&row);
        record.rows.push(row);

        let mut total = 0.0;
        let mut count = 0usize;
        for ctx in data {
            let v = validate(&model, ctx)?;
            total += v.loss * ctx.val.len() as f64;
            count += ctx.val.len();
            let row = RecordRow {
                epoch: epoch + 1,
                split: "val".into(),
                context: ctx.context.label(),
                loss: v.loss,
                psnr: Some(v.psnr),
                ssim: Some(v.ssim),
                seconds: start.elapsed().as_secs_f64(),
            };
            progress(&row);
            record.rows.push(row);
        }
        let val_loss = if count == 0 { f64::NAN } else { total / count as f64 };
        record.val_loss.push(val_loss);
        let row = RecordRow {
            epoch: epoch + 1,
            split: "val".into(),
            context: "all".into(),
            loss: val_loss,
            psnr: None,
            ssim: None,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&row);
        record.rows.push(row);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = model.clone();
            best_epoch = epoch + 1;
        }
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        record,
    })
}

/// Stage 1: a freshly initialised single functional unit.
pub fn train_stage1(
    config: ModelConfig,
    data: &[ContextData],
    cfg: &TrainConfig,
    progress: impl FnMut(&RecordRow),
) -> Result<TrainOutcome> {
    let unit = ReconModel::init(ModelConfig { cascades: 1, ..config }, cfg.seed)?;
    train(unit, data, cfg, progress)
}

/// Stage 2: every cascade starts as a copy of the stage-1 unit.
pub fn train_stage2(
    stage1: &ReconModel,
    cascades: usize,
    data: &[ContextData],
    cfg: &TrainConfig,
    progress: impl FnMut(&RecordRow),
) -> Result<TrainOutcome> {
    let full = ReconModel::replicate_unit(stage1, cascades)?;
    train(full, data, cfg, progress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CnnBlockSpec, ModelMode};
    use crate::sampling::{make_gaussian_mask, ContextEncoding, MaskPattern};
    use proptest::prelude::*;
    use rand::Rng;

    fn images(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut img = Tensor::zeros(&[size, size]);
                let (a, b) = (rng.gen_range(1..size / 2), rng.gen_range(size / 2..size - 1));
                for i in a..b {
                    for j in a..b {
                        img.data_mut()[i * size + j] = rng.gen_range(0.5..1.0);
                    }
                }
                img
            })
            .collect()
    }

    fn tiny(mode: ModelMode) -> ModelConfig {
        ModelConfig {
            mode,
            cascades: 2,
            context_len: 1,
            block: CnnBlockSpec {
                channels: 4,
                kernel: 3,
            },
            df_lambda: None,
            precision: Default::default(),
        }
    }

    fn contexts(rs: &[f64]) -> Vec<ContextData> {
        let train = images(6, 12, 1);
        let val = images(2, 12, 2);
        rs.iter()
            .enumerate()
            .map(|(i, &r)| {
                let ctx = AcquisitionContext::new(r, MaskPattern::Gaussian, 1, ContextEncoding::Acceleration).unwrap();
                let mask = make_gaussian_mask(12, 12, r, 0.1, i as u64).unwrap();
                ContextData::new(ctx, mask, 0, &train, &val).unwrap()
            })
            .collect()
    }

    fn cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            lr,
            seed: 5,
            clip: None,
        }
    }

    #[test]
    fn single_context_is_plain_shuffle() {
        let b = make_batches(&[10], &[0], 4, 1, 0);
        assert_eq!(b.iter().map(|p| p.indices.len()).collect::<Vec<_>>(), [4, 4, 2]);
        assert!(b.iter().all(|p| p.context == 0));
        let mut all: Vec<usize> = b.iter().flat_map(|p| p.indices.clone()).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(make_batches(&[10], &[0], 4, 1, 1), b);
    }

    #[test]
    fn contexts_alternate() {
        for epoch in 0..4 {
            let b = make_batches(&[20], &[0, 0], 4, 3, epoch);
            let first = b.iter().filter(|p| p.context == 0).count() as isize;
            let second = b.iter().filter(|p| p.context == 1).count() as isize;
            assert!((first - second).abs() <= 1);
            assert!(b.windows(2).all(|w| w[0].context != w[1].context));
        }
    }

    #[test]
    fn sources_interleave() {
        let b = make_batches(&[4, 4], &[0, 1, 1], 2, 0, 0);
        let ctx: Vec<usize> = b.iter().map(|p| p.context).collect();
        assert_eq!(ctx, [0, 1, 0, 2]);
    }

    proptest! {
        #[test]
        fn batches_are_deterministic_and_cover(n in 1usize..40, k in 1usize..4, bs in 1usize..6, seed in any::<u64>(), epoch in 0usize..5) {
            let sources = vec![0; k];
            let a = make_batches(&[n], &sources, bs, seed, epoch);
            prop_assert_eq!(&a, &make_batches(&[n], &sources, bs, seed, epoch));
            let mut all: Vec<usize> = a.iter().flat_map(|p| p.indices.clone()).collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let mut counts = vec![0isize; k];
            for p in &a { counts[p.context] += 1; }
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let data = contexts(&[2.0, 4.0]);
        let start = ReconModel::init(tiny(ModelMode::Mac), 0).unwrap();
        let out = train(start.clone(), &data, &cfg(2, 0.0), |_| {}).unwrap();
        assert_eq!(out.model, start);
    }

    #[test]
    fn training_is_deterministic() {
        let data = contexts(&[2.0, 4.0]);
        let run = || train_stage1(tiny(ModelMode::Mac), &data, &cfg(2, 1e-3), |_| {}).unwrap();
        let (a, b) = (run(), run());
        for (x, y) in a.model.parameters().iter().zip(b.model.parameters()) {
            assert!(x.bit_eq(y));
        }
        assert_eq!(a.record.train_loss, b.record.train_loss);
    }

    #[test]
    fn epoch_loss_is_batch_mean() {
        let data = contexts(&[3.0]);
        let c = cfg(1, 1e-3);
        let start = ReconModel::init(tiny(ModelMode::Mac), 1).unwrap();
        let out = train(start.clone(), &data, &c, |_| {}).unwrap();

        // Replay the epoch by hand.
        let mut model = start;
        let mut adam = AdamState::new(AdamConfig { lr: c.lr, ..AdamConfig::default() }, &model.parameters());
        let mut losses = Vec::new();
        for b in make_batches(&[data[0].train.len()], &[0], c.batch_size, c.seed, 0) {
            let (l, g) = loss_and_grads(&model, &data[b.context], &b.indices).unwrap();
            adam.step(&mut model.parameters_mut(), &g.iter().collect::<Vec<_>>()).unwrap();
            losses.push(l);
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((out.record.train_loss[0] - mean).abs() < 1e-12);
        assert_eq!(out.record.epochs(), 1);
    }

    #[test]
    fn only_trainable_tensors_change() {
        for mode in [ModelMode::Mac, ModelMode::Static] {
            let data = contexts(&[2.0]);
            let start = ReconModel::init(tiny(mode), 2).unwrap();
            let out = train(start.clone(), &data, &cfg(1, 1e-3), |_| {}).unwrap();
            assert_eq!(out.model.config(), start.config());
            assert_eq!(out.model.parameter_count(), start.parameter_count());
            assert_ne!(out.model, start);
        }
    }

    #[test]
    fn stage2_zero_epochs_is_replicated_unit() {
        let data = contexts(&[2.0]);
        let s1 = train_stage1(tiny(ModelMode::Mac), &data, &cfg(1, 1e-3), |_| {}).unwrap();
        let s2 = train_stage2(&s1.model, 3, &data, &cfg(0, 1e-3), |_| {}).unwrap();
        let ctx = &data[0];
        let s = &ctx.val[0];
        let x = s.x_u.clone().reshape(&[1, 1, 12, 12]).unwrap();
        let ys = std::slice::from_ref(&s.y);
        let mut composed = x.clone();
        for _ in 0..3 {
            composed = s1.model.forward(Some(&ctx.gamma), &composed, ys, &ctx.mask).unwrap();
        }
        let full = s2.model.forward(Some(&ctx.gamma), &x, ys, &ctx.mask).unwrap();
        assert!(full.max_abs_diff(&composed) < 1e-12);
    }

    #[test]
    fn one_step_moves_every_cascade() {
        let data = contexts(&[2.0]);
        let s1 = ReconModel::init(ModelConfig { cascades: 1, ..tiny(ModelMode::Mac) }, 3).unwrap();
        let start = ReconModel::replicate_unit(&s1, 3).unwrap();
        let mut one = cfg(1, 1e-3);
        one.batch_size = data[0].train.len();
        let out = train(start.clone(), &data, &one, |_| {}).unwrap();
        let per_cascade = start.parameters().len() / 3;
        for n in 0..3 {
            let moved = (0..per_cascade).any(|i| {
                let k = n * per_cascade + i;
                !start.parameters()[k].bit_eq(out.model.parameters()[k])
            });
            assert!(moved, "cascade {n} did not move");
        }
    }

    #[test]
    fn stage2_requires_single_unit() {
        let data = contexts(&[2.0]);
        let m = ReconModel::init(tiny(ModelMode::Mac), 0).unwrap();
        assert!(matches!(
            train_stage2(&m, 3, &data, &cfg(0, 1e-3), |_| {}),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn divergence_reports_last_good() {
        let data = contexts(&[2.0]);
        let mut m = ReconModel::init(tiny(ModelMode::Static), 0).unwrap();
        for p in m.parameters_mut() {
            p.data_mut().fill(1e200);
        }
        match train(m.clone(), &data, &cfg(1, 1e-3), |_| {}) {
            Err(Error::Diverged { last_good, epoch, .. }) => {
                assert_eq!(epoch, 1);
                assert_eq!(*last_good, m);
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.best_epoch)),
        }
    }

    #[test]
    fn record_csv_layout() {
        let data = contexts(&[2.0, 4.0]);
        let out = train_stage1(tiny(ModelMode::Mac), &data, &cfg(2, 1e-3), |_| {}).unwrap();
        let csv = out.record.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,split,context,loss,psnr,ssim,seconds");
        // per epoch: one train row, one row per context, one pooled val row
        assert_eq!(lines.len(), 1 + 2 * 4);
        assert!(lines[2].starts_with("1,val,r2.0-gaussian-s1,"));
        assert!(out.record.val_loss.iter().all(|v| v.is_finite()));
        assert!((1..=2).contains(&out.best_epoch));
    }

    #[test]
    fn invalid_configs() {
        let data = contexts(&[2.0]);
        let m = ReconModel::init(tiny(ModelMode::Mac), 0).unwrap();
        let mut c = cfg(1, 1e-3);
        c.batch_size = 0;
        assert!(matches!(train(m.clone(), &data, &c, |_| {}), Err(Error::Config(_))));
        assert!(matches!(train(m.clone(), &[], &cfg(1, 1e-3), |_| {}), Err(Error::Config(_))));
        let two = ReconModel::init(ModelConfig { context_len: 2, ..tiny(ModelMode::Mac) }, 0).unwrap();
        assert!(matches!(train(two, &data, &cfg(1, 1e-3), |_| {}), Err(Error::ContextLength { .. })));
    }
}
