mod common;

use std::fs;

use common::{quiet, tiny_config, tiny_dataset};
use macrecon::datagen::{load_dataset, PhantomStyle};
use macrecon::harness::{
    context_mask_seed, run_experiment, run_unseen_sweep, train_stage, ExperimentKind, ResultTable, RosterModel,
};
use macrecon::metrics::{evaluate, mean_std};
use macrecon::model::{load_checkpoint, ModelMode};
use macrecon::sampling::{encode_context, make_mask, undersample, AcquisitionContext, ContextEncoding, MaskPattern};
use macrecon::{Error, Tensor};

#[test]
fn zero_filled_table_is_direct_metric_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&tmp.path().join("data"), PhantomStyle::Cardiac, 1);
    let mut cfg = tiny_config("zf", ExperimentKind::FixedStudy, vec![data.clone()], &tmp.path().join("out"));
    cfg.roster = vec![RosterModel::Zf];
    let out = run_experiment(&cfg, &mut quiet()).unwrap();
    assert!(out.checkpoints.is_empty());

    let ds = load_dataset(&data).unwrap();
    for &r in &cfg.accelerations {
        let ctx = AcquisitionContext::new(r, MaskPattern::Gaussian, 1, ContextEncoding::Acceleration).unwrap();
        let mask = make_mask(
            MaskPattern::Gaussian,
            16,
            16,
            r,
            cfg.masks.center_fraction(MaskPattern::Gaussian),
            context_mask_seed(cfg.masks.seed, &ctx),
        ).unwrap();
        let (mut p, mut s) = (Vec::new(), Vec::new());
        for img in &ds.test {
            let (_, xu) = undersample(img, &mask).unwrap();
            let m = evaluate(&xu, img).unwrap();
            p.push(m.psnr_db);
            s.push(m.ssim);
        }
        let row = out.table.get(&ctx.label(), "zf").unwrap();
        assert_eq!((row.psnr_mean, row.psnr_std), mean_std(&p));
        assert_eq!((row.ssim_mean, row.ssim_std), mean_std(&s));
        assert_eq!(row.n_images, 3);
        assert!(!row.best && !row.second_best);
    }
}

#[test]
fn full_roster_is_complete_deterministic_and_stores_one_mac_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&tmp.path().join("data"), PhantomStyle::Cardiac, 2);
    let run = |dir: &str| {
        let mut cfg = tiny_config("full", ExperimentKind::FixedStudy, vec![data.clone()], &tmp.path().join(dir));
        cfg.roster = vec![RosterModel::Zf, RosterModel::Csm, RosterModel::Jcm, RosterModel::Mac];
        let out = run_experiment(&cfg, &mut quiet()).unwrap();
        (cfg, out)
    };
    let (cfg, a) = run("a");
    let (_, b) = run("b");

    // Every (context, model) pair exactly once.
    assert_eq!(a.table.rows.len(), 2 * 4);
    for r in &cfg.accelerations {
        let label = format!("r{r:.1}-gaussian-s1");
        for m in ["zf", "csm", "jcm", "mac"] {
            assert_eq!(a.table.rows.iter().filter(|row| row.context == label && row.model == m).count(), 1);
        }
        let flagged: Vec<_> = a.table.rows.iter().filter(|row| row.context == label && row.best).collect();
        assert_eq!(flagged.len(), 1);
    }

    let csv_a = fs::read(tmp.path().join("a/results.csv")).unwrap();
    assert_eq!(csv_a, fs::read(tmp.path().join("b/results.csv")).unwrap());
    assert!(String::from_utf8(csv_a).unwrap().starts_with(ResultTable::HEADER));
    for (pa, pb) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
    }

    let names: Vec<String> = a.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("mac")).count(), 1);
    assert_eq!(names.iter().filter(|n| n.starts_with("jcm")).count(), 1);
    assert_eq!(names.iter().filter(|n| n.starts_with("csm_")).count(), cfg.accelerations.len());
    assert!(tmp.path().join("a/config.frozen.json").exists());
    assert!(tmp.path().join("a/seeds.json").exists());
    assert!(tmp.path().join("a/train/mac_stage2.csv").exists());
    assert!(tmp.path().join("a/recon/r2.0-gaussian-s1/mac/residual_00002.pgm").exists());
    assert!(!tmp.path().join("a/.lock").exists());
}

#[test]
fn mac_checkpoint_size_ignores_grid_size() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&tmp.path().join("data"), PhantomStyle::Cardiac, 3);
    let mut sizes = Vec::new();
    for (dir, accs) in [("one", vec![2.0]), ("three", vec![2.0, 3.0, 4.0])] {
        let mut cfg = tiny_config("size", ExperimentKind::FixedStudy, vec![data.clone()], &tmp.path().join(dir));
        cfg.accelerations = accs;
        cfg.train.stage2_epochs = 0;
        cfg.save_images = false;
        let out = run_experiment(&cfg, &mut quiet()).unwrap();
        assert_eq!(out.checkpoints.len(), 1);
        sizes.push(fs::metadata(&out.checkpoints[0]).unwrap().len());
    }
    assert_eq!(sizes[0], sizes[1]);
}

#[test]
fn evaluate_reuses_checkpoints_and_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&tmp.path().join("data"), PhantomStyle::Cardiac, 4);
    let mut cfg = tiny_config("eval", ExperimentKind::FixedStudy, vec![data], &tmp.path().join("out"));
    cfg.save_images = false;
    run_experiment(&cfg, &mut quiet()).unwrap();
    let first = fs::read(tmp.path().join("out/results.csv")).unwrap();
    let stamp = fs::metadata(tmp.path().join("out/models/mac.macr")).unwrap().modified().unwrap();
    cfg.train_missing = false;
    run_experiment(&cfg, &mut quiet()).unwrap();
    assert_eq!(first, fs::read(tmp.path().join("out/results.csv")).unwrap());
    assert_eq!(stamp, fs::metadata(tmp.path().join("out/models/mac.macr")).unwrap().modified().unwrap());

    cfg.model.cascades = 3;
    assert!(matches!(run_experiment(&cfg, &mut quiet()), Err(Error::Precondition(_))));
}

#[test]
fn missing_checkpoint_without_training_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&tmp.path().join("data"), PhantomStyle::Cardiac, 5);
    let mut cfg = tiny_config("nockpt", ExperimentKind::FixedStudy, vec![data], &tmp.path().join("out"));
    cfg.train_missing = false;
    assert!(matches!(run_experiment(&cfg, &mut quiet()), Err(Error::MissingFile(_))));
}

#[test]
fn locked_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&tmp.path().join("data"), PhantomStyle::Cardiac, 6);
    let out = tmp.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "1").unwrap();
    let cfg = tiny_config("locked", ExperimentKind::FixedStudy, vec![data], &out);
    assert!(matches!(run_experiment(&cfg, &mut quiet()), Err(Error::Precondition(_))));
}

#[test]
fn fixed_mask_uses_study_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cardiac = tiny_dataset(&tmp.path().join("cardiac"), PhantomStyle::Cardiac, 7);
    let brain = tiny_dataset(&tmp.path().join("brain"), PhantomStyle::Brain, 7);
    let mut cfg = tiny_config("mask", ExperimentKind::FixedMask, vec![cardiac, brain], &tmp.path().join("out"));
    cfg.accelerations = vec![4.0];
    cfg.train.stage2_epochs = 0;
    cfg.save_images = false;
    assert_eq!(cfg.effective_encoding(), ContextEncoding::AccelerationStudy);
    let out = run_experiment(&cfg, &mut quiet()).unwrap();
    let codes: Vec<u8> = out.table.rows.iter().map(|r| r.context_code).collect();
    assert_eq!(codes, [1, 1, 2, 2]);
    let mac = load_checkpoint(&out.checkpoints[0]).unwrap();
    assert_eq!(mac.config().context_len, 2);
}

#[test]
fn sweep_excludes_trained_points_and_matches_trained_context() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&tmp.path().join("data"), PhantomStyle::Cardiac, 8);
    let mut exp = tiny_config("exp", ExperimentKind::FixedStudy, vec![data.clone()], &tmp.path().join("exp"));
    exp.accelerations = vec![2.0, 4.0];
    exp.save_images = false;
    let trained = run_experiment(&exp, &mut quiet()).unwrap();

    let mut sweep = tiny_config("sweep", ExperimentKind::UnseenSweep, vec![data], &tmp.path().join("sweep"));
    sweep.accelerations = vec![2.0];
    sweep.roster = vec![RosterModel::Zf, RosterModel::Mac];
    sweep.sweep.values = Some(vec![2.0, 3.0, 4.0]);
    sweep.checkpoints.insert("mac".into(), tmp.path().join("exp/models/mac.macr"));
    sweep.save_images = false;
    let out = run_unseen_sweep(&sweep, &mut quiet()).unwrap();
    assert_eq!(out.unseen, [3.0, 4.0]);
    assert_eq!(out.excluded, [2.0]);
    assert_eq!(out.rows.len(), 2 * 2 * 3);

    // R = 4 was a training context of the loaded model: same mask, same γ, same numbers.
    let a = trained.table.get("r4.0-gaussian-s1", "mac").unwrap();
    let b = out.table.get("r4.0-gaussian-s1", "mac").unwrap();
    assert_eq!((a.psnr_mean, a.ssim_mean), (b.psnr_mean, b.ssim_mean));

    let csv = fs::read_to_string(tmp.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "image_id,r,model,psnr,ssim");
    assert_eq!(csv.lines().count(), 1 + 12);
}

#[test]
fn sweep_kernels_lie_on_an_affine_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&tmp.path().join("data"), PhantomStyle::Cardiac, 9);
    let mut cfg = tiny_config("line", ExperimentKind::FixedStudy, vec![data], &tmp.path().join("out"));
    cfg.save_images = false;
    let out = run_experiment(&cfg, &mut quiet()).unwrap();
    let mac = load_checkpoint(&out.checkpoints[0]).unwrap();
    let g = |r: f64| Tensor::from_slice(&[r]).unwrap();
    for n in 0..2 {
        let k0 = mac.kernels(Some(&g(0.0)), n).unwrap();
        let k3 = mac.kernels(Some(&g(3.0)), n).unwrap();
        let k6 = mac.kernels(Some(&g(6.0)), n).unwrap();
        for i in 0..5 {
            let d3 = k3[i].sub(&k0[i]).unwrap();
            let d6 = k6[i].sub(&k0[i]).unwrap();
            assert!(d6.max_abs_diff(&d3.scale(2.0)) < 1e-12);
        }
    }
    let ctx = AcquisitionContext::new(3.0, MaskPattern::Gaussian, 1, ContextEncoding::Acceleration).unwrap();
    assert_eq!(encode_context(&ctx).data(), &[3.0]);
}

#[test]
fn stage_two_needs_stage_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&tmp.path().join("data"), PhantomStyle::Cardiac, 10);
    let cfg = tiny_config("stages", ExperimentKind::FixedStudy, vec![data], &tmp.path().join("out"));
    assert!(matches!(
        train_stage(&cfg, 2, ModelMode::Mac, &mut quiet()),
        Err(Error::Precondition(_))
    ));
    let s1 = train_stage(&cfg, 1, ModelMode::Mac, &mut quiet()).unwrap();
    assert_eq!(load_checkpoint(&s1).unwrap().config().cascades, 1);
    let s2 = train_stage(&cfg, 2, ModelMode::Mac, &mut quiet()).unwrap();
    assert_eq!(load_checkpoint(&s2).unwrap().config().cascades, 2);
    assert!(s2.ends_with("models/mac.macr"));
}
