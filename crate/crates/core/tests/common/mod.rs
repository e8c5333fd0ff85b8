#![allow(dead_code)]

use std::path::{Path, PathBuf};

use macrecon::datagen::{build_dataset, PhantomSpec, PhantomStyle, SplitCounts};
use macrecon::harness::{ExperimentConfig, ExperimentKind, ModelSection, RosterModel, TrainSection};

/// 16×16 phantoms: 8 train, 2 val, 3 test.
pub fn tiny_dataset(root: &Path, style: PhantomStyle, seed: u64) -> PathBuf {
    let spec = PhantomSpec {
        size: 16,
        seed,
        style,
        ..PhantomSpec::default()
    };
    let counts = SplitCounts {
        train: 8,
        val: 2,
        test: 3,
    };
    build_dataset(&spec, counts, root).unwrap();
    root.to_path_buf()
}

/// Two cascades of four channels, one epoch per stage.
pub fn tiny_config(name: &str, kind: ExperimentKind, datasets: Vec<PathBuf>, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(name, kind, datasets, out);
    cfg.model = ModelSection {
        cascades: 2,
        channels: 4,
        ..ModelSection::default()
    };
    cfg.train = TrainSection {
        stage1_epochs: 1,
        stage2_epochs: 1,
        batch_size: 4,
        seed: 3,
        ..TrainSection::default()
    };
    cfg.accelerations = vec![2.0, 4.0];
    cfg.roster = vec![RosterModel::Zf, RosterModel::Mac];
    cfg
}

pub fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}
