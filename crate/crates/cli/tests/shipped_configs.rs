use std::path::Path;

use mouthing_cli::ExperimentConfig;
use mouthing_core::eval::RowKey;
use mouthing_core::{BaselineSpec, DatasetTag, RunKind};

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let cfg = ExperimentConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    cfg
}

#[test]
fn grid_template_is_full_size() {
    let cfg = config("grid.toml");
    assert_eq!(cfg.spec(15), BaselineSpec::full(15));
    assert_eq!(cfg.raw_sources().unwrap().len(), 4);
    assert_eq!((cfg.data.per_class, cfg.data.train_per_class), (Some(500), Some(397)));
    assert_eq!((cfg.train.max_epochs, cfg.train.early_stop_gate, cfg.train.patience), (1500, 1000, 100));
}

#[test]
fn single_run_config_names_its_row() {
    let cfg = config("mtl-glipsr.toml");
    assert_eq!(cfg.train.kind, RunKind::Mtl);
    assert_eq!(cfg.row(), Some(RowKey::mtl(&[DatasetTag::GLipsR])));
}
