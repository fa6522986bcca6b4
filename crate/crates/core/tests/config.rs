use std::path::Path;

use cytocount::config::ExperimentConfig;

#[test]
fn shipped_desk_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../desk.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!((cfg.n_train, cfg.n_test, cfg.rows, cfg.cols), (40, 10, 256, 256));
    assert_eq!((cfg.epochs_pretrain, cfg.epochs_main, cfg.batch_size, cfg.base_channels), (10, 15, 1, 8));
    assert!(cfg.data_dir.ends_with("data"));
}

#[test]
fn config_survives_a_toml_roundtrip() {
    let cfg = ExperimentConfig { seed: 41, learning_rate: 3e-3, ..ExperimentConfig::default() };
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(back.seed, 41);
    assert_eq!(back.learning_rate, 3e-3);
    assert_eq!(back.to_toml_string().unwrap(), cfg.to_toml_string().unwrap());
}
