//! Rainbow design, lookup baseline and checkpoints on small configurations.

use ptaloc_core::cbs::{build_lookup, cbs_design, default_design, endpoint_phase_error, trajectory};
use ptaloc_core::dataset::generate_splits;
use ptaloc_core::trainer::{
    centroid_rmse, evaluate, evaluate_lookup, load_beam, train_fixed_beam, DesignCheckpoint, Model, ModelKind,
    TrainConfig,
};
use ptaloc_core::{derive_grids, DerivedGrids, Error, SystemConfig, UserPosition};

fn small() -> (SystemConfig, DerivedGrids) {
    let mut cfg = SystemConfig::desk();
    cfg.num_antennas = 16;
    cfg.num_subcarriers = 64;
    cfg.bandwidth_hz = cfg.subcarrier_spacing_hz * 64.0;
    cfg.range_max_m = 25.0;
    let grids = derive_grids(&cfg);
    (cfg, grids)
}

#[test]
fn trajectory_ends_at_the_anchors() {
    let cfg = SystemConfig::desk();
    let grids = derive_grids(&cfg);
    let start = UserPosition::from_degrees(-40.0, 8.0).unwrap();
    let end = UserPosition::from_degrees(30.0, 30.0).unwrap();
    let d = cbs_design(start, end, &cfg, &grids).unwrap();
    assert!(endpoint_phase_error(&d, &cfg, &grids) < 1e-9);
    let path = trajectory(&d, &cfg, &grids);
    let (first, last) = (path[0], *path.last().unwrap());
    assert!((first.angle_rad - start.angle_rad).abs() < 1e-9);
    assert!((first.range_m - start.range_m).abs() < 1e-6 * start.range_m);
    assert!((last.angle_rad - end.angle_rad).abs() < 1e-9);
    assert!((last.range_m - end.range_m).abs() < 1e-6 * end.range_m);
    // The angle sweeps monotonically between the anchors.
    assert!(path.windows(2).all(|w| w[1].angle_rad >= w[0].angle_rad));
}

#[test]
fn anchors_outside_the_region_are_rejected() {
    let cfg = SystemConfig::desk();
    let grids = derive_grids(&cfg);
    let inside = UserPosition::from_degrees(0.0, 10.0).unwrap();
    let outside = UserPosition::from_degrees(80.0, 10.0).unwrap();
    assert!(cbs_design(inside, outside, &cfg, &grids).is_err());
}

#[test]
fn lookup_beats_the_centroid_guess() {
    let (cfg, grids) = small();
    let (train, _, test) = generate_splits(&cfg, 3, (500, 10, 300)).unwrap();
    let design = default_design(&cfg, &grids).unwrap();
    let table = build_lookup(&design, &cfg, &grids).unwrap();
    let lookup = evaluate_lookup(&table, &design.beam, &test, &cfg, &grids).unwrap();
    let centroid = centroid_rmse(&train, &test);
    assert!(lookup.rmse_2d_m < 0.5 * centroid, "lookup {} vs centroid {centroid}", lookup.rmse_2d_m);
}

#[test]
fn checkpoints_reload_and_check_the_config() {
    let (cfg, grids) = small();
    let (train, val, test) = generate_splits(&cfg, 5, (200, 50, 50)).unwrap();
    let tc = TrainConfig { seed: 5, joint_epochs: 1, estimator_epochs: 3, batch_size: 64, ..TrainConfig::default() };
    let design = default_design(&cfg, &grids).unwrap();
    let model = train_fixed_beam(&cfg, &grids, &tc, design.beam.as_params(), &train, &val).unwrap().model;
    assert_eq!(model.kind, ModelKind::FixedBeam);

    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.json");
    model.save(&model_path).unwrap();
    let loaded = Model::load(&model_path, &cfg).unwrap();
    assert_eq!(
        evaluate(&loaded, &test, &cfg, &grids).unwrap().rmse_2d_m,
        evaluate(&model, &test, &cfg, &grids).unwrap().rmse_2d_m
    );
    assert_eq!(load_beam(&model_path, &cfg).unwrap(), model.beam);

    let design_path = dir.path().join("design.json");
    DesignCheckpoint::new(&design, &cfg).save(&design_path).unwrap();
    let text = std::fs::read_to_string(&design_path).unwrap();
    assert!(text.contains("\"kind\": \"analytic\""));
    assert_eq!(load_beam(&design_path, &cfg).unwrap(), design.beam.as_params());
    assert!(Model::load(&design_path, &cfg).is_err());

    let other = cfg.with_range(5.0, 20.0).unwrap();
    assert!(matches!(load_beam(&design_path, &other), Err(Error::HashMismatch { .. })));
    assert!(matches!(Model::load(&model_path, &other), Err(Error::HashMismatch { .. })));
}
