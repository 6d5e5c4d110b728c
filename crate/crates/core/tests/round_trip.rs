use fdi_core::datacube::{generate_synthetic_cube, load_cube, save_cube};
use fdi_core::evaluation::{read_summary, write_report};
use fdi_core::inference::{ensemble_average, full_map_inference, read_map, render_map};
use fdi_core::models::{build_model, load_weights, save_weights};
use fdi_core::pipeline::{build_datasets, draw_samples, evaluate, fit_training_normalizer, infer_days, RunConfig};
use fdi_core::sampling::{read_manifest, write_manifest};
use fdi_core::trainer::{predict, read_history, train, write_history};

fn small() -> RunConfig {
    let set: Vec<String> = [
        "cube.height=32",
        "cube.width=32",
        "cube.days_per_year=60",
        "cube.fire_window=[10,50]",
        "cube.target_fires_per_year=80",
        "sampling.patch_size=9",
        "train.epochs=2",
        "train.batch_size=32",
        "eval.nofire_days=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    RunConfig::from_toml_str("", &set).unwrap()
}

#[test]
fn every_stage_survives_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();

    let cube = generate_synthetic_cube(&cfg.cube).unwrap();
    save_cube(&cube, dir.path().join("cube")).unwrap();
    let cube2 = load_cube(dir.path().join("cube")).unwrap();
    assert_eq!(cube, cube2);

    let samples = draw_samples(&cube, &cfg.sampling).unwrap();
    write_manifest(dir.path().join("samples.csv"), &samples).unwrap();
    assert_eq!(read_manifest(dir.path().join("samples.csv")).unwrap(), samples);

    let split = cfg.split_years(&cube).unwrap();
    let norm = fit_training_normalizer(&cube, &split).unwrap();
    let mc = cfg.model_config().unwrap();
    let ds = build_datasets(&cube, &samples, &split, &norm, &mc).unwrap();
    let (bundle, history) = train(&build_model(&mc).unwrap(), &ds.train, &ds.val, &cfg.train).unwrap();
    assert_eq!(history.records.len(), 2);

    save_weights(&bundle, dir.path().join("model")).unwrap();
    write_history(dir.path().join("model/history.csv"), &history).unwrap();
    let loaded = load_weights(dir.path().join("model"), Some(mc.architecture)).unwrap();
    assert_eq!(read_history(dir.path().join("model/history.csv")).unwrap().len(), 2);
    let a = predict(&bundle.network, &ds.test, 64).unwrap();
    let b = predict(&loaded.network, &ds.test, 64).unwrap();
    assert_eq!(a.data(), b.data());

    let day = cube.days() - 5;
    let map = full_map_inference(&loaded, &cube, day, &norm).unwrap();
    render_map(&map, dir.path().join("maps")).unwrap();
    let back = read_map(dir.path().join("maps"), day).unwrap();
    assert_eq!(back.mask, map.mask);
    assert_eq!(back.values, map.values);
    assert_eq!(ensemble_average(&[map.clone(), back]).unwrap().values, map.values);

    let days = cfg.eval_days(&cube).unwrap();
    let maps = infer_days(&loaded, &cube, &norm, &days, &cfg.eval).unwrap();
    let report = evaluate(&cube, &[maps], &days, &cfg.eval).unwrap();
    assert_eq!(report.distributions.len(), 2);
    write_report(&report, dir.path().join("report")).unwrap();
    assert_eq!(read_summary(dir.path().join("report")).unwrap(), report);
}

#[test]
fn corrupted_cube_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cube = generate_synthetic_cube(&small().cube).unwrap();
    save_cube(&cube, dir.path()).unwrap();
    let burn = dir.path().join("burn.u8");
    let mut bytes = std::fs::read(&burn).unwrap();
    bytes[17] ^= 1;
    std::fs::write(&burn, bytes).unwrap();
    let err = load_cube(dir.path()).unwrap_err();
    assert_eq!(err.class(), fdi_core::ErrorClass::Data);
}
