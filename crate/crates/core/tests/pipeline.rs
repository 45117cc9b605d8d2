use spg::checkpoint;
use spg::config::parse_config;
use spg::trainer::{self, evaluate, run_experiment};

fn small(extra: &[&str]) -> spg::config::TrainConfig {
    let mut ov: Vec<String> = [
        "name=pipe",
        "epochs=2",
        "scenes_per_epoch=4",
        "points_per_scene=96",
        "test_scenes=3",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    ov.extend(extra.iter().map(|s| s.to_string()));
    parse_config("", &ov).unwrap()
}

#[test]
fn saved_run_reloads_and_reproduces_its_final_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&[]);
    let (manifest, result) = run_experiment(&cfg, dir.path(), |_| {}).unwrap();
    let run = dir.path().join("pipe");

    let text = std::fs::read_to_string(run.join("config.resolved")).unwrap();
    let reparsed = parse_config(&text, &[]).unwrap();
    assert_eq!(reparsed, cfg);

    let ckpt = checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    assert_eq!(ckpt.step, result.trainer.step);
    let m = evaluate(&ckpt.model.main, &trainer::test_scenes(&reparsed).unwrap()).unwrap();
    assert_eq!(m.miou, manifest.final_miou);
    assert_eq!(m.class_iou, manifest.final_class_iou);

    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + cfg.epochs);
}

#[test]
fn every_mode_trains_on_the_indoor_profile() {
    for mode in ["spg", "ce-only", "focal", "weighted-ce"] {
        let cfg = small(&[&format!("mode={mode}"), "epochs=1"]);
        let r = trainer::train(&cfg, |_| {}).unwrap();
        let m = r.last();
        assert!(m.miou.is_finite() && (0.0..=1.0).contains(&m.oa), "{mode}");
        assert_eq!(m.class_iou.len(), 13);
    }
}

#[test]
fn different_seeds_give_different_scenes_and_runs() {
    let a = trainer::train(&small(&["seed=1"]), |_| {}).unwrap();
    let b = trainer::train(&small(&["seed=2"]), |_| {}).unwrap();
    assert_ne!(a.train_scenes[0].points, b.train_scenes[0].points);
    assert_ne!(a.trainer.model, b.trainer.model);
}
