use std::path::Path;

use isac_core::estimators::{
    FusionTracker, KfConfig, ModelDims, TemporalMode, TemporalModel, VisionModel,
};
use isac_core::harness::{self, DetectionModel, ExperimentConfig, Models};
use isac_core::scenario::{LossPreset, Profile};

fn untrained(cfg: &ExperimentConfig) -> Models {
    let b = cfg.scenario.camera.bounds;
    Models {
        vision: VisionModel::new(&cfg.dims, b, 1),
        tracker: FusionTracker {
            fused: TemporalModel::new(&cfg.dims, TemporalMode::Fused, b, 2),
            echo_only: TemporalModel::new(&cfg.dims, TemporalMode::EchoOnly, b, 3),
        },
        kf: KfConfig::default(),
    }
}

fn small(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scenario.trajectories = 10;
    cfg.scenario.steps = 12;
    cfg.snr_db = vec![0.0];
    cfg.training.vision.epochs = 2;
    cfg.training.temporal.epochs = 2;
    cfg.hierarchical_trials = 2000;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn steering_references_match_their_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.detection = DetectionModel::Geometric;
    let (rows, manifest) = harness::run_task_b(&cfg, &untrained(&cfg)).unwrap();
    for &s in &cfg.levels {
        let perfect = rows
            .iter()
            .find(|r| r.s == s && r.method == "perfect_vision")
            .unwrap();
        assert_eq!(perfect.mean_scans, 1.0);
        assert!((perfect.p1 - 1.0).abs() < 1e-12);
        let uniform = rows
            .iter()
            .find(|r| r.s == s && r.method == "hierarchical_uniform")
            .unwrap();
        let want = 2.5 * s as f64;
        assert!(
            (uniform.mean_scans - want).abs() < 4.0 * uniform.ci95 / 1.96 + 1e-9,
            "s{s}: {uniform:?}"
        );
        let guided = rows
            .iter()
            .find(|r| r.s == s && r.method == "vision_guided")
            .unwrap();
        let p_sum = guided.p1 + guided.p2 + guided.p3 + guided.p4 + guided.p_end;
        assert!((p_sum - 1.0).abs() < 1e-9);
        assert!(guided.analytic_overhead.is_finite());
    }
    assert!(manifest.artifacts.contains(&"steer.csv".to_string()));
    let trials = std::fs::read_to_string(dir.path().join("steer_trials.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(trials.lines().next().unwrap()).unwrap();
    assert!(first.get("scans_used").is_some());
}

#[test]
fn hovering_targets_settle_on_one_scan() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.scenario.profiles = vec![Profile::Hover];
    cfg.scenario.trajectories = 30;
    cfg.scenario.steps = 14;
    cfg.scenario.camera.box_jitter = 0.0;
    cfg.scenario.camera.size_jitter = 0.0;
    cfg.scenario.camera.pixel_noise = 0.0;
    cfg.echo.channel.snr_db = 30.0;
    cfg.levels = vec![2];
    cfg.snr_db = vec![30.0];
    cfg.loss_presets = vec![LossPreset::None];
    cfg.training.loss_presets = vec![LossPreset::None];
    cfg.training.vision.epochs = 40;
    cfg.training.temporal.epochs = 150;
    cfg.detection = DetectionModel::Geometric;
    cfg.output_dir = dir.path().to_path_buf();
    let (models, _) = harness::run_training(&cfg).unwrap();
    let (rows, _) = harness::run_task_c(&cfg, &models).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(
            r.overhead_mean, 1.0,
            "{} needs {} scans per slot",
            r.method, r.overhead_mean
        );
    }
}

#[test]
fn checkpoints_are_reused_for_the_same_training_setup() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let (trained, _) = harness::run_training(&cfg).unwrap();
    let ckpt = std::fs::read(dir.path().join("fused.ckpt")).unwrap();
    // Evaluation-only settings keep the checkpoints.
    let mut eval = cfg.clone();
    eval.hierarchical_trials = 50;
    eval.test_trajectories = Some(1);
    eval.estimators.truncate(1);
    let loaded = harness::load_or_train(&eval).unwrap();
    assert_eq!(
        loaded.vision.params.flatten(),
        trained.vision.params.flatten()
    );
    assert_eq!(
        loaded.tracker.fused.params.flatten(),
        trained.tracker.fused.params.flatten()
    );
    assert_eq!(loaded.kf, trained.kf);
    assert_eq!(std::fs::read(dir.path().join("fused.ckpt")).unwrap(), ckpt);
    // A different seed retrains.
    let mut other = cfg.clone();
    other.seed = 99;
    let retrained = harness::load_or_train(&other).unwrap();
    assert_ne!(
        retrained.vision.params.flatten(),
        trained.vision.params.flatten()
    );
}

#[test]
fn tracking_honours_case_filter_and_caps() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.levels = vec![2, 3];
    cfg.snr_db = vec![0.0, -2.0];
    cfg.cases = vec!["snr-2_few_sync".into()];
    cfg.test_trajectories = Some(1);
    cfg.echo_slots = Some(10);
    let models = untrained(&cfg);
    let (rows, manifest) = harness::run_task_c(&cfg, &models).unwrap();
    assert_eq!(rows.len(), 2 * cfg.estimators.len());
    assert!(rows.iter().all(|r| r.case == "snr-2_few_sync"));
    // One trajectory, ten slots, six of them warm-up.
    assert!(rows.iter().all(|r| r.samples == 10 - cfg.dims.history));
    assert!(manifest.stages.iter().any(|s| s.stage == "track"));
    let cpf = std::fs::read_to_string(dir.path().join("track_cpf.csv")).unwrap();
    assert!(cpf.starts_with("method,case,s,angle,error_rad,probability"));

    cfg.cases = vec!["snr-3_few_sync".into()];
    assert!(cfg.validate().is_err());
    let mut short = small(dir.path());
    short.echo_slots = Some(ModelDims::default().history);
    assert!(short.validate().is_err());
}

#[test]
fn model_stats_report_parameters_and_macs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let (models, manifest) = harness::run_training(&cfg).unwrap();
    let text = std::fs::read_to_string(dir.path().join("model_stats.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("model,parameters,macs"));
    let vision: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(vision[0], "vision");
    assert_eq!(
        vision[1].parse::<usize>().unwrap(),
        models.vision.params.num_scalars()
    );
    assert_eq!(
        vision[2].parse::<usize>().unwrap(),
        harness::vision_macs(&cfg.dims)
    );
    assert!(
        manifest.latency_ms.contains_key("vision") && manifest.latency_ms.contains_key("fused")
    );
    let m: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("manifest_train.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(m["config_hash"], cfg.hash());
    assert_eq!(m["seeds"]["master"], cfg.seed);
}
