use lap_core::dynamics::RobotModel;
use lap_core::experiment::*;
use lap_core::kv::KvFile;
use lap_core::model::ModelConfig;
use lap_core::sim::{EpisodeRow, PROFILES};
use lap_core::Error;

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.demos = 6;
    c.model = ModelConfig { hidden: 8, heads: 2, blocks: 1, ff: 16, z_tokens: 1, z_dim: 2, ..c.model };
    c.train.epochs = 2;
    c.throws_per_profile = 1;
    c
}

#[test]
fn small_experiment_writes_every_output_and_repeats() {
    let robot = RobotModel::builtin("robot_a").unwrap();
    let cfg = small();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let a = run_experiment(&robot, &cfg, Some(dirs[0].path())).unwrap();
    for f in ["dataset.jsonl", "throws.json", "results.csv", "summary.csv", "lap/model.ckpt", "bc/model.ckpt"] {
        assert!(dirs[0].path().join(f).exists(), "{f}");
    }
    assert_eq!(a.throws.len(), PROFILES.len());
    assert_eq!(a.rows.len(), 3 * a.throws.len());
    assert_eq!(a.lap_log.len(), 2);
    assert!(a.bc_log.iter().all(|l| l.kl == 0.0));
    for m in ["model-based", "bc", "lap"] {
        assert_eq!(a.rows.iter().filter(|r| r.method == m).count(), a.throws.len());
    }

    run_experiment(&robot, &cfg, Some(dirs[1].path())).unwrap();
    for f in ["summary.csv", "results.csv", "dataset.jsonl"] {
        assert_eq!(std::fs::read(dirs[0].path().join(f)).unwrap(), std::fs::read(dirs[1].path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn throw_grid_is_seeded_per_profile() {
    let robot = RobotModel::builtin("robot_a").unwrap();
    let cfg = ExperimentConfig { throws_per_profile: 4, ..small() };
    let g = throw_grid(&robot, &cfg);
    assert_eq!(g.len(), 12);
    assert_eq!(g, throw_grid(&robot, &cfg));
    assert_ne!(g, throw_grid(&robot, &ExperimentConfig { throw_seed: cfg.throw_seed + 7, ..cfg.clone() }));
}

fn row(method: &str, success: bool, energy: f64, excluded: &str) -> EpisodeRow {
    EpisodeRow { method: method.into(), box_name: "A".into(), episode: 0, success, energy_j: energy, peak_torque: 0.0, excluded_reason: excluded.into() }
}

#[test]
fn totals_skip_excluded_episodes() {
    let rows = vec![row("lap", true, 2.0, ""), row("lap", false, 4.0, ""), row("lap", false, 100.0, "unreachable"), row("bc", true, 1.0, "")];
    assert_eq!(method_totals(&rows, "lap"), (1, 3.0));
    assert_eq!(method_totals(&rows, "bc"), (1, 1.0));
    assert!(method_totals(&rows, "model-based").1.is_nan());
}

#[test]
fn kv_overrides_and_validation() {
    let mut c = ExperimentConfig::desk();
    let kv = KvFile::parse("t", "demos = 12\nthrow_seed = 3\nmodel.hidden = 16\ntrain.epochs = 7\n").unwrap();
    c.apply_kv(&kv).unwrap();
    assert_eq!((c.demos, c.throw_seed, c.model.hidden, c.train.epochs), (12, 3, 16, 7));
    assert!(c.validate().is_ok());
    c.demos = 0;
    assert!(matches!(c.validate(), Err(Error::Contract(_))));
    assert!(ExperimentConfig::desk().apply_kv(&KvFile::parse("t", "demos = many\n").unwrap()).is_err());
}
