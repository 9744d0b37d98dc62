use std::fs;

use moscl::datagen::{generate, Dataset, GenSpec};
use moscl::difficulty::read_scores_json;
use moscl::experiment::{run, train, ExperimentConfig, SchedulerKind};
use moscl::model::Mlp;

fn data() -> Dataset {
    generate(&GenSpec { n_total: 80, seed: 11, ..GenSpec::default() }).unwrap()
}

fn cfg(scheduler: SchedulerKind) -> ExperimentConfig {
    ExperimentConfig { scheduler, seed: 5, warmup_epochs: 3, total_epochs: 8, ..Default::default() }
}

#[test]
fn run_writes_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    data().save(&path).unwrap();
    let c = ExperimentConfig { dataset: path, output_dir: dir.path().join("out"), ..cfg(SchedulerKind::Mixed) };
    let out = run(&c).unwrap();
    for name in ["metrics.csv", "timing.csv", "scores_final.json", "checkpoint.json", "config.toml", "plans.json"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    for epoch in 3..8 {
        let entries = read_scores_json(&out.join(format!("scores_epoch{epoch}.json"))).unwrap();
        assert_eq!(entries.len(), 80);
    }
    assert!(!out.join("scores_epoch2.json").exists());
    let resolved = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(resolved, c);
    let model: Mlp<f64> = Mlp::load_json(&out.join("checkpoint.json")).unwrap();
    assert_eq!(model, train(&c, &data()).unwrap().model);
}

#[test]
fn seed_changes_the_run() {
    let a = train(&cfg(SchedulerKind::Random), &data()).unwrap();
    let b = train(&ExperimentConfig { seed: 6, ..cfg(SchedulerKind::Random) }, &data()).unwrap();
    assert_ne!(a.model, b.model);
}

#[test]
fn warm_state_is_shared_across_schedulers() {
    let d = data();
    let base = train(&cfg(SchedulerKind::Random), &d).unwrap();
    for k in [SchedulerKind::Mixed, SchedulerKind::AntiMixed, SchedulerKind::SpLinear, SchedulerKind::Ohem] {
        let other = train(&cfg(k), &d).unwrap();
        assert_eq!(base.plans[..3], other.plans[..3], "{k}");
        for e in 0..3 {
            assert_eq!(base.metrics[e].mean_loss, other.metrics[e].mean_loss, "{k} epoch {e}");
        }
    }
}

#[test]
fn ohem_plans_repeat_high_loss_samples() {
    let out = train(&cfg(SchedulerKind::Ohem), &data()).unwrap();
    for plan in &out.plans[3..] {
        assert_eq!(plan.slot_count(), 80 + 20);
    }
}

#[test]
fn metrics_and_scores_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let d = data();
    for (i, k) in [SchedulerKind::Mixed, SchedulerKind::SpHard].into_iter().enumerate() {
        let a = dir.path().join(format!("{i}a"));
        let b = dir.path().join(format!("{i}b"));
        train(&cfg(k), &d).unwrap().write_to(&a).unwrap();
        train(&cfg(k), &d).unwrap().write_to(&b).unwrap();
        for name in ["metrics.csv", "scores_final.json", "scores_epoch5.json", "checkpoint.json"] {
            let (x, y) = (a.join(name), b.join(name));
            if x.exists() {
                assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{k} {name}");
            }
        }
    }
}

#[test]
fn bad_dataset_path_is_an_io_error() {
    let c = ExperimentConfig { dataset: "/nonexistent/data.csv".into(), ..cfg(SchedulerKind::Random) };
    assert_eq!(run(&c).unwrap_err().kind(), "io");
}
