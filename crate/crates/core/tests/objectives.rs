use std::sync::Arc;
use std::time::{Duration, Instant};

use steerbo_core::objectives::{
    grid_extremes, stlstm_config, ExternalCommand, GridExtremes, Objective, ObjectiveError, ObjectiveSpec,
    SyntheticObjective, ToyTrainer,
};
use steerbo_core::search_space::{build_stlstm_space, Configuration};
use steerbo_nn::data::{split_dataset, synth_dataset, SynthSpec};

fn sh(script: &str, timeout: Duration) -> ExternalCommand {
    ExternalCommand::new(vec!["sh".into(), "-c".into(), script.into()], timeout)
}

fn some_config() -> Configuration {
    build_stlstm_space().decode(&[0.5; 8]).unwrap()
}

#[test]
fn stored_optimum_matches_enumeration() {
    let obj = SyntheticObjective::stlstm_space();
    assert_eq!(grid_extremes(&obj), GridExtremes::stored_stlstm_space());
}

#[test]
fn stored_optimum_is_not_beaten_by_random_grid_points() {
    let obj = SyntheticObjective::stlstm_space();
    let opt = GridExtremes::stored_stlstm_space();
    assert_eq!(obj.value_at_unit(&opt.argmin), opt.min_value);
    let space = obj.space();
    let mut worse = 0;
    for cfg in space.random_sample(1000, 99).unwrap() {
        let v = obj.value(&cfg).unwrap();
        assert!(v <= opt.max_value + 0.05);
        if v >= opt.min_value {
            worse += 1;
        }
    }
    assert_eq!(worse, 1000);
}

#[test]
fn synthetic_objective_rejects_foreign_configurations() {
    let obj = SyntheticObjective::stlstm_space();
    assert!(obj.evaluate(&Configuration::default(), 0).is_err());
}

#[test]
fn external_command_reads_last_reply_line() {
    let cmd = sh("cat > /dev/null; echo progress; echo '{\"objective\": 0.5}'", Duration::from_secs(10));
    assert_eq!(cmd.evaluate(&some_config(), 0).unwrap().value, 0.5);
}

#[test]
fn external_command_sees_configuration_and_seed() {
    let cmd = sh(
        "read line; case \"$line\" in *fc_neurons*) ;; *) exit 9;; esac; echo \"{\\\"objective\\\": $STEERBO_EVAL_SEED}\"",
        Duration::from_secs(10),
    );
    assert_eq!(cmd.evaluate(&some_config(), 17).unwrap().value, 17.0);
}

#[test]
fn external_command_failures_are_distinguished() {
    let t = Duration::from_secs(10);
    let cfg = some_config();
    match sh("echo boom >&2; exit 1", t).evaluate(&cfg, 0) {
        Err(ObjectiveError::ProcessFailure { stderr, .. }) => assert_eq!(stderr, "boom"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(sh("echo '{\"loss\": 1}'", t).evaluate(&cfg, 0), Err(ObjectiveError::Protocol(_))));
    assert!(matches!(sh("echo not json", t).evaluate(&cfg, 0), Err(ObjectiveError::Protocol(_))));
    assert!(matches!(sh("true", t).evaluate(&cfg, 0), Err(ObjectiveError::Protocol(_))));
    assert!(matches!(sh("echo '{\"objective\": \"high\"}'", t).evaluate(&cfg, 0), Err(ObjectiveError::Protocol(_))));
}

#[test]
fn external_command_is_killed_on_timeout() {
    let start = Instant::now();
    let r = sh("sleep 30", Duration::from_millis(300)).evaluate(&some_config(), 0);
    assert!(matches!(r, Err(ObjectiveError::Timeout(_))));
    assert!(start.elapsed() < Duration::from_secs(10));
}

#[test]
fn objective_spec_parses_and_validates() {
    let spec: ObjectiveSpec = serde_json::from_str(r#"{"kind":"external-command","command":["sh","-c","x"]}"#).unwrap();
    assert!(spec.build(&build_stlstm_space()).is_ok());
    let bad: ObjectiveSpec = serde_json::from_str(r#"{"kind":"external-command","command":[]}"#).unwrap();
    assert!(bad.build(&build_stlstm_space()).is_err());
    let toy: ObjectiveSpec = serde_json::from_str(r#"{"kind":"toy-trainer"}"#).unwrap();
    match toy {
        ObjectiveSpec::ToyTrainer { epochs, batch_size, patience, .. } => {
            assert_eq!((epochs, batch_size, patience), (15, 50, 5));
        }
        _ => unreachable!(),
    }
}

#[test]
fn configuration_maps_onto_network_settings() {
    let cfg = some_config();
    let st = stlstm_config(&cfg).unwrap();
    assert_eq!(st.convlstm_maps, [10, 10, 10, 10]);
    assert_eq!(st.conv3d_maps, 2);
    assert_eq!(st.fc_neurons, 25);
    assert_eq!(st.dropout_rate, 0.25);
    assert_eq!(st.learning_rate, 1e-3);
}

fn toy(epochs: usize) -> ToyTrainer {
    let split = split_dataset(
        synth_dataset(120, &SynthSpec { height: 8, width: 16, ..SynthSpec::default() }, 3).unwrap(),
        (0.64, 0.16, 0.20),
    )
    .unwrap();
    ToyTrainer { epochs, ..ToyTrainer::new(Arc::new(split)) }
}

fn small_config(lr: f64) -> Configuration {
    let space = build_stlstm_space();
    let mut cfg = space.decode(&[0.0; 8]).unwrap();
    cfg.0.insert("learning_rate".into(), lr);
    cfg.0.insert("dropout".into(), 0.0);
    cfg
}

#[test]
fn toy_trainer_defaults() {
    let t = toy(15);
    assert_eq!((t.epochs, t.batch_size, t.patience), (15, 50, 5));
}

#[test]
fn zero_epochs_reports_initial_validation_error() {
    let r = toy(0).evaluate(&small_config(1e-2), 4).unwrap();
    assert_eq!(r.diagnostics["epochs_run"], 0);
    assert_eq!(r.value, r.diagnostics["initial_val_mse"].as_f64().unwrap());
}

#[test]
fn toy_trainer_is_deterministic() {
    let t = toy(3);
    let a = t.evaluate(&small_config(1e-2), 4).unwrap();
    let b = t.evaluate(&small_config(1e-2), 4).unwrap();
    assert_eq!(a, b);
    let c = t.evaluate(&small_config(1e-2), 5).unwrap();
    assert_ne!(a.diagnostics["initial_val_mse"], c.diagnostics["initial_val_mse"]);
}

#[test]
fn toy_trainer_reduces_validation_error() {
    let r = toy(15).evaluate(&small_config(1e-2), 4).unwrap();
    let epochs = r.diagnostics["epochs_run"].as_u64().unwrap();
    assert!((1..=15).contains(&epochs));
    let initial = r.diagnostics["initial_val_mse"].as_f64().unwrap();
    assert!(r.value < 0.8 * initial, "{} vs initial {initial}", r.value);
}
