use std::sync::atomic::{AtomicUsize, Ordering};

use steerbo_core::acquisition::{Acquisition, AcquisitionKind};
use steerbo_core::bo::{
    aggregate, best_seen_curve, read_run_log, run_bo, run_experiment, run_random_search, select_acquisition,
    write_curves_csv, write_finals_csv, write_run_log, BoError, ExperimentPlan, Phase, Strategy,
};
use steerbo_core::objectives::{EvaluationResult, Objective, ObjectiveError, SyntheticObjective};
use steerbo_core::search_space::{Configuration, ParamSpec, SearchSpace};

fn small_objective() -> SyntheticObjective {
    let space = SearchSpace::new(vec![
        ParamSpec::continuous("a", -1.0, 1.0),
        ParamSpec::continuous("b", 0.0, 10.0),
        ParamSpec::discrete("c", &[1.0, 2.0, 4.0]),
    ])
    .unwrap();
    SyntheticObjective::continuous(space)
}

fn lcb() -> AcquisitionKind {
    AcquisitionKind::with_default_xi(Acquisition::Lcb)
}

/// Succeeds for the first `ok` calls, then fails.
struct FailsAfter {
    inner: SyntheticObjective,
    ok: usize,
    calls: AtomicUsize,
}

impl Objective for FailsAfter {
    fn evaluate(&self, cfg: &Configuration, seed: u64) -> Result<EvaluationResult, ObjectiveError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.ok {
            return Err(ObjectiveError::Protocol("stub failure".into()));
        }
        self.inner.evaluate(cfg, seed)
    }
}

/// Fails only for configurations with `a` above a threshold.
struct FailsAbove(SyntheticObjective, f64);

impl Objective for FailsAbove {
    fn evaluate(&self, cfg: &Configuration, seed: u64) -> Result<EvaluationResult, ObjectiveError> {
        if cfg.get("a").unwrap() > self.1 {
            return Err(ObjectiveError::NonFinite);
        }
        self.0.evaluate(cfg, seed)
    }
}

#[test]
fn run_spends_exactly_the_budget() {
    let obj = small_objective();
    for kind in Acquisition::ALL {
        let log = run_bo(obj.space(), &obj, AcquisitionKind::with_default_xi(kind), 5, 20, 3).unwrap();
        assert_eq!(log.trials.len(), 25);
        assert!(log.is_complete());
        assert!(log.trials[..5].iter().all(|t| t.phase == Phase::InitialDesign));
        assert!(log.trials[5..].iter().all(|t| t.phase == Phase::Bo));
        assert!(log.trials.iter().enumerate().all(|(i, t)| t.index == i && obj.space().contains(&t.config)));
        let curve = best_seen_curve(&log).unwrap();
        assert_eq!(curve.len(), 21);
        assert!(curve.windows(2).all(|w| w[1] <= w[0]));
        let best = log.trials.iter().map(|t| t.value).fold(f64::INFINITY, f64::min);
        assert_eq!(*curve.last().unwrap(), best);
        assert_eq!(log.incumbent.as_ref().unwrap().best_value, best);
    }
}

#[test]
fn zero_iterations_returns_the_design_minimum() {
    let obj = small_objective();
    let log = run_bo(obj.space(), &obj, lcb(), 6, 0, 11).unwrap();
    assert_eq!(log.trials.len(), 6);
    let min = log.trials.iter().map(|t| t.value).fold(f64::INFINITY, f64::min);
    assert_eq!(log.incumbent.as_ref().unwrap().best_value, min);
    assert_eq!(best_seen_curve(&log).unwrap(), vec![min]);
}

#[test]
fn empty_initial_design_is_rejected() {
    let obj = small_objective();
    assert!(matches!(run_bo(obj.space(), &obj, lcb(), 0, 5, 0), Err(BoError::Budget(_))));
    assert!(matches!(run_random_search(obj.space(), &obj, 0, 5, 0), Err(BoError::Budget(_))));
}

#[test]
fn runs_are_reproducible_and_seed_dependent() {
    let obj = small_objective();
    let strip = |mut l: steerbo_core::bo::RunLog| {
        l.trials.iter_mut().for_each(|t| t.wall_time = 0.0);
        l
    };
    let a = strip(run_bo(obj.space(), &obj, lcb(), 4, 6, 21).unwrap());
    let b = strip(run_bo(obj.space(), &obj, lcb(), 4, 6, 21).unwrap());
    assert_eq!(a, b);
    let c = strip(run_bo(obj.space(), &obj, lcb(), 4, 6, 22).unwrap());
    assert_ne!(a.trials, c.trials);
}

#[test]
fn random_search_shares_the_initial_design() {
    let obj = small_objective();
    let bo = run_bo(obj.space(), &obj, lcb(), 5, 3, 8).unwrap();
    let rs = run_random_search(obj.space(), &obj, 5, 3, 8).unwrap();
    for (a, b) in bo.trials[..5].iter().zip(&rs.trials[..5]) {
        assert_eq!(a.config, b.config);
    }
    assert!(rs.trials[5..].iter().all(|t| t.phase == Phase::Random));
}

#[test]
fn objective_failure_keeps_the_partial_log() {
    let obj = FailsAfter { inner: small_objective(), ok: 7, calls: AtomicUsize::new(0) };
    let err = run_bo(obj.inner.space(), &obj, lcb(), 5, 10, 1).unwrap_err();
    match err {
        BoError::Objective { index, partial, .. } => {
            assert_eq!(index, 7);
            assert_eq!(partial.trials.len(), 7);
            assert!(!partial.is_complete());
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn experiment_isolates_failed_runs() {
    let obj = FailsAbove(small_objective(), 0.95);
    let plan = ExperimentPlan { n_init: 3, n_iter: 3, n_runs: 6, base_seed: 0 };
    let strategies = [Strategy::RandomSearch];
    let s = run_experiment(obj.0.space(), &obj, &strategies, &plan).unwrap();
    let e = &s.entries[0];
    assert_eq!(e.finals.len() + s.failures.len(), 6);
    assert_eq!(e.complete, s.failures.is_empty());
    assert_eq!(s.logs.len(), 6);
}

#[test]
fn experiment_outputs_are_ordered_and_deterministic() {
    let obj = small_objective();
    let strategies: Vec<Strategy> = Acquisition::ALL
        .iter()
        .map(|k| Strategy::Acquisition(AcquisitionKind::with_default_xi(*k)))
        .chain([Strategy::RandomSearch])
        .collect();
    let plan = ExperimentPlan { n_init: 3, n_iter: 4, n_runs: 3, base_seed: 40 };
    let render = || {
        let s = run_experiment(obj.space(), &obj, &strategies, &plan).unwrap();
        let (mut curves, mut finals) = (Vec::new(), Vec::new());
        write_curves_csv(&s, &mut curves).unwrap();
        write_finals_csv(&s, &mut finals).unwrap();
        (s, curves, finals)
    };
    let (s, c1, f1) = render();
    let (_, c2, f2) = render();
    assert_eq!(c1, c2);
    assert_eq!(f1, f2);
    assert_eq!(s.logs.len(), 12);
    let order: Vec<(String, u64)> = s.logs.iter().map(|l| (l.strategy.label(), l.seed)).collect();
    let expected: Vec<(String, u64)> =
        ["lcb", "ei", "mpi", "random"].iter().flat_map(|n| (40..43).map(move |s| (n.to_string(), s))).collect();
    assert_eq!(order, expected);
    let text = String::from_utf8(c1).unwrap();
    assert!(text.starts_with("acquisition,iteration,mean,std\n"));
    assert_eq!(text.lines().count(), 1 + 4 * 5);
    let kind = select_acquisition(&s).unwrap();
    let chosen = s.entries.iter().find(|e| e.strategy == Strategy::Acquisition(kind)).unwrap();
    for e in s.entries.iter().filter(|e| matches!(e.strategy, Strategy::Acquisition(_))) {
        assert!(chosen.final_std() <= e.final_std());
    }
}

#[test]
fn run_log_round_trips_through_jsonl() {
    let obj = small_objective();
    let log = run_bo(obj.space(), &obj, AcquisitionKind::new(Acquisition::Ei, 0.05).unwrap(), 3, 2, 5).unwrap();
    let mut buf = Vec::new();
    write_run_log(&log, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 6);
    let back = read_run_log(buf.as_slice()).unwrap();
    assert_eq!(back, log);
    assert!(read_run_log(&b""[..]).is_err());
    assert!(read_run_log(&b"{\"seed\":1}\n"[..]).is_err());
}

#[test]
fn aggregate_uses_sample_deviation() {
    let (m, s) = aggregate(&[vec![1.0, 0.5], vec![3.0, 0.5]]);
    assert_eq!(m, vec![2.0, 0.5]);
    assert!((s[0] - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(s[1], 0.0);
    let (_, s) = aggregate(&[vec![4.0]]);
    assert_eq!(s, vec![0.0]);
}
