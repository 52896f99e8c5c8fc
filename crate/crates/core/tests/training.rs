//! Trainer behaviour on a tiny fixture.

use std::sync::Arc;

use stormlab::backends::mock::DarkChannelJudge;
use stormlab::backends::Registry;
use stormlab::config::{AssessmentInterval, TrainConfig};
use stormlab::objectives::LossWeights;
use stormlab::toy::{desk_registry, ToyFixture, ToySpec};
use stormlab::trainer::{load_checkpoint, train_supervised, TrainState, Trainer};
use stormlab::{Error, Exec};

fn fixture() -> ToyFixture {
    ToyFixture::generate(&ToySpec {
        n_labeled: 4,
        n_unlabeled: 4,
        n_heldout: 0,
        refs_per_class: 2,
        size: 16,
        seed: 11,
    })
    .unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        batch_labeled: 2,
        batch_unlabeled: 2,
        iterations_per_round: 4,
        rounds: 2,
        assessment_interval: AssessmentInterval::Every(2),
        prompt_epochs: 5,
        learning_rate: 1e-3,
        ema_decay: 0.9,
        checkpoint_interval: 3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn trainer(f: &ToyFixture, c: TrainConfig) -> Trainer {
    Trainer::new(c, f.datasets(), desk_registry(f, 0).unwrap()).unwrap()
}

#[test]
fn online_expert_cycles_over_rounds() {
    let f = fixture();
    let t = trainer(
        &f,
        TrainConfig {
            rounds: 4,
            iterations_per_round: 1,
            ..config()
        },
    );
    let (state, report) = t.run_training().unwrap();
    let order: Vec<&str> = report.rounds.iter().map(|r| r.online_expert.as_str()).collect();
    assert_eq!(order, ["oracle-a", "oracle-b", "oracle-a", "oracle-b"]);
    assert_eq!(state.iteration, 4);
}

#[test]
fn teacher_follows_student_by_ema_only() {
    let f = fixture();
    let t = trainer(&f, config());
    let mut state = t.init_state().unwrap();
    for _ in 0..3 {
        let before = state.teacher.params().to_vec();
        t.train_step(&mut state).unwrap();
        let decay = t.config.ema_decay;
        for ((tn, to), s) in state.teacher.params().iter().zip(&before).zip(state.student.params()) {
            assert_eq!(*tn, decay * to + (1.0 - decay) * s);
        }
    }
}

#[test]
fn zero_weights_match_supervised_baseline() {
    let f = fixture();
    let c = TrainConfig {
        loss_weights: LossWeights::ZERO,
        ..config()
    };
    let (state, _) = trainer(&f, c.clone()).run_training().unwrap();
    let baseline = train_supervised(&c, &f.labeled, Exec::default()).unwrap();
    assert_eq!(state.model(), &baseline);
}

#[test]
fn repeated_runs_are_identical() {
    let f = fixture();
    let (a, ra) = trainer(&f, config()).run_training().unwrap();
    let (b, rb) = trainer(&f, config()).run_training().unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[cfg(feature = "parallel")]
#[test]
fn sequential_and_parallel_agree() {
    let f = fixture();
    let (a, _) = trainer(&f, config()).with_exec(Exec::Sequential).run_training().unwrap();
    let (b, _) = trainer(&f, config()).with_exec(Exec::Parallel).run_training().unwrap();
    assert_eq!(a, b);
}

fn resume_from(f: &ToyFixture, stop: u64) -> TrainState {
    let dir = tempfile::tempdir().unwrap();
    let mut first = trainer(f, config()).with_checkpoints(dir.path());
    first.stop_after = Some(stop);
    let mut state = first.init_state().unwrap();
    assert!(first.run(&mut state).unwrap().is_none());
    let ckpt = dir.path().join(format!("step-{stop:08}"));
    let second = trainer(f, config()).with_checkpoints(dir.path());
    let mut resumed = load_checkpoint(&ckpt, &second.config, second.registry.encoder().map(|e| e.as_ref())).unwrap();
    assert_eq!(resumed, state);
    second.run(&mut resumed).unwrap().unwrap();
    resumed
}

#[test]
fn resume_mid_round_and_at_boundary_match_uninterrupted() {
    let f = fixture();
    let (full, _) = trainer(&f, config()).run_training().unwrap();
    for stop in [1, 4, 6] {
        assert_eq!(resume_from(&f, stop), full, "stopped after {stop}");
    }
}

#[test]
fn never_assessing_leaves_online_labels_alone() {
    let f = fixture();
    let c = TrainConfig {
        assessment_interval: AssessmentInterval::Never,
        rounds: 1,
        ..config()
    };
    let t = trainer(&f, c);
    let mut state = t.init_state().unwrap();
    let db0 = state.db.clone();
    for _ in 0..4 {
        t.train_step(&mut state).unwrap();
    }
    assert_eq!(state.db, db0);
    assert!(state.log.iter().all(|r| r.replaced == 0));
}

#[test]
fn naive_mean_teacher_overwrites_every_assessed_label() {
    let f = fixture();
    let c = TrainConfig {
        vlm_updates: false,
        rounds: 1,
        ..config()
    };
    let t = trainer(&f, c);
    let mut state = t.init_state().unwrap();
    let rec = t.train_step(&mut state).unwrap();
    assert_eq!(rec.replaced, t.config.batch_unlabeled);
}

#[test]
fn logged_totals_recompute_from_parts() {
    let f = fixture();
    let (state, _) = trainer(&f, config()).run_training().unwrap();
    let w = config().loss_weights;
    for r in &state.log {
        assert!((r.loss.total - r.loss.recompute_total(&w)).abs() <= 1e-12);
    }
}

#[test]
fn missing_backends_are_rejected_up_front() {
    let f = fixture();
    let mut reg = Registry::new();
    reg.add_rating(Arc::new(DarkChannelJudge::new("dark"))).unwrap();
    let err = Trainer::new(config(), f.datasets(), reg).err().unwrap();
    assert!(matches!(err, Error::Registry(_)), "{err}");

    let mut data = f.datasets();
    data.candidates.remove("real000");
    let t = Trainer::new(config(), data, desk_registry(&f, 0).unwrap()).unwrap();
    assert!(matches!(t.init_state(), Err(Error::MissingCandidates(ids)) if ids == ["real000"]));
}

#[test]
fn resume_with_other_config_is_refused() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(&f, config()).with_checkpoints(dir.path());
    t.stop_after = Some(2);
    let mut state = t.init_state().unwrap();
    t.run(&mut state).unwrap();
    let other = TrainConfig { seed: 6, ..config() };
    let err = load_checkpoint(&dir.path().join("step-00000002"), &other, None).unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
}
