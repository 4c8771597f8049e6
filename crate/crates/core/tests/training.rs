use gradcal::gaussbench::{sample_mixture, GaussianMixtureSpec};
use gradcal::losses::{LossKind, LossSpec};
use gradcal::numkit::{LabeledBatch, RngStream};
use gradcal::trainer::{predict, train, LrSchedule, TrainConfig, TrainHistory, Trainer};
use gradcal::Error;

fn separable(seed: u64) -> (LabeledBatch, LabeledBatch) {
    let spec = GaussianMixtureSpec::isotropic(vec![vec![-6.0, 0.0], vec![6.0, 0.0]]).unwrap();
    let mut rng = RngStream::new(seed);
    (sample_mixture(&spec, 1000, &mut rng).unwrap(), sample_mixture(&spec, 200, &mut rng).unwrap())
}

fn small_config(loss: LossSpec, epochs: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::toy(loss, epochs, seed);
    c.hidden = vec![16, 16];
    c.batch_size = 64;
    c
}

#[test]
fn separable_data_is_learned_in_five_epochs() {
    let (train_set, test_set) = separable(1);
    let (model, history) = train(&small_config(LossSpec::ce(), 5, 3), &train_set, &test_set).unwrap();
    assert!(predict(&model, &train_set).unwrap().accuracy() > 0.99);
    assert_eq!(history.epochs.len(), 5);
}

#[test]
fn unit_weight_gra_retraces_ce_bit_for_bit() {
    let (train_set, test_set) = separable(2);
    let gra = LossSpec::bsce_gra(0.0, 2.0).unwrap();
    let (a, _) = train(&small_config(LossSpec::ce(), 3, 9), &train_set, &test_set).unwrap();
    let (b, _) = train(&small_config(gra, 3, 9), &train_set, &test_set).unwrap();
    let (pa, pb) = (a.flat_parameters(), b.flat_parameters());
    assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn same_seed_same_everything() {
    let (train_set, test_set) = separable(3);
    let config = small_config(LossSpec::with_defaults(LossKind::BsceGra), 3, 4);
    let (a, ha) = train(&config, &train_set, &test_set).unwrap();
    let (b, hb) = train(&config, &train_set, &test_set).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let (c, _) = train(&small_config(config.loss, 3, 5), &train_set, &test_set).unwrap();
    assert_ne!(a.flat_parameters(), c.flat_parameters());
}

#[test]
fn split_runs_match_a_straight_run() {
    let (train_set, test_set) = separable(4);
    let config = small_config(LossSpec::with_defaults(LossKind::DualFocal), 5, 6);
    let (straight, straight_history) = train(&config, &train_set, &test_set).unwrap();

    let trainer = Trainer::new(&config, &train_set, &test_set).unwrap();
    let mut state = trainer.init().unwrap();
    let mut history = TrainHistory::default();
    trainer.run(&mut state, &mut history, 3).unwrap();
    let mut resumed = state.clone();
    trainer.run(&mut resumed, &mut history, 2).unwrap();
    assert_eq!(resumed.model.flat_parameters(), straight.flat_parameters());
    assert_eq!(history, straight_history);
    assert_eq!(resumed.epochs_done, 5);
}

#[test]
fn gradient_norms_are_logged_on_request() {
    let (train_set, test_set) = separable(5);
    let mut config = small_config(LossSpec::with_defaults(LossKind::BsceGra), 2, 1);
    config.log_grad_norms_at = vec![1];
    let (_, history) = train(&config, &train_set, &test_set).unwrap();
    assert_eq!(history.grad_norms.len(), 1);
    let log = &history.grad_norms[0];
    assert_eq!(log.epoch, 1);
    assert_eq!(log.records.len(), train_set.len());
    assert!(log.records.iter().all(|r| r.last_layer_grad_norm >= 0.0 && r.brier_score >= 0.0));
}

#[test]
fn divergence_aborts_with_location() {
    let (train_set, test_set) = separable(6);
    let mut config = small_config(LossSpec::ce(), 2, 1);
    config.lr_schedule = LrSchedule::constant(1e300).unwrap();
    match train(&config, &train_set, &test_set) {
        Err(Error::NonFinite { epoch, batch }) => assert!(epoch == 0 && batch <= 1, "{epoch} {batch}"),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn bad_configs_are_rejected() {
    let (train_set, test_set) = separable(7);
    let mut config = small_config(LossSpec::ce(), 1, 1);
    config.batch_size = 0;
    assert!(train(&config, &train_set, &test_set).is_err());
    let mut config = small_config(LossSpec::ce(), 1, 1);
    config.momentum = 1.5;
    assert!(train(&config, &train_set, &test_set).is_err());
}
