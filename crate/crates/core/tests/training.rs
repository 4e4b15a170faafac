use lemore::model::{LeMoReModel, ModelConfig};
use lemore::params::Session;
use lemore::training::{batch_loss, synthetic_dataset, SgdConfig, TrainConfig, TrainState};

fn config_file(name: &str) -> String {
    std::fs::read_to_string(format!(
        "{}/../../configs/{name}",
        env!("CARGO_MANIFEST_DIR")
    ))
    .unwrap()
}

#[test]
fn shipped_configs_match_presets() {
    assert_eq!(
        ModelConfig::from_json(&config_file("default.json")).unwrap(),
        ModelConfig::default()
    );
    assert_eq!(
        ModelConfig::from_json(&config_file("toy.json")).unwrap(),
        ModelConfig::toy()
    );
    assert_eq!(
        TrainConfig::from_json(&config_file("toy_train.json")).unwrap(),
        TrainConfig::toy()
    );
}

#[test]
fn small_steps_descend_for_most_seeds() {
    let scenes = synthetic_dataset(9, 4, 64).unwrap();
    let sgd = SgdConfig {
        base_lr: 1e-2,
        momentum: 0.0,
        weight_decay: 0.0,
        max_steps: 10,
        ..SgdConfig::default()
    };
    let mut descended = 0;
    for seed in 0..20 {
        let mut cfg = ModelConfig::toy();
        cfg.seed = seed;
        let mut state = TrainState::new(LeMoReModel::build(&cfg).unwrap(), sgd);
        let before = state.train_step(&scenes).unwrap();
        let after = batch_loss(&state.model, &scenes, state.ignore_index).unwrap();
        descended += (after < before) as usize;
    }
    assert!(descended >= 15, "only {descended}/20 seeds descended");
}

#[test]
fn eval_batch_forward_equals_per_image() {
    let model = LeMoReModel::build(&ModelConfig::toy()).unwrap();
    let scenes = synthetic_dataset(2, 3, 64).unwrap();
    let mut s = Session::eval(model.store());
    let xs: Vec<_> = scenes.iter().map(|sc| s.input(sc.image.clone())).collect();
    let ys = model.network().forward_batch(&mut s, &xs).unwrap();
    for (y, sc) in ys.iter().zip(&scenes) {
        let single = model.infer(&sc.image).unwrap();
        assert!(s.value(*y).max_abs_diff(&single) < 1e-12);
    }
}

#[test]
fn train_mode_statistics_depend_on_the_batch() {
    let model = LeMoReModel::build(&ModelConfig::toy()).unwrap();
    let scenes = synthetic_dataset(2, 4, 64).unwrap();
    let whole = batch_loss(&model, &scenes, 255).unwrap();
    let halves = (batch_loss(&model, &scenes[..2], 255).unwrap()
        + batch_loss(&model, &scenes[2..], 255).unwrap())
        / 2.0;
    assert!((whole - halves).abs() > 1e-9);
}

#[test]
fn running_statistics_move_after_a_step() {
    let model = LeMoReModel::build(&ModelConfig::toy()).unwrap();
    let before = model.store().clone();
    let mut state = TrainState::new(
        model,
        SgdConfig {
            base_lr: 0.0,
            ..SgdConfig::default()
        },
    );
    state
        .train_step(&synthetic_dataset(4, 2, 64).unwrap())
        .unwrap();
    let moved = before
        .iter()
        .zip(state.model.store().iter())
        .filter(|((_, a), (_, b))| a.value != b.value)
        .all(|((_, a), _)| a.kind == lemore::params::ParamKind::Buffer);
    assert!(moved);
    assert_ne!(&before, state.model.store());
}
