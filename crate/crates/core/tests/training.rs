use patterning::harness::{train, OptimizerKind, TrainConfig};
use patterning::induction::gen_corpus;
use patterning::model::{Example, ModelConfig, Transformer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_lm() -> (TrainConfig, Vec<Vec<u32>>) {
    let c = gen_corpus(12, 6, 10, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut model = ModelConfig::toy_lm(12, 10);
    model.numeric_precision = patterning::Precision::F64;
    let cfg = TrainConfig::toy_lm(model, 12, 3, 4);
    (cfg, c.documents)
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let (cfg, docs) = small_lm();
    let data: Vec<Example> = docs.iter().map(|d| Example::next_token_weighted(d, &vec![0.0; d.len()])).collect();
    let out = train::<f64>(&cfg, &data, |_, _| Ok(Vec::new())).unwrap();
    let init = Transformer::new(cfg.model.clone()).unwrap().init_params::<f64>(cfg.seed);
    assert_eq!(out.params, init);
}

#[test]
fn unit_weights_match_unweighted_training() {
    let (cfg, docs) = small_lm();
    let plain: Vec<Example> = docs.iter().map(|d| Example::next_token(d)).collect();
    let ones: Vec<Example> = docs.iter().map(|d| Example::next_token_weighted(d, &vec![1.0; d.len()])).collect();
    let a = train::<f64>(&cfg, &plain, |_, _| Ok(Vec::new())).unwrap();
    let b = train::<f64>(&cfg, &ones, |_, _| Ok(Vec::new())).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let (mut cfg, docs) = small_lm();
    cfg.optimizer = OptimizerKind::Adamw;
    let data: Vec<Example> = docs.iter().map(|d| Example::next_token(d)).collect();
    let a = train::<f64>(&cfg, &data, |_, _| Ok(Vec::new())).unwrap();
    let b = train::<f64>(&cfg, &data, |_, _| Ok(Vec::new())).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.trace, b.trace);
    cfg.shuffle_seed += 1;
    let c = train::<f64>(&cfg, &data, |_, _| Ok(Vec::new())).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn training_reduces_loss() {
    let (mut cfg, docs) = small_lm();
    cfg.steps = Some(60);
    cfg.optimizer = OptimizerKind::Adamw;
    cfg.learning_rate = 1e-2;
    let data: Vec<Example> = docs.iter().map(|d| Example::next_token(d)).collect();
    let model = Transformer::new(cfg.model.clone()).unwrap();
    let before = model.loss(&model.init_params::<f64>(cfg.seed), &data).unwrap();
    let out = train::<f64>(&cfg, &data, |_, _| Ok(Vec::new())).unwrap();
    let after = model.loss(&out.params, &data).unwrap();
    assert!(after < before - 0.1, "{before} -> {after}");
}
