mod common;

use clinfed::models::{loss, Batch, ModelSpec, ParamVector};
use clinfed::rng;
use clinfed::ParamVec;

fn check_against_fd(model: ModelSpec, cases: usize, seed: u64) {
    let mut r = rng::stream(seed, &["fd", &format!("{model:?}")]);
    let mut done = 0;
    while done < cases {
        let batch = common::random_batch(&mut r, 1 + done % 7, model.input_dim);
        let params = common::random_params(&model, &mut r, 1.0);
        if common::min_abs_preactivation(&model, &params, &batch) < 1e-3 {
            continue;
        }
        let analytic = model.grad(&params, &batch).unwrap();
        let numeric = common::fd_grad(&model, &params, &batch, 1e-6);
        let err = common::relative_error(analytic.values(), &numeric);
        assert!(err <= 1e-5, "{model:?} case {done}: relative error {err}");
        done += 1;
    }
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    check_against_fd(ModelSpec::logistic(6), 20, 1);
}

#[test]
fn network_gradient_matches_finite_differences() {
    check_against_fd(ModelSpec::mlp(5, 4), 20, 2);
}

#[test]
fn batch_gradient_is_mean_of_per_example_gradients() {
    let model = ModelSpec::mlp(4, 3);
    let mut r = rng::stream(3, &["mean"]);
    let batch = common::random_batch(&mut r, 9, 4);
    let params = common::random_params(&model, &mut r, 0.7);
    let per = model.per_example_grads(&params, &batch).unwrap();
    let mut sum = params.zeros_like();
    for g in &per {
        sum.add_assign(g).unwrap();
    }
    let mean = sum.scaled(1.0 / 9.0);
    let g = model.grad(&params, &batch).unwrap();
    assert!(common::relative_error(g.values(), mean.values()) < 1e-14);
}

#[test]
fn loss_matches_probabilities() {
    let model = ModelSpec::logistic(3);
    let mut r = rng::stream(4, &["loss"]);
    let batch = common::random_batch(&mut r, 12, 3);
    let params = common::random_params(&model, &mut r, 2.0);
    let probs: Vec<f64> = model.forward(&params, &batch).unwrap();
    let direct = loss(&probs, batch.labels());
    let stable: f64 = model.batch_loss(&params, &batch).unwrap();
    assert!((direct - stable).abs() < 1e-12);
}

#[test]
fn single_precision_tracks_double() {
    let model = ModelSpec::mlp(4, 3);
    let p64: ParamVec = model.init_params(9);
    let p32: ParamVector<f32> = model.init_params(9);
    let batch = Batch::new(vec![1, 0, 1, 1, 0, 1, 0, 0], vec![1, 0], 4).unwrap();
    let g64 = model.grad(&p64, &batch).unwrap();
    let g32 = model.grad(&p32, &batch).unwrap();
    for (a, b) in g64.values().iter().zip(g32.values()) {
        assert!((a - f64::from(*b)).abs() < 1e-5);
    }
}

#[test]
fn shape_errors() {
    let model = ModelSpec::logistic(3);
    let params: ParamVec = model.init_params(0);
    let wide = Batch::new(vec![0; 4], vec![1], 4).unwrap();
    assert!(model.grad(&params, &wide).is_err());
    assert!(model.grad(&params, &Batch::empty(3)).is_err());
    let other: ParamVec = ModelSpec::logistic(4).init_params(0);
    assert!(model.logits(&other, &Batch::empty(3)).is_err());
}
