mod common;

use common::small_batch;
use querylab::model::{joint_loss_grad_error, Model, TaskSet};
use querylab::numerics::RngStream;

#[test]
fn full_joint_loss_matches_finite_differences() {
    let (model, batch) = small_batch();
    let err = joint_loss_grad_error(&model, &batch, TaskSet::all(), 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn literal_contrastive_and_rich_token_head_gradients() {
    let (model, batch) = small_batch();
    let mut cfg = model.config().clone();
    cfg.literal_contrastive = true;
    cfg.token_head_from_hidden = true;
    let m = Model::init(cfg, &mut RngStream::new(5)).unwrap();
    let tasks = TaskSet {
        geo_mp: false,
        geo_cp: false,
        ..TaskSet::all()
    };
    let err = joint_loss_grad_error(&m, &batch, tasks, 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {err:e}");
}
