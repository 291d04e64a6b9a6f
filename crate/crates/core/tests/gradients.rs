mod common;

use common::*;

#[test]
fn tiny_model_is_small_enough() {
    assert!(tiny_model(0).num_params() <= 10_000, "{}", tiny_model(0).num_params());
}

#[test]
fn joint_loss_gradient_matches_central_differences() {
    let v = video(4, 3);
    let batch = train_batch(&v, &[0, 2], 11);
    let worst = worst_directional_error(&generic_model(1), &*joint_fn(&batch), 100, 5);
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

#[test]
fn consistency_loss_gradient_matches_central_differences() {
    let v = video(2, 4);
    let pairs = view_pairs(&v, 1, 2, 12);
    let worst = worst_directional_error(&generic_model(2), &*consistency_fn(&pairs), 100, 6);
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

#[test]
fn frozen_components_get_zero_consistency_gradient() {
    let v = video(2, 4);
    let pairs = view_pairs(&v, 0, 2, 13);
    let m = tiny_model(3);
    let (_, grads) = consistency_fn(&pairs)(&m);
    for (p, g) in m.params.iter().zip(&grads) {
        let depth_path = matches!(p.component, dattt::model::Component::ImageEncoder | dattt::model::Component::DepthDecoder);
        if !depth_path {
            assert!(g.iter().all(|&x| x == 0.0), "{} has gradient", p.name);
        }
    }
}
