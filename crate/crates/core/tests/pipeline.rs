mod common;

use common::{model_loss, GroupCheck, pipeline_gradient_check, small_model_config, warmed_model};
use sags_core::model::SagsModel;
use sags_core::trainer;

#[test]
fn every_parameter_group_matches_finite_differences() {
    let mut total: Vec<GroupCheck> = Vec::new();
    for seed in 0..3 {
        for r in pipeline_gradient_check(seed, 6) {
            match total.iter_mut().find(|t| t.group == r.group) {
                Some(t) => t.merge(&r),
                None => total.push(r),
            }
        }
    }
    let names: Vec<&str> = total.iter().map(|r| r.group.as_str()).collect();
    for want in ["features", "hash.table", "aggregator", "color", "opacity", "shape", "displacement"] {
        assert!(names.contains(&want), "missing group {want} in {names:?}");
    }
    for r in &total {
        assert!(r.significant > 0, "{r:?}");
        assert!(r.max_rel < 5e-3, "{r:?}");
    }
}

#[test]
fn loss_decreases_along_the_negative_gradient() {
    let (model, cam, target, cfg) = warmed_model(5, 30, small_model_config());
    let grad = trainer::objective_gradient(&model, &cam, &target, cfg.lambda, [0.0; 3]).unwrap();
    let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
    let norm2: f64 = ids
        .iter()
        .filter_map(|&id| grad.params.param(id))
        .flat_map(|t| t.data().iter().map(|&v| v as f64 * v as f64))
        .sum();
    assert!(norm2 > 0.0);
    let mut best = f64::INFINITY;
    for step in [1e-2, 3e-3, 1e-3] {
        let eps = step / norm2.sqrt();
        let moved = |sign: f64| {
            let mut m = model.clone();
            for &id in &ids {
                if let Some(g) = grad.params.param(id) {
                    let g: Vec<f32> = g.data().to_vec();
                    for (w, gv) in m.store_mut().get_mut(id).data_mut().iter_mut().zip(g) {
                        *w += (sign * eps * gv as f64) as f32;
                    }
                }
            }
            model_loss(&m, &cam, &target, cfg.lambda)
        };
        let fd = (moved(1.0) - moved(-1.0)) / (2.0 * eps);
        best = best.min((fd - norm2).abs() / norm2);
    }
    assert!(best < 1e-1, "directional derivative off by {best}");
}

#[test]
fn lite_model_renders_interpolated_midpoints() {
    let mut cfg = small_model_config();
    cfg.lite = true;
    let (model, cam, target, train) = warmed_model(3, 5, cfg);
    assert!(model.is_lite());
    assert!(!model.pairs().is_empty());
    assert_eq!(model.rendered_points(), model.stored_points() + model.pairs().len());
    let features = model.store().get(model.feature_id());
    assert_eq!(features.rows(), model.stored_points());
    assert!(model_loss(&model, &cam, &target, train.lambda).is_finite());
}

#[test]
fn displacements_start_at_zero() {
    let (pts, _) = common::plane_sphere_cloud(4);
    let model = SagsModel::from_points(&pts, &small_model_config(), Default::default(), 0).unwrap();
    let means = model.means().unwrap();
    assert_eq!(means, model.render_anchors());
}
