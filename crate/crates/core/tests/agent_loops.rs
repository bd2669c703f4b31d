use cogsono::agent::{
    run_subsampling_loop, run_tracking_loop, score_actions, select_action, ActionSet, PolicyKind, SubsampleSettings,
    TrackingSettings,
};
use cogsono::entropy::MarginalEntropyModel;
use cogsono::env::{candidate_angles, BeamObservationModel, BeamParams};
use cogsono::observation::ObservationModel;
use cogsono::particle::{predict, update_weights, LinearGaussianDynamics, ParticleEnsemble};
use cogsono::RngStream;
use nalgebra::{dvector, DMatrix};
use rand::Rng;

fn slow_dynamics(theta_std: f64) -> LinearGaussianDynamics<f64> {
    LinearGaussianDynamics::new(DMatrix::identity(3, 3), DMatrix::from_diagonal(&dvector![theta_std.powi(2), 0.0, 0.0])).unwrap()
}

#[test]
fn on_target_candidate_scores_highest() {
    let model = BeamObservationModel::new(BeamParams::default()).unwrap();
    let theta = 0.1;
    let s_tx = model.params().sigma_tx;
    let rng = RngStream::new(5);
    let mut r = rng.labeled("particles").rng();
    let states = (0..512)
        .map(|_| dvector![theta + 0.01 * (r.random::<f64>() - 0.5), 0.06, 1.2])
        .collect();
    let e = ParticleEnsemble::uniform(states).unwrap();
    let cands = ActionSet::new(vec![theta - 3.0 * s_tx, theta, theta + 3.0 * s_tx]).unwrap();
    let ig = score_actions(&e, &slow_dynamics(0.005), &model, &cands, &MarginalEntropyModel::GaussianSampleCovariance, 16, &rng)
        .unwrap()
        .information_gain;
    assert_eq!(select_action(&ig).unwrap(), 1, "{ig:?}");
}

#[test]
fn static_target_is_located_within_grid_spacing() {
    let params = BeamParams {
        noise_std: 0.05,
        ..BeamParams::default()
    };
    let model = BeamObservationModel::new(params).unwrap();
    let grid = candidate_angles(15, model.params().theta_max);
    let spacing = grid[1] - grid[0];
    let truth = dvector![grid[10], 0.06, 1.2];
    let cands = ActionSet::new(grid.clone()).unwrap();
    let dynamics = slow_dynamics(1e-4);
    let rng = RngStream::new(9);
    let mut r = rng.labeled("prior").rng();
    let states = (0..1000)
        .map(|_| dvector![(r.random::<f64>() * 2.0 - 1.0) * model.params().theta_max, 0.06, 1.2])
        .collect();
    let mut e = ParticleEnsemble::uniform(states).unwrap();
    for t in 0..10u64 {
        let step = rng.substream(t);
        let ig = score_actions(&e, &dynamics, &model, &cands, &MarginalEntropyModel::GaussianSampleCovariance, 8, &step.labeled("score"))
            .unwrap()
            .information_gain;
        let a = grid[select_action(&ig).unwrap()];
        let y = model.sample(&truth, &a, &mut step.labeled("observe").rng());
        e = predict(&e, &dynamics, &step.labeled("predict")).unwrap();
        e = update_weights(&e, &y, &model, &a).unwrap().0;
        e = cogsono::particle::resample_if_needed(&e, 0.5, &step.labeled("resample")).0;
    }
    assert!((e.mean()[0] - truth[0]).abs() < spacing, "{} vs {}", e.mean()[0], truth[0]);
}

#[test]
fn tracking_log_shapes_and_policies() {
    let base = TrackingSettings {
        t_steps: 12,
        n_particles: 128,
        n_inner: 8,
        ..TrackingSettings::default()
    };
    let rng = RngStream::new(3);
    let info = run_tracking_loop(&base, &rng).unwrap();
    assert_eq!(info.records.len(), 12);
    assert!(info.records.iter().all(|r| r.ig_best.is_some() && r.ig_chosen == r.ig_best));
    assert!(info.records.iter().all(|r| r.ess >= 1.0 && r.ess <= 128.0 + 1e-9));

    let fixed = run_tracking_loop(
        &TrackingSettings {
            policy: PolicyKind::Static(0.0),
            log_action_values: false,
            ..base.clone()
        },
        &rng,
    )
    .unwrap();
    assert!(fixed.records.iter().all(|r| r.action == 0.0 && r.ig_best.is_none()));

    let oracle = run_tracking_loop(
        &TrackingSettings {
            policy: PolicyKind::Oracle,
            ..base.clone()
        },
        &rng,
    )
    .unwrap();
    let grid = base.candidates();
    for r in &oracle.records {
        let nearest = grid.iter().map(|g| (g - r.true_theta).abs()).fold(f64::INFINITY, f64::min);
        assert!(((r.action - r.true_theta).abs() - nearest).abs() < 1e-12);
    }
}

#[test]
fn full_sampling_is_no_worse_than_one_line() {
    let small = SubsampleSettings {
        frames: 3,
        n_posterior: 8,
        ..SubsampleSettings::default()
    };
    let rng = RngStream::new(6);
    let one = run_subsampling_loop(&SubsampleSettings { k: 1, ..small.clone() }, &rng).unwrap();
    let all = run_subsampling_loop(&SubsampleSettings { k: 8, ..small }, &rng).unwrap();
    assert!(all.records.iter().all(|r| r.chosen_lines == (0..8).collect::<Vec<_>>()));
    assert!(all.summary.mean_mae <= one.summary.mean_mae, "{} vs {}", all.summary.mean_mae, one.summary.mean_mae);
}
