//! End-to-end acceptance checks. Run with
//! `cargo test -p cogsono --test acceptance -- --nocapture` to see one
//! result line per criterion. Tests hold a shared lock so the wall-clock
//! limits are measured without interference.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use cogsono::agent::{
    run_separation, run_subsampling_loop, run_tracking_loop, PolicyKind, SeparationSettings, SubsampleSettings,
    TrackingSettings, TrialLog,
};
use cogsono::diffusion::GuidanceTarget;
use cogsono::validation::{
    action_sanity_metrics, dps_metrics, entropy_metrics, kalman_metrics, prior_fidelity_metrics, separation_metrics,
    tweedie_metrics,
};
use cogsono::RngStream;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(criterion: u8, name: &str, passed: bool, detail: String, elapsed: Duration) {
    println!(
        "criterion {criterion:>2} {name:<28} {}  {detail}  ({:.1}s)",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
}

fn run<F: FnOnce() -> (bool, String)>(criterion: u8, name: &str, limit: Option<Duration>, f: F) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let (ok, mut detail) = f();
    let elapsed = t0.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    if let Some(l) = limit {
        detail.push_str(&format!(" limit={}s", l.as_secs()));
    }
    report(criterion, name, ok && in_time, detail, elapsed);
    assert!(ok, "criterion {criterion} ({name}) failed");
    assert!(in_time, "criterion {criterion} ({name}) exceeded its time limit: {elapsed:?}");
}

// 1
const KALMAN_PARTICLES: usize = 10_000;
const KALMAN_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const KALMAN_STEPS: usize = 50;
const KALMAN_MAX_Z: f64 = 3.0;
// 2
const SAMPLE_ENTROPY_TOL: f64 = 0.05;
const CLOSED_FORM_TOL: f64 = 1e-10;
const SEPARATED_PAIR_TOL: f64 = 1e-6;
// 3
const PRIOR_SAMPLES: usize = 10_000;
const PRIOR_WEIGHT_TOL: f64 = 0.03;
const PRIOR_MEAN_TOL: f64 = 0.05;
// 4
const TWEEDIE_GAUSS_TOL: f64 = 1e-8;
const TWEEDIE_GMM_TOL: f64 = 1e-4;
// 5
const DPS_SAMPLES: usize = 2000;
const DPS_MEAN_TOL: f64 = 0.1;
const DPS_STD_TOL: f64 = 0.2;
// 6
const SEPARATION_SAMPLES: usize = 2000;
const SEPARATION_TOL: f64 = 0.1;
// 7
const STEERING_EVALS: usize = 100;
const FAR_LOWEST_MIN: f64 = 0.95;
const ZERO_GAIN_TOL: f64 = 0.05;
// 8
const TRACK_NOISE_STD: f64 = 0.5;
const TRACK_SEEDS: u64 = 10;
const TRACK_STEPS: usize = 200;
const STATIC_LOCK_LOSS_RMSE: f64 = 0.1;
const VS_STATIC_MAX: f64 = 0.5;
const VS_ORACLE_MAX: f64 = 1.5;
// 9
const SUBSAMPLE_SEEDS: u64 = 24;
const SUBSAMPLE_WIN_MIN: f64 = 0.8;

#[test]
fn c01_kalman_equivalence() {
    run(1, "kalman equivalence", Some(Duration::from_secs(10)), || {
        let k = kalman_metrics(KALMAN_PARTICLES, &KALMAN_SEEDS, KALMAN_STEPS).unwrap();
        (
            k.max_mean_z <= KALMAN_MAX_Z && k.max_var_z <= KALMAN_MAX_Z,
            format!(
                "max|dm|={:.2}se max|dP|={:.2}se (<= {KALMAN_MAX_Z}) mean z^2={:.2}",
                k.max_mean_z, k.max_var_z, k.mean_sq_z
            ),
        )
    });
}

#[test]
fn c02_entropy_closed_forms() {
    run(2, "entropy closed forms", Some(Duration::from_secs(5)), || {
        let e = entropy_metrics(&RngStream::new(0)).unwrap();
        (
            e.sample_error_d1 <= SAMPLE_ENTROPY_TOL
                && e.sample_error_d3 <= SAMPLE_ENTROPY_TOL
                && e.single_component_error <= CLOSED_FORM_TOL
                && e.isotropic_vs_general_error <= CLOSED_FORM_TOL
                && e.separated_pair_error <= SEPARATED_PAIR_TOL,
            format!(
                "sample d1={:.1e} d3={:.1e} K=1={:.1e} iso={:.1e} far={:.1e}",
                e.sample_error_d1,
                e.sample_error_d3,
                e.single_component_error,
                e.isotropic_vs_general_error,
                e.separated_pair_error
            ),
        )
    });
}

#[test]
fn c03_diffusion_prior_fidelity() {
    run(3, "diffusion prior fidelity", Some(Duration::from_secs(60)), || {
        let p = prior_fidelity_metrics(PRIOR_SAMPLES, &RngStream::new(0)).unwrap();
        (
            p.weight_error <= PRIOR_WEIGHT_TOL && p.mean_error <= PRIOR_MEAN_TOL,
            format!("|dw|={:.4} |dmu|={:.4}", p.weight_error, p.mean_error),
        )
    });
}

#[test]
fn c04_tweedie_exactness() {
    run(4, "tweedie exactness", None, || {
        let t = tweedie_metrics().unwrap();
        (
            t.gaussian_error <= TWEEDIE_GAUSS_TOL && t.gmm_error <= TWEEDIE_GMM_TOL,
            format!("gaussian={:.1e} mixture={:.1e}", t.gaussian_error, t.gmm_error),
        )
    });
}

#[test]
fn c05_dps_posterior_accuracy() {
    run(5, "dps posterior accuracy", None, || {
        let d = dps_metrics(DPS_SAMPLES, &[0, 1, 2]).unwrap();
        (
            d.mean_error <= DPS_MEAN_TOL && d.std_ratio_error <= DPS_STD_TOL,
            format!("mean err={:.3}sd std ratio err={:.3}", d.mean_error, d.std_ratio_error),
        )
    });
}

#[test]
fn c06_joint_separation() {
    run(6, "joint separation", None, || {
        let s = separation_metrics(SEPARATION_SAMPLES, GuidanceTarget::Observed, &RngStream::new(0)).unwrap();
        (
            s.x_mean_error <= SEPARATION_TOL && s.h_mean_error <= SEPARATION_TOL,
            format!("x err={:.3}sd h err={:.3}sd", s.x_mean_error, s.h_mean_error),
        )
    });
}

#[test]
fn c07_action_selection_sanity() {
    run(7, "action selection sanity", None, || {
        let a = action_sanity_metrics(STEERING_EVALS).unwrap();
        let frac = a.far_lowest as f64 / a.evaluations as f64;
        (
            frac >= FAR_LOWEST_MIN && a.far_selected == 0 && a.zero_gain_ig <= ZERO_GAIN_TOL,
            format!(
                "far lowest {}/{} far selected {} zero-gain |IG|={:.1e}",
                a.far_lowest, a.evaluations, a.far_selected, a.zero_gain_ig
            ),
        )
    });
}

fn pooled_angle_rmse(policy: PolicyKind<f64>) -> f64 {
    let mut s = TrackingSettings::default();
    s.beam.noise_std = TRACK_NOISE_STD;
    s.t_steps = TRACK_STEPS;
    s.policy = policy;
    s.log_action_values = false;
    let (mut se, mut n) = (0.0, 0.0);
    for seed in 0..TRACK_SEEDS {
        let log = run_tracking_loop(&s, &RngStream::new(seed)).unwrap();
        se += log.records.iter().map(|r| r.angle_error.powi(2)).sum::<f64>();
        n += log.records.len() as f64;
    }
    (se / n).sqrt()
}

#[test]
fn c08_closed_loop_tracking_benefit() {
    run(8, "closed-loop tracking", Some(Duration::from_secs(120)), || {
        let info = pooled_angle_rmse(PolicyKind::MaxInfoGain);
        let fixed = pooled_angle_rmse(PolicyKind::Static(0.0));
        let oracle = pooled_angle_rmse(PolicyKind::Oracle);
        (
            fixed >= STATIC_LOCK_LOSS_RMSE && info <= VS_STATIC_MAX * fixed && info <= VS_ORACLE_MAX * oracle,
            format!(
                "rmse maxinfo={info:.4} static={fixed:.4} oracle={oracle:.4} ratios {:.3} {:.3}",
                info / fixed,
                info / oracle
            ),
        )
    });
}

fn subsample_maes(policy: PolicyKind<Vec<usize>>, k: usize) -> Vec<f64> {
    let s = SubsampleSettings {
        k,
        policy,
        ..SubsampleSettings::default()
    };
    (0..SUBSAMPLE_SEEDS)
        .map(|seed| run_subsampling_loop(&s, &RngStream::new(seed)).unwrap().summary.mean_mae)
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn c09_subsampling_benefit() {
    run(9, "subsampling benefit", Some(Duration::from_secs(300)), || {
        assert_eq!(SubsampleSettings::default().prior.n_y, 8);
        let info = subsample_maes(PolicyKind::MaxInfoGain, 1);
        let random = subsample_maes(PolicyKind::Random, 1);
        let wins = info.iter().zip(&random).filter(|(a, b)| a < b).count();
        let info4 = median(subsample_maes(PolicyKind::MaxInfoGain, 4));
        let random6 = median(subsample_maes(PolicyKind::Random, 6));
        (
            wins as f64 >= SUBSAMPLE_WIN_MIN * SUBSAMPLE_SEEDS as f64 && info4 < random6,
            format!("k=1 wins {wins}/{SUBSAMPLE_SEEDS}; median mae maxinfo k=4 {info4:.4} vs random k=6 {random6:.4}"),
        )
    });
}

fn csv_bytes<R: serde::Serialize + cogsono::agent::CsvRecord, S: serde::Serialize>(log: &TrialLog<R, S>) -> Vec<u8> {
    let mut v = Vec::new();
    log.write_csv(&mut v).unwrap();
    v
}

#[test]
fn c10_determinism() {
    run(10, "determinism", None, || {
        let track = TrackingSettings {
            t_steps: 20,
            n_particles: 128,
            n_inner: 16,
            ..TrackingSettings::default()
        };
        let sub = SubsampleSettings {
            frames: 3,
            n_posterior: 4,
            ..SubsampleSettings::default()
        };
        let sep = SeparationSettings {
            dim: 3,
            n_samples: 200,
            ..SeparationSettings::default()
        };
        let rng = RngStream::new(11);
        let same = [
            csv_bytes(&run_tracking_loop(&track, &rng).unwrap()) == csv_bytes(&run_tracking_loop(&track, &rng).unwrap()),
            csv_bytes(&run_subsampling_loop(&sub, &rng).unwrap()) == csv_bytes(&run_subsampling_loop(&sub, &rng).unwrap()),
            csv_bytes(&run_separation(&sep, &rng).unwrap()) == csv_bytes(&run_separation(&sep, &rng).unwrap()),
        ];
        let other = csv_bytes(&run_tracking_loop(&track, &RngStream::new(12)).unwrap());
        let differs = other != csv_bytes(&run_tracking_loop(&track, &rng).unwrap());
        (
            same.iter().all(|s| *s) && differs,
            format!("track/subsample/separate identical {same:?}; other seed differs {differs}"),
        )
    });
}
