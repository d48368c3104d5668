use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

use artisurf::em::{e_step, m_step_mixture, neg_log_likelihood, MixtureParams, Responsibilities};
use artisurf::kinematics::{Joint, LoadOptions, Part};
use artisurf::synth::{sample_frame, SampleConfig};
use artisurf::{
    default_body_model, fit_frame, track_sequence, BodyModel, Datum, Ellipsoid, Metric, PoseVector,
    TrackerConfig,
};

fn two_part_model() -> BodyModel {
    BodyModel::new(
        vec![
            Part {
                name: "a".into(),
                ellipsoids: vec![Ellipsoid::aligned(0.2, 0.07, 0.07, Vector3::zeros()).unwrap()],
            },
            Part {
                name: "b".into(),
                ellipsoids: vec![
                    Ellipsoid::aligned(0.18, 0.06, 0.06, Vector3::new(0.4, 0.0, 0.0)).unwrap(),
                ],
            },
        ],
        vec![Joint {
            name: "j".into(),
            parent: 0,
            child: 1,
            anchor: Vector3::new(0.2, 0.0, 0.0),
            axes: vec![Vector3::z(), Vector3::y()],
            limits: vec![(-2.0, 2.0); 2],
        }],
        vec![],
        0,
        LoadOptions::default(),
    )
    .unwrap()
}

fn pose_from(model: &BodyModel, angles: &[f64], shift: f64) -> PoseVector {
    let mut p = model.zero_pose();
    p.joint_angles.copy_from_slice(angles);
    p.free_translation = Vector3::new(shift, -shift, 0.5 * shift);
    p
}

fn frame(model: &BodyModel, pose: &PoseVector, seed: u64, rho: f64) -> Vec<Datum> {
    let cfg = SampleConfig {
        observations: 120,
        point_noise: 0.005,
        normal_noise: 0.02,
        outlier_fraction: rho,
        seed,
        ..Default::default()
    };
    sample_frame(model, pose, &cfg).unwrap().data
}

fn mixture(model: &BodyModel, sigma: f64) -> MixtureParams {
    MixtureParams::initial(model.ellipsoid_count(), sigma, 2.0, true)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn nll_is_permutation_invariant(
        a in -1.0..1.0f64, b in -1.0..1.0f64, seed in 0u64..1000, rot in 1usize..119,
        metric in prop_oneof![Just(Metric::Datum), Just(Metric::Algebraic)],
    ) {
        let model = two_part_model();
        let pose = pose_from(&model, &[a, b], 0.0);
        let data = frame(&model, &pose, seed, 0.2);
        let mut shuffled = data.clone();
        shuffled.rotate_left(rot);
        shuffled.reverse();
        let mix = mixture(&model, 0.02);
        let x = neg_log_likelihood(&model, &pose, &data, &mix, metric).unwrap();
        let y = neg_log_likelihood(&model, &pose, &shuffled, &mix, metric).unwrap();
        prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
    }

    #[test]
    fn responsibilities_are_distributions(
        a in -1.5..1.5f64, b in -1.5..1.5f64, seed in 0u64..1000, sigma in 0.001..0.2f64,
    ) {
        let model = two_part_model();
        let pose = pose_from(&model, &[a, b], 0.1);
        let data = frame(&model, &pose_from(&model, &[b, a], 0.0), seed, 0.3);
        let t = e_step(&model, &pose, &data, &mixture(&model, sigma), Metric::Datum).unwrap();
        for i in 0..t.rows() {
            prop_assert!(t.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    /// One E step followed by the closed-form mixture update never raises the
    /// negative log-likelihood at a fixed pose.
    #[test]
    fn mixture_update_does_not_increase_nll(
        a in -1.0..1.0f64, b in -1.0..1.0f64, seed in 0u64..1000, sigma in 0.005..0.1f64,
    ) {
        let model = two_part_model();
        let pose = pose_from(&model, &[a, b], 0.0);
        let data = frame(&model, &pose_from(&model, &[a + 0.1, b], 0.01), seed, 0.2);
        let mix = mixture(&model, sigma);
        let before = neg_log_likelihood(&model, &pose, &data, &mix, Metric::Datum).unwrap();
        let t = e_step(&model, &pose, &data, &mix, Metric::Datum).unwrap();
        let next = m_step_mixture(&model, &pose, &data, &t, &mix, Metric::Datum).unwrap();
        let after = neg_log_likelihood(&model, &pose, &data, &next, Metric::Datum).unwrap();
        prop_assert!(after <= before + 1e-9 * before.abs());
    }
}

#[test]
fn prior_update_maximizes_expected_log_prior() {
    let model = two_part_model();
    let pose = pose_from(&model, &[0.4, -0.3], 0.0);
    let data = frame(&model, &pose, 7, 0.25);
    let mix = mixture(&model, 0.02);
    let t = e_step(&model, &pose, &data, &mix, Metric::Datum).unwrap();
    let next = m_step_mixture(&model, &pose, &data, &t, &mix, Metric::Datum).unwrap();
    let sums = t.column_sums();
    let q = |pi: &[f64]| -> f64 { sums.iter().zip(pi).map(|(s, p)| s * p.ln()).sum() };
    let best = q(&next.priors);
    let steps = 200;
    for i in 1..steps {
        for j in 1..steps - i {
            let p0 = i as f64 / steps as f64;
            let p1 = j as f64 / steps as f64;
            assert!(q(&[p0, p1, 1.0 - p0 - p1]) <= best + 1e-12);
        }
    }
}

#[test]
fn outlier_posterior_separates_injected_outliers() {
    let model = default_body_model();
    let pose = model.zero_pose();
    let cfg = SampleConfig {
        outlier_fraction: 0.2,
        point_noise: 0.005,
        seed: 3,
        ..Default::default()
    };
    let frame = sample_frame(&model, &pose, &cfg).unwrap();
    let r = fit_frame(&model, &pose, &frame.data, &TrackerConfig::default()).unwrap();
    let (mut on_out, mut on_in) = (Vec::new(), Vec::new());
    for (i, &inlier) in frame.inlier.iter().enumerate() {
        let t = r.responsibilities.outlier(i);
        if inlier {
            on_in.push(t)
        } else {
            on_out.push(t)
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(avg(&on_out) > 0.9, "outliers {}", avg(&on_out));
    assert!(avg(&on_in) < 0.1, "inliers {}", avg(&on_in));
}

#[test]
fn fit_is_deterministic() {
    let model = default_body_model();
    let pose = model.zero_pose();
    let data = frame(&model, &pose, 5, 0.1);
    let mut init = pose.clone();
    init.joint_angles[3] += 0.1;
    let config = TrackerConfig::default();
    let a = fit_frame(&model, &init, &data, &config).unwrap();
    let b = fit_frame(&model, &init, &data, &config).unwrap();
    assert_eq!(a.record(), b.record());
}

#[test]
fn traces_never_increase_under_either_metric() {
    let model = default_body_model();
    let truth = model.zero_pose();
    let data = frame(&model, &truth, 9, 0.2);
    let mut init = truth.clone();
    for a in init.joint_angles.iter_mut() {
        *a += 0.05;
    }
    for metric in [Metric::Datum, Metric::Algebraic] {
        let config = TrackerConfig {
            metric,
            ..Default::default()
        };
        let r = fit_frame(&model, &init, &data, &config).unwrap();
        for w in r.nll_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{metric}: {w:?}");
        }
    }
}

#[test]
fn static_sequence_stays_put() {
    let model = two_part_model();
    let truth = pose_from(&model, &[0.3, 0.2], 0.05);
    let frames: Vec<Vec<Datum>> = (0..4).map(|k| frame(&model, &truth, k, 0.0)).collect();
    let results = track_sequence(&model, &truth, &frames, &TrackerConfig::default()).unwrap();
    for r in &results {
        assert!(r.converged);
        for (a, b) in r.pose.joint_angles.iter().zip(&truth.joint_angles) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
    }
}

#[test]
fn sequence_follows_a_root_shift() {
    let model = two_part_model();
    let first = pose_from(&model, &[0.3, 0.2], 0.0);
    let second = pose_from(&model, &[0.3, 0.2], 0.03);
    let frames = vec![
        frame(&model, &first, 1, 0.0),
        frame(&model, &second, 2, 0.0),
    ];
    let results = track_sequence(&model, &first, &frames, &TrackerConfig::default()).unwrap();
    let moved = results[1].pose.free_translation - results[0].pose.free_translation;
    let expected = second.free_translation - first.free_translation;
    assert!((moved - expected).norm() < 5e-3, "{moved:?}");
}

#[test]
fn mixture_floor_keeps_sigma_invertible() {
    let model = two_part_model();
    let pose = model.zero_pose();
    // Every datum exactly on its correspondence: the raw covariance is zero.
    let posed = model.pose(&pose).unwrap().ellipsoids().to_vec();
    let data: Vec<Datum> = [
        Vector3::x(),
        Vector3::y(),
        -Vector3::z(),
        Vector3::new(1.0, 1.0, 0.0),
    ]
    .iter()
    .map(|n| {
        let n = n.normalize();
        Datum::new(posed[0].correspond(&n).unwrap().surface_point, n).unwrap()
    })
    .collect();
    let t = Responsibilities::from_rows(&vec![vec![1.0, 0.0, 0.0]; data.len()]).unwrap();
    let mix = MixtureParams {
        sigma: Matrix3::identity() * 1e-4,
        ..mixture(&model, 0.01)
    };
    let next = m_step_mixture(&model, &pose, &data, &t, &mix, Metric::Datum).unwrap();
    assert!(next.sigma.determinant() > 0.0);
    assert!(next.sigma.iter().all(|v| v.is_finite()));
}
