//! Fit one frame with outliers from a perturbed starting pose.

use artisurf::synth::{sample_frame, SampleConfig};
use artisurf::{default_body_model, fit_frame, TrackerConfig};

fn main() -> artisurf::Result<()> {
    let model = default_body_model();
    let mut truth = model.zero_pose();
    for (name, value) in [("left_hip", 0.4), ("right_knee", -0.8), ("left_elbow", 1.0)] {
        truth.set(model.angle_index(name, 0).expect("joint exists"), value);
    }
    let frame = sample_frame(
        &model,
        &truth,
        &SampleConfig {
            point_noise: 0.005,
            outlier_fraction: 0.2,
            seed: 1,
            ..Default::default()
        },
    )?;

    let mut init = truth.clone();
    for a in init.joint_angles.iter_mut() {
        *a += 0.15;
    }
    let result = fit_frame(&model, &init, &frame.data, &TrackerConfig::default())?;

    println!(
        "EM iterations {}, converged {}",
        result.iterations, result.converged
    );
    for (k, v) in result.nll_trace.iter().enumerate() {
        println!("  {k:>2}  {v:.3}");
    }
    let error: f64 = result
        .pose
        .joint_angles
        .iter()
        .zip(&truth.joint_angles)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / truth.joint_angles.len() as f64;
    println!("mean joint-angle error {error:.4} rad");
    println!("outlier prior {:.3}", result.mixture.outlier_prior());
    let flagged = (0..frame.data.len())
        .filter(|&i| result.responsibilities.outlier(i) > 0.5)
        .filter(|&i| !frame.inlier[i])
        .count();
    let injected = frame.inlier.iter().filter(|&&b| !b).count();
    println!("{flagged} of {injected} injected outliers have posterior > 0.5");
    Ok(())
}
