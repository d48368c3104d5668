//! Track a short noisy running sequence frame to frame.

use artisurf::harness::{run_trial, InitMode, NORMAL_NOISE_PER_METER};
use artisurf::synth::{make_running_script, SampleConfig};
use artisurf::{default_body_model, TrackerConfig};

fn main() -> artisurf::Result<()> {
    let model = default_body_model();
    let script = make_running_script(&model, 30, 30.0)?;
    let sample = SampleConfig {
        point_noise: 0.01,
        normal_noise: NORMAL_NOISE_PER_METER * 0.01,
        outlier_fraction: 0.2,
        seed: 7,
        ..Default::default()
    };
    let indices: Vec<usize> = (0..script.len()).collect();
    let outcome = run_trial(
        &model,
        &script,
        &indices,
        &sample,
        &TrackerConfig::default(),
        InitMode::Previous,
    )?;

    for (k, (r, e)) in outcome
        .results
        .iter()
        .zip(outcome.report.frame_means())
        .enumerate()
    {
        println!(
            "frame {k:>2}: {:>2} EM iterations, mean angle error {e:.4} rad",
            r.iterations
        );
    }
    println!("sequence mean {:.4} rad", outcome.report.mean);
    let (on_outliers, on_inliers) = outcome.outlier_posterior;
    println!("mean outlier posterior: {on_outliers:.3} on outliers, {on_inliers:.3} on inliers");
    Ok(())
}
