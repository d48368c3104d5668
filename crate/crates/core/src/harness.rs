//! Experiment plumbing: simulate, track, score joint-angle error, and sweep
//! one factor over seeds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ellipsoid::Datum;
use crate::em::{track_sequence, FrameResult, Metric, TrackerConfig};
use crate::error::{Error, Result};
use crate::kinematics::{BodyModel, PoseVector, FREE_DOF};
use crate::math::{mean, std_dev};
use crate::synth::{make_running_script, sample_frame, MotionScript, SampleConfig, SampledFrame};

/// Normal-noise scale tied to the point-noise scale in noise sweeps (rad per m).
pub const NORMAL_NOISE_PER_METER: f64 = 5.0;

/// Source of the starting pose of each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Every frame starts from its ground-truth pose.
    Script,
    /// Frame 0 starts from the ground truth, later frames from the previous estimate.
    #[default]
    Previous,
    /// Frame 0 starts from the zero pose, later frames from the previous estimate.
    Identity,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "script" => Ok(InitMode::Script),
            "previous" => Ok(InitMode::Previous),
            "identity" => Ok(InitMode::Identity),
            other => Err(Error::InvalidConfig(format!("unknown init mode '{other}'"))),
        }
    }
}

/// Absolute joint-angle errors; free-motion parameters are excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleErrorReport {
    /// `per_frame[k][j]`: error of joint angle `j` in frame `k` (rad).
    pub per_frame: Vec<Vec<f64>>,
    /// Mean over frames and angles.
    pub mean: f64,
}

impl AngleErrorReport {
    /// Mean error of every frame.
    pub fn frame_means(&self) -> Vec<f64> {
        self.per_frame.iter().map(|f| mean(f)).collect()
    }

    /// Mean error of every joint angle.
    pub fn angle_means(&self) -> Vec<f64> {
        let n = self.per_frame.first().map_or(0, Vec::len);
        (0..n)
            .map(|j| mean(&self.per_frame.iter().map(|f| f[j]).collect::<Vec<_>>()))
            .collect()
    }
}

pub fn angle_errors(truth: &[PoseVector], estimate: &[PoseVector]) -> Result<AngleErrorReport> {
    if truth.len() != estimate.len() {
        return Err(Error::FrameCountMismatch {
            truth: truth.len(),
            estimate: estimate.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("trajectory"));
    }
    let mut per_frame = Vec::with_capacity(truth.len());
    for (t, e) in truth.iter().zip(estimate) {
        if t.dim() != e.dim() {
            return Err(Error::DimensionMismatch {
                expected: t.dim(),
                got: e.dim(),
            });
        }
        per_frame.push(
            t.joint_angles
                .iter()
                .zip(&e.joint_angles)
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<f64>>(),
        );
    }
    let all: Vec<f64> = per_frame.iter().flatten().copied().collect();
    Ok(AngleErrorReport {
        mean: mean(&all),
        per_frame,
    })
}

/// Per-angle trajectory CSV: `frame,angle,truth,estimate`.
pub fn write_trajectory_csv<W: Write>(
    out: W,
    model: &BodyModel,
    truth: &[PoseVector],
    estimate: &[PoseVector],
) -> Result<()> {
    if truth.len() != estimate.len() {
        return Err(Error::FrameCountMismatch {
            truth: truth.len(),
            estimate: estimate.len(),
        });
    }
    let names = model.angle_names();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(["frame", "angle", "truth", "estimate"])?;
    for (k, (t, e)) in truth.iter().zip(estimate).enumerate() {
        for (j, name) in names.iter().enumerate() {
            w.write_record([
                k.to_string(),
                name.clone(),
                t.get(FREE_DOF + j).to_string(),
                e.get(FREE_DOF + j).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Samples frame `k` of `script` with the seed derived for `k`.
pub fn simulate_frame(
    model: &BodyModel,
    script: &MotionScript,
    k: usize,
    cfg: &SampleConfig,
) -> Result<SampledFrame> {
    sample_frame(model, &script.frames[k], &cfg.for_frame(k))
}

/// Samples every frame of a script.
pub fn simulate_sequence(
    model: &BodyModel,
    script: &MotionScript,
    cfg: &SampleConfig,
) -> Result<Vec<SampledFrame>> {
    (0..script.len())
        .map(|k| simulate_frame(model, script, k, cfg))
        .collect()
}

/// Tracks `frames` with the starting poses selected by `init`.
pub fn track_frames(
    model: &BodyModel,
    truth: Option<&[PoseVector]>,
    frames: &[Vec<Datum>],
    tracker: &TrackerConfig,
    init: InitMode,
) -> Result<Vec<FrameResult>> {
    let truth_at = |k: usize| -> Result<&PoseVector> {
        truth
            .and_then(|t| t.get(k))
            .ok_or_else(|| Error::InvalidConfig("this init mode needs a motion script".into()))
    };
    match init {
        InitMode::Script => frames
            .iter()
            .enumerate()
            .map(|(k, f)| {
                Ok(
                    track_sequence(model, truth_at(k)?, std::slice::from_ref(f), tracker)?
                        .pop()
                        .expect("one frame in, one result out"),
                )
            })
            .collect(),
        InitMode::Previous => track_sequence(model, truth_at(0)?, frames, tracker),
        InitMode::Identity => track_sequence(model, &model.zero_pose(), frames, tracker),
    }
}

/// One simulated-and-tracked sequence.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub results: Vec<FrameResult>,
    pub report: AngleErrorReport,
    /// Mean outlier posterior over injected outliers and over inliers, pooled
    /// over frames.
    pub outlier_posterior: (f64, f64),
}

impl TrialOutcome {
    pub fn estimates(&self) -> Vec<PoseVector> {
        self.results.iter().map(|r| r.pose.clone()).collect()
    }
}

/// Tracks `frames` (sampled from `truth`) and scores the estimate.
pub fn evaluate_trial(
    model: &BodyModel,
    truth: &[PoseVector],
    frames: &[SampledFrame],
    tracker: &TrackerConfig,
    init: InitMode,
) -> Result<TrialOutcome> {
    let data: Vec<Vec<Datum>> = frames.iter().map(|f| f.data.clone()).collect();
    let results = track_frames(model, Some(truth), &data, tracker, init)?;
    let estimates: Vec<PoseVector> = results.iter().map(|r| r.pose.clone()).collect();
    let report = angle_errors(truth, &estimates)?;
    let (mut on_out, mut on_in) = (Vec::new(), Vec::new());
    for (r, f) in results.iter().zip(frames) {
        if r.responsibilities.rows() != f.data.len() {
            continue;
        }
        for (i, &inl) in f.inlier.iter().enumerate() {
            let t = r.responsibilities.outlier(i);
            if inl {
                on_in.push(t)
            } else {
                on_out.push(t)
            }
        }
    }
    Ok(TrialOutcome {
        results,
        report,
        outlier_posterior: (mean(&on_out), mean(&on_in)),
    })
}

/// Runs the running script through sampling, tracking and scoring, using the
/// frames `indices` of a script of `frames` frames at `rate`.
pub fn run_trial(
    model: &BodyModel,
    script: &MotionScript,
    indices: &[usize],
    sample: &SampleConfig,
    tracker: &TrackerConfig,
    init: InitMode,
) -> Result<TrialOutcome> {
    let truth: Vec<PoseVector> = indices.iter().map(|&k| script.frames[k].clone()).collect();
    let frames = indices
        .iter()
        .map(|&k| simulate_frame(model, script, k, sample))
        .collect::<Result<Vec<_>>>()?;
    evaluate_trial(model, &truth, &frames, tracker, init)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    /// Point noise σ (m); the normal noise follows as `NORMAL_NOISE_PER_METER σ`.
    Noise,
    /// Temporal subsampling factor; the swept value reported is the frame rate.
    Rate,
    /// Observations per frame.
    Obs,
    /// Outlier fraction, reported for each metric.
    Metric,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(SweepKind::Noise),
            "rate" => Ok(SweepKind::Rate),
            "obs" => Ok(SweepKind::Obs),
            "metric" => Ok(SweepKind::Metric),
            other => Err(Error::InvalidConfig(format!("unknown sweep '{other}'"))),
        }
    }
}

impl SweepKind {
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepKind::Noise => vec![0.0, 0.005, 0.01, 0.02, 0.03],
            SweepKind::Rate => vec![1.0, 2.0, 4.0],
            SweepKind::Obs => vec![50.0, 150.0, 250.0, 350.0, 450.0, 550.0],
            SweepKind::Metric => vec![0.0, 0.1, 0.2, 0.3],
        }
    }

    pub fn default_metrics(self) -> Vec<Metric> {
        match self {
            SweepKind::Noise | SweepKind::Metric => vec![Metric::Datum, Metric::Algebraic],
            SweepKind::Rate | SweepKind::Obs => vec![Metric::Datum],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub values: Vec<f64>,
    pub metrics: Vec<Metric>,
    pub seeds: usize,
    /// Seed of the first repetition; repetition `r` uses `base_seed + r`.
    pub base_seed: u64,
    pub frames: usize,
    pub rate: f64,
    pub init: InitMode,
    pub sample: SampleConfig,
    pub tracker: TrackerConfig,
}

impl SweepSpec {
    pub fn new(kind: SweepKind) -> Self {
        Self {
            kind,
            values: kind.default_values(),
            metrics: kind.default_metrics(),
            seeds: 10,
            base_seed: 0,
            frames: 100,
            rate: 30.0,
            init: InitMode::Previous,
            sample: SampleConfig::default(),
            tracker: TrackerConfig::default(),
        }
    }

    /// Sampling config, frame indices and reported value of one cell.
    fn cell(&self, value: f64, seed: u64) -> Result<(SampleConfig, Vec<usize>, f64)> {
        let mut sample = SampleConfig {
            seed,
            ..self.sample
        };
        let mut indices: Vec<usize> = (0..self.frames).collect();
        let mut reported = value;
        match self.kind {
            SweepKind::Noise => {
                sample.point_noise = value;
                sample.normal_noise = NORMAL_NOISE_PER_METER * value;
            }
            SweepKind::Rate => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "subsampling factor must be a positive integer, got {value}"
                    )));
                }
                indices = indices.into_iter().step_by(value as usize).collect();
                reported = self.rate / value;
            }
            SweepKind::Obs => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "bad observation count {value}"
                    )));
                }
                sample.observations = value as usize;
            }
            SweepKind::Metric => sample.outlier_fraction = value,
        }
        sample.validate()?;
        Ok((sample, indices, reported))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub swept_value: f64,
    pub metric: String,
    pub mean_angle_error: f64,
    pub std: f64,
    pub seeds: usize,
}

pub const SWEEP_HEADER: [&str; 5] = ["swept_value", "metric", "mean_angle_error", "std", "seeds"];

/// Label of a run in the metric column.
pub fn metric_label(metric: Metric, outlier_class: bool) -> String {
    if outlier_class {
        metric.to_string()
    } else {
        format!("{metric}-no-outlier")
    }
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn write_row<W: Write>(w: &mut csv::Writer<W>, row: &SweepRow) -> Result<()> {
    w.write_record([
        row.swept_value.to_string(),
        row.metric.clone(),
        row.mean_angle_error.to_string(),
        row.std.to_string(),
        row.seeds.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Per-seed mean angle errors of one sweep value for one metric.
pub fn sweep_cell_errors(
    model: &BodyModel,
    spec: &SweepSpec,
    value: f64,
    metric: Metric,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let script = make_running_script(model, spec.frames, spec.rate)?;
    let tracker = TrackerConfig {
        metric,
        ..spec.tracker
    };
    (0..spec.seeds)
        .into_par_iter()
        .map(|r| {
            let (sample, indices, _) = spec.cell(value, spec.base_seed + r as u64)?;
            Ok(
                run_trial(model, &script, &indices, &sample, &tracker, spec.init)?
                    .report
                    .mean,
            )
        })
        .collect()
}

/// Runs the sweep and writes CSV rows as each swept value completes.
///
/// Seeds of a cell run on the current rayon pool; results do not depend on
/// the number of threads.
pub fn run_sweep<W: Write>(model: &BodyModel, spec: &SweepSpec, out: W) -> Result<Vec<SweepRow>> {
    if spec.seeds == 0 || spec.values.is_empty() || spec.metrics.is_empty() || spec.frames == 0 {
        return Err(Error::EmptyInput(
            "sweep needs seeds, values, metrics and frames",
        ));
    }
    spec.tracker.validate()?;
    let mut w = csv_writer(out);
    w.write_record(SWEEP_HEADER)?;
    w.flush()?;
    let mut rows = Vec::new();
    for &value in &spec.values {
        let (_, _, reported) = spec.cell(value, spec.base_seed)?;
        for &metric in &spec.metrics {
            let errors = sweep_cell_errors(model, spec, value, metric)?;
            let row = SweepRow {
                swept_value: reported,
                metric: metric_label(metric, spec.tracker.outlier_class),
                mean_angle_error: mean(&errors),
                std: std_dev(&errors),
                seeds: errors.len(),
            };
            write_row(&mut w, &row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Writes summary rows in the sweep CSV layout.
pub fn write_sweep_rows<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for row in rows {
        write_row(&mut w, row)?;
    }
    Ok(())
}
