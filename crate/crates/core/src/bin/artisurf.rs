use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use artisurf::em::{Metric, TrackerConfig};
use artisurf::harness::{
    angle_errors, run_sweep, simulate_sequence, track_frames, write_sweep_rows,
    write_trajectory_csv, InitMode, SweepKind, SweepRow, SweepSpec,
};
use artisurf::io;
use artisurf::kinematics::{default_body_model, BodyModel, LoadOptions};
use artisurf::math::std_dev;
use artisurf::synth::{make_running_script, MotionScript, SampleConfig};
use artisurf::{Error, Result};

#[derive(Parser)]
#[command(
    name = "artisurf",
    version,
    about = "Articulated blended-ellipsoid tracking experiments"
)]
struct Cli {
    /// JSON file with optional `tracker` and `sample` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArg {
    /// `default` or a body-model JSON file.
    #[arg(long, default_value = "default")]
    model: String,
    /// Accept triaxial ellipsoids in the model file.
    #[arg(long)]
    relaxed: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a motion script and one point-normal cloud per frame.
    Simulate {
        #[command(flatten)]
        model: ModelArg,
        /// `running` or a motion-script JSON file.
        #[arg(long, default_value = "running")]
        script: String,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 30.0)]
        rate: f64,
        #[arg(long)]
        obs: Option<usize>,
        #[arg(long)]
        outliers: Option<f64>,
        /// Point noise σ (m).
        #[arg(long)]
        noise: Option<f64>,
        /// Normal noise σ (rad).
        #[arg(long)]
        normal_noise: Option<f64>,
        /// Append the inlier label column.
        #[arg(long)]
        labels: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit every cloud of a directory; writes per-frame results and a trajectory.
    Track {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        clouds: PathBuf,
        /// Ground-truth script, needed by `--init script|previous`.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value = "previous")]
        init: String,
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        no_outlier_class: bool,
        /// Frame rate recorded in the trajectory when no script is given.
        #[arg(long, default_value_t = 30.0)]
        rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trajectory against ground truth.
    Eval {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        /// Per-angle CSV: frame, angle, truth, estimate.
        #[arg(long)]
        trajectory_csv: Option<PathBuf>,
        /// Summary CSV in the sweep layout.
        #[arg(long)]
        summary_csv: Option<PathBuf>,
        /// Value written to the `swept_value` column of the summary.
        #[arg(long, default_value_t = 0.0)]
        value: f64,
        /// Label written to the `metric` column of the summary.
        #[arg(long, default_value = "datum")]
        label: String,
    },
    /// Run one study sweep over seeds and write its CSV.
    Sweep {
        #[command(flatten)]
        model: ModelArg,
        /// noise | rate | obs | metric
        #[arg(long)]
        kind: String,
        /// Comma-separated swept values (defaults depend on the kind).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Comma-separated metrics (datum, algebraic).
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 30.0)]
        rate: f64,
        #[arg(long, default_value = "previous")]
        init: String,
        #[arg(long)]
        no_outlier_class: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    tracker: TrackerConfig,
    sample: SampleConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_model(arg: &ModelArg) -> Result<BodyModel> {
    if arg.model == "default" {
        Ok(default_body_model())
    } else {
        BodyModel::from_json_file(
            Path::new(&arg.model),
            LoadOptions {
                relaxed: arg.relaxed,
            },
        )
    }
}

fn load_script(model: &BodyModel, path: &Path) -> Result<MotionScript> {
    let script = io::read_script(path)?;
    if script.model_hash != model.hash() {
        return Err(Error::InvalidConfig(format!(
            "{} was made for a different body model",
            path.display()
        )));
    }
    Ok(script)
}

fn run(cli: Cli) -> Result<()> {
    let config: ConfigFile = match &cli.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => ConfigFile::default(),
    };
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let mut sample = config.sample;
    if let Some(seed) = cli.seed {
        sample.seed = seed;
    }
    let mut tracker = config.tracker;

    match cli.command {
        Command::Simulate {
            model,
            script,
            frames,
            rate,
            obs,
            outliers,
            noise,
            normal_noise,
            labels,
            out,
        } => {
            let model = load_model(&model)?;
            let script = if script == "running" {
                make_running_script(&model, frames, rate)?
            } else {
                load_script(&model, Path::new(&script))?
            };
            sample.observations = obs.unwrap_or(sample.observations);
            sample.outlier_fraction = outliers.unwrap_or(sample.outlier_fraction);
            sample.point_noise = noise.unwrap_or(sample.point_noise);
            sample.normal_noise = normal_noise.unwrap_or(sample.normal_noise);
            let sampled = simulate_sequence(&model, &script, &sample)?;
            fs::create_dir_all(&out)?;
            io::write_script(&out.join(io::SCRIPT_FILE), &script)?;
            for (k, f) in sampled.iter().enumerate() {
                let lab = labels.then_some(f.inlier.as_slice());
                io::write_cloud(&out.join(io::cloud_file_name(k)), &f.data, lab)?;
            }
        }
        Command::Track {
            model,
            clouds,
            script,
            init,
            metric,
            no_outlier_class,
            rate,
            out,
        } => {
            let model = load_model(&model)?;
            let init: InitMode = init.parse()?;
            if let Some(m) = metric {
                tracker.metric = m.parse()?;
            }
            if no_outlier_class {
                tracker.outlier_class = false;
            }
            let script = script.map(|p| load_script(&model, &p)).transpose()?;
            let frames = io::list_clouds(&clouds)?
                .iter()
                .map(|p| io::read_cloud(p).map(|c| c.data))
                .collect::<Result<Vec<_>>>()?;
            let results = track_frames(
                &model,
                script.as_ref().map(|s| s.frames.as_slice()),
                &frames,
                &tracker,
                init,
            )?;
            fs::create_dir_all(&out)?;
            for (k, r) in results.iter().enumerate() {
                io::write_frame_result(&out.join(io::result_file_name(k)), r)?;
            }
            let trajectory = MotionScript {
                model_hash: model.hash(),
                rate: script.as_ref().map_or(rate, |s| s.rate),
                frames: results.iter().map(|r| r.pose.clone()).collect(),
            };
            io::write_script(&out.join(io::TRAJECTORY_FILE), &trajectory)?;
            let failed = results.iter().filter(|r| !r.converged).count();
            if failed > 0 {
                eprintln!("{failed} of {} frames did not converge", results.len());
            }
        }
        Command::Eval {
            model,
            truth,
            estimate,
            trajectory_csv,
            summary_csv,
            value,
            label,
        } => {
            let model = load_model(&model)?;
            let truth = io::read_script(&truth)?;
            let estimate = io::read_script(&estimate)?;
            let report = angle_errors(&truth.frames, &estimate.frames)?;
            if let Some(path) = trajectory_csv {
                write_trajectory_csv(
                    fs::File::create(path)?,
                    &model,
                    &truth.frames,
                    &estimate.frames,
                )?;
            }
            let row = SweepRow {
                swept_value: value,
                metric: label,
                mean_angle_error: report.mean,
                std: std_dev(&report.frame_means()),
                seeds: 1,
            };
            match summary_csv {
                Some(path) => write_sweep_rows(fs::File::create(path)?, &[row])?,
                None => write_sweep_rows(std::io::stdout().lock(), &[row])?,
            }
        }
        Command::Sweep {
            model,
            kind,
            values,
            metrics,
            seeds,
            frames,
            rate,
            init,
            no_outlier_class,
            out,
        } => {
            let model = load_model(&model)?;
            let kind: SweepKind = kind.parse()?;
            if no_outlier_class {
                tracker.outlier_class = false;
            }
            let mut spec = SweepSpec::new(kind);
            if let Some(v) = values {
                spec.values = v;
            }
            if let Some(m) = metrics {
                spec.metrics = m
                    .iter()
                    .map(|s| s.parse::<Metric>())
                    .collect::<Result<_>>()?;
            }
            spec.seeds = seeds;
            spec.base_seed = sample.seed;
            spec.frames = frames;
            spec.rate = rate;
            spec.init = init.parse()?;
            spec.sample = sample;
            spec.tracker = tracker;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            run_sweep(&model, &spec, fs::File::create(&out)?)?;
        }
    }
    Ok(())
}
