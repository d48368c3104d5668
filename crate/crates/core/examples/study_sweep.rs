//! A miniature observation-count sweep written as CSV to stdout.

use artisurf::default_body_model;
use artisurf::harness::{run_sweep, SweepKind, SweepSpec};

fn main() -> artisurf::Result<()> {
    let model = default_body_model();
    let mut spec = SweepSpec::new(SweepKind::Obs);
    spec.values = vec![50.0, 200.0, 500.0];
    spec.seeds = 3;
    spec.frames = 10;
    spec.sample.outlier_fraction = 0.2;
    run_sweep(&model, &spec, std::io::stdout().lock())?;
    Ok(())
}
