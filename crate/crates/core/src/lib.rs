//! Articulated blended-ellipsoid surface model and robust EM tracker.

pub mod covariance;
pub mod ellipsoid;
pub mod em;
pub mod error;
pub mod harness;
pub mod io;
pub mod kinematics;
pub mod math;
pub mod surface;
pub mod synth;

pub use ellipsoid::{Correspondence, Datum, Ellipsoid};
pub use em::{fit_frame, track_sequence, FrameResult, Metric, MixtureParams, TrackerConfig};
pub use error::{Error, Result};
pub use kinematics::{default_body_model, BodyModel, PoseVector};
pub use surface::BlendParams;
