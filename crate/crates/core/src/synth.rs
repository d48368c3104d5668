//! Synthetic observations: surface sampling with noise and uniform outliers,
//! and a periodic running motion with ground truth.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::covariance::Precision;
use crate::ellipsoid::{Datum, Ellipsoid};
use crate::error::{Error, Result};
use crate::kinematics::{BodyModel, PoseVector};
use crate::surface::{BlendParams, BlendedSurface};

/// Exponent of Thomsen's approximation to the ellipsoid surface area.
pub const THOMSEN_P: f64 = 1.6075;

/// Retries allowed per inlier before the frame fails.
pub const MAX_RETRIES: usize = 100;

/// Default blending bandwidth for sampling (m). Tighter than the
/// tracker-side default so that data stay near the ellipsoids.
pub const SAMPLE_NU: f64 = 0.02;

/// Approximate surface area `4π ((aᵖbᵖ + aᵖcᵖ + bᵖcᵖ)/3)^(1/p)`.
pub fn thomsen_area(a: f64, b: f64, c: f64) -> f64 {
    let p = THOMSEN_P;
    let (ap, bp, cp) = (a.powf(p), b.powf(p), c.powf(p));
    4.0 * PI * ((ap * bp + ap * cp + bp * cp) / 3.0).powf(1.0 / p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    /// Each extent scaled by `factor` about the centre.
    pub fn inflated(&self, factor: f64) -> Aabb {
        let c = (self.min + self.max) * 0.5;
        let h = (self.max - self.min) * (0.5 * factor);
        Aabb {
            min: c - h,
            max: c + h,
        }
    }

    pub fn volume(&self) -> f64 {
        (self.max - self.min).product()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// Exact bounding box of a set of ellipsoids.
pub fn ellipsoid_bounds(ellipsoids: &[Ellipsoid]) -> Aabb {
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for e in ellipsoids {
        let m = e.inverse_shape();
        let half = Vector3::new(m[(0, 0)].sqrt(), m[(1, 1)].sqrt(), m[(2, 2)].sqrt());
        min = min.inf(&(e.translation() - half));
        max = max.sup(&(e.translation() + half));
    }
    Aabb { min, max }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    /// Observations per frame, inliers and outliers together.
    pub observations: usize,
    /// Standard deviation of the isotropic point noise (m).
    pub point_noise: f64,
    /// Scale of the normal perturbation angle `|N(0, σ)|` (rad).
    pub normal_noise: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
    pub blend: BlendParams,
    /// Outlier box; `None` uses the posed model's bounding box inflated by
    /// `workspace_inflation`.
    pub workspace: Option<Aabb>,
    pub workspace_inflation: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            observations: 500,
            point_noise: 0.0,
            normal_noise: 0.0,
            outlier_fraction: 0.0,
            seed: 0,
            blend: BlendParams {
                nu: SAMPLE_NU,
                level: 1.0,
            },
            workspace: None,
            workspace_inflation: 1.2,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.observations == 0 {
            return Err(Error::InvalidConfig(
                "observations must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::InvalidConfig(
                "outlier fraction must be in [0, 1)".into(),
            ));
        }
        if !(self.point_noise >= 0.0 && self.normal_noise >= 0.0)
            || !(self.point_noise.is_finite() && self.normal_noise.is_finite())
        {
            return Err(Error::InvalidConfig(
                "noise scales must be non-negative".into(),
            ));
        }
        if !(self.workspace_inflation > 0.0) {
            return Err(Error::InvalidConfig(
                "workspace inflation must be positive".into(),
            ));
        }
        BlendParams::new(self.blend.nu, self.blend.level)?;
        Ok(())
    }

    /// `(inliers, outliers)`; the outlier count is `⌊ρI⌋`.
    pub fn split(&self) -> (usize, usize) {
        let outliers = ((self.outlier_fraction * self.observations as f64) + 1e-9).floor() as usize;
        let outliers = outliers.min(self.observations);
        (self.observations - outliers, outliers)
    }

    /// Copy with the seed derived for frame `k`.
    pub fn for_frame(&self, k: usize) -> SampleConfig {
        SampleConfig {
            seed: frame_seed(self.seed, k),
            ..*self
        }
    }
}

/// Seed of frame `k`: the base seed xor a mixed frame index.
pub fn frame_seed(seed: u64, k: usize) -> u64 {
    // splitmix64 finalizer, so neighbouring seeds do not share frames.
    let mut z = (k as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    seed ^ (z ^ (z >> 31))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledFrame {
    pub data: Vec<Datum>,
    /// `true` for inliers. For evaluation only.
    pub inlier: Vec<bool>,
    /// Inlier draws that were rejected and redrawn.
    pub retries: usize,
}

/// Draws one frame of observations from the model at `pose`.
///
/// Inliers come first, outliers after them.
pub fn sample_frame(
    model: &BodyModel,
    pose: &PoseVector,
    cfg: &SampleConfig,
) -> Result<SampledFrame> {
    cfg.validate()?;
    let body = model.pose(pose)?;
    let surface = BlendedSurface::from_prepared(
        body.prepared().to_vec(),
        Precision::from_covariance(&nalgebra::Matrix3::identity())?,
        cfg.blend,
    );
    let areas: Vec<f64> = body
        .ellipsoids()
        .iter()
        .map(|e| {
            let s = e.semi_axes();
            thomsen_area(s[0], s[1], s[2])
        })
        .collect();
    let pick = WeightedIndex::new(&areas)
        .map_err(|e| Error::InvalidModel(format!("ellipsoid areas: {e}")))?;

    let (n_in, n_out) = cfg.split();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let point_noise = Normal::new(0.0, cfg.point_noise).expect("validated");
    let angle_noise = Normal::new(0.0, cfg.normal_noise).expect("validated");
    let mut data = Vec::with_capacity(cfg.observations);
    let mut retries = 0;
    for _ in 0..n_in {
        let mut attempts = 0;
        let (y, n) = loop {
            let k = pick.sample(&mut rng);
            let n = random_unit(&mut rng);
            if let Some(y) = project_to_level_set(&surface, k, &n) {
                break (y, n);
            }
            attempts += 1;
            retries += 1;
            if attempts >= MAX_RETRIES {
                return Err(Error::RootFindFailure(attempts));
            }
        };
        let noisy_point = y + Vector3::from_fn(|_, _| point_noise.sample(&mut rng));
        let angle = angle_noise.sample(&mut rng).abs();
        let noisy_normal = rotate_away(&n, angle, &mut rng);
        data.push(Datum::new(noisy_point, noisy_normal)?);
    }

    let workspace = cfg
        .workspace
        .unwrap_or_else(|| ellipsoid_bounds(body.ellipsoids()).inflated(cfg.workspace_inflation));
    let mut outlier_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    outlier_rng.set_stream(1);
    for _ in 0..n_out {
        let u = Vector3::from_fn(|_, _| outlier_rng.random::<f64>());
        let y = workspace.min + (workspace.max - workspace.min).component_mul(&u);
        let n = random_unit(&mut outlier_rng);
        data.push(Datum::new(y, n)?);
    }

    let mut inlier = vec![true; n_in];
    inlier.resize(n_in + n_out, false);
    Ok(SampledFrame {
        data,
        inlier,
        retries,
    })
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let v: [f64; 3] = UnitSphere.sample(rng);
    Vector3::from(v)
}

/// Rotates `n` by `angle` about a uniformly random axis perpendicular to it.
fn rotate_away(n: &Vector3<f64>, angle: f64, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    // Draw the axis even for a zero angle so the stream does not depend on it.
    let axis = loop {
        let a = n.cross(&random_unit(rng));
        if a.norm() > 1e-3 {
            break Unit::new_normalize(a);
        }
    };
    if angle == 0.0 {
        return *n;
    }
    (Rotation3::from_axis_angle(&axis, angle) * n).normalize()
}

/// Moves the correspondence of ellipsoid `k` for normal `n` outward along
/// `n` onto the level set `f = C`. The normal is kept.
fn project_to_level_set(
    surface: &BlendedSurface,
    k: usize,
    n: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    let params = *surface.params();
    let nu2 = params.nu * params.nu;
    let anchors: Vec<Vector3<f64>> = surface
        .ellipsoids()
        .iter()
        .map(|e| e.surface_point(n))
        .collect();
    let origin = anchors[k];
    let value = |s: f64| -> f64 {
        let y = origin + n * s;
        anchors
            .iter()
            .map(|x| (-(y - x).norm_squared() / nu2).exp())
            .sum::<f64>()
            - params.level
    };
    bisect_along(value, 5.0 * params.nu).map(|s| origin + n * s)
}

/// Root of `g` on `[0, hi]`, given `g(0) >= 0`; `None` unless `g(hi) < 0`.
/// Illinois-modified regula falsi.
fn bisect_along(g: impl Fn(f64) -> f64, hi: f64) -> Option<f64> {
    let (mut a, mut b) = (0.0, hi);
    let (mut ga, mut gb) = (g(a), g(b));
    if ga == 0.0 {
        return Some(0.0);
    }
    if !(ga > 0.0 && gb < 0.0) {
        return None;
    }
    let mut side = 0;
    for _ in 0..200 {
        let c = (a * gb - b * ga) / (gb - ga);
        let c = if c > a && c < b { c } else { 0.5 * (a + b) };
        let gc = g(c);
        if gc == 0.0 || (b - a) < 1e-15 {
            return Some(c);
        }
        if gc > 0.0 {
            a = c;
            ga = gc;
            if side == 1 {
                gb *= 0.5;
            }
            side = 1;
        } else {
            b = c;
            gb = gc;
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        }
        if gc.abs() < 1e-14 {
            return Some(c);
        }
    }
    Some(0.5 * (a + b))
}

/// Ground-truth poses at a fixed frame rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionScript {
    pub model_hash: String,
    /// Frames per second.
    pub rate: f64,
    pub frames: Vec<PoseVector>,
}

impl MotionScript {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Keeps every `factor`-th frame; the rate drops accordingly.
    pub fn subsample(&self, factor: usize) -> MotionScript {
        let factor = factor.max(1);
        MotionScript {
            model_hash: self.model_hash.clone(),
            rate: self.rate / factor as f64,
            frames: self.frames.iter().step_by(factor).cloned().collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Gait constants of the running script.
pub mod gait {
    /// Stride frequency (Hz).
    pub const STRIDE_HZ: f64 = 1.2;
    /// Forward speed along +y (m/s).
    pub const SPEED: f64 = 2.0;
    pub const BOUNCE: f64 = 0.03;
    pub const YAW: f64 = 0.06;
    pub const HIP_SWING: f64 = 0.5;
    pub const HIP_OFFSET: f64 = 0.15;
    pub const HIP_ABDUCTION: f64 = 0.06;
    /// Knee flexion peaks at twice this value (negative angles flex).
    pub const KNEE_FLEX: f64 = 0.6;
    pub const ANKLE_SWING: f64 = 0.25;
    pub const SHOULDER_SWING: f64 = 0.45;
    pub const SHOULDER_ABDUCTION: f64 = 0.12;
    pub const ELBOW_BEND: f64 = 1.0;
    pub const ELBOW_SWING: f64 = 0.3;
    pub const NECK_NOD: f64 = 0.05;
}

/// Pose of the running gait at time `t` seconds.
pub fn running_pose(model: &BodyModel, t: f64) -> Result<PoseVector> {
    use gait::*;
    let phi = 2.0 * PI * STRIDE_HZ * t;
    let mut pose = model.zero_pose();
    pose.free_rotation = Vector3::new(0.0, 0.0, YAW * phi.sin());
    pose.free_translation = Vector3::new(0.0, SPEED * t, BOUNCE * (2.0 * phi).sin());

    let mut set = |name: &str, axis: usize, value: f64| -> Result<()> {
        let idx = model
            .angle_index(name, axis)
            .ok_or_else(|| Error::InvalidModel(format!("running script needs joint '{name}'")))?;
        pose.set(idx, value);
        Ok(())
    };
    for (side, shift, sign) in [("left", 0.0, 1.0), ("right", PI, -1.0)] {
        let p = phi + shift;
        set(&format!("{side}_hip"), 0, HIP_OFFSET + HIP_SWING * p.sin())?;
        set(
            &format!("{side}_hip"),
            1,
            sign * HIP_ABDUCTION * (0.5 + 0.5 * p.cos()),
        )?;
        set(&format!("{side}_knee"), 0, -KNEE_FLEX * (1.0 - p.cos()))?;
        set(
            &format!("{side}_ankle"),
            0,
            ANKLE_SWING * (p + PI / 2.0).sin(),
        )?;
        set(&format!("{side}_shoulder"), 0, -SHOULDER_SWING * p.sin())?;
        set(&format!("{side}_shoulder"), 1, -sign * SHOULDER_ABDUCTION)?;
        set(
            &format!("{side}_elbow"),
            0,
            ELBOW_BEND + ELBOW_SWING * (p + PI).sin(),
        )?;
    }
    set("neck", 0, NECK_NOD * (2.0 * phi).sin())?;
    Ok(pose)
}

/// `frames` samples of the running gait at `rate` frames per second.
pub fn make_running_script(model: &BodyModel, frames: usize, rate: f64) -> Result<MotionScript> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidConfig("rate must be positive".into()));
    }
    let poses = (0..frames)
        .map(|k| running_pose(model, k as f64 / rate))
        .collect::<Result<Vec<_>>>()?;
    Ok(MotionScript {
        model_hash: model.hash(),
        rate,
        frames: poses,
    })
}
