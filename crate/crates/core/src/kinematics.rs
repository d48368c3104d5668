//! Kinematic tree of rigid body parts carrying ellipsoids.
//!
//! Every part's ellipsoids, every joint anchor and every joint axis are given
//! in the model frame at the rest pose (all parameters zero). A part's world
//! motion is the root's free motion composed with the joint rotations along
//! the chain from the root down to the part:
//!
//! ```text
//! T_child = T_parent * Trans(anchor) * Rot(u_1, θ_1) * ... * Rot(u_k, θ_k) * Trans(-anchor)
//! ```
//!
//! The pose vector is laid out as `[ω (3), τ (3), θ_joint0_axis0, ...]` where
//! `ω` is the axis-angle rotation of the root (applied about the model
//! origin) and `τ` its translation.

use nalgebra::{DMatrix, Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ellipsoid::{Attachment, Ellipsoid, PreparedEllipsoid};
use crate::error::{Error, Result};

/// Number of free-motion parameters of the root.
pub const FREE_DOF: usize = 6;

const DEFAULT_MODEL_JSON: &str = include_str!("../data/default_body.json");

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation(v: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: v,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidMotion) -> RigidMotion {
        RigidMotion {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Moves an ellipsoid rigidly; semi-axes are untouched.
pub fn apply_motion(e: &Ellipsoid, m: &RigidMotion) -> Ellipsoid {
    Ellipsoid::from_parts_unchecked(
        *e.semi_axes(),
        m.rotation * e.rotation(),
        m.rotation * e.translation() + m.translation,
    )
}

#[derive(Debug, Clone)]
pub struct Part {
    pub name: String,
    pub ellipsoids: Vec<Ellipsoid>,
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub parent: usize,
    pub child: usize,
    pub anchor: Vector3<f64>,
    pub axes: Vec<Vector3<f64>>,
    pub limits: Vec<(f64, f64)>,
}

/// A zero-DOF rigid attachment of `child` to `parent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Weld {
    pub parent: usize,
    pub child: usize,
}

#[derive(Debug, Clone, Copy)]
enum Link {
    Root,
    Joint(usize),
    Weld(usize),
}

#[derive(Debug, Clone)]
pub struct BodyModel {
    parts: Vec<Part>,
    joints: Vec<Joint>,
    welds: Vec<Weld>,
    root: usize,
    links: Vec<Link>,
    /// Parts in parent-before-child order.
    order: Vec<usize>,
    /// Pose-vector index of each joint's first angle.
    joint_offsets: Vec<usize>,
    /// Joints on the path from the root to each part, root side first.
    chains: Vec<Vec<usize>>,
    ellipsoid_part: Vec<usize>,
    rest_ellipsoids: Vec<Ellipsoid>,
    dof: usize,
    source: ModelFile,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept general triaxial ellipsoids instead of requiring `a >= b = c`.
    pub relaxed: bool,
}

impl BodyModel {
    pub fn new(
        parts: Vec<Part>,
        joints: Vec<Joint>,
        welds: Vec<Weld>,
        root: usize,
        options: LoadOptions,
    ) -> Result<Self> {
        let source = ModelFile::from_parts(&parts, &joints, &welds, root);
        Self::build(parts, joints, welds, root, options, source)
    }

    fn build(
        parts: Vec<Part>,
        mut joints: Vec<Joint>,
        welds: Vec<Weld>,
        root: usize,
        options: LoadOptions,
        source: ModelFile,
    ) -> Result<Self> {
        let invalid = |msg: String| Error::InvalidModel(msg);
        let n = parts.len();
        if n == 0 {
            return Err(invalid("model has no parts".into()));
        }
        if root >= n {
            return Err(invalid(format!("root index {root} out of range")));
        }
        for part in &parts {
            if part.ellipsoids.is_empty() {
                return Err(invalid(format!("part '{}' has no ellipsoid", part.name)));
            }
            if !options.relaxed && !part.ellipsoids.iter().all(Ellipsoid::is_spheroid) {
                return Err(invalid(format!(
                    "part '{}' has an ellipsoid violating a >= b = c (use relaxed loading)",
                    part.name
                )));
            }
        }

        let mut links: Vec<Option<Link>> = vec![None; n];
        links[root] = Some(Link::Root);
        let mut claim = |child: usize, parent: usize, link: Link| -> Result<()> {
            if child >= n || parent >= n {
                return Err(invalid(format!("link {parent}->{child} out of range")));
            }
            if links[child].is_some() {
                return Err(invalid(format!("part {child} has more than one parent")));
            }
            links[child] = Some(link);
            Ok(())
        };
        for (j, joint) in joints.iter_mut().enumerate() {
            if joint.axes.is_empty() || joint.axes.len() > 3 {
                return Err(invalid(format!(
                    "joint '{}' must have 1-3 axes",
                    joint.name
                )));
            }
            if joint.limits.len() != joint.axes.len() {
                return Err(invalid(format!(
                    "joint '{}' needs one limit per axis",
                    joint.name
                )));
            }
            for axis in joint.axes.iter_mut() {
                let norm = axis.norm();
                if !(norm > 1e-9) {
                    return Err(invalid(format!("joint '{}' has a zero axis", joint.name)));
                }
                *axis /= norm;
            }
            for (i, a) in joint.axes.iter().enumerate() {
                for b in &joint.axes[i + 1..] {
                    if a.cross(b).norm() < 1e-6 {
                        return Err(invalid(format!("joint '{}' has parallel axes", joint.name)));
                    }
                }
            }
            for &(lo, hi) in &joint.limits {
                let pi = std::f64::consts::PI;
                if !(lo < hi && lo > -pi && hi <= pi) {
                    return Err(invalid(format!(
                        "joint '{}' limit ({lo}, {hi}) not an interval in (-pi, pi]",
                        joint.name
                    )));
                }
            }
            claim(joint.child, joint.parent, Link::Joint(j))?;
        }
        for (w, weld) in welds.iter().enumerate() {
            claim(weld.child, weld.parent, Link::Weld(w))?;
        }
        let links: Vec<Link> = links
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| invalid(format!("part {i} is not attached"))))
            .collect::<Result<_>>()?;

        let parent_of = |p: usize| match links[p] {
            Link::Root => None,
            Link::Joint(j) => Some(joints[j].parent),
            Link::Weld(w) => Some(welds[w].parent),
        };

        // Depth by walking to the root; a walk longer than n means a cycle.
        let mut depth = vec![0usize; n];
        let mut chains = vec![Vec::new(); n];
        for p in 0..n {
            let mut cur = p;
            let mut steps = 0;
            let mut chain = Vec::new();
            while let Some(parent) = parent_of(cur) {
                if let Link::Joint(j) = links[cur] {
                    chain.push(j);
                }
                cur = parent;
                steps += 1;
                if steps > n {
                    return Err(invalid("kinematic links contain a cycle".into()));
                }
            }
            chain.reverse();
            depth[p] = steps;
            chains[p] = chain;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&p| (depth[p], p));

        let mut joint_offsets = Vec::with_capacity(joints.len());
        let mut dof = FREE_DOF;
        for joint in &joints {
            joint_offsets.push(dof);
            dof += joint.axes.len();
        }

        let mut ellipsoid_part = Vec::new();
        let mut rest_ellipsoids = Vec::new();
        for (p, part) in parts.iter().enumerate() {
            for e in &part.ellipsoids {
                ellipsoid_part.push(p);
                rest_ellipsoids.push(e.clone());
            }
        }

        Ok(Self {
            parts,
            joints,
            welds,
            root,
            links,
            order,
            joint_offsets,
            chains,
            ellipsoid_part,
            rest_ellipsoids,
            dof,
            source,
        })
    }

    pub fn from_json_str(json: &str, options: LoadOptions) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(json)?;
        file.into_model(options)
    }

    pub fn from_json_file(path: &std::path::Path, options: LoadOptions) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?, options)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.source)?)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.source).expect("model serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn welds(&self) -> &[Weld] {
        &self.welds
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Total pose dimension, `6 + Σ |axes|`.
    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn joint_dof(&self) -> usize {
        self.dof - FREE_DOF
    }

    pub fn ellipsoid_count(&self) -> usize {
        self.rest_ellipsoids.len()
    }

    pub fn ellipsoid_part(&self, e: usize) -> usize {
        self.ellipsoid_part[e]
    }

    pub fn rest_ellipsoids(&self) -> &[Ellipsoid] {
        &self.rest_ellipsoids
    }

    pub fn joint_offset(&self, j: usize) -> usize {
        self.joint_offsets[j]
    }

    /// Pose-vector index of the angle driving `axis` of the joint named `name`.
    pub fn angle_index(&self, name: &str, axis: usize) -> Option<usize> {
        let j = self.joints.iter().position(|jt| jt.name == name)?;
        (axis < self.joints[j].axes.len()).then(|| self.joint_offsets[j] + axis)
    }

    /// Human-readable label for every joint angle, in pose order.
    pub fn angle_names(&self) -> Vec<String> {
        self.joints
            .iter()
            .flat_map(|j| (0..j.axes.len()).map(move |k| format!("{}.{}", j.name, k)))
            .collect()
    }

    /// Parts whose motion depends on joint `j` (the subtree of its child).
    pub fn subtree(&self, j: usize) -> Vec<usize> {
        (0..self.parts.len())
            .filter(|&p| self.chains[p].contains(&j))
            .collect()
    }

    /// Quadratic joint-limit penalty `Σ max(0, θ - hi)^2 + max(0, lo - θ)^2`
    /// and its gradient with respect to the full pose vector.
    pub fn limit_penalty(&self, pose: &PoseVector) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grad = vec![0.0; self.dof];
        for (j, joint) in self.joints.iter().enumerate() {
            for (k, &(lo, hi)) in joint.limits.iter().enumerate() {
                let idx = self.joint_offsets[j] + k;
                let theta = pose.joint_angles[idx - FREE_DOF];
                let excess = if theta > hi {
                    theta - hi
                } else if theta < lo {
                    theta - lo
                } else {
                    0.0
                };
                value += excess * excess;
                grad[idx] = 2.0 * excess;
            }
        }
        (value, grad)
    }

    pub fn zero_pose(&self) -> PoseVector {
        PoseVector::zeros(self.joint_dof())
    }

    fn check_pose(&self, pose: &PoseVector) -> Result<()> {
        if pose.dim() != self.dof {
            return Err(Error::DimensionMismatch {
                expected: self.dof,
                got: pose.dim(),
            });
        }
        Ok(())
    }

    /// World motion of every part.
    pub fn part_motions(&self, pose: &PoseVector) -> Result<Vec<RigidMotion>> {
        self.check_pose(pose)?;
        Ok(self.solve(pose).0)
    }

    fn solve(&self, pose: &PoseVector) -> (Vec<RigidMotion>, Vec<Twist>) {
        let mut motions = vec![RigidMotion::identity(); self.parts.len()];
        // World axis and pivot for each joint angle (indexed by pose index - 6).
        let mut twists = vec![
            Twist {
                axis: Vector3::zeros(),
                pivot: Vector3::zeros(),
            };
            self.joint_dof()
        ];
        for &p in &self.order {
            motions[p] = match self.links[p] {
                Link::Root => RigidMotion {
                    rotation: exp_so3(&pose.free_rotation),
                    translation: pose.free_translation,
                },
                Link::Weld(w) => motions[self.welds[w].parent],
                Link::Joint(j) => {
                    let joint = &self.joints[j];
                    let parent = motions[joint.parent];
                    let pivot = parent.transform_point(&joint.anchor);
                    let mut rot = Matrix3::identity();
                    for (k, axis) in joint.axes.iter().enumerate() {
                        let idx = self.joint_offsets[j] + k - FREE_DOF;
                        twists[idx] = Twist {
                            axis: parent.rotation * rot * axis,
                            pivot,
                        };
                        rot *= Rotation3::from_axis_angle(
                            &Unit::new_unchecked(*axis),
                            pose.joint_angles[idx],
                        )
                        .into_inner();
                    }
                    let local = RigidMotion {
                        rotation: rot,
                        translation: joint.anchor - rot * joint.anchor,
                    };
                    parent.compose(&local)
                }
            };
        }
        (motions, twists)
    }

    /// The posed body: world ellipsoids plus everything needed for Jacobians.
    pub fn pose(&self, pose: &PoseVector) -> Result<PosedBody<'_>> {
        self.check_pose(pose)?;
        let (motions, joint_twists) = self.solve(pose);
        let ellipsoids: Vec<Ellipsoid> = self
            .rest_ellipsoids
            .iter()
            .zip(&self.ellipsoid_part)
            .map(|(e, &p)| apply_motion(e, &motions[p]))
            .collect();
        let prepared = ellipsoids.iter().map(Ellipsoid::prepare).collect();
        let left = left_jacobian_so3(&pose.free_rotation);
        let root_axes = [
            left.column(0).into_owned(),
            left.column(1).into_owned(),
            left.column(2).into_owned(),
        ];
        Ok(PosedBody {
            model: self,
            motions,
            ellipsoids,
            prepared,
            root_axes,
            root_pivot: pose.free_translation,
            joint_twists,
        })
    }
}

/// Ellipsoid motions, one per ellipsoid, in model order.
pub fn forward_kinematics(model: &BodyModel, pose: &PoseVector) -> Result<Vec<RigidMotion>> {
    let parts = model.part_motions(pose)?;
    Ok(model.ellipsoid_part.iter().map(|&p| parts[p]).collect())
}

/// `∂x/∂Λ` (3 x DOF) of the datum correspondence on ellipsoid `ellipsoid`
/// for the world normal `normal`.
pub fn pose_jacobian(
    model: &BodyModel,
    pose: &PoseVector,
    ellipsoid: usize,
    normal: &Vector3<f64>,
) -> Result<DMatrix<f64>> {
    if ellipsoid >= model.ellipsoid_count() {
        return Err(Error::DimensionMismatch {
            expected: model.ellipsoid_count(),
            got: ellipsoid,
        });
    }
    let body = model.pose(pose)?;
    let att = body.prepared[ellipsoid].datum_attachment(&normal.normalize());
    let mut out = DMatrix::zeros(3, model.dof());
    body.for_each_column(ellipsoid, &att, |k, col| {
        out.fixed_view_mut::<3, 1>(0, k).copy_from(&col);
    });
    Ok(out)
}

/// The default 14-part, 11-joint, 21-ellipsoid human body.
pub fn default_body_model() -> BodyModel {
    BodyModel::from_json_str(DEFAULT_MODEL_JSON, LoadOptions::default())
        .expect("bundled default body model is valid")
}

#[derive(Debug, Clone, Copy)]
struct Twist {
    axis: Vector3<f64>,
    pivot: Vector3<f64>,
}

/// A model posed at a particular parameter vector.
#[derive(Debug, Clone)]
pub struct PosedBody<'m> {
    model: &'m BodyModel,
    motions: Vec<RigidMotion>,
    ellipsoids: Vec<Ellipsoid>,
    prepared: Vec<PreparedEllipsoid>,
    root_axes: [Vector3<f64>; 3],
    root_pivot: Vector3<f64>,
    joint_twists: Vec<Twist>,
}

impl<'m> PosedBody<'m> {
    pub fn model(&self) -> &'m BodyModel {
        self.model
    }

    pub fn part_motions(&self) -> &[RigidMotion] {
        &self.motions
    }

    pub fn ellipsoids(&self) -> &[Ellipsoid] {
        &self.ellipsoids
    }

    pub fn prepared(&self) -> &[PreparedEllipsoid] {
        &self.prepared
    }

    /// Number of non-zero Jacobian columns for points on `ellipsoid`.
    pub fn column_count(&self, ellipsoid: usize) -> usize {
        let part = self.model.ellipsoid_part[ellipsoid];
        FREE_DOF
            + self.model.chains[part]
                .iter()
                .map(|&j| self.model.joints[j].axes.len())
                .sum::<usize>()
    }

    /// Calls `f(param_index, ∂x/∂Λ_k)` for every parameter that can move the
    /// attached point. Columns for all other parameters are zero.
    #[inline]
    pub fn for_each_column(
        &self,
        ellipsoid: usize,
        att: &Attachment,
        mut f: impl FnMut(usize, Vector3<f64>),
    ) {
        for (k, axis) in self.root_axes.iter().enumerate() {
            f(k, att.rotation_derivative(axis, &self.root_pivot));
        }
        for k in 0..3 {
            f(3 + k, att.translation_derivative(&Vector3::ith(k, 1.0)));
        }
        let part = self.model.ellipsoid_part[ellipsoid];
        for &j in &self.model.chains[part] {
            let offset = self.model.joint_offsets[j];
            for k in 0..self.model.joints[j].axes.len() {
                let tw = &self.joint_twists[offset + k - FREE_DOF];
                f(offset + k, att.rotation_derivative(&tw.axis, &tw.pivot));
            }
        }
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(*w).into_inner()
}

/// Left Jacobian of SO(3): `exp(w + δ) ≈ exp(J_l(w) δ) exp(w)`.
pub fn left_jacobian_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = w.cross_matrix();
    let (a, b) = if theta2 < 1e-8 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Root free motion plus joint angles, in radians and model length units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct PoseVector {
    pub free_rotation: Vector3<f64>,
    pub free_translation: Vector3<f64>,
    pub joint_angles: Vec<f64>,
}

impl PoseVector {
    pub fn zeros(joint_dof: usize) -> Self {
        Self {
            free_rotation: Vector3::zeros(),
            free_translation: Vector3::zeros(),
            joint_angles: vec![0.0; joint_dof],
        }
    }

    pub fn dim(&self) -> usize {
        FREE_DOF + self.joint_angles.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(self.free_rotation.as_slice());
        v.extend_from_slice(self.free_translation.as_slice());
        v.extend_from_slice(&self.joint_angles);
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() < FREE_DOF {
            return Err(Error::DimensionMismatch {
                expected: FREE_DOF,
                got: v.len(),
            });
        }
        Ok(Self {
            free_rotation: Vector3::new(v[0], v[1], v[2]),
            free_translation: Vector3::new(v[3], v[4], v[5]),
            joint_angles: v[FREE_DOF..].to_vec(),
        })
    }

    pub fn get(&self, k: usize) -> f64 {
        match k {
            0..=2 => self.free_rotation[k],
            3..=5 => self.free_translation[k - 3],
            _ => self.joint_angles[k - FREE_DOF],
        }
    }

    pub fn set(&mut self, k: usize, value: f64) {
        match k {
            0..=2 => self.free_rotation[k] = value,
            3..=5 => self.free_translation[k - 3] = value,
            _ => self.joint_angles[k - FREE_DOF] = value,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

impl From<PoseVector> for Vec<f64> {
    fn from(p: PoseVector) -> Self {
        p.to_flat()
    }
}

impl TryFrom<Vec<f64>> for PoseVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        PoseVector::from_flat(&v)
    }
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub parts: Vec<PartFile>,
    pub joints: Vec<JointFile>,
    #[serde(default)]
    pub welds: Vec<Weld>,
    #[serde(default)]
    pub root: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartFile {
    pub name: String,
    pub ellipsoids: Vec<EllipsoidFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidFile {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Unit quaternion, `[w, x, y, z]`.
    pub rest_rotation: [f64; 4],
    pub rest_translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFile {
    #[serde(default)]
    pub name: String,
    pub parent: usize,
    pub child: usize,
    pub anchor: [f64; 3],
    pub axes: Vec<[f64; 3]>,
    pub limits: Vec<[f64; 2]>,
}

impl ModelFile {
    fn from_parts(parts: &[Part], joints: &[Joint], welds: &[Weld], root: usize) -> Self {
        let parts = parts
            .iter()
            .map(|p| PartFile {
                name: p.name.clone(),
                ellipsoids: p
                    .ellipsoids
                    .iter()
                    .map(|e| {
                        let q = UnitQuaternion::from_matrix(e.rotation());
                        EllipsoidFile {
                            a: e.semi_axes().x,
                            b: e.semi_axes().y,
                            c: e.semi_axes().z,
                            rest_rotation: [q.w, q.i, q.j, q.k],
                            rest_translation: (*e.translation()).into(),
                        }
                    })
                    .collect(),
            })
            .collect();
        let joints = joints
            .iter()
            .map(|j| JointFile {
                name: j.name.clone(),
                parent: j.parent,
                child: j.child,
                anchor: j.anchor.into(),
                axes: j.axes.iter().map(|a| (*a).into()).collect(),
                limits: j.limits.iter().map(|&(lo, hi)| [lo, hi]).collect(),
            })
            .collect();
        Self {
            parts,
            joints,
            welds: welds.to_vec(),
            root,
        }
    }

    pub fn into_model(self, options: LoadOptions) -> Result<BodyModel> {
        let mut parts = Vec::with_capacity(self.parts.len());
        for p in &self.parts {
            let mut ellipsoids = Vec::with_capacity(p.ellipsoids.len());
            for e in &p.ellipsoids {
                let [w, x, y, z] = e.rest_rotation;
                let q = nalgebra::Quaternion::new(w, x, y, z);
                if (q.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidModel(format!(
                        "part '{}': rest_rotation is not a unit quaternion",
                        p.name
                    )));
                }
                let rot = UnitQuaternion::from_quaternion(q)
                    .to_rotation_matrix()
                    .into_inner();
                ellipsoids.push(Ellipsoid::new(
                    Vector3::new(e.a, e.b, e.c),
                    rot,
                    Vector3::from(e.rest_translation),
                )?);
            }
            parts.push(Part {
                name: p.name.clone(),
                ellipsoids,
            });
        }
        let joints = self
            .joints
            .iter()
            .map(|j| Joint {
                name: j.name.clone(),
                parent: j.parent,
                child: j.child,
                anchor: Vector3::from(j.anchor),
                axes: j.axes.iter().map(|a| Vector3::from(*a)).collect(),
                limits: j.limits.iter().map(|l| (l[0], l[1])).collect(),
            })
            .collect();
        let welds = self.welds.clone();
        let root = self.root;
        BodyModel::build(parts, joints, welds, root, options, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn toy_chain() -> BodyModel {
        let parts = vec![
            Part {
                name: "base".into(),
                ellipsoids: vec![Ellipsoid::aligned(0.5, 0.2, 0.2, Vector3::zeros()).unwrap()],
            },
            Part {
                name: "arm".into(),
                ellipsoids: vec![
                    Ellipsoid::aligned(0.4, 0.1, 0.1, Vector3::new(0.0, 0.0, 1.5)).unwrap(),
                ],
            },
        ];
        let joints = vec![Joint {
            name: "hinge".into(),
            parent: 0,
            child: 1,
            anchor: Vector3::new(0.0, 0.0, 1.0),
            axes: vec![Vector3::x()],
            limits: vec![(-3.0, 3.0)],
        }];
        BodyModel::new(parts, joints, vec![], 0, LoadOptions::default()).unwrap()
    }

    fn random_pose(model: &BodyModel, rng: &mut ChaCha8Rng, scale: f64) -> PoseVector {
        let flat: Vec<f64> = (0..model.dof())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        PoseVector::from_flat(&flat).unwrap()
    }

    #[test]
    fn default_model_counts() {
        let m = default_body_model();
        assert_eq!(m.parts().len(), 14);
        assert_eq!(m.joints().len(), 11);
        assert_eq!(m.ellipsoid_count(), 21);
        // 22 joint angles plus 6 free-motion parameters.
        assert_eq!(m.joint_dof(), 22);
        assert_eq!(m.dof(), 28);
        assert!(m.joints().iter().all(|j| j.axes.len() == 2));
        assert_eq!(m.root(), 0);
        // One root, every other part attached through a joint or a weld.
        assert_eq!(m.joints().len() + m.welds().len(), 13);
    }

    #[test]
    fn zero_pose_is_rest() {
        let m = default_body_model();
        let motions = forward_kinematics(&m, &m.zero_pose()).unwrap();
        for mo in motions {
            assert_relative_eq!(mo.rotation, Matrix3::identity(), epsilon = 1e-15);
            assert_relative_eq!(mo.translation, Vector3::zeros(), epsilon = 1e-15);
        }
    }

    #[test]
    fn root_translation_shifts_every_centre() {
        let m = default_body_model();
        let mut pose = m.zero_pose();
        pose.free_translation = Vector3::new(1.0, 2.0, 3.0);
        let body = m.pose(&pose).unwrap();
        for (posed, rest) in body.ellipsoids().iter().zip(m.rest_ellipsoids()) {
            assert_eq!(
                posed.translation(),
                &(rest.translation() + Vector3::new(1.0, 2.0, 3.0))
            );
        }
    }

    #[test]
    fn hinge_rotates_child_about_anchor() {
        let m = toy_chain();
        let mut pose = m.zero_pose();
        pose.joint_angles[0] = FRAC_PI_2;
        let body = m.pose(&pose).unwrap();
        // Centre sits 0.5 above the anchor; R_x(90°) maps +z to -y.
        let expected = Vector3::new(0.0, -0.5, 1.0);
        assert_relative_eq!(
            *body.ellipsoids()[1].translation(),
            expected,
            epsilon = 1e-12
        );
        assert_relative_eq!(*body.ellipsoids()[0].translation(), Vector3::zeros());
    }

    #[test]
    fn apply_motion_examples() {
        let e = Ellipsoid::aligned(0.3, 0.1, 0.1, Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(apply_motion(&e, &RigidMotion::identity()), e);
        let moved = apply_motion(&e, &RigidMotion::translation(Vector3::new(0.0, 2.0, 0.0)));
        assert_eq!(moved.translation(), &Vector3::new(1.0, 2.0, 0.0));
        assert_eq!(moved.rotation(), e.rotation());

        let m = RigidMotion {
            rotation: exp_so3(&Vector3::new(0.3, -0.4, 0.9)),
            translation: Vector3::new(0.1, 0.2, -0.3),
        };
        let n = Vector3::new(0.2, 0.5, -0.8).normalize();
        let x = e.correspond(&n).unwrap().surface_point;
        let moved = apply_motion(&e, &m);
        assert_relative_eq!(
            moved.algebraic_distance(&m.transform_point(&x)),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dimension_mismatch() {
        let m = default_body_model();
        assert!(matches!(
            forward_kinematics(&m, &PoseVector::zeros(3)),
            Err(Error::DimensionMismatch {
                expected: 28,
                got: 9
            })
        ));
    }

    #[test]
    fn composition_matches_full_pose() {
        let m = default_body_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let full = random_pose(&m, &mut rng, 0.8);
            let mut root_only = m.zero_pose();
            root_only.free_rotation = full.free_rotation;
            root_only.free_translation = full.free_translation;
            let mut joints_only = full.clone();
            joints_only.free_rotation = Vector3::zeros();
            joints_only.free_translation = Vector3::zeros();

            let root = m.part_motions(&root_only).unwrap()[m.root()];
            let a = forward_kinematics(&m, &joints_only).unwrap();
            let b = forward_kinematics(&m, &full).unwrap();
            for (ja, fb) in a.iter().zip(&b) {
                let composed = root.compose(ja);
                assert_relative_eq!(composed.rotation, fb.rotation, epsilon = 1e-12);
                assert_relative_eq!(composed.translation, fb.translation, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn motions_are_proper_rotations() {
        let m = default_body_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pose = random_pose(&m, &mut rng, 1.5);
        for mo in forward_kinematics(&m, &pose).unwrap() {
            assert_relative_eq!(
                mo.rotation.transpose() * mo.rotation,
                Matrix3::identity(),
                epsilon = 1e-12
            );
            assert_relative_eq!(mo.rotation.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn chain_locality() {
        let m = default_body_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = random_pose(&m, &mut rng, 0.5);
        let base = m.part_motions(&pose).unwrap();
        for j in 0..m.joints().len() {
            let mut bumped = pose.clone();
            let idx = m.joint_offset(j);
            bumped.set(idx, bumped.get(idx) + 0.1);
            let moved = m.part_motions(&bumped).unwrap();
            let subtree = m.subtree(j);
            for p in 0..m.parts().len() {
                let changed = moved[p] != base[p];
                assert_eq!(changed, subtree.contains(&p), "joint {j} part {p}");
            }
        }
    }

    #[test]
    fn jacobian_structure() {
        let m = default_body_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = random_pose(&m, &mut rng, 0.5);
        let n = Vector3::new(0.3, -0.5, 0.8).normalize();
        // Left foot: hip, knee, ankle on the chain.
        let e = (0..m.ellipsoid_count())
            .find(|&e| m.parts()[m.ellipsoid_part(e)].name == "left_foot")
            .unwrap();
        let jac = pose_jacobian(&m, &pose, e, &n).unwrap();
        assert_relative_eq!(
            jac.fixed_view::<3, 3>(0, 3).into_owned(),
            Matrix3::identity()
        );
        let part = m.ellipsoid_part(e);
        for (j, joint) in m.joints().iter().enumerate() {
            let on_chain = m.subtree(j).contains(&part);
            for k in 0..joint.axes.len() {
                let col = jac.column(m.joint_offset(j) + k).norm();
                if !on_chain {
                    assert_eq!(col, 0.0);
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = default_body_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let pose = random_pose(&m, &mut rng, 1.0);
            let n = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let e = rng.random_range(0..m.ellipsoid_count());
            let jac = pose_jacobian(&m, &pose, e, &n).unwrap();
            let h = 1e-6;
            for k in 0..m.dof() {
                let mut plus = pose.clone();
                plus.set(k, pose.get(k) + h);
                let mut minus = pose.clone();
                minus.set(k, pose.get(k) - h);
                let xp = m.pose(&plus).unwrap().prepared()[e].surface_point(&n);
                let xm = m.pose(&minus).unwrap().prepared()[e].surface_point(&n);
                let fd = (xp - xm) / (2.0 * h);
                let col = jac.column(k).into_owned();
                let err =
                    (col.clone() - nalgebra::DVector::from_column_slice(fd.as_slice())).norm();
                assert!(err <= 1e-4 * fd.norm().max(1e-3), "param {k}: {err}");
            }
        }
    }

    #[test]
    fn json_round_trip_is_bit_identical() {
        let m = default_body_model();
        let again =
            BodyModel::from_json_str(&m.to_json().unwrap(), LoadOptions::default()).unwrap();
        assert_eq!(m.hash(), again.hash());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pose = random_pose(&m, &mut rng, 1.0);
        let pose_again: PoseVector =
            serde_json::from_str(&serde_json::to_string(&pose).unwrap()).unwrap();
        assert_eq!(
            forward_kinematics(&m, &pose).unwrap(),
            forward_kinematics(&again, &pose_again).unwrap()
        );
    }

    #[test]
    fn rejects_bad_topology() {
        let mut file: ModelFile = serde_json::from_str(DEFAULT_MODEL_JSON).unwrap();
        file.welds.push(Weld {
            parent: 1,
            child: 2,
        });
        assert!(file.into_model(LoadOptions::default()).is_err());

        let mut file: ModelFile = serde_json::from_str(DEFAULT_MODEL_JSON).unwrap();
        file.welds.clear();
        assert!(file.into_model(LoadOptions::default()).is_err());

        let mut file: ModelFile = serde_json::from_str(DEFAULT_MODEL_JSON).unwrap();
        file.joints[0].axes[1] = file.joints[0].axes[0];
        assert!(file.into_model(LoadOptions::default()).is_err());
    }

    #[test]
    fn triaxial_needs_relaxed_loading() {
        let mut file: ModelFile = serde_json::from_str(DEFAULT_MODEL_JSON).unwrap();
        file.parts[0].ellipsoids[0].c *= 0.5;
        assert!(file.clone().into_model(LoadOptions::default()).is_err());
        assert!(file.into_model(LoadOptions { relaxed: true }).is_ok());
    }

    #[test]
    fn left_jacobian_matches_exp_derivative() {
        let w = Vector3::new(0.4, -1.1, 0.7);
        let jl = left_jacobian_so3(&w);
        let h = 1e-6;
        for k in 0..3 {
            let e = Vector3::ith(k, h);
            let d = (exp_so3(&(w + e)) - exp_so3(&(w - e))) / (2.0 * h);
            let omega = d * exp_so3(&w).transpose();
            let axis = Vector3::new(omega[(2, 1)], omega[(0, 2)], omega[(1, 0)]);
            assert_relative_eq!(axis, jl.column(k).into_owned(), epsilon = 1e-8);
        }
    }
}
