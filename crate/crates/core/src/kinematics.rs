//! Holonomic planar base carrying a serial revolute arm: forward kinematics,
//! whole-body position Jacobian and a few configuration helpers.

use nalgebra::{DMatrix, DVector, Isometry3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::wrap_angle;

/// Number of base coordinates `[x, y, phi]`.
pub const N_BASE: usize = 3;

pub const GRAVITY: f64 = 9.81;

const DEFAULT_MODEL: &str = include_str!("../models/mobile_manipulator.json");

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
    #[error("inverse kinematics did not converge (residual {residual:e} m)")]
    IkNoConvergence { residual: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub axis: [f64; 3],
    pub origin_xyz: [f64; 3],
    /// Fixed roll, pitch, yaw applied as `Rz(yaw) Ry(pitch) Rx(roll)`.
    pub origin_rpy: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    pub q_a_min: Vec<f64>,
    pub q_a_max: Vec<f64>,
    pub qdot_min: Vec<f64>,
    pub qdot_max: Vec<f64>,
    pub qddot_min: Vec<f64>,
    pub qddot_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    n_a: usize,
    mount_offset: [f64; 3],
    tool_xyz: [f64; 3],
    joints: Vec<JointSpec>,
    link_masses: Vec<f64>,
    limits: Limits,
}

/// Whole-body configuration and velocity `q = [x, y, phi, q_a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WholeBodyState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl WholeBodyState {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qdot: DVector::zeros(n),
        }
    }
}

/// World-frame joint positions and axes plus the EE point for one configuration.
#[derive(Debug, Clone)]
pub struct ChainFrames {
    pub base_position: Vector3<f64>,
    pub joint_positions: Vec<Vector3<f64>>,
    pub joint_axes: Vec<Vector3<f64>>,
    pub ee: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    file: ModelFile,
    q_a_min: DVector<f64>,
    q_a_max: DVector<f64>,
    qdot_min: DVector<f64>,
    qdot_max: DVector<f64>,
    qddot_min: DVector<f64>,
    qddot_max: DVector<f64>,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self::from_json(DEFAULT_MODEL).expect("bundled robot model is valid")
    }
}

impl Serialize for RobotModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.file.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RobotModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let f = ModelFile::deserialize(d)?;
        Self::from_file(f).map_err(serde::de::Error::custom)
    }
}

impl RobotModel {
    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let f: ModelFile =
            serde_json::from_str(text).map_err(|e| KinematicsError::InvalidModel(e.to_string()))?;
        Self::from_file(f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("model serialises")
    }

    /// Build a model from parts; used for custom arms.
    pub fn new(
        mount_offset: [f64; 3],
        tool_xyz: [f64; 3],
        joints: Vec<JointSpec>,
        link_masses: Vec<f64>,
        limits: Limits,
    ) -> Result<Self, KinematicsError> {
        Self::from_file(ModelFile {
            n_a: joints.len(),
            mount_offset,
            tool_xyz,
            joints,
            link_masses,
            limits,
        })
    }

    fn from_file(f: ModelFile) -> Result<Self, KinematicsError> {
        let bad = |m: String| Err(KinematicsError::InvalidModel(m));
        let n_a = f.n_a;
        let n = N_BASE + n_a;
        if n_a == 0 {
            return bad("arm needs at least one joint".into());
        }
        if f.joints.len() != n_a {
            return bad(format!("n_a = {n_a} but {} joints listed", f.joints.len()));
        }
        if f.link_masses.len() != n_a {
            return bad(format!("expected {n_a} link masses"));
        }
        for (i, j) in f.joints.iter().enumerate() {
            let a = Vector3::from(j.axis);
            if !(a.norm() > 1e-12) {
                return bad(format!("joint {i} has a zero axis"));
            }
        }
        let l = &f.limits;
        let checks = [
            ("q_a_min", l.q_a_min.len(), n_a),
            ("q_a_max", l.q_a_max.len(), n_a),
            ("qdot_min", l.qdot_min.len(), n),
            ("qdot_max", l.qdot_max.len(), n),
            ("qddot_min", l.qddot_min.len(), n),
            ("qddot_max", l.qddot_max.len(), n),
        ];
        for (name, got, want) in checks {
            if got != want {
                return bad(format!("{name} has length {got}, expected {want}"));
            }
        }
        let pairs = [
            ("q_a", &l.q_a_min, &l.q_a_max),
            ("qdot", &l.qdot_min, &l.qdot_max),
            ("qddot", &l.qddot_min, &l.qddot_max),
        ];
        for (name, lo, hi) in pairs {
            if lo.iter().zip(hi.iter()).any(|(a, b)| !(a < b)) {
                return bad(format!("{name} lower limits must be below upper limits"));
            }
        }
        Ok(Self {
            q_a_min: DVector::from_column_slice(&l.q_a_min),
            q_a_max: DVector::from_column_slice(&l.q_a_max),
            qdot_min: DVector::from_column_slice(&l.qdot_min),
            qdot_max: DVector::from_column_slice(&l.qdot_max),
            qddot_min: DVector::from_column_slice(&l.qddot_min),
            qddot_max: DVector::from_column_slice(&l.qddot_max),
            file: f,
        })
    }

    pub fn n_b(&self) -> usize {
        N_BASE
    }

    pub fn n_a(&self) -> usize {
        self.file.n_a
    }

    pub fn n(&self) -> usize {
        N_BASE + self.file.n_a
    }

    pub fn mount_offset(&self) -> Vector3<f64> {
        Vector3::from(self.file.mount_offset)
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.file.joints
    }

    pub fn tool_xyz(&self) -> Vector3<f64> {
        Vector3::from(self.file.tool_xyz)
    }

    pub fn link_masses(&self) -> &[f64] {
        &self.file.link_masses
    }

    pub fn limits(&self) -> &Limits {
        &self.file.limits
    }

    /// Replace the limit set, keeping the kinematic chain.
    pub fn with_limits(&self, limits: Limits) -> Result<Self, KinematicsError> {
        let mut f = self.file.clone();
        f.limits = limits;
        Self::from_file(f)
    }

    pub fn q_a_min(&self) -> &DVector<f64> {
        &self.q_a_min
    }

    pub fn q_a_max(&self) -> &DVector<f64> {
        &self.q_a_max
    }

    pub fn qdot_min(&self) -> &DVector<f64> {
        &self.qdot_min
    }

    pub fn qdot_max(&self) -> &DVector<f64> {
        &self.qdot_max
    }

    pub fn qddot_min(&self) -> &DVector<f64> {
        &self.qddot_min
    }

    pub fn qddot_max(&self) -> &DVector<f64> {
        &self.qddot_max
    }

    pub fn q_a_mid(&self) -> DVector<f64> {
        (&self.q_a_min + &self.q_a_max) * 0.5
    }

    fn check_len(&self, q: &DVector<f64>) -> Result<(), KinematicsError> {
        if q.len() != self.n() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.n(),
                got: q.len(),
            });
        }
        Ok(())
    }

    fn base_pose(q: &DVector<f64>) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(q[0], q[1], 0.0),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q[2]),
        )
    }

    pub fn frames(&self, q: &DVector<f64>) -> Result<ChainFrames, KinematicsError> {
        self.check_len(q)?;
        let base = Self::base_pose(q);
        let mut t = base * Translation3::from(self.mount_offset());
        let mut joint_positions = Vec::with_capacity(self.n_a());
        let mut joint_axes = Vec::with_capacity(self.n_a());
        for (i, j) in self.file.joints.iter().enumerate() {
            let [r, p, y] = j.origin_rpy;
            t *= Isometry3::from_parts(
                Translation3::from(Vector3::from(j.origin_xyz)),
                UnitQuaternion::from_euler_angles(r, p, y),
            );
            let axis = Unit::new_normalize(Vector3::from(j.axis));
            joint_positions.push(t.translation.vector);
            joint_axes.push(t.rotation * axis.into_inner());
            t *= UnitQuaternion::from_axis_angle(&axis, q[N_BASE + i]);
        }
        let ee = t * nalgebra::Point3::from(self.tool_xyz());
        Ok(ChainFrames {
            base_position: base.translation.vector,
            joint_positions,
            joint_axes,
            ee: ee.coords,
        })
    }

    pub fn forward_kinematics(&self, q: &DVector<f64>) -> Result<Vector3<f64>, KinematicsError> {
        Ok(self.frames(q)?.ee)
    }

    /// 3×n position Jacobian in the world frame.
    pub fn jacobian(&self, q: &DVector<f64>) -> Result<DMatrix<f64>, KinematicsError> {
        let f = self.frames(q)?;
        Ok(self.jacobian_from_frames(&f))
    }

    pub fn jacobian_from_frames(&self, f: &ChainFrames) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(3, self.n());
        j[(0, 0)] = 1.0;
        j[(1, 1)] = 1.0;
        let r = f.ee - f.base_position;
        j.fixed_view_mut::<3, 1>(0, 2)
            .copy_from(&Vector3::z().cross(&r));
        for (i, (p, w)) in f.joint_positions.iter().zip(&f.joint_axes).enumerate() {
            j.fixed_view_mut::<3, 1>(0, N_BASE + i)
                .copy_from(&w.cross(&(f.ee - p)));
        }
        j
    }

    /// EE position expressed in the arm mount frame (base heading removed).
    pub fn ee_in_arm_frame(&self, q: &DVector<f64>) -> Result<Vector3<f64>, KinematicsError> {
        let f = self.frames(q)?;
        let rel = f.ee - f.base_position;
        let r = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q[2]);
        Ok(r.inverse() * rel - self.mount_offset())
    }

    /// Joint torques that hold the arm against gravity.
    ///
    /// Each link mass is lumped at the midpoint between its joint and the next
    /// joint (or the tool point for the last link).
    pub fn gravity_torque(&self, q: &DVector<f64>) -> Result<DVector<f64>, KinematicsError> {
        let f = self.frames(q)?;
        let n_a = self.n_a();
        let mut tau = DVector::zeros(n_a);
        for (i, &m) in self.file.link_masses.iter().enumerate() {
            let next = if i + 1 < n_a {
                f.joint_positions[i + 1]
            } else {
                f.ee
            };
            let c = 0.5 * (f.joint_positions[i] + next);
            let weight = Vector3::new(0.0, 0.0, -m * GRAVITY);
            for j in 0..=i {
                let moment = (c - f.joint_positions[j]).cross(&weight);
                tau[j] -= f.joint_axes[j].dot(&moment);
            }
        }
        Ok(tau)
    }

    /// Configuration reaching `x_target` that is closest to
    /// `[q_b_ref, q_a_mid]` in the unweighted joint metric.
    ///
    /// Gauss-Newton on the equality-constrained least-distance problem, starting
    /// from the reference itself.
    pub fn closest_reaching_configuration(
        &self,
        x_target: &Vector3<f64>,
        q_b_ref: &Vector3<f64>,
    ) -> Result<DVector<f64>, KinematicsError> {
        let n = self.n();
        let mut q_ref = DVector::zeros(n);
        q_ref.fixed_rows_mut::<3>(0).copy_from(q_b_ref);
        q_ref
            .rows_mut(N_BASE, self.n_a())
            .copy_from(&self.q_a_mid());
        let mut q = q_ref.clone();
        let mut residual = f64::INFINITY;
        for _ in 0..200 {
            let f = self.frames(&q)?;
            let e = x_target - f.ee;
            let j = self.jacobian_from_frames(&f);
            let mut d = &q_ref - &q;
            d[2] = wrap_angle(d[2]);
            let jjt = &j * j.transpose();
            let rhs = DVector::from_column_slice(e.as_slice()) - &j * &d;
            let Some(lam) = jjt.cholesky().map(|c| c.solve(&rhs)) else {
                return Err(KinematicsError::IkNoConvergence { residual: e.norm() });
            };
            let step = d + j.transpose() * lam;
            q += &step;
            for i in 0..self.n_a() {
                q[N_BASE + i] = q[N_BASE + i].clamp(self.q_a_min[i], self.q_a_max[i]);
            }
            residual = (x_target - self.forward_kinematics(&q)?).norm();
            if residual < 1e-13 && step.amax() < 1e-12 {
                break;
            }
        }
        if residual > 1e-9 {
            return Err(KinematicsError::IkNoConvergence { residual });
        }
        Ok(q)
    }
}
