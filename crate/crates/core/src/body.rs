//! Rotation algebra and forward kinematics for a skeleton that uses the SMPL
//! pose-parameter layout: `[global_orient(3) | body_pose(3·(J−1)) | transl(3)]`,
//! all rotations in axis-angle form.
//!
//! The world frame is y-up with the body facing +z.

use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Result};

pub type Vec3 = Vector3<f64>;

/// Default joint count of the SMPL kinematic tree.
pub const SMPL_JOINTS: usize = 24;

/// Pose-vector width for a skeleton with `joints` joints.
pub const fn pose_dim(joints: usize) -> usize {
    3 * joints + 3
}

/// Named joints of the default 24-joint tree.
pub mod joint {
    pub const PELVIS: usize = 0;
    pub const L_HIP: usize = 1;
    pub const R_HIP: usize = 2;
    pub const SPINE1: usize = 3;
    pub const L_KNEE: usize = 4;
    pub const R_KNEE: usize = 5;
    pub const SPINE2: usize = 6;
    pub const SPINE3: usize = 9;
    pub const NECK: usize = 12;
    pub const HEAD: usize = 15;
    pub const L_SHOULDER: usize = 16;
    pub const R_SHOULDER: usize = 17;
    pub const L_ELBOW: usize = 18;
    pub const R_ELBOW: usize = 19;
}

const SMALL_ANGLE: f64 = 1e-8;

/// A proper rotation (orthonormal, det = +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Accepts `m` if it is a rotation within `tol` (orthonormality residual and
    /// determinant).
    pub fn from_matrix(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("rotation matrix has non-finite entries"));
        }
        let residual = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if residual > tol || (det - 1.0).abs() > tol {
            return Err(invalid(format!(
                "not a rotation: orthonormality residual {residual:.3e}, det {det:.6}"
            )));
        }
        Ok(Self(m))
    }

    /// Wraps a matrix known to be a rotation by construction.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]), 1e-4)
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn compose(&self, rhs: &RotationMatrix) -> RotationMatrix {
        Self(self.0 * rhs.0)
    }

    pub fn inverse(&self) -> RotationMatrix {
        Self(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn about_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula. Below an angle of 1e-8 the first-order expansion
/// `I + [aa]×` is used.
pub fn axis_angle_to_matrix(aa: [f64; 3]) -> Result<RotationMatrix> {
    if aa.iter().any(|v| !v.is_finite()) {
        return Err(invalid("axis-angle has non-finite components"));
    }
    Ok(axis_angle_to_matrix_finite(Vec3::from(aa)))
}

pub(crate) fn axis_angle_to_matrix_finite(aa: Vec3) -> RotationMatrix {
    let theta = aa.norm();
    let k = skew(&aa);
    if theta < SMALL_ANGLE {
        return RotationMatrix(Matrix3::identity() + k);
    }
    let a = theta.sin() / theta;
    let half = (0.5 * theta).sin();
    let b = 2.0 * half * half / (theta * theta);
    RotationMatrix(Matrix3::identity() + k * a + k * k * b)
}

/// Inverse of [`axis_angle_to_matrix`]; returned angle lies in `[0, π]`.
pub fn matrix_to_axis_angle(r: &RotationMatrix) -> Result<[f64; 3]> {
    let r = RotationMatrix::from_matrix(r.0, 1e-4)?;
    Ok(log_map(&r.0).into())
}

fn log_map(m: &Matrix3<f64>) -> Vec3 {
    let cos = (m.trace() - 1.0) * 0.5;
    let vee = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    let angle = (0.5 * vee.norm()).atan2(cos);
    if angle < 1e-6 {
        // sin θ ≈ θ: the antisymmetric part is the axis-angle itself.
        return vee * 0.5;
    }
    if std::f64::consts::PI - angle > 1e-4 {
        return vee * (angle / (2.0 * angle.sin()));
    }
    // Near π the antisymmetric part vanishes; read the axis from the symmetric part
    // R = I + 2·(kkᵀ − I)·sin²(θ/2)  ⇒  kkᵀ = (R + I)/2 at θ = π, refined with the
    // residual antisymmetric part for θ slightly below π.
    let b = ((m + m.transpose()) * 0.5 + Matrix3::identity()) * 0.5;
    let diag = [b[(0, 0)], b[(1, 1)], b[(2, 2)]];
    let i = (0..3)
        .max_by(|&a, &c| diag[a].total_cmp(&diag[c]))
        .unwrap_or(0);
    let mut axis = Vec3::new(b[(0, i)], b[(1, i)], b[(2, i)]);
    axis /= axis.norm();
    // Fix the sign so the residual antisymmetric part agrees.
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

/// Euler-angle conventions. Angles are returned in composition order: for
/// `Zyx`, `R = Rz(a0)·Ry(a1)·Rx(a2)` (yaw, pitch, roll about z, y, x); for
/// `Yxz`, `R = Ry(a0)·Rx(a1)·Rz(a2)` (heading about the y-up axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EulerOrder {
    #[default]
    Zyx,
    Yxz,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pub angles: [f64; 3],
    pub order: EulerOrder,
    /// Set when the middle angle sits at ±π/2; the last angle is then pinned to 0.
    pub gimbal_locked: bool,
}

const GIMBAL_EPS: f64 = 1e-9;

pub fn matrix_to_euler(r: &RotationMatrix, order: EulerOrder) -> EulerAngles {
    let m = &r.0;
    match order {
        EulerOrder::Zyx => {
            let cp = (m[(2, 1)].powi(2) + m[(2, 2)].powi(2)).sqrt();
            let pitch = (-m[(2, 0)]).atan2(cp);
            if cp > GIMBAL_EPS {
                let yaw = m[(1, 0)].atan2(m[(0, 0)]);
                let roll = m[(2, 1)].atan2(m[(2, 2)]);
                EulerAngles {
                    angles: [yaw, pitch, roll],
                    order,
                    gimbal_locked: false,
                }
            } else {
                let yaw = (-m[(0, 1)]).atan2(m[(1, 1)]);
                EulerAngles {
                    angles: [yaw, pitch, 0.0],
                    order,
                    gimbal_locked: true,
                }
            }
        }
        EulerOrder::Yxz => {
            let cp = (m[(1, 0)].powi(2) + m[(1, 1)].powi(2)).sqrt();
            let pitch = (-m[(1, 2)]).atan2(cp);
            if cp > GIMBAL_EPS {
                let heading = m[(0, 2)].atan2(m[(2, 2)]);
                let roll = m[(1, 0)].atan2(m[(1, 1)]);
                EulerAngles {
                    angles: [heading, pitch, roll],
                    order,
                    gimbal_locked: false,
                }
            } else {
                let heading = (-m[(2, 0)]).atan2(m[(0, 0)]);
                EulerAngles {
                    angles: [heading, pitch, 0.0],
                    order,
                    gimbal_locked: true,
                }
            }
        }
    }
}

pub fn euler_to_matrix(e: &EulerAngles) -> RotationMatrix {
    let [a, b, c] = e.angles;
    match e.order {
        EulerOrder::Zyx => RotationMatrix::about_z(a)
            .compose(&RotationMatrix::about_y(b))
            .compose(&RotationMatrix::about_x(c)),
        EulerOrder::Yxz => RotationMatrix::about_y(a)
            .compose(&RotationMatrix::about_x(b))
            .compose(&RotationMatrix::about_z(c)),
    }
}

/// One pose in the SMPL parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseVector {
    values: Vec<f32>,
}

impl PoseVector {
    pub fn new(values: Vec<f32>, joints: usize) -> Result<Self> {
        if values.len() != pose_dim(joints) {
            return Err(invalid(format!(
                "pose vector has {} values, expected {} for {joints} joints",
                values.len(),
                pose_dim(joints)
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("pose vector has non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn zeros(joints: usize) -> Self {
        Self {
            values: vec![0.0; pose_dim(joints)],
        }
    }

    pub fn joints(&self) -> usize {
        (self.values.len() - 3) / 3
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn global_orient(&self) -> [f64; 3] {
        read3(&self.values, 0)
    }

    pub fn body_pose(&self) -> &[f32] {
        &self.values[3..self.values.len() - 3]
    }

    pub fn transl(&self) -> [f64; 3] {
        read3(&self.values, self.values.len() - 3)
    }
}

pub(crate) fn read3(values: &[f32], at: usize) -> [f64; 3] {
    [
        values[at] as f64,
        values[at + 1] as f64,
        values[at + 2] as f64,
    ]
}

/// `F` poses sampled at `fps`, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    joints: usize,
    fps: f32,
    data: Vec<f32>,
}

impl PoseSequence {
    pub fn new(data: Vec<f32>, joints: usize, fps: f32) -> Result<Self> {
        let v = pose_dim(joints);
        if joints == 0 {
            return Err(invalid("joint count must be ≥ 1"));
        }
        if data.is_empty() || !data.len().is_multiple_of(v) {
            return Err(invalid(format!(
                "sequence payload of {} values is not a positive multiple of V = {v}",
                data.len()
            )));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(invalid(format!("fps must be positive, got {fps}")));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("sequence contains non-finite values"));
        }
        Ok(Self { joints, fps, data })
    }

    pub fn from_frames(frames: &[PoseVector], fps: f32) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| invalid("sequence needs ≥ 1 frame"))?;
        let joints = first.joints();
        if frames.iter().any(|f| f.joints() != joints) {
            return Err(invalid("frames disagree on joint count"));
        }
        let data = frames
            .iter()
            .flat_map(|f| f.as_slice().iter().copied())
            .collect();
        Self::new(data, joints, fps)
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.pose_dim()
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn pose_dim(&self) -> usize {
        pose_dim(self.joints)
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let v = self.pose_dim();
        &self.data[i * v..(i + 1) * v]
    }

    pub fn pose(&self, i: usize) -> PoseVector {
        PoseVector {
            values: self.frame(i).to_vec(),
        }
    }

    pub fn transl(&self, i: usize) -> [f64; 3] {
        read3(self.frame(i), self.pose_dim() - 3)
    }

    pub fn global_orient(&self, i: usize) -> [f64; 3] {
        read3(self.frame(i), 0)
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames() {
            return Err(invalid(format!(
                "window [{start}, {}) exceeds the {} available frames",
                start + len,
                self.frames()
            )));
        }
        let v = self.pose_dim();
        Ok(Self {
            joints: self.joints,
            fps: self.fps,
            data: self.data[start * v..(start + len) * v].to_vec(),
        })
    }
}

/// Kinematic tree: parent indices (root = `None`) and rest bone offsets expressed
/// in the parent frame, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<Vec3>,
}

impl BodyModel {
    pub fn new(parents: Vec<Option<usize>>, rest_offsets: Vec<Vec3>) -> Result<Self> {
        if parents.is_empty() || parents.len() != rest_offsets.len() {
            return Err(invalid(
                "parents and rest offsets must be non-empty and equally long",
            ));
        }
        if parents[0].is_some() {
            return Err(invalid("joint 0 must be the root"));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(invalid(format!(
                        "joint {j} needs a parent with a smaller index"
                    )))
                }
            }
        }
        if rest_offsets
            .iter()
            .any(|o| o.iter().any(|v| !v.is_finite()))
        {
            return Err(invalid("rest offsets must be finite"));
        }
        if rest_offsets[0] != Vec3::zeros() {
            return Err(invalid("root rest offset must be zero"));
        }
        Ok(Self {
            parents,
            rest_offsets,
        })
    }

    /// Humanoid stand-in for the SMPL neutral skeleton, T-pose, pelvis at the
    /// origin, feet about 0.93 m below it and the head about 0.59 m above.
    pub fn smpl_like() -> Self {
        const PARENTS: [i8; SMPL_JOINTS] = [
            -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
        ];
        const OFFSETS: [[f64; 3]; SMPL_JOINTS] = [
            [0.0, 0.0, 0.0],
            [0.06, -0.09, 0.0],
            [-0.06, -0.09, 0.0],
            [0.0, 0.11, -0.02],
            [0.04, -0.38, 0.0],
            [-0.04, -0.38, 0.0],
            [0.0, 0.13, 0.0],
            [0.0, -0.40, -0.04],
            [0.0, -0.40, -0.04],
            [0.0, 0.05, 0.02],
            [0.02, -0.06, 0.12],
            [-0.02, -0.06, 0.12],
            [0.0, 0.21, -0.03],
            [0.07, 0.12, -0.01],
            [-0.07, 0.12, -0.01],
            [0.0, 0.09, 0.05],
            [0.11, 0.04, -0.01],
            [-0.11, 0.04, -0.01],
            [0.26, 0.0, -0.02],
            [-0.26, 0.0, -0.02],
            [0.25, 0.0, 0.0],
            [-0.25, 0.0, 0.0],
            [0.08, 0.0, 0.0],
            [-0.08, 0.0, 0.0],
        ];
        let parents = PARENTS
            .iter()
            .map(|&p| (p >= 0).then_some(p as usize))
            .collect();
        let offsets = OFFSETS.iter().map(|o| Vec3::from(*o)).collect();
        Self::new(parents, offsets).expect("default skeleton is well-formed")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn pose_dim(&self) -> usize {
        pose_dim(self.joint_count())
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_offsets(&self) -> &[Vec3] {
        &self.rest_offsets
    }
}

/// Joint positions and global joint rotations for one pose.
#[derive(Debug, Clone)]
pub struct Skeleton {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<RotationMatrix>,
}

/// World-space joint positions (meters). Root position equals `transl`.
pub fn forward_kinematics(pose: &[f32], body: &BodyModel) -> Result<Vec<Vec3>> {
    Ok(forward_kinematics_full(pose, body)?.positions)
}

pub fn forward_kinematics_full(pose: &[f32], body: &BodyModel) -> Result<Skeleton> {
    let j = body.joint_count();
    if pose.len() != pose_dim(j) {
        return Err(invalid(format!(
            "pose has {} values, body model expects {}",
            pose.len(),
            pose_dim(j)
        )));
    }
    if pose.iter().any(|v| !v.is_finite()) {
        return Err(invalid("pose has non-finite values"));
    }
    let transl = Vec3::from(read3(pose, pose.len() - 3));
    let mut positions = Vec::with_capacity(j);
    let mut rotations: Vec<RotationMatrix> = Vec::with_capacity(j);
    for joint in 0..j {
        let local = axis_angle_to_matrix_finite(Vec3::from(read3(pose, 3 * joint)));
        match body.parents[joint] {
            None => {
                positions.push(transl);
                rotations.push(local);
            }
            Some(p) => {
                let parent_rot = rotations[p];
                positions.push(positions[p] + parent_rot.rotate(&body.rest_offsets[joint]));
                rotations.push(parent_rot.compose(&local));
            }
        }
    }
    Ok(Skeleton {
        positions,
        rotations,
    })
}

/// FK over every frame; returns `frames × joints` positions.
pub fn sequence_joints(seq: &PoseSequence, body: &BodyModel) -> Result<Vec<Vec<Vec3>>> {
    (0..seq.frames())
        .map(|i| forward_kinematics(seq.frame(i), body))
        .collect()
}
