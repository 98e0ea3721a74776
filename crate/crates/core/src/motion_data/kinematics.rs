//! Conversion between the root-velocity representation and joint positions.
//!
//! Root motion is integrated with explicit forward Euler:
//! `yaw[n+1] = yaw[n] + omega[n] / fps` and
//! `root[n+1] = root[n] + R(yaw[n]) v[n] / fps`, starting from the origin at
//! heading 0. The velocity channels of the last frame never influence
//! positions; they repeat the previous frame's values.

use super::{JointTrajectory, MotionSequence, RepresentationSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Rotate a planar `(x, z)` vector by heading `yaw` (heading 0 faces `+z`).
#[inline]
fn rotate<T: Scalar>(yaw: T, x: T, z: T) -> (T, T) {
    let (s, c) = yaw.sin_cos();
    (x * c + z * s, -x * s + z * c)
}

#[inline]
fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    (a + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI
}

/// Joint positions of a (denormalized) motion, root starting at the origin with heading 0.
pub fn to_joint_positions<T: Scalar>(motion: &MotionSequence<T>) -> Result<JointTrajectory<T>> {
    to_joint_positions_from(motion, T::zero(), (T::zero(), T::zero()))
}

/// Like [`to_joint_positions`] but starting from a given heading and planar root position.
pub fn to_joint_positions_from<T: Scalar>(
    motion: &MotionSequence<T>,
    initial_yaw: T,
    initial_root: (T, T),
) -> Result<JointTrajectory<T>> {
    let spec = motion.spec;
    let frames = &motion.frames;
    if frames.cols() != spec.dim() {
        return Err(Error::Shape(format!(
            "frame width {} does not match representation width {}",
            frames.cols(),
            spec.dim()
        )));
    }
    if let Some(frame) = frames.first_non_finite_row() {
        return Err(Error::NonFiniteFrame { frame });
    }
    let joints = spec.joints;
    let inv_fps = T::lit(1.0 / spec.fps);
    let mut out = Matrix::zeros(frames.rows(), 3 * joints);
    let mut yaw = initial_yaw;
    let (mut rx, mut rz) = initial_root;
    for n in 0..frames.rows() {
        let row = frames.row(n);
        let h = row[3];
        let o = out.row_mut(n);
        o[0] = rx;
        o[1] = h;
        o[2] = rz;
        for j in 1..joints {
            let base = 4 + 3 * (j - 1);
            let (x, z) = rotate(yaw, row[base], row[base + 2]);
            o[3 * j] = x + rx;
            o[3 * j + 1] = row[base + 1] + h;
            o[3 * j + 2] = z + rz;
        }
        let (dx, dz) = rotate(yaw, row[1], row[2]);
        rx += dx * inv_fps;
        rz += dz * inv_fps;
        yaw += row[0] * inv_fps;
    }
    JointTrajectory::new(joints, out)
}

/// Heading of one frame from the summed right-to-left across vectors of the lateral pairs.
pub fn facing_yaw<T: Scalar>(traj: &JointTrajectory<T>, spec: &RepresentationSpec, frame: usize) -> f64 {
    let (mut ax, mut az) = (0.0, 0.0);
    for (l, r) in spec.lateral_pairs() {
        let (pl, pr) = (traj.joint(frame, l), traj.joint(frame, r));
        ax += pr[0].as_f64() - pl[0].as_f64();
        az += pr[2].as_f64() - pl[2].as_f64();
    }
    // forward = up x across
    az.atan2(-ax)
}

/// Representation of a joint trajectory. Exact left inverse of
/// [`to_joint_positions`] on canonical trajectories (see [`canonicalize`]).
pub fn from_joint_positions<T: Scalar>(
    traj: &JointTrajectory<T>,
    spec: RepresentationSpec,
) -> Result<MotionSequence<T>> {
    spec.validate()?;
    if traj.joints != spec.joints {
        return Err(Error::Shape(format!(
            "trajectory has {} joints, representation expects {}",
            traj.joints, spec.joints
        )));
    }
    let n = traj.frames();
    if n == 0 {
        return Err(Error::Invalid("trajectory has no frames".into()));
    }
    if let Some(frame) = traj.positions.first_non_finite_row() {
        return Err(Error::NonFiniteFrame { frame });
    }
    let yaw: Vec<f64> = (0..n).map(|f| facing_yaw(traj, &spec, f)).collect();
    let fps = spec.fps;
    let mut frames = Matrix::<T>::zeros(n, spec.dim());
    for f in 0..n {
        let root = traj.joint(f, 0).map(|v| v.as_f64());
        let (omega, vx, vz) = if n == 1 {
            (0.0, 0.0, 0.0)
        } else {
            let k = if f + 1 < n { f } else { f - 1 };
            let a = traj.joint(k, 0).map(|v| v.as_f64());
            let b = traj.joint(k + 1, 0).map(|v| v.as_f64());
            let (lx, lz) = rotate(-yaw[k], b[0] - a[0], b[2] - a[2]);
            (wrap_angle(yaw[k + 1] - yaw[k]) * fps, lx * fps, lz * fps)
        };
        let row = frames.row_mut(f);
        row[0] = T::lit(omega);
        row[1] = T::lit(vx);
        row[2] = T::lit(vz);
        row[3] = T::lit(root[1]);
        for j in 1..spec.joints {
            let p = traj.joint(f, j).map(|v| v.as_f64());
            let (lx, lz) = rotate(-yaw[f], p[0] - root[0], p[2] - root[2]);
            let base = 4 + 3 * (j - 1);
            row[base] = T::lit(lx);
            row[base + 1] = T::lit(p[1] - root[1]);
            row[base + 2] = T::lit(lz);
        }
    }
    MotionSequence::new(frames, spec)
}

/// Rotate every joint about the vertical axis through the origin by `angle`.
pub fn rotate_about_vertical<T: Scalar>(traj: &JointTrajectory<T>, angle: f64) -> JointTrajectory<T> {
    let mut out = traj.clone();
    let a = T::lit(angle);
    for f in 0..traj.frames() {
        let row = out.positions.row_mut(f);
        for j in 0..traj.joints {
            let (x, z) = rotate(a, row[3 * j], row[3 * j + 2]);
            row[3 * j] = x;
            row[3 * j + 2] = z;
        }
    }
    out
}

/// Move the first frame's root to the planar origin and turn it to heading 0.
pub fn canonicalize<T: Scalar>(traj: &JointTrajectory<T>, spec: &RepresentationSpec) -> JointTrajectory<T> {
    if traj.frames() == 0 {
        return traj.clone();
    }
    let yaw0 = facing_yaw(traj, spec, 0);
    let root0 = traj.joint(0, 0);
    let mut shifted = traj.clone();
    for f in 0..traj.frames() {
        let row = shifted.positions.row_mut(f);
        for j in 0..traj.joints {
            row[3 * j] -= root0[0];
            row[3 * j + 2] -= root0[2];
        }
    }
    rotate_about_vertical(&shifted, -yaw0)
}
