//! Skeleton definition and HumanML3D-style per-frame motion features.
//!
//! A frame is laid out as
//! `[r_a, r_x, r_z, r_y | joint positions (3J) | joint velocities (3J) |
//! joint rotations (6J) | foot contacts (4)]`, where positions, velocities
//! and rotations are expressed in the root's heading frame. Velocities are
//! forward differences; the last frame repeats the previous one.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub type Vec3 = [f64; 3];

/// Default contact threshold in meters per frame (at 20 fps).
pub const DEFAULT_CONTACT_THRESHOLD: f64 = 0.02;
pub const DEFAULT_FPS: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    /// `None` only for joint 0.
    pub parent_index: Vec<Option<usize>>,
    /// Rest length of the bone ending at each joint; joint 0 stores the
    /// standing root height.
    pub bone_lengths: Vec<f64>,
    /// `[(left_heel, left_toe), (right_heel, right_toe)]`
    pub heel_toe_indices: [(usize, usize); 2],
}

impl SkeletonSpec {
    /// Eight-joint desk skeleton: root (pelvis), head, two hands, two heels,
    /// two toes.
    pub fn desk() -> Self {
        let names = ["root", "head", "left_hand", "right_hand", "left_heel", "right_heel", "left_toe", "right_toe"];
        let parents = vec![None, Some(0), Some(0), Some(0), Some(0), Some(0), Some(4), Some(5)];
        let rest = rest_offsets();
        let mut bone_lengths = vec![ROOT_HEIGHT];
        for (j, parent) in parents.iter().enumerate().skip(1) {
            let p = parent.expect("non-root joint has a parent");
            bone_lengths.push(norm(sub(rest[j], rest[p])));
        }
        Self {
            joint_names: names.iter().map(|s| s.to_string()).collect(),
            parent_index: parents,
            bone_lengths,
            heel_toe_indices: [(4, 6), (5, 7)],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_joints();
        if n == 0 || self.parent_index.len() != n || self.bone_lengths.len() != n {
            return Err(Error::InvalidArgument("skeleton arrays must have one entry per joint".into()));
        }
        if self.parent_index[0].is_some() {
            return Err(Error::InvalidArgument("joint 0 must be the root".into()));
        }
        for (j, p) in self.parent_index.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return Err(Error::InvalidArgument(format!("joint {j} must have a parent with a smaller index"))),
            }
        }
        if self.bone_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidArgument("bone lengths must be positive".into()));
        }
        for (h, t) in self.heel_toe_indices {
            if h >= n || t >= n {
                return Err(Error::InvalidArgument("heel/toe index out of range".into()));
            }
        }
        Ok(())
    }
}

pub(crate) const ROOT_HEIGHT: f64 = 0.95;

/// Rest-pose joint positions for a figure at the origin facing +Z.
pub(crate) fn rest_offsets() -> [Vec3; 8] {
    [
        [0.0, ROOT_HEIGHT, 0.0],
        [0.0, 1.65, 0.02],
        [0.22, 0.85, 0.05],
        [-0.22, 0.85, 0.05],
        [0.1, 0.06, -0.03],
        [-0.1, 0.06, -0.03],
        [0.1, 0.02, 0.13],
        [-0.1, 0.02, 0.13],
    ]
}

/// Offsets of each block inside a frame vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub joints: usize,
}

impl FeatureLayout {
    pub fn new(joints: usize) -> Self {
        Self { joints }
    }

    pub fn from_dim(dim: usize) -> Option<Self> {
        (dim >= 8 && (dim - 8).is_multiple_of(12)).then(|| Self::new((dim - 8) / 12))
    }

    pub fn dim(&self) -> usize {
        8 + 12 * self.joints
    }

    pub const ROOT_ANGULAR: usize = 0;
    pub const ROOT_X: usize = 1;
    pub const ROOT_Z: usize = 2;
    pub const ROOT_Y: usize = 3;

    pub fn positions(&self) -> usize {
        4
    }

    pub fn velocities(&self) -> usize {
        4 + 3 * self.joints
    }

    pub fn rotations(&self) -> usize {
        4 + 6 * self.joints
    }

    pub fn contacts(&self) -> usize {
        4 + 12 * self.joints
    }
}

/// A sequence of feature frames, one row per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub frames: Mat,
    pub fps: f64,
}

impl MotionSequence {
    pub fn new(frames: Mat, fps: f64) -> Result<Self> {
        let m = Self { frames, fps };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::from_dim(self.frames.cols()).expect("validated feature dimension")
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.rows() == 0 {
            return Err(Error::TooFewFrames { needed: 1, got: 0 });
        }
        let layout = FeatureLayout::from_dim(self.frames.cols())
            .ok_or_else(|| Error::ShapeMismatch(format!("frame dimension {} is not 8 + 12·J", self.frames.cols())))?;
        if !self.frames.is_finite() {
            return Err(Error::NonFinite("motion frames".into()));
        }
        for r in 0..self.frames.rows() {
            let c = &self.frames.row(r)[layout.contacts()..];
            if c.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!("contact flags of frame {r} are not binary")));
            }
        }
        Ok(())
    }

    /// Frames `start..end` as a standalone sequence.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self { frames: self.frames.slice_rows(start, end - start), fps: self.fps }
    }

    /// Integrates root angular and linear velocities from `start`.
    pub fn root_trajectory(&self, start: RootState) -> Vec<(Vec3, f64)> {
        let mut yaw = start.yaw;
        let mut x = start.x;
        let mut z = start.z;
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let f = self.frames.row(i);
            out.push(([x, f[FeatureLayout::ROOT_Y], z], yaw));
            let (dx, dz) = rotate_y(yaw, f[FeatureLayout::ROOT_X], f[FeatureLayout::ROOT_Z]);
            x += dx;
            z += dz;
            yaw += f[FeatureLayout::ROOT_ANGULAR];
        }
        out
    }

    /// World-space joint positions recovered from root integration and the
    /// root-relative joint positions.
    pub fn joint_positions(&self, start: RootState) -> Vec<Vec<Vec3>> {
        let layout = self.layout();
        self.root_trajectory(start)
            .into_iter()
            .enumerate()
            .map(|(i, (root, yaw))| {
                let f = self.frames.row(i);
                (0..layout.joints)
                    .map(|j| {
                        let o = layout.positions() + 3 * j;
                        let (wx, wz) = rotate_y(yaw, f[o], f[o + 2]);
                        [root[0] + wx, f[o + 1], root[2] + wz]
                    })
                    .collect()
            })
            .collect()
    }

    /// Snaps contact channels to {0, 1} and re-orthonormalizes every 6D
    /// rotation. Used on decoder output.
    pub fn sanitize(mut self) -> Self {
        let layout = self.layout();
        for r in 0..self.frames.rows() {
            let row = self.frames.row_mut(r);
            for c in &mut row[layout.contacts()..] {
                *c = if *c >= 0.5 { 1.0 } else { 0.0 };
            }
            for j in 0..layout.joints {
                let o = layout.rotations() + 6 * j;
                let (a, b) = gram_schmidt([row[o], row[o + 1], row[o + 2]], [row[o + 3], row[o + 4], row[o + 5]]);
                row[o..o + 3].copy_from_slice(&a);
                row[o + 3..o + 6].copy_from_slice(&b);
            }
        }
        self
    }
}

/// Initial root placement for trajectory integration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RootState {
    pub x: f64,
    pub z: f64,
    pub yaw: f64,
}

/// Rotates the XZ vector `(x, z)` by `yaw` about +Y; `yaw = 0` faces +Z.
#[inline]
pub fn rotate_y(yaw: f64, x: f64, z: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (c * x + s * z, -s * x + c * z)
}

#[inline]
fn inverse_rotate_y(yaw: f64, x: f64, z: f64) -> (f64, f64) {
    rotate_y(-yaw, x, z)
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    (n > 1e-9).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Orthonormalizes `(a, b)` into the first two columns of a rotation.
pub fn gram_schmidt(a: Vec3, b: Vec3) -> (Vec3, Vec3) {
    let a = normalize(a).unwrap_or([1.0, 0.0, 0.0]);
    let d = dot3(a, b);
    let b_perp = [b[0] - d * a[0], b[1] - d * a[1], b[2] - d * a[2]];
    let b = normalize(b_perp).unwrap_or_else(|| {
        let fallback = if a[1].abs() < 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
        let d = dot3(a, fallback);
        normalize([fallback[0] - d * a[0], fallback[1] - d * a[1], fallback[2] - d * a[2]]).expect("fallback axis is independent")
    });
    (a, b)
}

/// Binary contact flags: 1 where the speed is strictly below `threshold`.
pub fn foot_contacts(speeds: &[[f64; 4]], threshold: f64) -> Result<Vec<[u8; 4]>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument("contact threshold must be positive".into()));
    }
    speeds
        .iter()
        .map(|s| {
            if s.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidArgument("speeds must be finite and non-negative".into()));
            }
            Ok(s.map(|v| u8::from(v < threshold)))
        })
        .collect()
}

fn heading(frame: &[Vec3], skeleton: &SkeletonSpec) -> Option<f64> {
    let mut fx = 0.0;
    let mut fz = 0.0;
    for (h, t) in skeleton.heel_toe_indices {
        fx += frame[t][0] - frame[h][0];
        fz += frame[t][2] - frame[h][2];
    }
    ((fx * fx + fz * fz).sqrt() > 1e-9).then(|| fx.atan2(fz))
}

/// Converts raw world-space joint positions (`L × J` points) into features.
///
/// The heading is taken from the averaged heel→toe direction of both feet.
pub fn extract_features(raw: &[Vec<Vec3>], skeleton: &SkeletonSpec, contact_threshold: f64, fps: f64) -> Result<MotionSequence> {
    skeleton.validate()?;
    let n = skeleton.num_joints();
    if raw.len() < 2 {
        return Err(Error::TooFewFrames { needed: 2, got: raw.len() });
    }
    for (i, f) in raw.iter().enumerate() {
        if f.len() != n {
            return Err(Error::ShapeMismatch(format!("frame {i} has {} joints, skeleton has {n}", f.len())));
        }
        if f.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("raw positions of frame {i}")));
        }
    }
    let len = raw.len();
    let layout = FeatureLayout::new(n);

    let mut yaw = Vec::with_capacity(len);
    let mut last = 0.0;
    for f in raw {
        let y = heading(f, skeleton).unwrap_or(last);
        yaw.push(y);
        last = y;
    }

    let step = |i: usize| if i + 1 < len { i } else { i - 1 };
    let mut speeds = Vec::with_capacity(len);
    for i in 0..len {
        let k = step(i);
        let mut s = [0.0; 4];
        for (p, (h, t)) in skeleton.heel_toe_indices.iter().enumerate() {
            s[2 * p] = norm(sub(raw[k + 1][*h], raw[k][*h]));
            s[2 * p + 1] = norm(sub(raw[k + 1][*t], raw[k][*t]));
        }
        speeds.push(s);
    }
    let contacts = foot_contacts(&speeds, contact_threshold)?;

    let mut frames = Mat::zeros(len, layout.dim());
    for i in 0..len {
        let k = step(i);
        let th = yaw[i];
        let root = raw[i][0];
        let row = frames.row_mut(i);
        row[FeatureLayout::ROOT_ANGULAR] = wrap_angle(yaw[k + 1] - yaw[k]);
        let d = sub(raw[k + 1][0], raw[k][0]);
        let (lx, lz) = inverse_rotate_y(yaw[k], d[0], d[2]);
        row[FeatureLayout::ROOT_X] = lx;
        row[FeatureLayout::ROOT_Z] = lz;
        row[FeatureLayout::ROOT_Y] = root[1];
        for j in 0..n {
            let p = raw[i][j];
            let (px, pz) = inverse_rotate_y(th, p[0] - root[0], p[2] - root[2]);
            let o = layout.positions() + 3 * j;
            row[o..o + 3].copy_from_slice(&[px, p[1], pz]);

            let v = sub(raw[k + 1][j], raw[k][j]);
            let (vx, vz) = inverse_rotate_y(th, v[0], v[2]);
            let o = layout.velocities() + 3 * j;
            row[o..o + 3].copy_from_slice(&[vx, v[1], vz]);

            let (c0, c1) = match skeleton.parent_index[j] {
                None => ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
                Some(parent) => {
                    let bone = sub(p, raw[i][parent]);
                    let (bx, bz) = inverse_rotate_y(th, bone[0], bone[2]);
                    gram_schmidt([bx, bone[1], bz], [0.0, 0.0, 1.0])
                }
            };
            let o = layout.rotations() + 6 * j;
            row[o..o + 3].copy_from_slice(&c0);
            row[o + 3..o + 6].copy_from_slice(&c1);
        }
        let o = layout.contacts();
        for (c, flag) in row[o..o + 4].iter_mut().zip(contacts[i]) {
            *c = f64::from(flag);
        }
    }
    MotionSequence::new(frames, fps)
}

/// Per-dimension normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    const STD_FLOOR: f64 = 1e-2;

    pub fn fit<'a>(motions: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in motions {
            if sum.is_empty() {
                sum = vec![0.0; m.frames.cols()];
                sq = vec![0.0; m.frames.cols()];
            }
            for r in 0..m.len() {
                for (k, v) in m.frames.row(r).iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            count += m.len();
        }
        if count == 0 {
            return Err(Error::EmptyCorpus);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(Self::STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn normalize(&self, frames: &Mat) -> Mat {
        Mat::from_fn(frames.rows(), frames.cols(), |r, c| (frames.get(r, c) - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, frames: &Mat) -> Mat {
        Mat::from_fn(frames.rows(), frames.cols(), |r, c| frames.get(r, c) * self.std[c] + self.mean[c])
    }
}

/// Standalone playback export: skeleton plus raw joint positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionExport {
    pub skeleton: SkeletonSpec,
    pub fps: f64,
    pub positions: Vec<Vec<Vec3>>,
}

impl MotionExport {
    pub fn from_motion(motion: &MotionSequence, skeleton: &SkeletonSpec) -> Self {
        Self { skeleton: skeleton.clone(), fps: motion.fps, positions: motion.joint_positions(RootState::default()) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Synthesizes raw positions for the rest pose carried along a known root
    /// trajectory (the analytic oracle for root features).
    fn trajectory(len: usize, yaw_rate: f64, velocity: (f64, f64)) -> (Vec<Vec<Vec3>>, Vec<(f64, f64, f64)>) {
        let rest = rest_offsets();
        let mut raw = Vec::new();
        let mut roots = Vec::new();
        let (mut x, mut z, mut yaw) = (0.3, -0.2, 0.1);
        for _ in 0..len {
            roots.push((x, z, yaw));
            raw.push(
                rest.iter()
                    .map(|o| {
                        let (wx, wz) = rotate_y(yaw, o[0], o[2]);
                        [x + wx, o[1], z + wz]
                    })
                    .collect(),
            );
            let (dx, dz) = rotate_y(yaw, velocity.0, velocity.1);
            x += dx;
            z += dz;
            yaw += yaw_rate;
        }
        (raw, roots)
    }

    #[test]
    fn stationary_pose_has_zero_root_motion_and_full_contact() {
        let (raw, _) = trajectory(10, 0.0, (0.0, 0.0));
        let m = extract_features(&raw, &SkeletonSpec::desk(), DEFAULT_CONTACT_THRESHOLD, DEFAULT_FPS).unwrap();
        let layout = m.layout();
        assert_eq!(m.frames.cols(), 104);
        for r in 0..10 {
            let f = m.frames.row(r);
            assert_eq!(&f[0..3], &[0.0, 0.0, 0.0]);
            assert!(f[layout.velocities()..layout.rotations()].iter().all(|&v| v == 0.0));
            assert_eq!(&f[layout.contacts()..], &[1.0; 4]);
        }
    }

    #[test]
    fn pure_yaw_rotation_gives_constant_angular_velocity() {
        let omega = 0.05;
        let (raw, _) = trajectory(12, omega, (0.0, 0.0));
        let m = extract_features(&raw, &SkeletonSpec::desk(), DEFAULT_CONTACT_THRESHOLD, DEFAULT_FPS).unwrap();
        for r in 0..12 {
            let f = m.frames.row(r);
            assert!((f[0] - omega).abs() < 1e-12, "frame {r}: {}", f[0]);
            assert!(f[1].abs() < 1e-12 && f[2].abs() < 1e-12);
        }
    }

    #[test]
    fn translation_gives_local_linear_velocity() {
        let (raw, _) = trajectory(8, 0.0, (0.1, 0.2));
        // trajectory() starts with yaw 0.1; build a yaw-0 copy for the exact example.
        let raw0: Vec<Vec<Vec3>> = (0..8)
            .map(|i| rest_offsets().iter().map(|o| [o[0] + 0.1 * i as f64, o[1], o[2] + 0.2 * i as f64]).collect())
            .collect();
        let m = extract_features(&raw0, &SkeletonSpec::desk(), DEFAULT_CONTACT_THRESHOLD, DEFAULT_FPS).unwrap();
        for r in 0..8 {
            let f = m.frames.row(r);
            assert!((f[1] - 0.1).abs() < 1e-12 && (f[2] - 0.2).abs() < 1e-12);
        }
        // Rotated start: local velocity is still (0.1, 0.2).
        let m = extract_features(&raw, &SkeletonSpec::desk(), DEFAULT_CONTACT_THRESHOLD, DEFAULT_FPS).unwrap();
        assert!((m.frames.get(3, 1) - 0.1).abs() < 1e-12 && (m.frames.get(3, 2) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn root_integration_recovers_raw_trajectory() {
        let (raw, roots) = trajectory(40, 0.07, (0.02, 0.05));
        let m = extract_features(&raw, &SkeletonSpec::desk(), DEFAULT_CONTACT_THRESHOLD, DEFAULT_FPS).unwrap();
        let (x0, z0, yaw0) = roots[0];
        let rec = m.root_trajectory(RootState { x: x0, z: z0, yaw: yaw0 });
        for (i, (p, _)) in rec.iter().enumerate() {
            let err = ((p[0] - raw[i][0][0]).powi(2) + (p[1] - raw[i][0][1]).powi(2) + (p[2] - raw[i][0][2]).powi(2)).sqrt();
            assert!(err < 1e-6, "frame {i}: {err}");
        }
        let joints = m.joint_positions(RootState { x: x0, z: z0, yaw: yaw0 });
        for (i, frame) in joints.iter().enumerate() {
            for (j, p) in frame.iter().enumerate() {
                assert!(norm(sub(*p, raw[i][j])) < 1e-6);
            }
        }
    }

    #[test]
    fn rotations_are_unit_and_contacts_binary() {
        let (raw, _) = trajectory(20, 0.2, (0.05, 0.05));
        let m = extract_features(&raw, &SkeletonSpec::desk(), DEFAULT_CONTACT_THRESHOLD, DEFAULT_FPS).unwrap();
        let layout = m.layout();
        for r in 0..m.len() {
            let f = m.frames.row(r);
            for j in 0..layout.joints {
                let o = layout.rotations() + 6 * j;
                for v in [&f[o..o + 3], &f[o + 3..o + 6]] {
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((n - 1.0).abs() <= 1e-6);
                }
            }
            assert!(f[layout.contacts()..].iter().all(|&c| c == 0.0 || c == 1.0));
        }
    }

    #[test]
    fn foot_contact_threshold_is_strict() {
        let t = DEFAULT_CONTACT_THRESHOLD;
        assert_eq!(foot_contacts(&[[0.0; 4]], t).unwrap(), vec![[1, 1, 1, 1]]);
        assert_eq!(foot_contacts(&[[0.5; 4]], t).unwrap(), vec![[0, 0, 0, 0]]);
        assert_eq!(foot_contacts(&[[0.01, 0.03, 0.02, 0.019]], t).unwrap(), vec![[1, 0, 0, 1]]);
        assert!(foot_contacts(&[[-0.1, 0.0, 0.0, 0.0]], t).is_err());
        assert!(foot_contacts(&[[0.0; 4]], 0.0).is_err());
    }

    #[test]
    fn extraction_errors() {
        let sk = SkeletonSpec::desk();
        let (raw, _) = trajectory(3, 0.0, (0.0, 0.0));
        assert!(matches!(extract_features(&raw[..1], &sk, 0.02, 20.0), Err(Error::TooFewFrames { .. })));
        let mut bad = raw.clone();
        bad[1].pop();
        assert!(matches!(extract_features(&bad, &sk, 0.02, 20.0), Err(Error::ShapeMismatch(_))));
        let mut nan = raw;
        nan[2][3][1] = f64::NAN;
        assert!(matches!(extract_features(&nan, &sk, 0.02, 20.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn desk_skeleton_is_valid() {
        let sk = SkeletonSpec::desk();
        sk.validate().unwrap();
        assert_eq!(FeatureLayout::new(sk.num_joints()).dim(), 104);
    }
}
