//! Redundant 3D motion features and their inverse.
//!
//! Each feature frame `k` describes frame `k` of the input together with the
//! forward difference to frame `k + 1`, so `N` position frames yield `N - 1`
//! feature frames. Everything except the root block is expressed in the
//! heading-local frame: origin at the root, rotated about the vertical axis so
//! that the pose faces +Z.

use nalgebra::{Rotation3, Unit, Vector3};
use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Domain, FeatureLayout};
use crate::skeleton::Skeleton;

/// Squared-speed thresholds below which a heel/toe counts as planted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactThresholds {
    pub heel: f64,
    pub toe: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        Self { heel: 2e-3, toe: 2e-3 }
    }
}

impl ContactThresholds {
    /// Thresholds in the contact-label order of [`Skeleton::foot_joints`].
    pub fn per_label(&self) -> [f64; 4] {
        [self.heel, self.toe, self.heel, self.toe]
    }
}

/// A feature sequence, frames × layout dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFeatures {
    pub layout: FeatureLayout,
    pub data: Array2<f64>,
}

impl MotionFeatures {
    pub fn new(layout: FeatureLayout, data: Array2<f64>) -> Result<Self> {
        if data.ncols() != layout.dim() {
            return Err(Error::Validation(format!(
                "{} features need {} columns, got {}",
                layout.domain,
                layout.dim(),
                data.ncols()
            )));
        }
        if data.nrows() == 0 {
            return Err(Error::Length("feature sequence has no frames".into()));
        }
        Ok(Self { layout, data })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn domain(&self) -> Domain {
        self.layout.domain
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checks the invariants of dataset-derived features: finiteness and
    /// binary contacts.
    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        let c = self.layout.contacts();
        if self.data.slice(s![.., c]).iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation("contact labels must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Copy of the columns in `range` (one of the layout blocks).
    pub fn block(&self, range: std::ops::Range<usize>) -> Array2<f64> {
        self.data.slice(s![.., range]).to_owned()
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames() || len == 0 {
            return Err(Error::Length(format!(
                "crop {start}..{} outside {} frames",
                start + len,
                self.frames()
            )));
        }
        Ok(Self {
            layout: self.layout,
            data: self.data.slice(s![start..start + len, ..]).to_owned(),
        })
    }
}

pub(crate) fn check_positions(positions: &Array3<f64>, joints: usize, width: usize) -> Result<()> {
    let (n, j, c) = positions.dim();
    if j != joints || c != width {
        return Err(Error::Validation(format!(
            "positions have shape {n}x{j}x{c}, expected Nx{joints}x{width}"
        )));
    }
    if n < 2 {
        return Err(Error::Length(format!(
            "need at least 2 frames to difference velocities, got {n}"
        )));
    }
    if positions.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite joint position".into()));
    }
    Ok(())
}

fn point(positions: &Array3<f64>, frame: usize, joint: usize) -> Vector3<f64> {
    Vector3::new(
        positions[[frame, joint, 0]],
        positions[[frame, joint, 1]],
        positions[[frame, joint, 2]],
    )
}

/// Rotation about +Y by `angle` radians; maps heading-local to world.
pub fn yaw_rotation(angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), angle)
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Yaw of the facing direction per frame, 0 when facing +Z. Frames with a
/// degenerate across-body vector inherit the previous heading.
pub fn headings(positions: &Array3<f64>, skeleton: &Skeleton) -> Vec<f64> {
    let f = skeleton.facing;
    let mut out = Vec::with_capacity(positions.dim().0);
    let mut last = 0.0;
    for k in 0..positions.dim().0 {
        let across = (point(positions, k, f.right_hip) - point(positions, k, f.left_hip))
            + (point(positions, k, f.right_shoulder) - point(positions, k, f.left_shoulder));
        // forward = up × across
        let fx = across.z;
        let fz = -across.x;
        if fx.hypot(fz) > 1e-9 {
            last = fx.atan2(fz);
        }
        out.push(last);
    }
    out
}

/// Contact labels from squared joint speed, `(N-1) × 4`.
pub fn compute_foot_contacts(
    positions: &Array3<f64>,
    skeleton: &Skeleton,
    thresholds: ContactThresholds,
) -> Result<Array2<f64>> {
    let width = positions.dim().2;
    check_positions(positions, skeleton.joint_count(), width)?;
    Ok(contacts_from_positions(positions, skeleton, thresholds))
}

pub(crate) fn contacts_from_positions(
    positions: &Array3<f64>,
    skeleton: &Skeleton,
    thresholds: ContactThresholds,
) -> Array2<f64> {
    let (n, _, width) = positions.dim();
    let feet = skeleton.foot_joints();
    let limits = thresholds.per_label();
    Array2::from_shape_fn((n - 1, 4), |(k, c)| {
        let joint = feet[c];
        let speed2: f64 = (0..width)
            .map(|d| {
                let v = positions[[k + 1, joint, d]] - positions[[k, joint, d]];
                v * v
            })
            .sum();
        if speed2 < limits[c] {
            1.0
        } else {
            0.0
        }
    })
}

/// Shortest-arc rotation taking the rest bone direction onto `bone`.
fn bone_rotation(rest: &Vector3<f64>, bone: &Vector3<f64>) -> Rotation3<f64> {
    let rest_len = rest.norm();
    let bone_len = bone.norm();
    if rest_len < 1e-12 || bone_len < 1e-12 {
        return Rotation3::identity();
    }
    let a = rest / rest_len;
    let b = bone / bone_len;
    // atan2 instead of acos: the dot product of nearly equal unit vectors
    // can exceed 1 by an ulp.
    let cross = a.cross(&b);
    let sin = cross.norm();
    let cos = a.dot(&b);
    if sin > 1e-12 {
        Rotation3::from_axis_angle(&Unit::new_normalize(cross), sin.atan2(cos))
    } else if cos > 0.0 {
        Rotation3::identity()
    } else {
        // Antiparallel: half turn about any axis perpendicular to the rest direction.
        let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let axis = Unit::new_normalize(a.cross(&helper));
        Rotation3::from_axis_angle(&axis, std::f64::consts::PI)
    }
}

fn six_d(r: &Rotation3<f64>) -> [f64; 6] {
    let m = r.matrix();
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// World-space joint positions (N × J × 3) to redundant 3D features.
pub fn compute_features_3d(
    positions: &Array3<f64>,
    skeleton: &Skeleton,
    thresholds: ContactThresholds,
) -> Result<MotionFeatures> {
    check_positions(positions, skeleton.joint_count(), 3)?;
    let n = positions.dim().0;
    let layout = FeatureLayout::new(Domain::ThreeD, skeleton.non_root_count());
    let root = skeleton.root();
    let joints = skeleton.non_root_joints();
    let heading = headings(positions, skeleton);
    let contacts = contacts_from_positions(positions, skeleton, thresholds);

    let mut data = Array2::<f64>::zeros((n - 1, layout.dim()));
    for k in 0..n - 1 {
        let to_local = yaw_rotation(-heading[k]);
        let root_k = point(positions, k, root);
        let root_next = point(positions, k + 1, root);
        let mut row = data.row_mut(k);

        let v = to_local * (root_next - root_k);
        row[0] = wrap_angle(heading[k + 1] - heading[k]);
        row[1] = v.x;
        row[2] = v.z;
        row[3] = root_k.y;

        let pos0 = layout.positions().start;
        let vel0 = layout.velocities().start;
        let rot0 = layout.rotations().start;
        for (slot, &j) in joints.iter().enumerate() {
            let p = to_local * (point(positions, k, j) - root_k);
            let dv = to_local * (point(positions, k + 1, j) - point(positions, k, j));
            for d in 0..3 {
                row[pos0 + 3 * slot + d] = p[d];
                row[vel0 + 3 * slot + d] = dv[d];
            }
            let parent = skeleton.parents[j].expect("non-root joint has a parent");
            let bone = to_local * (point(positions, k, j) - point(positions, k, parent));
            let rest = Vector3::from(skeleton.offsets[j]);
            let r6 = six_d(&bone_rotation(&rest, &bone));
            for (d, v) in r6.iter().enumerate() {
                row[rot0 + 6 * slot + d] = *v;
            }
        }
        let c0 = layout.contacts().start;
        for c in 0..4 {
            row[c0 + c] = contacts[[k, c]];
        }
    }
    MotionFeatures::new(layout, data)
}

/// Integrated root trajectory: heading per frame and root position, starting
/// at the origin (X = 0, Z = 0) facing +Z.
pub fn recover_root(features: &MotionFeatures) -> Result<(Vec<f64>, Vec<Vector3<f64>>)> {
    if features.domain() != Domain::ThreeD {
        return Err(Error::Validation("root recovery needs 3D features".into()));
    }
    let n = features.frames();
    let mut headings = Vec::with_capacity(n);
    let mut roots = Vec::with_capacity(n);
    let mut theta = 0.0;
    let mut xz = Vector3::zeros();
    for k in 0..n {
        let row = features.data.row(k);
        headings.push(theta);
        roots.push(Vector3::new(xz.x, row[3], xz.z));
        let step = yaw_rotation(theta) * Vector3::new(row[1], 0.0, row[2]);
        xz += step;
        theta += row[0];
    }
    Ok((headings, roots))
}

/// Inverse of [`compute_features_3d`] up to the global frame: one position
/// frame per feature frame.
pub fn recover_positions_3d(features: &MotionFeatures, skeleton: &Skeleton) -> Result<Array3<f64>> {
    if features.layout != FeatureLayout::new(Domain::ThreeD, skeleton.non_root_count()) {
        return Err(Error::Validation(format!(
            "features ({} dim {}) do not match a {}-joint skeleton",
            features.domain(),
            features.layout.dim(),
            skeleton.joint_count()
        )));
    }
    let (headings, roots) = recover_root(features)?;
    let n = features.frames();
    let root = skeleton.root();
    let joints = skeleton.non_root_joints();
    let pos0 = features.layout.positions().start;
    let mut out = Array3::<f64>::zeros((n, skeleton.joint_count(), 3));
    for k in 0..n {
        let to_world = yaw_rotation(headings[k]);
        let row = features.data.row(k);
        for d in 0..3 {
            out[[k, root, d]] = roots[k][d];
        }
        for (slot, &j) in joints.iter().enumerate() {
            let local = Vector3::new(row[pos0 + 3 * slot], row[pos0 + 3 * slot + 1], row[pos0 + 3 * slot + 2]);
            let p = roots[k] + to_world * local;
            for d in 0..3 {
                out[[k, j, d]] = p[d];
            }
        }
    }
    Ok(out)
}

/// Moves frame 0's root to X = Z = 0 and rotates it to face +Z, the frame
/// [`recover_positions_3d`] reconstructs into.
pub fn canonicalize(positions: &Array3<f64>, skeleton: &Skeleton) -> Array3<f64> {
    let heading = headings(positions, skeleton)[0];
    let root = skeleton.root();
    let origin = Vector3::new(positions[[0, root, 0]], 0.0, positions[[0, root, 2]]);
    let rot = yaw_rotation(-heading);
    let mut out = positions.clone();
    let (n, j, _) = positions.dim();
    for k in 0..n {
        for jj in 0..j {
            let p = rot * (point(positions, k, jj) - origin);
            for d in 0..3 {
                out[[k, jj, d]] = p[d];
            }
        }
    }
    out
}

/// Per-dimension z-normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub layout: FeatureLayout,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Lower bound applied to every standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

impl FeatureStats {
    /// Mean and (population) standard deviation over every frame of `sequences`.
    pub fn compute<'a, I>(sequences: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a MotionFeatures>,
    {
        let mut layout = None;
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let seqs: Vec<&MotionFeatures> = sequences.into_iter().collect();
        for seq in &seqs {
            match layout {
                None => {
                    layout = Some(seq.layout);
                    sum = vec![0.0; seq.layout.dim()];
                }
                Some(l) if l != seq.layout => return Err(Error::Validation("mixed layouts in stats input".into())),
                _ => {}
            }
            for row in seq.data.axis_iter(Axis(0)) {
                for (s, v) in sum.iter_mut().zip(row.iter()) {
                    *s += v;
                }
            }
            count += seq.frames();
        }
        let layout = layout.ok_or_else(|| Error::Data("no sequences for statistics".into()))?;
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; layout.dim()];
        for seq in &seqs {
            for row in seq.data.axis_iter(Axis(0)) {
                for ((acc, v), m) in var.iter_mut().zip(row.iter()).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { layout, mean, std })
    }

    fn check(&self, layout: FeatureLayout) -> Result<()> {
        if layout != self.layout {
            return Err(Error::Validation(format!(
                "stats for {} dim {} applied to {} dim {}",
                self.layout.domain,
                self.layout.dim(),
                layout.domain,
                layout.dim()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, features: &MotionFeatures) -> Result<MotionFeatures> {
        self.check(features.layout)?;
        Ok(MotionFeatures {
            layout: features.layout,
            data: self.normalize_view(features.data.view()),
        })
    }

    pub fn denormalize(&self, features: &MotionFeatures) -> Result<MotionFeatures> {
        self.check(features.layout)?;
        Ok(MotionFeatures {
            layout: features.layout,
            data: self.denormalize_view(features.data.view()),
        })
    }

    pub(crate) fn normalize_view(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub(crate) fn denormalize_view(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }

    /// Dimensions whose standard deviation was raised to the floor.
    pub fn floored_dims(&self) -> Vec<usize> {
        self.std
            .iter()
            .enumerate()
            .filter(|(_, s)| **s <= STD_FLOOR)
            .map(|(i, _)| i)
            .collect()
    }
}
