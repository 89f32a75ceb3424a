//! Orthographic view projection and the redundant 2D feature representation.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{check_positions, contacts_from_positions, ContactThresholds, MotionFeatures};
use crate::layout::{Domain, FeatureLayout};
use crate::skeleton::Skeleton;

/// Camera direction for a projection. Yaw views orbit the vertical axis and
/// keep the vertical image axis; the top view looks straight down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// Yaw in degrees: 0 front, 90 left, 180 back, 270 right.
    Yaw(f64),
    Top,
}

impl View {
    pub const FRONT: View = View::Yaw(0.0);
    pub const LEFT: View = View::Yaw(90.0);
    pub const BACK: View = View::Yaw(180.0);
    pub const RIGHT: View = View::Yaw(270.0);

    /// The four training views.
    pub fn default_set() -> Vec<View> {
        vec![View::FRONT, View::LEFT, View::BACK, View::RIGHT]
    }

    /// Short label used in file names.
    pub fn label(&self) -> String {
        match self {
            View::Yaw(d) => format!("yaw{}", d.round() as i64),
            View::Top => "top".to_string(),
        }
    }
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let quarter = deg / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Projects `N × J × 3` world positions to `N × J × 2` image coordinates
/// (horizontal, vertical).
pub fn project_view(positions: &Array3<f64>, view: View) -> Result<Array3<f64>> {
    if positions.dim().2 != 3 {
        return Err(Error::Validation("projection needs 3D positions".into()));
    }
    if positions.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite joint position".into()));
    }
    let (n, j, _) = positions.dim();
    let mut out = Array3::zeros((n, j, 2));
    match view {
        View::Yaw(deg) => {
            let (s, c) = sin_cos_deg(deg);
            for k in 0..n {
                for jj in 0..j {
                    let x = positions[[k, jj, 0]];
                    let y = positions[[k, jj, 1]];
                    let z = positions[[k, jj, 2]];
                    out[[k, jj, 0]] = x * c + z * s;
                    out[[k, jj, 1]] = y;
                }
            }
        }
        View::Top => {
            for k in 0..n {
                for jj in 0..j {
                    out[[k, jj, 0]] = positions[[k, jj, 0]];
                    out[[k, jj, 1]] = positions[[k, jj, 2]];
                }
            }
        }
    }
    Ok(out)
}

/// 2D features plus the frames where some bone projected to zero length.
#[derive(Clone, Debug)]
pub struct Features2d {
    pub features: MotionFeatures,
    pub degenerate_frames: Vec<bool>,
}

const DEGENERATE_BONE: f64 = 1e-9;

/// Image-plane positions (`N × J × 2`) to redundant 2D features.
pub fn compute_features_2d(
    positions2d: &Array3<f64>,
    skeleton: &Skeleton,
    thresholds: ContactThresholds,
) -> Result<Features2d> {
    check_positions(positions2d, skeleton.joint_count(), 2)?;
    let n = positions2d.dim().0;
    let layout = FeatureLayout::new(Domain::TwoD, skeleton.non_root_count());
    let root = skeleton.root();
    let joints = skeleton.non_root_joints();
    let contacts = contacts_from_positions(positions2d, skeleton, thresholds);
    let mut data = Array2::<f64>::zeros((n - 1, layout.dim()));
    let mut degenerate = vec![false; n - 1];
    let (pos0, vel0, rot0, c0) = (
        layout.positions().start,
        layout.velocities().start,
        layout.rotations().start,
        layout.contacts().start,
    );
    for k in 0..n - 1 {
        let mut row = data.row_mut(k);
        for d in 0..2 {
            row[d] = positions2d[[k + 1, root, d]] - positions2d[[k, root, d]];
        }
        for (slot, &j) in joints.iter().enumerate() {
            for d in 0..2 {
                row[pos0 + 2 * slot + d] = positions2d[[k, j, d]] - positions2d[[k, root, d]];
                row[vel0 + 2 * slot + d] = positions2d[[k + 1, j, d]] - positions2d[[k, j, d]];
            }
            let parent = skeleton.parents[j].expect("non-root joint has a parent");
            let bu = positions2d[[k, j, 0]] - positions2d[[k, parent, 0]];
            let bv = positions2d[[k, j, 1]] - positions2d[[k, parent, 1]];
            let len = bu.hypot(bv);
            // Angle to the image vertical: (cos, sin) = (bv, bu) / |b|.
            let (c, s) = if len < DEGENERATE_BONE {
                degenerate[k] = true;
                (1.0, 0.0)
            } else {
                (bv / len, bu / len)
            };
            row[rot0 + 2 * slot] = c;
            row[rot0 + 2 * slot + 1] = s;
        }
        for c in 0..4 {
            row[c0 + c] = contacts[[k, c]];
        }
    }
    Ok(Features2d {
        features: MotionFeatures::new(layout, data)?,
        degenerate_frames: degenerate,
    })
}

/// Uniform draw from a non-empty view set.
pub fn sample_random_view<R: Rng + ?Sized>(rng: &mut R, views: &[View]) -> Result<View> {
    if views.is_empty() {
        return Err(Error::Config("view set is empty".into()));
    }
    Ok(views[rng.random_range(0..views.len())])
}
