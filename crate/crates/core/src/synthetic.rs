//! Parametric motion synthesis by forward kinematics.
//!
//! Used for the hermetic desk dataset and as a source of smooth random
//! motion in tests. Poses are grounded per frame so the lowest foot joint
//! touches Y = 0.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit, Vector3};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::yaw_rotation;
use crate::skeleton::Skeleton;

/// Root placement plus one local rotation per joint.
#[derive(Clone, Debug)]
pub struct Pose {
    pub root: Vector3<f64>,
    pub yaw: f64,
    pub local: Vec<Rotation3<f64>>,
}

impl Pose {
    pub fn rest(skeleton: &Skeleton) -> Self {
        Self {
            root: Vector3::new(0.0, 0.9, 0.0),
            yaw: 0.0,
            local: vec![Rotation3::identity(); skeleton.joint_count()],
        }
    }
}

fn topological_order(skeleton: &Skeleton) -> Vec<usize> {
    let n = skeleton.joint_count();
    let mut order = vec![skeleton.root()];
    let mut i = 0;
    while i < order.len() {
        let p = order[i];
        order.extend((0..n).filter(|&j| skeleton.parents[j] == Some(p)));
        i += 1;
    }
    order
}

/// Joint world positions of one pose.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &Pose) -> Vec<Vector3<f64>> {
    let n = skeleton.joint_count();
    let mut rot = vec![Rotation3::identity(); n];
    let mut pos = vec![Vector3::zeros(); n];
    for j in topological_order(skeleton) {
        match skeleton.parents[j] {
            None => {
                rot[j] = yaw_rotation(pose.yaw) * pose.local[j];
                pos[j] = pose.root;
            }
            Some(p) => {
                rot[j] = rot[p] * pose.local[j];
                pos[j] = pos[p] + rot[p] * Vector3::from(skeleton.offsets[j]);
            }
        }
    }
    pos
}

/// Stacks poses into an `N × J × 3` array; `ground` shifts each frame so its
/// lowest foot joint sits on Y = 0.
pub fn positions_from_poses(skeleton: &Skeleton, poses: &[Pose], ground: bool) -> Array3<f64> {
    let n = skeleton.joint_count();
    let mut out = Array3::zeros((poses.len(), n, 3));
    let feet = skeleton.foot_joints();
    for (k, pose) in poses.iter().enumerate() {
        let pos = forward_kinematics(skeleton, pose);
        let lift = if ground {
            feet.iter().map(|&f| pos[f].y).fold(f64::INFINITY, f64::min)
        } else {
            0.0
        };
        for (j, p) in pos.iter().enumerate() {
            out[[k, j, 0]] = p.x;
            out[[k, j, 1]] = p.y - lift;
            out[[k, j, 2]] = p.z;
        }
    }
    out
}

fn rx(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a)
}

fn rz(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a)
}

fn joint(skeleton: &Skeleton, name: &str) -> Option<usize> {
    skeleton.names.iter().position(|n| n == name)
}

/// Rest pose with both arms hanging, for skeletons using the HumanML3D
/// joint names (other skeletons keep their rest pose).
fn relaxed(skeleton: &Skeleton) -> Pose {
    let mut pose = Pose::rest(skeleton);
    if let Some(l) = joint(skeleton, "left_shoulder") {
        pose.local[l] = rz(-80f64.to_radians());
    }
    if let Some(r) = joint(skeleton, "right_shoulder") {
        pose.local[r] = rz(80f64.to_radians());
    }
    pose
}

/// The relaxed pose held for `frames` frames.
pub fn static_pose(skeleton: &Skeleton, frames: usize) -> Array3<f64> {
    let poses = vec![relaxed(skeleton); frames];
    positions_from_poses(skeleton, &poses, true)
}

/// Smooth random motion: band-limited root trajectory and heading, and
/// sinusoidal rotations about random axes at every joint.
pub fn random_smooth_motion<R: Rng>(skeleton: &Skeleton, frames: usize, rng: &mut R) -> Array3<f64> {
    let n = skeleton.joint_count();
    struct Wave {
        amp: f64,
        freq: f64,
        phase: f64,
    }
    let wave = |amp: f64, rng: &mut R| Wave {
        amp: amp * rng.random_range(0.3..1.0),
        freq: rng.random_range(0.02..0.15),
        phase: rng.random_range(0.0..2.0 * PI),
    };
    let eval = |w: &Wave, k: f64| w.amp * (2.0 * PI * w.freq * k + w.phase).sin();
    let root_x = wave(1.0, rng);
    let root_z = wave(1.0, rng);
    let root_y = wave(0.05, rng);
    let yaw = wave(PI, rng);
    let axes: Vec<Unit<Vector3<f64>>> = (0..n)
        .map(|_| {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            Unit::new_normalize(v + Vector3::new(1e-3, 0.0, 0.0))
        })
        .collect();
    let angles: Vec<Wave> = (0..n).map(|_| wave(0.6, rng)).collect();
    let base = relaxed(skeleton);
    let root = skeleton.root();
    let poses: Vec<Pose> = (0..frames)
        .map(|k| {
            let t = k as f64;
            let mut pose = base.clone();
            pose.root = Vector3::new(eval(&root_x, t), 0.9 + eval(&root_y, t), eval(&root_z, t));
            pose.yaw = eval(&yaw, t);
            for j in 0..n {
                if j == root {
                    continue;
                }
                pose.local[j] = Rotation3::from_axis_angle(&axes[j], eval(&angles[j], t)) * base.local[j];
            }
            pose
        })
        .collect();
    positions_from_poses(skeleton, &poses, false)
}

/// Motion families of the desk dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    Walk,
    Wave,
    Squat,
    Kick,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 4] = [
        MotionFamily::Walk,
        MotionFamily::Wave,
        MotionFamily::Squat,
        MotionFamily::Kick,
    ];

    pub fn prompt(self) -> &'static str {
        match self {
            MotionFamily::Walk => "a person walks forward",
            MotionFamily::Wave => "a person waves with the right hand",
            MotionFamily::Squat => "a person squats down and stands up",
            MotionFamily::Kick => "a person kicks with the left leg",
        }
    }
}

/// Per-sequence variation of a family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    pub amplitude: f64,
    /// Cycles per frame.
    pub frequency: f64,
    pub phase: f64,
    /// Forward speed in m/frame (walk only).
    pub speed: f64,
    /// Yaw rate in rad/frame (walk only).
    pub turn: f64,
}

impl FamilyParams {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            amplitude: rng.random_range(0.8..1.2),
            frequency: rng.random_range(0.04..0.06),
            phase: rng.random_range(0.0..2.0 * PI),
            speed: rng.random_range(0.05..0.08),
            turn: rng.random_range(-0.01..0.01),
        }
    }
}

/// Renders `frames` frames of a motion family on a HumanML3D-named skeleton.
pub fn family_motion(skeleton: &Skeleton, family: MotionFamily, params: FamilyParams, frames: usize) -> Array3<f64> {
    let idx = |name: &str| joint(skeleton, name);
    let base = relaxed(skeleton);
    let w = 2.0 * PI * params.frequency;
    let a = params.amplitude;
    let poses: Vec<Pose> = (0..frames)
        .map(|k| {
            let t = k as f64;
            let s = (w * t + params.phase).sin();
            let mut pose = base.clone();
            let mut set = |name: &str, r: Rotation3<f64>| {
                if let Some(j) = idx(name) {
                    pose.local[j] = r * base.local[j];
                }
            };
            match family {
                MotionFamily::Walk => {
                    let swing = 0.45 * a * s;
                    set("left_hip", rx(-swing));
                    set("right_hip", rx(swing));
                    set("left_knee", rx(0.6 * a * s.max(0.0)));
                    set("right_knee", rx(0.6 * a * (-s).max(0.0)));
                    set("left_shoulder", rx(0.4 * a * s));
                    set("right_shoulder", rx(-0.4 * a * s));
                    set("left_elbow", rz(-0.2));
                    set("right_elbow", rz(0.2));
                }
                MotionFamily::Wave => {
                    set("right_shoulder", rz(-140f64.to_radians()));
                    set("right_elbow", rz(-0.6 * a * s - 0.3));
                    set("right_wrist", rz(-0.3 * a * s));
                    set("left_shoulder", rx(0.05 * s));
                }
                MotionFamily::Squat => {
                    let d = 0.6 * a * (1.0 - (w * t + params.phase).cos());
                    set("left_hip", rx(-d));
                    set("right_hip", rx(-d));
                    set("left_knee", rx(2.0 * d));
                    set("right_knee", rx(2.0 * d));
                    set("left_ankle", rx(-d));
                    set("right_ankle", rx(-d));
                    set("left_shoulder", rx(-0.8 * d));
                    set("right_shoulder", rx(-0.8 * d));
                }
                MotionFamily::Kick => {
                    let lift = 0.5 * a * (1.0 - (w * t + params.phase).cos());
                    set("left_hip", rx(-lift));
                    set("left_knee", rx(0.6 * lift * (1.0 - s) * 0.5));
                    set("right_shoulder", rx(0.3 * lift));
                    set("left_shoulder", rx(-0.3 * lift));
                }
            }
            if family == MotionFamily::Walk {
                let yaw = params.turn * t;
                pose.yaw = yaw;
                // Integrate forward speed along the current heading.
                let dir = Vector3::new(yaw.sin(), 0.0, yaw.cos());
                pose.root = Vector3::new(0.0, 0.9 + 0.02 * (2.0 * w * t).cos(), 0.0) + dir * (params.speed * t);
            }
            pose
        })
        .collect();
    positions_from_poses(skeleton, &poses, true)
}
