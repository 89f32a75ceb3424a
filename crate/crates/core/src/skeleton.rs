//! Kinematic skeleton description.
//!
//! A skeleton is a rooted tree over `J` joints. Every non-root joint carries a
//! rest-pose offset from its parent (meters, Y up, Z forward, X to the
//! character's left). The upper/lower body partition is split at the root and
//! drives the part-restricted metrics; heel/toe indices drive foot contacts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Joints used to estimate the facing direction of a pose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacingJoints {
    pub right_hip: usize,
    pub left_hip: usize,
    pub right_shoulder: usize,
    pub left_shoulder: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub names: Vec<String>,
    /// `-1` marks the root in files; `None` in memory.
    #[serde(with = "parent_serde")]
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<[f64; 3]>,
    /// Left then right.
    pub heel_indices: [usize; 2],
    /// Left then right.
    pub toe_indices: [usize; 2],
    pub upper_body_indices: Vec<usize>,
    pub lower_body_indices: Vec<usize>,
    pub facing: FacingJoints,
}

mod parent_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(parents: &[Option<usize>], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<i64> = parents.iter().map(|p| p.map(|v| v as i64).unwrap_or(-1)).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<usize>>, D::Error> {
        let raw = Vec::<i64>::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|p| if p < 0 { None } else { Some(p as usize) })
            .collect())
    }
}

impl Skeleton {
    /// 22-joint layout of the HumanML3D skeleton with approximate adult
    /// proportions (pelvis 0.90 m above the floor in the rest pose).
    pub fn humanml22() -> Self {
        let joints: [(&str, i64, [f64; 3]); 22] = [
            ("pelvis", -1, [0.0, 0.0, 0.0]),
            ("left_hip", 0, [0.09, -0.07, 0.0]),
            ("right_hip", 0, [-0.09, -0.07, 0.0]),
            ("spine1", 0, [0.0, 0.11, 0.0]),
            ("left_knee", 1, [0.0, -0.38, 0.0]),
            ("right_knee", 2, [0.0, -0.38, 0.0]),
            ("spine2", 3, [0.0, 0.13, 0.0]),
            ("left_ankle", 4, [0.0, -0.40, 0.0]),
            ("right_ankle", 5, [0.0, -0.40, 0.0]),
            ("spine3", 6, [0.0, 0.05, 0.0]),
            ("left_foot", 7, [0.0, -0.05, 0.12]),
            ("right_foot", 8, [0.0, -0.05, 0.12]),
            ("neck", 9, [0.0, 0.21, 0.0]),
            ("left_collar", 9, [0.07, 0.11, 0.0]),
            ("right_collar", 9, [-0.07, 0.11, 0.0]),
            ("head", 12, [0.0, 0.09, 0.05]),
            ("left_shoulder", 13, [0.12, 0.03, 0.0]),
            ("right_shoulder", 14, [-0.12, 0.03, 0.0]),
            ("left_elbow", 16, [0.26, 0.0, 0.0]),
            ("right_elbow", 17, [-0.26, 0.0, 0.0]),
            ("left_wrist", 18, [0.25, 0.0, 0.0]),
            ("right_wrist", 19, [-0.25, 0.0, 0.0]),
        ];
        Skeleton {
            names: joints.iter().map(|j| j.0.to_string()).collect(),
            parents: joints
                .iter()
                .map(|j| if j.1 < 0 { None } else { Some(j.1 as usize) })
                .collect(),
            offsets: joints.iter().map(|j| j.2).collect(),
            heel_indices: [7, 8],
            toe_indices: [10, 11],
            upper_body_indices: vec![3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21],
            lower_body_indices: vec![1, 2, 4, 5, 7, 8, 10, 11],
            facing: FacingJoints {
                right_hip: 2,
                left_hip: 1,
                right_shoulder: 17,
                left_shoulder: 16,
            },
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Number of joints besides the root (`j`).
    pub fn non_root_count(&self) -> usize {
        self.joint_count() - 1
    }

    pub fn root(&self) -> usize {
        self.parents
            .iter()
            .position(|p| p.is_none())
            .expect("validated skeleton has a root")
    }

    /// Non-root joints in ascending index order; this is the joint order of
    /// every per-joint feature block.
    pub fn non_root_joints(&self) -> Vec<usize> {
        let root = self.root();
        (0..self.joint_count()).filter(|&j| j != root).collect()
    }

    /// Slot of joint `joint` inside the per-joint feature blocks.
    pub fn feature_slot(&self, joint: usize) -> Option<usize> {
        let root = self.root();
        match joint.cmp(&root) {
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Less => Some(joint),
            std::cmp::Ordering::Greater => Some(joint - 1),
        }
    }

    /// Heel/toe joints in contact-label order: left heel, left toe, right heel, right toe.
    pub fn foot_joints(&self) -> [usize; 4] {
        [
            self.heel_indices[0],
            self.toe_indices[0],
            self.heel_indices[1],
            self.toe_indices[1],
        ]
    }

    pub fn bone_length(&self, joint: usize) -> f64 {
        let o = self.offsets[joint];
        (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.parents.len();
        if n < 2 {
            return Err(Error::Validation("skeleton needs at least two joints".into()));
        }
        if self.names.len() != n || self.offsets.len() != n {
            return Err(Error::Validation(format!(
                "skeleton arrays disagree: {} parents, {} names, {} offsets",
                n,
                self.names.len(),
                self.offsets.len()
            )));
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::Validation(format!("skeleton has {roots} roots, expected 1")));
        }
        for (j, p) in self.parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= n || *p == j {
                    return Err(Error::Validation(format!("joint {j} has invalid parent {p}")));
                }
            }
        }
        // Every chain must reach the root within n hops.
        for start in 0..n {
            let mut cur = start;
            let mut hops = 0;
            while let Some(p) = self.parents[cur] {
                cur = p;
                hops += 1;
                if hops > n {
                    return Err(Error::Validation(format!("cycle through joint {start}")));
                }
            }
        }
        for o in &self.offsets {
            if o.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("non-finite bone offset".into()));
            }
        }
        let root = self.root();
        let mut seen = vec![false; n];
        seen[root] = true;
        for &j in self.upper_body_indices.iter().chain(&self.lower_body_indices) {
            if j >= n {
                return Err(Error::Validation(format!("body-part index {j} out of range")));
            }
            if seen[j] {
                return Err(Error::Validation(format!(
                    "joint {j} appears twice in the upper/lower partition (or is the root)"
                )));
            }
            seen[j] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "joint {missing} is in neither the upper nor the lower body"
            )));
        }
        for j in self.foot_joints() {
            if !self.lower_body_indices.contains(&j) {
                return Err(Error::Validation(format!(
                    "foot joint {j} is not part of the lower body"
                )));
            }
        }
        let f = self.facing;
        for j in [f.right_hip, f.left_hip, f.right_shoulder, f.left_shoulder] {
            if j >= n {
                return Err(Error::Validation(format!("facing joint {j} out of range")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("skeleton serializes to toml")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let sk: Skeleton = toml::from_str(text).map_err(|e| Error::Validation(format!("skeleton file: {e}")))?;
        sk.validate()?;
        Ok(sk)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical text form; stored in checkpoints to catch
    /// skeleton mismatches at load time.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_skeleton_is_valid() {
        let sk = Skeleton::humanml22();
        sk.validate().unwrap();
        assert_eq!(sk.joint_count(), 22);
        assert_eq!(sk.non_root_count(), 21);
        assert_eq!(sk.feature_slot(0), None);
        assert_eq!(sk.feature_slot(21), Some(20));
    }

    #[test]
    fn toml_round_trip() {
        let sk = Skeleton::humanml22();
        let back = Skeleton::from_toml(&sk.to_toml()).unwrap();
        assert_eq!(sk, back);
        assert_eq!(sk.hash(), back.hash());
    }

    #[test]
    fn rejects_cycles_and_bad_partitions() {
        let mut sk = Skeleton::humanml22();
        sk.parents[3] = Some(6);
        assert!(sk.validate().is_err());

        let mut sk = Skeleton::humanml22();
        sk.lower_body_indices.retain(|&j| j != 11);
        assert!(sk.validate().is_err());

        let mut sk = Skeleton::humanml22();
        sk.upper_body_indices.push(7);
        assert!(sk.validate().is_err());

        let mut sk = Skeleton::humanml22();
        sk.heel_indices = [20, 8];
        sk.validate().unwrap_err();
    }
}
