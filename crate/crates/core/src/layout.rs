//! Per-frame feature layouts of the two motion domains.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Motion domain of a feature sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "3D")]
    ThreeD,
    #[serde(rename = "2D")]
    TwoD,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::ThreeD, Domain::TwoD];

    pub fn tag(self) -> &'static str {
        match self {
            Domain::ThreeD => "3D",
            Domain::TwoD => "2D",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "3D" => Some(Domain::ThreeD),
            "2D" => Some(Domain::TwoD),
            _ => None,
        }
    }

    /// Position in [`Domain::ALL`].
    pub fn index(self) -> usize {
        match self {
            Domain::ThreeD => 0,
            Domain::TwoD => 1,
        }
    }

    pub fn root_width(self) -> usize {
        match self {
            Domain::ThreeD => 4,
            Domain::TwoD => 2,
        }
    }

    fn position_width(self) -> usize {
        match self {
            Domain::ThreeD => 3,
            Domain::TwoD => 2,
        }
    }

    fn rotation_width(self) -> usize {
        match self {
            Domain::ThreeD => 6,
            Domain::TwoD => 2,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Number of foot-contact labels per frame.
pub const CONTACT_WIDTH: usize = 4;

/// Block layout `(root, joint positions, joint velocities, joint rotations,
/// contacts)` for `non_root` joints in a given domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub domain: Domain,
    pub non_root: usize,
}

impl FeatureLayout {
    pub fn new(domain: Domain, non_root: usize) -> Self {
        Self { domain, non_root }
    }

    pub fn dim(&self) -> usize {
        self.contacts().end
    }

    pub fn root(&self) -> Range<usize> {
        0..self.domain.root_width()
    }

    pub fn positions(&self) -> Range<usize> {
        let start = self.root().end;
        start..start + self.domain.position_width() * self.non_root
    }

    pub fn velocities(&self) -> Range<usize> {
        let start = self.positions().end;
        start..start + self.domain.position_width() * self.non_root
    }

    pub fn rotations(&self) -> Range<usize> {
        let start = self.velocities().end;
        start..start + self.domain.rotation_width() * self.non_root
    }

    pub fn contacts(&self) -> Range<usize> {
        let start = self.rotations().end;
        start..start + CONTACT_WIDTH
    }

    pub fn position_width(&self) -> usize {
        self.domain.position_width()
    }

    pub fn rotation_width(&self) -> usize {
        self.domain.rotation_width()
    }

    /// Feature indices belonging to the joints in feature slots `slots`
    /// (positions, velocities and rotations), in ascending order.
    pub fn joint_dims(&self, slots: &[usize]) -> Vec<usize> {
        let pw = self.position_width();
        let rw = self.rotation_width();
        let mut dims = Vec::new();
        for &s in slots {
            dims.extend(self.positions().start + s * pw..self.positions().start + (s + 1) * pw);
            dims.extend(self.velocities().start + s * pw..self.velocities().start + (s + 1) * pw);
            dims.extend(self.rotations().start + s * rw..self.rotations().start + (s + 1) * rw);
        }
        dims.sort_unstable();
        dims
    }
}
