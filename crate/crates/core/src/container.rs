//! Binary feature files and their metadata sidecars.
//!
//! A feature file holds the magic `XDMF`, `u32` version, `u32` frame count,
//! `u32` dimension, a two-byte layout tag (`3D` or `2D`), two reserved
//! bytes, then `frames × dim` little-endian `f32` values. Metadata lives in
//! a JSON file next to it with the extension `.json`.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MotionFeatures;
use crate::layout::{Domain, FeatureLayout, CONTACT_WIDTH};
use crate::projection::View;

const MAGIC: &[u8; 4] = b"XDMF";
pub const FEATURE_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub source: String,
    pub fps: f64,
    #[serde(default)]
    pub texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<View>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate_frames: Vec<usize>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Non-root joint count implied by a feature width.
pub fn non_root_from_dim(domain: Domain, dim: usize) -> Option<usize> {
    let fixed = domain.root_width() + CONTACT_WIDTH;
    let per_joint = FeatureLayout::new(domain, 1).dim() - fixed;
    (dim >= fixed && (dim - fixed) % per_joint == 0).then(|| (dim - fixed) / per_joint)
}

pub fn encode_features(features: &MotionFeatures) -> Vec<u8> {
    let (n, d) = features.data.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FEATURE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(features.domain().tag().as_bytes());
    out.extend_from_slice(&[0, 0]);
    for v in features.data.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<MotionFeatures> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing XDMF header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported feature format version {version}"),
        ));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    let tag = std::str::from_utf8(&bytes[16..18]).unwrap_or("");
    let domain = Domain::from_tag(tag).ok_or_else(|| Error::format(path, format!("bad layout tag {tag:?}")))?;
    let non_root = non_root_from_dim(domain, d)
        .ok_or_else(|| Error::format(path, format!("dimension {d} fits no {domain} layout")))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * n * d {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", 4 * n * d, body.len()),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let data = Array2::from_shape_vec((n, d), values).expect("size checked");
    MotionFeatures::new(FeatureLayout::new(domain, non_root), data)
}

pub fn write_features(path: &Path, features: &MotionFeatures, sidecar: &Sidecar) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_features(features)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_features(path: &Path) -> Result<MotionFeatures> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(path, &bytes)
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))
}

/// Features rounded to the stored `f32` precision.
pub fn quantize(features: &MotionFeatures) -> MotionFeatures {
    MotionFeatures {
        layout: features.layout,
        data: features.data.mapv(|v| v as f32 as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(domain: Domain) -> MotionFeatures {
        let layout = FeatureLayout::new(domain, 21);
        let data = Array2::from_shape_fn((3, layout.dim()), |(i, j)| (i * 7 + j) as f64 * 0.01);
        MotionFeatures::new(layout, data).unwrap()
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        for domain in Domain::ALL {
            let f = sample(domain);
            let path = dir.path().join(format!("m_{domain}.xdmf"));
            let side = Sidecar {
                source: "synthetic".into(),
                fps: 20.0,
                texts: vec!["a person walks forward".into()],
                view: (domain == Domain::TwoD).then_some(View::LEFT),
                degenerate_frames: vec![],
            };
            write_features(&path, &f, &side).unwrap();
            let back = read_features(&path).unwrap();
            assert_eq!(back, quantize(&f));
            assert_eq!(read_sidecar(&path).unwrap(), side);
        }
    }

    #[test]
    fn header_fields() {
        let bytes = encode_features(&sample(Domain::TwoD));
        assert_eq!(&bytes[..4], b"XDMF");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 132);
        assert_eq!(&bytes[16..18], b"2D");
        assert_eq!(bytes.len(), 20 + 4 * 3 * 132);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = Path::new("x.xdmf");
        let mut bytes = encode_features(&sample(Domain::ThreeD));
        assert!(decode_features(p, &bytes[..bytes.len() - 1]).is_err());
        bytes[16] = b'9';
        assert!(decode_features(p, &bytes).is_err());
        assert!(decode_features(p, b"nope").is_err());
    }

    #[test]
    fn joint_count_from_width() {
        assert_eq!(non_root_from_dim(Domain::ThreeD, 263), None);
        assert_eq!(non_root_from_dim(Domain::ThreeD, 260), Some(21));
        assert_eq!(non_root_from_dim(Domain::TwoD, 132), Some(21));
    }
}
