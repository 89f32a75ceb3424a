//! Pseudo 3D labels from estimated 2D keypoints.
//!
//! Keypoint files are JSON lines, one [`KeypointSequence`] per line. A
//! [`JointMapping`] (TOML) names, for every skeleton joint, the keypoints
//! whose average gives that joint. Surviving sequences are rescaled so the
//! median bone length matches the skeleton, turned into 2D features, lifted
//! with the 2D→3D pathway at `t = 0` under the null condition, and smoothed.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{ContactThresholds, FeatureStats, MotionFeatures};
use crate::layout::{Domain, FeatureLayout};
use crate::model::{Condition, CrossDiffModel};
use crate::projection::{compute_features_2d, Features2d};
use crate::skeleton::Skeleton;

/// One tracked person: `frames[k][i] = [u, v, confidence]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSequence {
    pub source: String,
    pub fps: f64,
    #[serde(default)]
    pub texts: Vec<String>,
    pub frames: Vec<Vec<[f64; 3]>>,
}

impl KeypointSequence {
    pub fn mean_confidence(&self) -> f64 {
        let (sum, count) = self
            .frames
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, c), k| (s + k[2], c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

pub fn read_keypoint_file(path: &Path) -> Result<Vec<KeypointSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn write_keypoint_file(path: &Path, sequences: &[KeypointSequence]) -> Result<()> {
    let mut out = String::new();
    for s in sequences {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Skeleton joint name → keypoint indices to average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointMapping {
    pub keypoint_count: usize,
    /// Image `v` grows downwards and is flipped on ingest.
    #[serde(default)]
    pub y_down: bool,
    pub joints: BTreeMap<String, Vec<usize>>,
}

impl JointMapping {
    /// Keypoint `i` is joint `i` of the skeleton.
    pub fn identity(skeleton: &Skeleton) -> Self {
        Self {
            keypoint_count: skeleton.joint_count(),
            y_down: false,
            joints: skeleton
                .names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), vec![i]))
                .collect(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Ingestion(format!("joint mapping: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("mapping serializes")
    }

    /// Keypoint lists in skeleton joint order.
    fn resolve(&self, skeleton: &Skeleton) -> Result<Vec<Vec<usize>>> {
        for name in self.joints.keys() {
            if !skeleton.names.contains(name) {
                return Err(Error::Ingestion(format!("mapping names unknown joint {name:?}")));
            }
        }
        skeleton
            .names
            .iter()
            .map(|name| {
                let sources = self
                    .joints
                    .get(name)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| Error::Ingestion(format!("joint {name:?} has no keypoints")))?;
                if let Some(&bad) = sources.iter().find(|&&i| i >= self.keypoint_count) {
                    return Err(Error::Ingestion(format!(
                        "joint {name:?} uses keypoint {bad}, only {} declared",
                        self.keypoint_count
                    )));
                }
                Ok(sources.clone())
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub min_confidence: f64,
    pub min_frames: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.5,
            min_frames: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    LowConfidence { mean: f64 },
    TooShort { frames: usize },
    NoScale,
}

/// Image-plane joint positions (`N × J × 2`) in skeleton units.
#[derive(Clone, Debug, PartialEq)]
pub struct IngestedSequence {
    pub source: String,
    pub fps: f64,
    pub texts: Vec<String>,
    pub positions: Array3<f64>,
    /// Factor applied to the raw coordinates.
    pub scale: f64,
    pub mean_confidence: f64,
}

impl IngestedSequence {
    pub fn features(&self, skeleton: &Skeleton, thresholds: ContactThresholds) -> Result<Features2d> {
        compute_features_2d(&self.positions, skeleton, thresholds)
    }
}

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub kept: Vec<IngestedSequence>,
    pub dropped: Vec<(String, DropReason)>,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Ratio of skeleton bone length to observed median bone length, medianed
/// over bones.
fn bone_scale(positions: &Array3<f64>, skeleton: &Skeleton) -> Option<f64> {
    let n = positions.dim().0;
    let mut ratios = Vec::new();
    for j in skeleton.non_root_joints() {
        let p = skeleton.parents[j].expect("non-root joint has a parent");
        let rest = skeleton.bone_length(j);
        let mut lengths: Vec<f64> = (0..n)
            .map(|k| {
                let du = positions[[k, j, 0]] - positions[[k, p, 0]];
                let dv = positions[[k, j, 1]] - positions[[k, p, 1]];
                du.hypot(dv)
            })
            .collect();
        let observed = median(&mut lengths)?;
        if rest > 1e-9 && observed > 1e-9 {
            ratios.push(rest / observed);
        }
    }
    median(&mut ratios)
}

/// Remaps, gates and rescales keypoint sequences.
pub fn ingest_keypoints(
    sequences: &[KeypointSequence],
    mapping: &JointMapping,
    skeleton: &Skeleton,
    config: IngestConfig,
) -> Result<IngestReport> {
    let sources = mapping.resolve(skeleton)?;
    let mut report = IngestReport::default();
    for seq in sequences {
        if let Some((k, frame)) = seq
            .frames
            .iter()
            .enumerate()
            .find(|(_, f)| f.len() != mapping.keypoint_count)
        {
            return Err(Error::Ingestion(format!(
                "{}: frame {k} has {} keypoints, mapping declares {}",
                seq.source,
                frame.len(),
                mapping.keypoint_count
            )));
        }
        if seq.frames.iter().flatten().any(|k| !(0.0..=1.0).contains(&k[2])) {
            return Err(Error::Ingestion(format!("{}: confidence outside [0, 1]", seq.source)));
        }
        let mean = seq.mean_confidence();
        if seq.frames.is_empty() || mean < config.min_confidence {
            report
                .dropped
                .push((seq.source.clone(), DropReason::LowConfidence { mean }));
            continue;
        }
        if seq.frames.len() < config.min_frames.max(2) {
            report.dropped.push((
                seq.source.clone(),
                DropReason::TooShort {
                    frames: seq.frames.len(),
                },
            ));
            continue;
        }
        let flip = if mapping.y_down { -1.0 } else { 1.0 };
        let mut positions = Array3::<f64>::zeros((seq.frames.len(), skeleton.joint_count(), 2));
        for (k, frame) in seq.frames.iter().enumerate() {
            for (j, idx) in sources.iter().enumerate() {
                let w = 1.0 / idx.len() as f64;
                let (u, v) = idx
                    .iter()
                    .fold((0.0, 0.0), |(u, v), &i| (u + frame[i][0], v + frame[i][1]));
                positions[[k, j, 0]] = u * w;
                positions[[k, j, 1]] = flip * v * w;
            }
        }
        let Some(scale) = bone_scale(&positions, skeleton) else {
            report.dropped.push((seq.source.clone(), DropReason::NoScale));
            continue;
        };
        positions.mapv_inplace(|x| x * scale);
        report.kept.push(IngestedSequence {
            source: seq.source.clone(),
            fps: seq.fps,
            texts: seq.texts.clone(),
            positions,
            scale,
            mean_confidence: mean,
        });
    }
    if report.kept.is_empty() {
        return Err(Error::Data(format!(
            "no keypoint sequence survived filtering ({} dropped)",
            report.dropped.len()
        )));
    }
    Ok(report)
}

/// Stage-I model plus the statistics needed to lift raw 2D features.
pub struct Lifter {
    pub model: CrossDiffModel,
    pub stats_2d: FeatureStats,
    pub stats_3d: FeatureStats,
    stage_one_trained: bool,
}

impl Lifter {
    pub fn new(model: CrossDiffModel, stats_2d: FeatureStats, stats_3d: FeatureStats, stage_one_trained: bool) -> Self {
        Self {
            model,
            stats_2d,
            stats_3d,
            stage_one_trained,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self::new(
            ckpt.model()?,
            ckpt.meta.stats_2d.clone(),
            ckpt.meta.stats_3d.clone(),
            ckpt.meta.stage_one_trained,
        ))
    }

    /// Set when the weights have not been through stage I.
    pub fn warning(&self) -> Option<&'static str> {
        (!self.stage_one_trained).then_some("checkpoint is not stage-I trained; pseudo labels may be meaningless")
    }

    /// Raw 2D features to raw 3D features with binary contacts.
    pub fn lift(&self, x2d: &MotionFeatures) -> Result<MotionFeatures> {
        if let Some(w) = self.warning() {
            log::warn!("{w}");
        }
        let norm = self.stats_2d.normalize(x2d)?;
        let lifted = lift_2d_to_3d(&self.model, &norm.data)?;
        let layout = FeatureLayout::new(Domain::ThreeD, self.model.config().non_root_joints);
        let mut out = self.stats_3d.denormalize(&MotionFeatures::new(layout, lifted)?)?;
        let c = layout.contacts();
        out.data
            .slice_mut(ndarray::s![.., c])
            .mapv_inplace(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        Ok(out)
    }
}

/// Single 2D→3D prediction at `t = 0` under the null condition, in
/// normalized units.
pub fn lift_2d_to_3d(model: &CrossDiffModel, x2d: &Array2<f64>) -> Result<Array2<f64>> {
    let cond = Condition::unconditional(1, model.config().text_dim, 0);
    let mut out = model.denoise_arrays(std::slice::from_ref(x2d), &cond, Domain::TwoD, Domain::ThreeD)?;
    Ok(out.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SmoothMethod {
    SavitzkyGolay { order: usize },
    MovingAverage,
}

impl Default for SmoothMethod {
    fn default() -> Self {
        SmoothMethod::SavitzkyGolay { order: 2 }
    }
}

pub const DEFAULT_WINDOW: usize = 7;

/// Weights giving the value at the center of a `2h + 1` window from a
/// least-squares polynomial fit.
fn center_weights(half: usize, method: SmoothMethod) -> Vec<f64> {
    let width = 2 * half + 1;
    match method {
        SmoothMethod::MovingAverage => vec![1.0 / width as f64; width],
        SmoothMethod::SavitzkyGolay { order } => {
            let order = order.min(2 * half);
            let a = DMatrix::from_fn(width, order + 1, |i, k| (i as f64 - half as f64).powi(k as i32));
            let ata = a.transpose() * &a;
            let e0 = DVector::from_fn(order + 1, |k, _| if k == 0 { 1.0 } else { 0.0 });
            let c = ata.lu().solve(&e0).expect("Vandermonde normal matrix is invertible");
            (a * c).iter().copied().collect()
        }
    }
}

/// Temporal low-pass over the continuous blocks; contacts take the majority
/// label in the window, ties keeping the current label. The window shrinks
/// symmetrically at the sequence ends.
pub fn smooth_motion(features: &MotionFeatures, window: usize, method: SmoothMethod) -> Result<MotionFeatures> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Validation(format!(
            "smoothing window must be odd and ≥ 1, got {window}"
        )));
    }
    let n = features.frames();
    if window > n {
        return Err(Error::Validation(format!("window {window} longer than {n} frames")));
    }
    let half = window / 2;
    let weights: Vec<Vec<f64>> = (0..=half).map(|h| center_weights(h, method)).collect();
    let contacts = features.layout.contacts();
    let src = &features.data;
    let mut out = src.clone();
    for k in 0..n {
        let h = half.min(k).min(n - 1 - k);
        let w = &weights[h];
        let lo = k - h;
        for d in 0..src.ncols() {
            if contacts.contains(&d) {
                let on = (lo..=k + h).filter(|&i| src[[i, d]] >= 0.5).count();
                let off = 2 * h + 1 - on;
                out[[k, d]] = match on.cmp(&off) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Less => 0.0,
                    std::cmp::Ordering::Equal => src[[k, d]],
                };
            } else {
                out[[k, d]] = w.iter().enumerate().map(|(i, c)| c * src[[lo + i, d]]).sum();
            }
        }
    }
    MotionFeatures::new(features.layout, out)
}
