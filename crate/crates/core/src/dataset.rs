//! Dataset preparation: synthetic desk motions or HumanML3D-style joint
//! files to normalized 3D and per-view 2D feature files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::{read_features, write_features, Sidecar};
use crate::error::{Error, Result};
use crate::features::{compute_features_3d, ContactThresholds, FeatureStats, MotionFeatures};
use crate::layout::Domain;
use crate::projection::{compute_features_2d, project_view, View};
use crate::seed::{stream, Stream};
use crate::skeleton::Skeleton;
use crate::synthetic::{family_motion, FamilyParams, MotionFamily};
use crate::text::TextEmbedder;
use crate::training::TrainItem;

/// Parametric motions with templated prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub sequences: usize,
    /// Pose frames per sequence; features have one fewer.
    pub frames: usize,
    /// Sequence `i` uses family `i mod len`.
    pub families: Vec<MotionFamily>,
}

impl SyntheticSpec {
    /// 8 sequences of 41 frames over two prompts.
    pub fn desk() -> Self {
        Self {
            sequences: 8,
            frames: 41,
            families: vec![MotionFamily::Walk, MotionFamily::Wave],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Directory with `new_joints/*.npy`, `texts/*.txt` and optional
    /// `train.txt` / `test.txt` id lists.
    Humanml3d {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub source: DataSource,
    pub views: Vec<View>,
    pub thresholds: ContactThresholds,
    pub fps: f64,
    /// Sequences with fewer pose frames are skipped.
    pub min_frames: usize,
    /// Share of sequences held out when the source has no split files.
    pub test_fraction: f64,
    pub seed: u64,
}

impl PrepareConfig {
    pub fn desk() -> Self {
        Self {
            source: DataSource::Synthetic(SyntheticSpec::desk()),
            views: View::default_set(),
            thresholds: ContactThresholds::default(),
            fps: 20.0,
            min_frames: 2,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Raw sequence before feature extraction.
#[derive(Clone, Debug)]
pub struct RawSequence {
    pub id: String,
    pub positions: Array3<f64>,
    pub texts: Vec<String>,
    pub source: String,
}

/// Sequence `i` draws its parameters from its own `Dataset` stream.
pub fn synthetic_sequences(skeleton: &Skeleton, spec: &SyntheticSpec, seed: u64) -> Result<Vec<RawSequence>> {
    if spec.families.is_empty() || spec.sequences == 0 || spec.frames < 2 {
        return Err(Error::Config(
            "synthetic spec needs families, sequences and at least 2 frames".into(),
        ));
    }
    Ok((0..spec.sequences)
        .map(|i| {
            let family = spec.families[i % spec.families.len()];
            let params = FamilyParams::sample(&mut stream(seed, Stream::Dataset, i as u64));
            RawSequence {
                id: format!("synth_{i:03}"),
                positions: family_motion(skeleton, family, params, spec.frames),
                texts: vec![family.prompt().to_string()],
                source: format!("synthetic:{family:?}").to_lowercase(),
            }
        })
        .collect())
}

/// Captions from a HumanML3D text file (`caption#tokens#start#end` lines).
pub fn parse_caption_file(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| l.split('#').next())
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect()
}

/// Itemized problem found while reading a source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestIssue {
    pub id: String,
    pub message: String,
}

fn read_npy_positions(path: &Path) -> Result<Array3<f64>> {
    use ndarray_npy::ReadNpyExt;
    let open = || std::fs::File::open(path).map_err(|e| Error::io(path, e));
    if let Ok(a) = Array3::<f32>::read_npy(open()?) {
        return Ok(a.mapv(f64::from));
    }
    Array3::<f64>::read_npy(open()?).map_err(|e| Error::format(path, e.to_string()))
}

fn read_id_list(path: &Path) -> Result<Option<Vec<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
    ))
}

/// Reads a HumanML3D-format directory; malformed sequences are reported,
/// not fatal.
pub fn humanml3d_sequences(dir: &Path, skeleton: &Skeleton) -> Result<(Vec<RawSequence>, Vec<IngestIssue>)> {
    let joints = dir.join("new_joints");
    let entries = std::fs::read_dir(&joints).map_err(|e| Error::io(&joints, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "npy"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    let mut issues = Vec::new();
    for file in files {
        let id = file.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let positions = match read_npy_positions(&file) {
            Ok(p) => p,
            Err(e) => {
                issues.push(IngestIssue {
                    id,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let (_, j, c) = positions.dim();
        if j != skeleton.joint_count() || c != 3 {
            issues.push(IngestIssue {
                id,
                message: format!(
                    "joint array {:?} does not match a {}-joint skeleton",
                    positions.dim(),
                    skeleton.joint_count()
                ),
            });
            continue;
        }
        if positions.iter().any(|v| !v.is_finite()) {
            issues.push(IngestIssue {
                id,
                message: "non-finite joint positions".into(),
            });
            continue;
        }
        let text_path = dir.join("texts").join(format!("{id}.txt"));
        let texts = match std::fs::read_to_string(&text_path) {
            Ok(t) => parse_caption_file(&t),
            Err(e) => {
                issues.push(IngestIssue {
                    id,
                    message: format!("captions: {e}"),
                });
                continue;
            }
        };
        if texts.is_empty() {
            issues.push(IngestIssue {
                id,
                message: "no captions".into(),
            });
            continue;
        }
        out.push(RawSequence {
            id,
            positions,
            texts,
            source: "humanml3d".into(),
        });
    }
    Ok((out, issues))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub texts: Vec<String>,
    /// Feature frames.
    pub frames: usize,
    pub file_3d: String,
    /// One file per view, in index view order.
    pub files_2d: Vec<String>,
}

/// `dataset.json` of a prepared dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub fps: f64,
    pub views: Vec<View>,
    pub thresholds: ContactThresholds,
    pub skeleton_hash: String,
    pub sequences: Vec<SequenceEntry>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub issues: Vec<IngestIssue>,
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub dir: PathBuf,
    pub skeleton: Skeleton,
    pub index: DatasetIndex,
    pub stats_3d: FeatureStats,
    pub stats_2d: FeatureStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "all" => Some(Split::All),
            _ => None,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes features, stats (over the train split) and split lists into
/// `out_dir`. Files are named `motions_3d/<id>.xdmf` and
/// `motions_2d/<id>_<view>.xdmf`.
pub fn prepare_data(config: &PrepareConfig, skeleton: &Skeleton, out_dir: &Path) -> Result<PreparedDataset> {
    skeleton.validate()?;
    if config.views.is_empty() {
        return Err(Error::Config("view set is empty".into()));
    }
    let (raw, mut issues, splits) = match &config.source {
        DataSource::Synthetic(spec) => (synthetic_sequences(skeleton, spec, config.seed)?, Vec::new(), None),
        DataSource::Humanml3d { path } => {
            let (raw, issues) = humanml3d_sequences(path, skeleton)?;
            let splits = match (
                read_id_list(&path.join("train.txt"))?,
                read_id_list(&path.join("test.txt"))?,
            ) {
                (Some(tr), Some(te)) => Some((tr, te)),
                _ => None,
            };
            (raw, issues, splits)
        }
    };
    let mut entries = Vec::new();
    let mut features_3d = BTreeMap::new();
    let mut features_2d = BTreeMap::new();
    for seq in raw {
        if seq.positions.dim().0 < config.min_frames.max(2) {
            issues.push(IngestIssue {
                id: seq.id,
                message: format!("shorter than {} frames", config.min_frames.max(2)),
            });
            continue;
        }
        let f3 = compute_features_3d(&seq.positions, skeleton, config.thresholds)?;
        let mut per_view = Vec::new();
        for &view in &config.views {
            let projected = project_view(&seq.positions, view)?;
            per_view.push((view, compute_features_2d(&projected, skeleton, config.thresholds)?));
        }
        entries.push(SequenceEntry {
            id: seq.id.clone(),
            texts: seq.texts.clone(),
            frames: f3.frames(),
            file_3d: format!("motions_3d/{}.xdmf", seq.id),
            files_2d: config
                .views
                .iter()
                .map(|v| format!("motions_2d/{}_{}.xdmf", seq.id, v.label()))
                .collect(),
        });
        features_3d.insert(seq.id.clone(), (f3, seq.source.clone(), seq.texts.clone()));
        features_2d.insert(seq.id.clone(), per_view);
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("no usable sequences ({} issues)", issues.len())));
    }
    let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let (train, test) = match splits {
        Some((tr, te)) => (
            tr.into_iter().filter(|i| ids.contains(i)).collect::<Vec<_>>(),
            te.into_iter().filter(|i| ids.contains(i)).collect::<Vec<_>>(),
        ),
        None if config.test_fraction > 0.0 => {
            let mut shuffled = ids.clone();
            shuffled.shuffle(&mut stream(config.seed, Stream::Shuffle, u64::MAX >> 16));
            let n_test = ((ids.len() as f64) * config.test_fraction).round() as usize;
            let mut test = shuffled[..n_test].to_vec();
            let mut train = shuffled[n_test..].to_vec();
            test.sort();
            train.sort();
            (train, test)
        }
        // Without a held-out fraction both splits list every sequence.
        None => (ids.clone(), ids.clone()),
    };
    if train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }

    // Stats use the stored f32 values so normalization matches what a
    // reload sees.
    let quantized_3d: Vec<MotionFeatures> = train
        .iter()
        .map(|id| crate::container::quantize(&features_3d[id].0))
        .collect();
    let quantized_2d: Vec<MotionFeatures> = train
        .iter()
        .flat_map(|id| {
            features_2d[id]
                .iter()
                .map(|(_, f)| crate::container::quantize(&f.features))
        })
        .collect();
    let stats_3d = FeatureStats::compute(&quantized_3d)?;
    let stats_2d = FeatureStats::compute(&quantized_2d)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for entry in &entries {
        let (f3, source, texts) = &features_3d[&entry.id];
        let side = Sidecar {
            source: source.clone(),
            fps: config.fps,
            texts: texts.clone(),
            view: None,
            degenerate_frames: vec![],
        };
        write_features(&out_dir.join(&entry.file_3d), f3, &side)?;
        for ((view, f2), file) in features_2d[&entry.id].iter().zip(&entry.files_2d) {
            let side = Sidecar {
                view: Some(*view),
                degenerate_frames: f2
                    .degenerate_frames
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &d)| d.then_some(i))
                    .collect(),
                ..side.clone()
            };
            write_features(&out_dir.join(file), &f2.features, &side)?;
        }
    }
    skeleton.save(&out_dir.join("skeleton.toml"))?;
    write_json(&out_dir.join("stats_3d.json"), &stats_3d)?;
    write_json(&out_dir.join("stats_2d.json"), &stats_2d)?;
    let index = DatasetIndex {
        fps: config.fps,
        views: config.views.clone(),
        thresholds: config.thresholds,
        skeleton_hash: skeleton.hash(),
        sequences: entries,
        train,
        test,
        issues,
    };
    write_json(&out_dir.join("dataset.json"), &index)?;
    Ok(PreparedDataset {
        dir: out_dir.to_path_buf(),
        skeleton: skeleton.clone(),
        index,
        stats_3d,
        stats_2d,
    })
}

impl PreparedDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let skeleton = Skeleton::load(&dir.join("skeleton.toml"))?;
        let index: DatasetIndex = read_json(&dir.join("dataset.json"))?;
        if index.skeleton_hash != skeleton.hash() {
            return Err(Error::Validation("dataset skeleton hash mismatch".into()));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            skeleton,
            stats_3d: read_json(&dir.join("stats_3d.json"))?,
            stats_2d: read_json(&dir.join("stats_2d.json"))?,
            index,
        })
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        match split {
            Split::Train => self.index.train.clone(),
            Split::Test => self.index.test.clone(),
            Split::All => self.index.sequences.iter().map(|e| e.id.clone()).collect(),
        }
    }

    pub fn entry(&self, id: &str) -> Result<&SequenceEntry> {
        self.index
            .sequences
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Data(format!("no sequence {id} in dataset")))
    }

    /// Raw (unnormalized) 3D features.
    pub fn features_3d(&self, id: &str) -> Result<MotionFeatures> {
        read_features(&self.dir.join(&self.entry(id)?.file_3d))
    }

    /// Raw 2D features of every view.
    pub fn features_2d(&self, id: &str) -> Result<Vec<MotionFeatures>> {
        self.entry(id)?
            .files_2d
            .iter()
            .map(|f| read_features(&self.dir.join(f)))
            .collect()
    }

    /// Normalized training items with embedded texts.
    pub fn train_items(&self, split: Split, embedder: &dyn TextEmbedder) -> Result<Vec<TrainItem>> {
        let mut items = Vec::new();
        for id in self.ids(split) {
            let entry = self.entry(&id)?;
            let m3 = self.stats_3d.normalize(&self.features_3d(&id)?)?.data;
            let m2: Vec<Array2<f64>> = self
                .features_2d(&id)?
                .iter()
                .map(|f| self.stats_2d.normalize(f).map(|n| n.data))
                .collect::<Result<_>>()?;
            let texts = entry
                .texts
                .iter()
                .map(|t| embedder.embed(t))
                .collect::<Result<Vec<_>>>()?;
            let views = if m2.len() == self.index.views.len() {
                self.index.views.clone()
            } else {
                Vec::new()
            };
            items.push(TrainItem {
                id,
                motion_3d: Some(m3),
                motion_2d: m2,
                views,
                texts,
            });
        }
        Ok(items)
    }

    /// Distinct prompts in `split` with the ids annotated by each.
    pub fn prompts(&self, split: Split) -> Result<BTreeMap<String, Vec<String>>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for id in self.ids(split) {
            for t in &self.entry(&id)?.texts {
                out.entry(t.clone()).or_default().push(id.clone());
            }
        }
        Ok(out)
    }

    pub fn domain_stats(&self, domain: Domain) -> &FeatureStats {
        match domain {
            Domain::ThreeD => &self.stats_3d,
            Domain::TwoD => &self.stats_2d,
        }
    }
}
