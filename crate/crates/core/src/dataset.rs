//! Paired datasets in memory and on disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use graspxfer_tensor::Tensor;

use crate::error::{DatasetError, IoError};
use crate::netpbm;
use crate::render::PairedSample;
use crate::scene::SceneSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// Random access to paired samples. Per-sample metadata is available
/// without loading the images.
pub trait PairedDataset {
    fn len(&self) -> usize;
    fn is_opaque_only(&self, index: usize) -> bool;
    fn split(&self, index: usize) -> Split;
    fn load(&self, index: usize) -> Result<PairedSample, DatasetError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory samples, all in the training split.
impl PairedDataset for [PairedSample] {
    fn len(&self) -> usize {
        <[PairedSample]>::len(self)
    }

    fn is_opaque_only(&self, index: usize) -> bool {
        self[index].opaque_only
    }

    fn split(&self, _index: usize) -> Split {
        Split::Train
    }

    fn load(&self, index: usize) -> Result<PairedSample, DatasetError> {
        self.get(index).cloned().ok_or(DatasetError::OutOfRange {
            index,
            len: <[PairedSample]>::len(self),
        })
    }
}

/// In-memory samples with explicit splits.
#[derive(Clone, Debug, Default)]
pub struct SplitDataset {
    pub samples: Vec<(PairedSample, Split)>,
}

impl PairedDataset for SplitDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn is_opaque_only(&self, index: usize) -> bool {
        self.samples[index].0.opaque_only
    }

    fn split(&self, index: usize) -> Split {
        self.samples[index].1
    }

    fn load(&self, index: usize) -> Result<PairedSample, DatasetError> {
        self.samples
            .get(index)
            .map(|(s, _)| s.clone())
            .ok_or(DatasetError::OutOfRange {
                index,
                len: self.samples.len(),
            })
    }
}

/// Keeps exactly the opaque-only samples, in order.
pub fn filter_opaque(samples: &[PairedSample]) -> Vec<PairedSample> {
    samples.iter().filter(|s| s.opaque_only).cloned().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub opaque_only: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub camera_height: f64,
    pub scenes: Vec<ManifestEntry>,
}

/// Contents of `scene.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub seed: u64,
    pub illum: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| IoError::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::format(path, e.to_string()))
}

/// Depth is stored as 16-bit millimeters, so it round-trips to 1 mm.
pub fn write_sample_dir(dir: &Path, record: &SceneRecord, sample: &PairedSample) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    write_json(&dir.join("scene.json"), record)?;
    netpbm::write_depth_pgm(&dir.join("depth.pgm"), &sample.depth)?;
    netpbm::write_ppm(&dir.join("rgb.ppm"), &sample.rgb)?;
    Ok(())
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<(), IoError> {
    write_json(&root.join(MANIFEST_FILE), manifest)
}

/// A dataset directory produced by `gen-data`.
#[derive(Clone, Debug)]
pub struct DiskDataset {
    root: PathBuf,
    manifest: Manifest,
}

impl DiskDataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let manifest: Manifest = read_json(&root.join(MANIFEST_FILE))?;
        Ok(DiskDataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn scene_record(&self, index: usize) -> Result<SceneRecord, DatasetError> {
        let entry = self.entry(index)?;
        Ok(read_json(&self.root.join(&entry.id).join("scene.json"))?)
    }

    fn entry(&self, index: usize) -> Result<&ManifestEntry, DatasetError> {
        self.manifest.scenes.get(index).ok_or(DatasetError::OutOfRange {
            index,
            len: self.manifest.scenes.len(),
        })
    }
}

impl PairedDataset for DiskDataset {
    fn len(&self) -> usize {
        self.manifest.scenes.len()
    }

    fn is_opaque_only(&self, index: usize) -> bool {
        self.manifest.scenes[index].opaque_only
    }

    fn split(&self, index: usize) -> Split {
        self.manifest.scenes[index].split
    }

    fn load(&self, index: usize) -> Result<PairedSample, DatasetError> {
        let entry = self.entry(index)?;
        let mut sample = read_sample_dir(&self.root.join(&entry.id))?;
        sample.opaque_only = entry.opaque_only;
        sample.scene_id = entry.id.clone();
        Ok(sample)
    }
}

/// Reads `depth.pgm` and `rgb.ppm` from a sample directory. The opaque flag
/// is not stored with the images and comes back `false`.
pub fn read_sample_dir(dir: &Path) -> Result<PairedSample, IoError> {
    let depth = netpbm::read_depth_pgm(&dir.join("depth.pgm"))?;
    let rgb = netpbm::read_ppm(&dir.join("rgb.ppm"))?;
    if depth.shape()[1..] != rgb.shape()[1..] {
        return Err(IoError::format(dir, "depth and rgb sizes differ"));
    }
    Ok(PairedSample {
        depth,
        rgb,
        opaque_only: false,
        scene_id: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    })
}

/// Quantizes a sample the way the on-disk format would.
pub fn quantize_like_disk(sample: &PairedSample) -> PairedSample {
    let q = |t: &Tensor, f: &dyn Fn(f64) -> f64| t.map(f).expect("finite");
    PairedSample {
        depth: q(&sample.depth, &|d| netpbm::mm_to_m(netpbm::m_to_mm(d))),
        rgb: q(&sample.rgb, &|v| netpbm::byte_to_unit(netpbm::unit_to_byte(v))),
        ..sample.clone()
    }
}
