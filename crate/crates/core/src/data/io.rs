use std::collections::HashSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, MaskTensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train-labeled")]
    TrainLabeled,
    #[serde(rename = "train-unlabeled")]
    TrainUnlabeled,
    #[serde(rename = "test")]
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainLabeled => "train-labeled",
            Split::TrainUnlabeled => "train-unlabeled",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train-labeled" => Ok(Split::TrainLabeled),
            "train-unlabeled" => Ok(Split::TrainUnlabeled),
            "test" => Ok(Split::Test),
            other => {
                Err(Error::Config(format!("unknown split `{other}` (expected train-labeled, train-unlabeled or test)")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_classes: usize,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::CorruptDataset(format!("unsupported format_version {}", self.format_version)));
        }
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::CorruptDataset(format!("num_classes {} outside [2, 256]", self.num_classes)));
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::CorruptDataset(format!("duplicate sample id `{}`", s.id)));
            }
            if s.height == 0 || s.width == 0 || s.channels == 0 {
                return Err(Error::CorruptDataset(format!("sample `{}` has a zero dimension", s.id)));
            }
            check_relative(&s.image_path)?;
            match (&s.mask_path, s.split) {
                (Some(p), _) => check_relative(p)?,
                (None, Split::TrainUnlabeled) => {}
                (None, split) => {
                    return Err(Error::CorruptDataset(format!("{} sample `{}` has no mask", split.as_str(), s.id)))
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

fn check_relative(p: &str) -> Result<()> {
    let path = Path::new(p);
    let ok = path.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if !ok || p.is_empty() {
        return Err(Error::CorruptDataset(format!("sample path `{p}` must be relative to the dataset root")));
    }
    Ok(())
}

/// A fully loaded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub mask: Option<MaskTensor>,
}

/// An opened dataset directory; sample payloads are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

/// Opens a dataset directory and validates its manifest.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let root = path.as_ref().to_path_buf();
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::CorruptDataset(format!("{}: {e}", manifest_path.display())))?;
    manifest.validate()?;
    Ok(Dataset { root, manifest })
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn load_image(&self, entry: &SampleEntry) -> Result<ImageTensor> {
        let path = self.root.join(&entry.image_path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = entry.channels * entry.height * entry.width * 4;
        if bytes.len() != expected {
            return Err(Error::CorruptDataset(format!(
                "{}: expected {expected} bytes for {}x{}x{} f32, found {}",
                path.display(),
                entry.channels,
                entry.height,
                entry.width,
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::CorruptDataset(format!("{}: non-finite value at offset {pos}", path.display())));
        }
        ImageTensor::new(entry.channels, entry.height, entry.width, data)
    }

    pub fn load_mask(&self, entry: &SampleEntry) -> Result<Option<MaskTensor>> {
        let Some(rel) = &entry.mask_path else {
            return Ok(None);
        };
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != entry.height * entry.width {
            return Err(Error::CorruptDataset(format!(
                "{}: expected {} bytes for a {}x{} mask, found {}",
                path.display(),
                entry.height * entry.width,
                entry.height,
                entry.width,
                bytes.len()
            )));
        }
        if let Some(&bad) = bytes.iter().find(|&&v| v as usize >= self.manifest.num_classes) {
            return Err(Error::CorruptDataset(format!(
                "{}: class id {bad} >= num_classes {}",
                path.display(),
                self.manifest.num_classes
            )));
        }
        MaskTensor::new(entry.height, entry.width, bytes).map(Some)
    }

    pub fn load_sample(&self, entry: &SampleEntry) -> Result<Sample> {
        Ok(Sample { id: entry.id.clone(), image: self.load_image(entry)?, mask: self.load_mask(entry)? })
    }

    /// Loads every sample of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.manifest.split(split).map(|e| self.load_sample(e)).collect()
    }
}

/// Writes one sample's payload files under `root` at the entry's paths.
pub fn write_sample(root: &Path, entry: &SampleEntry, image: &ImageTensor, mask: Option<&MaskTensor>) -> Result<()> {
    let img_path = root.join(&entry.image_path);
    if let Some(parent) = img_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes: Vec<u8> = image.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&img_path, bytes).map_err(|e| Error::io(&img_path, e))?;
    if let (Some(rel), Some(mask)) = (&entry.mask_path, mask) {
        let mask_path = root.join(rel);
        if let Some(parent) = mask_path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&mask_path, &mask.data).map_err(|e| Error::io(&mask_path, e))?;
    }
    Ok(())
}

pub(crate) fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
