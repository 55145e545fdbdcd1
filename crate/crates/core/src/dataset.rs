//! Image records and on-disk dataset bundles (TSR1 tensors plus a JSON
//! manifest).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensorcore::{io as tsr, Tensor};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Composite,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: usize,
    pub kind: Kind,
    pub split: Split,
    /// Background family label, when known.
    pub family: Option<usize>,
    /// Object kind label for composites, when known.
    pub object_kind: Option<usize>,
    /// `[C, H, W]` in [0, 1].
    pub image: Tensor<f32>,
    /// Ground-truth binary mask `[1, H, W]`.
    pub mask: Option<Tensor<f32>>,
    /// Background the composite was blended onto (or a nearby background-only crop).
    pub background: Option<Tensor<f32>>,
    /// Zero-based background cluster.
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub family_names: Vec<String>,
    pub object_names: Vec<String>,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn select(&self, kind: Kind, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.kind == kind && r.split == split)
    }

    pub fn count(&self, kind: Kind, split: Split) -> usize {
        self.select(kind, split).count()
    }

    pub fn validate(&self) -> Result<()> {
        let expect = [self.channels, self.height, self.width];
        for r in &self.records {
            if r.image.shape() != expect {
                return Err(Error::Dataset(format!("record {} has shape {:?}, expected {expect:?}", r.id, r.image.shape())));
            }
            if let Some(m) = &r.mask {
                if m.shape() != [1, self.height, self.width] {
                    return Err(Error::Dataset(format!("record {} mask has shape {:?}", r.id, m.shape())));
                }
            }
            if let Some(b) = &r.background {
                if b.shape() != expect {
                    return Err(Error::Dataset(format!("record {} background has shape {:?}", r.id, b.shape())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordEntry {
    id: usize,
    kind: Kind,
    split: Split,
    family: Option<usize>,
    object_kind: Option<usize>,
    cluster: Option<usize>,
    image: String,
    mask: Option<String>,
    background: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    format: String,
    channels: usize,
    height: usize,
    width: usize,
    family_names: Vec<String>,
    object_names: Vec<String>,
    records: Vec<RecordEntry>,
}

const FORMAT: &str = "counterseg-dataset/1";
pub const MANIFEST: &str = "dataset.json";

/// Write the bundle under `dir`. Returns the relative paths of every file
/// written, manifest last.
pub fn save_bundle(dataset: &Dataset, dir: &Path) -> Result<Vec<String>> {
    dataset.validate()?;
    for sub in ["images", "masks", "backgrounds"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut files = Vec::new();
    let mut put = |sub: &str, id: usize, t: &Tensor<f32>| -> Result<String> {
        let rel = format!("{sub}/{id:06}.tsr");
        tsr::save(dir.join(&rel), t)?;
        files.push(rel.clone());
        Ok(rel)
    };
    let mut records = Vec::with_capacity(dataset.records.len());
    for r in &dataset.records {
        records.push(RecordEntry {
            id: r.id,
            kind: r.kind,
            split: r.split,
            family: r.family,
            object_kind: r.object_kind,
            cluster: r.cluster,
            image: put("images", r.id, &r.image)?,
            mask: r.mask.as_ref().map(|m| put("masks", r.id, m)).transpose()?,
            background: r.background.as_ref().map(|b| put("backgrounds", r.id, b)).transpose()?,
        });
    }
    let manifest = BundleManifest {
        format: FORMAT.into(),
        channels: dataset.channels,
        height: dataset.height,
        width: dataset.width,
        family_names: dataset.family_names.clone(),
        object_names: dataset.object_names.clone(),
        records,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    files.push(MANIFEST.into());
    Ok(files)
}

pub fn load_bundle(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let m: BundleManifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Format(format!("unsupported dataset format {:?}", m.format)));
    }
    let load = |rel: &str| -> Result<Tensor<f32>> {
        if rel.contains("..") || Path::new(rel).is_absolute() {
            return Err(contract(format!("record path {rel:?} escapes the bundle")));
        }
        Ok(tsr::load(dir.join(rel))?)
    };
    let mut records = Vec::with_capacity(m.records.len());
    for e in &m.records {
        records.push(ImageRecord {
            id: e.id,
            kind: e.kind,
            split: e.split,
            family: e.family,
            object_kind: e.object_kind,
            cluster: e.cluster,
            image: load(&e.image)?,
            mask: e.mask.as_deref().map(load).transpose()?,
            background: e.background.as_deref().map(load).transpose()?,
        });
    }
    let ds = Dataset {
        channels: m.channels,
        height: m.height,
        width: m.width,
        family_names: m.family_names,
        object_names: m.object_names,
        records,
    };
    ds.validate()?;
    Ok(ds)
}
