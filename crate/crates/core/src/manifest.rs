//! Dataset manifest: a JSON-lines file with one header record, then one
//! record per image and per triplet (and, after filtering, one filter record).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XfrError};
use crate::io::{self, BinaryMask};
use crate::tensor::Tensor;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// The eight evaluated facial regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    CheeksJaw,
    Mouth,
    Nose,
    LeftEye,
    RightEye,
    Eyebrows,
    LeftFace,
    RightFace,
}

impl Region {
    pub const ALL: [Region; 8] = [
        Region::CheeksJaw,
        Region::Mouth,
        Region::Nose,
        Region::LeftEye,
        Region::RightEye,
        Region::Eyebrows,
        Region::LeftFace,
        Region::RightFace,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::CheeksJaw => "cheeks-jaw",
            Region::Mouth => "mouth",
            Region::Nose => "nose",
            Region::LeftEye => "left-eye",
            Region::RightEye => "right-eye",
            Region::Eyebrows => "eyebrows",
            Region::LeftFace => "left-face",
            Region::RightFace => "right-face",
        }
    }

    pub fn index(self) -> usize {
        Region::ALL.iter().position(|&r| r == self).expect("listed")
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = XfrError;

    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| XfrError::InvalidArgument(format!("unknown region label {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Calibration,
    Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageRole {
    Face,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Relative to the manifest directory.
    pub path: String,
    pub split: Split,
    pub role: ImageRole,
    /// Source subject.
    pub subject: String,
    /// Identity depicted (the subject, or a doppelganger of it).
    pub identity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub probe: String,
    pub mates: Vec<String>,
    pub nonmates: Vec<String>,
    pub inpainted_probe: String,
    pub mask: String,
    pub region: Region,
    pub subject: String,
    pub doppelganger: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

/// Per-region outcome of triplet filtering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub threshold: f64,
    pub kept: BTreeMap<Region, usize>,
    pub dropped: BTreeMap<Region, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
enum Line {
    Header {
        schema_version: u32,
        provenance: Provenance,
        /// Image directory when it is not the manifest's own directory.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image_root: Option<PathBuf>,
    },
    Image(ImageRecord),
    Triplet(TripletRecord),
    Filter(FilterSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory that image paths are relative to.
    pub root: PathBuf,
    pub provenance: Provenance,
    pub images: BTreeMap<String, ImageRecord>,
    pub triplets: Vec<TripletRecord>,
    pub filter: Option<FilterSummary>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, provenance: Provenance) -> Self {
        DatasetManifest {
            root: root.into(),
            provenance,
            images: BTreeMap::new(),
            triplets: Vec::new(),
            filter: None,
        }
    }

    pub fn image(&self, id: &str) -> Result<&ImageRecord> {
        self.images
            .get(id)
            .ok_or_else(|| XfrError::Manifest(format!("unknown image id {id:?}")))
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf> {
        Ok(self.root.join(&self.image(id)?.path))
    }

    pub fn load_image(&self, id: &str) -> Result<Tensor<f32>> {
        io::load_rgb(&self.image_path(id)?)
    }

    pub fn load_mask(&self, id: &str) -> Result<BinaryMask> {
        io::load_mask(&self.image_path(id)?)
    }

    /// Face images of one split in id order.
    pub fn face_images(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.images
            .values()
            .filter(move |r| r.split == split && r.role == ImageRole::Face)
    }

    /// Checks that every reference resolves and that calibration and
    /// evaluation subjects do not overlap.
    pub fn validate(&self) -> Result<()> {
        for t in &self.triplets {
            let ids = std::iter::once(&t.probe)
                .chain(&t.mates)
                .chain(&t.nonmates)
                .chain([&t.inpainted_probe, &t.mask]);
            for id in ids {
                self.image(id)
                    .map_err(|_| XfrError::Manifest(format!("triplet {} references unknown image {id:?}", t.id)))?;
            }
            if t.mates.is_empty() || t.nonmates.is_empty() {
                return Err(XfrError::Manifest(format!(
                    "triplet {} needs at least one mate and one nonmate",
                    t.id
                )));
            }
        }
        let subjects = |split: Split| -> std::collections::BTreeSet<&str> {
            self.images
                .values()
                .filter(|r| r.split == split)
                .map(|r| r.subject.as_str())
                .collect()
        };
        let (cal, eval, train) = (
            subjects(Split::Calibration),
            subjects(Split::Evaluation),
            subjects(Split::Train),
        );
        if let Some(s) = cal.intersection(&eval).next().or(train.intersection(&eval).next()).or(train.intersection(&cal).next()) {
            return Err(XfrError::Manifest(format!("subject {s} appears in two splits")));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.jsonl_with_root(None)
    }

    fn jsonl_with_root(&self, image_root: Option<PathBuf>) -> String {
        let mut lines = vec![Line::Header {
            schema_version: MANIFEST_SCHEMA_VERSION,
            provenance: self.provenance.clone(),
            image_root,
        }];
        lines.extend(self.images.values().cloned().map(Line::Image));
        lines.extend(self.triplets.iter().cloned().map(Line::Triplet));
        if let Some(f) = &self.filter {
            lines.push(Line::Filter(f.clone()));
        }
        let mut out = String::new();
        for l in &lines {
            out.push_str(&serde_json::to_string(l).expect("manifest serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut manifest: Option<DatasetManifest> = None;
        let root = root.into();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: Line = serde_json::from_str(line)
                .map_err(|e| XfrError::Manifest(format!("line {}: {e}", n + 1)))?;
            match (parsed, manifest.as_mut()) {
                (Line::Header { schema_version, provenance, image_root }, None) => {
                    if schema_version != MANIFEST_SCHEMA_VERSION {
                        return Err(XfrError::Manifest(format!(
                            "unsupported schema version {schema_version}"
                        )));
                    }
                    let root = match image_root {
                        Some(r) => root.join(r),
                        None => root.clone(),
                    };
                    manifest = Some(DatasetManifest::new(root, provenance));
                }
                (Line::Header { .. }, Some(_)) => {
                    return Err(XfrError::Manifest(format!("line {}: duplicate header", n + 1)))
                }
                (_, None) => {
                    return Err(XfrError::Manifest("first record must be the header".into()))
                }
                (Line::Image(r), Some(m)) => {
                    m.images.insert(r.id.clone(), r);
                }
                (Line::Triplet(t), Some(m)) => m.triplets.push(t),
                (Line::Filter(f), Some(m)) => m.filter = Some(f),
            }
        }
        let manifest = manifest.ok_or_else(|| XfrError::Manifest("empty manifest".into()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Reads `manifest.jsonl` from a dataset directory, or a manifest file
    /// directly. Image paths resolve against the file's directory unless
    /// the header names another image root.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| XfrError::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        DatasetManifest::from_jsonl(&text, root)
    }

    /// Writes the manifest to `path` atomically. When `path` lies outside
    /// the image root, the absolute root is recorded in the header.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| XfrError::io(dir, e))?;
        let canon = |p: &Path| fs::canonicalize(p).map_err(|e| XfrError::io(p, e));
        let root = canon(&self.root)?;
        let image_root = (canon(dir)? != root).then_some(root);
        io::write_atomic(path, self.jsonl_with_root(image_root).as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetManifest {
        let mut m = DatasetManifest::new(
            "/tmp/x",
            Provenance {
                generator: "test".into(),
                seed: 3,
                config: serde_json::json!({"a": 1}),
            },
        );
        for (id, split, subj) in [
            ("a", Split::Evaluation, "s0"),
            ("b", Split::Evaluation, "s0"),
            ("c", Split::Evaluation, "s0"),
            ("d", Split::Evaluation, "s0"),
            ("k", Split::Evaluation, "s0"),
        ] {
            m.images.insert(
                id.into(),
                ImageRecord {
                    id: id.into(),
                    path: format!("{id}.png"),
                    split,
                    role: if id == "k" { ImageRole::Mask } else { ImageRole::Face },
                    subject: subj.into(),
                    identity: subj.into(),
                },
            );
        }
        m.triplets.push(TripletRecord {
            id: "t0".into(),
            probe: "a".into(),
            mates: vec!["b".into()],
            nonmates: vec!["c".into()],
            inpainted_probe: "d".into(),
            mask: "k".into(),
            region: Region::Nose,
            subject: "s0".into(),
            doppelganger: "s0-nose".into(),
        });
        m
    }

    #[test]
    fn jsonl_round_trip() {
        let m = sample();
        let text = m.to_jsonl();
        assert!(text.lines().next().unwrap().contains("\"schema_version\":1"));
        assert!(text.contains("\"region\":\"nose\""));
        let back = DatasetManifest::from_jsonl(&text, "/tmp/x").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn dangling_reference_is_rejected() {
        let mut m = sample();
        m.triplets[0].mates.push("zzz".into());
        assert!(DatasetManifest::from_jsonl(&m.to_jsonl(), "/").is_err());
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let mut m = sample();
        m.images.get_mut("a").unwrap().split = Split::Calibration;
        assert!(m.validate().is_err());
    }

    #[test]
    fn relocated_manifest_keeps_image_root() {
        let data = tempfile::tempdir().unwrap();
        let elsewhere = tempfile::tempdir().unwrap();
        let mut m = sample();
        m.root = data.path().to_path_buf();
        m.save(data.path().join(MANIFEST_FILE)).unwrap();
        assert!(!fs::read_to_string(data.path().join(MANIFEST_FILE)).unwrap().contains("image_root"));
        m.save(elsewhere.path().join("kept.jsonl")).unwrap();
        let back = DatasetManifest::load(elsewhere.path().join("kept.jsonl")).unwrap();
        assert_eq!(back.root, fs::canonicalize(data.path()).unwrap());
        assert_eq!(back.images, m.images);
    }

    #[test]
    fn region_labels_parse() {
        for r in Region::ALL {
            assert_eq!(r.as_str().parse::<Region>().unwrap(), r);
        }
        assert!("forehead".parse::<Region>().is_err());
    }
}
