//! COCO-style detection/keypoint datasets: loading, validation, person-class
//! filtering, id-remapping merge and summary statistics.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::AreaRange;
use crate::geometry::BBox;
use crate::keypoints::{KeypointError, KeypointSet, KEYPOINT_NAMES, SKELETON};

pub const PERSON_CATEGORY_ID: u64 = 1;
pub const PERSON_CATEGORY_NAME: &str = "person";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub source_dataset: String,
    /// Free-text imaging modality, e.g. "rgb" or "thermal".
    pub modality: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox<f64>,
    pub area: f64,
    pub keypoints: Option<KeypointSet<f64>>,
    pub num_keypoints: usize,
    pub iscrowd: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skeleton: Option<Vec<[u32; 2]>>,
}

impl Category {
    /// The single merged person category with the COCO keypoint layout.
    pub fn person() -> Self {
        Self {
            id: PERSON_CATEGORY_ID,
            name: PERSON_CATEGORY_NAME.to_string(),
            supercategory: Some(PERSON_CATEGORY_NAME.to_string()),
            keypoints: Some(KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect()),
            skeleton: Some(
                SKELETON
                    .iter()
                    .map(|&(a, b)| [a as u32 + 1, b as u32 + 1])
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnRecord>,
    pub categories: Vec<Category>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    DuplicateImageId(u64),
    DuplicateAnnotationId(u64),
    DuplicateCategoryId(u64),
    BadImageSize { image_id: u64, width: u32, height: u32 },
    DanglingImage { ann_id: u64, image_id: u64 },
    DanglingCategory { ann_id: u64, category_id: u64 },
    BadBox { ann_id: u64 },
    BadArea { ann_id: u64, area: f64 },
    BadKeypoints { ann_id: u64, error: KeypointError },
    NumKeypointsMismatch { ann_id: u64, declared: usize, counted: usize },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ValidationIssue::*;
        match self {
            DuplicateImageId(id) => write!(f, "duplicate image id {id}"),
            DuplicateAnnotationId(id) => write!(f, "duplicate annotation id {id}"),
            DuplicateCategoryId(id) => write!(f, "duplicate category id {id}"),
            BadImageSize {
                image_id,
                width,
                height,
            } => write!(f, "image {image_id} has invalid size {width}x{height}"),
            DanglingImage { ann_id, image_id } => {
                write!(f, "annotation {ann_id} references missing image_id {image_id}")
            }
            DanglingCategory {
                ann_id,
                category_id,
            } => write!(
                f,
                "annotation {ann_id} references missing category_id {category_id}"
            ),
            BadBox { ann_id } => write!(f, "annotation {ann_id} has an invalid bbox"),
            BadArea { ann_id, area } => write!(
                f,
                "annotation {ann_id} has area {area} despite a positive bbox extent"
            ),
            BadKeypoints { ann_id, error } => write!(f, "annotation {ann_id}: {error}"),
            NumKeypointsMismatch {
                ann_id,
                declared,
                counted,
            } => write!(
                f,
                "annotation {ann_id} declares num_keypoints {declared} but has {counted} labeled points"
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: parse error at line {line}, column {column}: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{origin}: {} validation issue(s): {}", issues.len(), join_issues(issues))]
    Validation {
        origin: String,
        issues: Vec<ValidationIssue>,
    },
    #[error("{0}")]
    Contract(String),
    #[error("serialization failed: {0}")]
    Serialize(String),
}

fn join_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl DatasetError {
    /// Image ids named by dangling-reference issues.
    pub fn dangling_image_ids(&self) -> Vec<u64> {
        match self {
            DatasetError::Validation { issues, .. } => issues
                .iter()
                .filter_map(|i| match i {
                    ValidationIssue::DanglingImage { image_id, .. } => Some(*image_id),
                    _ => None,
                })
                .collect(),
            _ => Vec::new(),
        }
    }
}

// On-disk schema.

#[derive(Debug, Serialize, Deserialize)]
struct CocoDocument {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<Category>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    modality: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_keypoints: Option<usize>,
    #[serde(default)]
    iscrowd: u8,
}

impl Dataset {
    pub fn empty(split: Split) -> Self {
        Self {
            images: Vec::new(),
            annotations: Vec::new(),
            categories: Vec::new(),
            split,
        }
    }

    /// Parses a COCO document. `source_label` is used for images that do
    /// not carry their own `source_dataset` field.
    pub fn from_json(
        text: &str,
        split: Split,
        source_label: &str,
        origin: &str,
    ) -> Result<Self, DatasetError> {
        let doc: CocoDocument = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
            origin: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let mut issues = Vec::new();
        let images = doc
            .images
            .into_iter()
            .map(|r| ImageRecord {
                id: r.id,
                file_name: r.file_name,
                width: r.width,
                height: r.height,
                source_dataset: r.source_dataset.unwrap_or_else(|| source_label.to_string()),
                modality: r.modality,
            })
            .collect();
        let mut annotations = Vec::with_capacity(doc.annotations.len());
        for raw in doc.annotations {
            let [x, y, w, h] = raw.bbox;
            let Ok(bbox) = BBox::new(x, y, w, h) else {
                issues.push(ValidationIssue::BadBox { ann_id: raw.id });
                continue;
            };
            let keypoints = match raw.keypoints.as_deref().map(KeypointSet::from_flat) {
                Some(Ok(k)) => Some(k),
                Some(Err(error)) => {
                    issues.push(ValidationIssue::BadKeypoints {
                        ann_id: raw.id,
                        error,
                    });
                    continue;
                }
                None => None,
            };
            let counted = keypoints.as_ref().map_or(0, KeypointSet::num_labeled);
            if let (Some(declared), Some(_)) = (raw.num_keypoints, &keypoints) {
                if declared != counted {
                    issues.push(ValidationIssue::NumKeypointsMismatch {
                        ann_id: raw.id,
                        declared,
                        counted,
                    });
                }
            }
            annotations.push(AnnRecord {
                id: raw.id,
                image_id: raw.image_id,
                category_id: raw.category_id,
                area: raw.area.unwrap_or(bbox.area()),
                bbox,
                keypoints,
                num_keypoints: counted,
                iscrowd: raw.iscrowd != 0,
            });
        }
        let dataset = Self {
            images,
            annotations,
            categories: doc.categories,
            split,
        };
        if let Err(more) = dataset.validate() {
            issues.extend(more);
        }
        if issues.is_empty() {
            Ok(dataset)
        } else {
            Err(DatasetError::Validation {
                origin: origin.to_string(),
                issues,
            })
        }
    }

    /// Checks every structural invariant, collecting all violations.
    pub fn validate(&self) -> Result<(), Vec<ValidationIssue>> {
        let mut issues = Vec::new();
        let mut image_ids = HashSet::new();
        for img in &self.images {
            if !image_ids.insert(img.id) {
                issues.push(ValidationIssue::DuplicateImageId(img.id));
            }
            if img.width == 0 || img.height == 0 {
                issues.push(ValidationIssue::BadImageSize {
                    image_id: img.id,
                    width: img.width,
                    height: img.height,
                });
            }
        }
        let mut category_ids = HashSet::new();
        for cat in &self.categories {
            if !category_ids.insert(cat.id) {
                issues.push(ValidationIssue::DuplicateCategoryId(cat.id));
            }
        }
        let mut ann_ids = HashSet::new();
        for ann in &self.annotations {
            if !ann_ids.insert(ann.id) {
                issues.push(ValidationIssue::DuplicateAnnotationId(ann.id));
            }
            if !image_ids.contains(&ann.image_id) {
                issues.push(ValidationIssue::DanglingImage {
                    ann_id: ann.id,
                    image_id: ann.image_id,
                });
            }
            if !category_ids.contains(&ann.category_id) {
                issues.push(ValidationIssue::DanglingCategory {
                    ann_id: ann.id,
                    category_id: ann.category_id,
                });
            }
            if ann.bbox.has_positive_extent() && !(ann.area > 0.0) {
                issues.push(ValidationIssue::BadArea {
                    ann_id: ann.id,
                    area: ann.area,
                });
            }
            if let Some(k) = &ann.keypoints {
                if k.num_labeled() != ann.num_keypoints {
                    issues.push(ValidationIssue::NumKeypointsMismatch {
                        ann_id: ann.id,
                        declared: ann.num_keypoints,
                        counted: k.num_labeled(),
                    });
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }

    fn to_document(&self) -> CocoDocument {
        CocoDocument {
            images: self
                .images
                .iter()
                .map(|i| RawImage {
                    id: i.id,
                    file_name: i.file_name.clone(),
                    width: i.width,
                    height: i.height,
                    source_dataset: Some(i.source_dataset.clone()),
                    modality: i.modality.clone(),
                })
                .collect(),
            annotations: self
                .annotations
                .iter()
                .map(|a| RawAnnotation {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox: [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h],
                    area: Some(a.area),
                    keypoints: a.keypoints.as_ref().map(KeypointSet::to_flat),
                    num_keypoints: a.keypoints.as_ref().map(|_| a.num_keypoints),
                    iscrowd: a.iscrowd as u8,
                })
                .collect(),
            categories: self.categories.clone(),
        }
    }

    /// Pretty-printed COCO document with a trailing newline.
    pub fn to_json(&self) -> Result<String, DatasetError> {
        let mut s = serde_json::to_string_pretty(&self.to_document())
            .map_err(|e| DatasetError::Serialize(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_json()?).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Annotations grouped by image id, in input order.
    pub fn annotations_by_image(&self) -> HashMap<u64, Vec<&AnnRecord>> {
        let mut map: HashMap<u64, Vec<&AnnRecord>> = HashMap::new();
        for ann in &self.annotations {
            map.entry(ann.image_id).or_default().push(ann);
        }
        map
    }

    pub fn is_person_filtered(&self) -> bool {
        matches!(self.categories.as_slice(), [c] if c.id == PERSON_CATEGORY_ID && c.name == PERSON_CATEGORY_NAME)
    }
}

/// Loads and validates a COCO annotation file. Images without their own
/// `source_dataset` are labelled with the file stem.
pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::from_json(&text, split, &label, &path.display().to_string())
}

/// Loads several files in parallel, preserving input order.
pub fn load_datasets(paths: &[(PathBuf, Split)]) -> Vec<Result<Dataset, DatasetError>> {
    paths
        .par_iter()
        .map(|(p, split)| load_dataset(p, *split))
        .collect()
}

/// Keeps annotations whose category name is listed, remapped to the single
/// person category. Images are all retained.
pub fn filter_person_classes<S: AsRef<str>>(
    d: &Dataset,
    keep_names: &[S],
) -> Result<Dataset, DatasetError> {
    if keep_names.is_empty() {
        return Err(DatasetError::Contract(
            "keep list for person filtering is empty".into(),
        ));
    }
    let keep: HashSet<&str> = keep_names.iter().map(AsRef::as_ref).collect();
    let kept_ids: HashSet<u64> = d
        .categories
        .iter()
        .filter(|c| keep.contains(c.name.as_str()))
        .map(|c| c.id)
        .collect();
    let annotations = d
        .annotations
        .iter()
        .filter(|a| kept_ids.contains(&a.category_id))
        .map(|a| AnnRecord {
            category_id: PERSON_CATEGORY_ID,
            ..a.clone()
        })
        .collect();
    Ok(Dataset {
        images: d.images.clone(),
        annotations,
        categories: vec![Category::person()],
        split: d.split,
    })
}

/// Source → merged id pairs for one input part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartIdMap {
    pub part: usize,
    pub source_dataset: String,
    pub images: Vec<[u64; 2]>,
    pub annotations: Vec<[u64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    pub parts: Vec<PartIdMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutput {
    pub dataset: Dataset,
    pub id_map: IdMap,
}

/// Concatenates person-filtered parts of one split, renumbering image and
/// annotation ids densely from 1 in input order.
pub fn merge_datasets(parts: &[Dataset]) -> Result<MergeOutput, DatasetError> {
    let Some(first) = parts.first() else {
        return Err(DatasetError::Contract("nothing to merge".into()));
    };
    if let Some(other) = parts.iter().find(|p| p.split != first.split) {
        return Err(DatasetError::Contract(format!(
            "cannot merge mixed splits: {} and {}",
            first.split, other.split
        )));
    }
    if let Some(i) = parts.iter().position(|p| !p.is_person_filtered()) {
        return Err(DatasetError::Contract(format!(
            "part {i} is not person-filtered (expected a single category {PERSON_CATEGORY_ID}/{PERSON_CATEGORY_NAME})"
        )));
    }
    let mut merged = Dataset {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: vec![Category::person()],
        split: first.split,
    };
    let mut id_map = IdMap { parts: Vec::new() };
    let (mut next_image, mut next_ann) = (1u64, 1u64);
    for (index, part) in parts.iter().enumerate() {
        let mut entry = PartIdMap {
            part: index,
            source_dataset: part
                .images
                .first()
                .map(|i| i.source_dataset.clone())
                .unwrap_or_default(),
            images: Vec::with_capacity(part.images.len()),
            annotations: Vec::with_capacity(part.annotations.len()),
        };
        let mut image_remap = HashMap::with_capacity(part.images.len());
        for img in &part.images {
            image_remap.insert(img.id, next_image);
            entry.images.push([img.id, next_image]);
            merged.images.push(ImageRecord {
                id: next_image,
                ..img.clone()
            });
            next_image += 1;
        }
        for ann in &part.annotations {
            let image_id = *image_remap.get(&ann.image_id).ok_or_else(|| {
                DatasetError::Contract(format!(
                    "part {index}: annotation {} references missing image_id {}",
                    ann.id, ann.image_id
                ))
            })?;
            entry.annotations.push([ann.id, next_ann]);
            merged.annotations.push(AnnRecord {
                id: next_ann,
                image_id,
                ..ann.clone()
            });
            next_ann += 1;
        }
        id_map.parts.push(entry);
    }
    Ok(MergeOutput {
        dataset: merged,
        id_map,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AreaHistogram {
    pub small: u64,
    pub medium: u64,
    pub large: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub split: Split,
    pub images: u64,
    pub annotations: u64,
    pub crowd: u64,
    pub images_without_annotations: u64,
    /// Exclusive bins: small `< 32²`, medium `[32², 96²)`, large `>= 96²`.
    pub area: AreaHistogram,
    /// Keypoint counts per visibility flag 0, 1, 2.
    pub visibility: [u64; 3],
}

pub fn dataset_stats(name: &str, d: &Dataset) -> DatasetStats {
    let small = AreaRange::small().hi;
    let medium = AreaRange::medium().hi;
    let mut area = AreaHistogram::default();
    let mut visibility = [0u64; 3];
    let mut annotated = HashSet::new();
    for ann in &d.annotations {
        annotated.insert(ann.image_id);
        if ann.area < small {
            area.small += 1;
        } else if ann.area < medium {
            area.medium += 1;
        } else {
            area.large += 1;
        }
        if let Some(k) = &ann.keypoints {
            for p in &k.points {
                visibility[p.v.code() as usize] += 1;
            }
        }
    }
    DatasetStats {
        name: name.to_string(),
        split: d.split,
        images: d.images.len() as u64,
        annotations: d.annotations.len() as u64,
        crowd: d.annotations.iter().filter(|a| a.iscrowd).count() as u64,
        images_without_annotations: d
            .images
            .iter()
            .filter(|i| !annotated.contains(&i.id))
            .count() as u64,
        area,
        visibility,
    }
}

/// Fixed-width summary table, one row per dataset.
pub fn stats_table(stats: &[DatasetStats]) -> String {
    let mut out = format!(
        "{:<24} {:>5} {:>8} {:>8} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8} {:>8}\n",
        "Dataset", "Split", "Images", "Anns", "Empty", "Small", "Medium", "Large", "v=0", "v=1", "v=2"
    );
    for s in stats {
        out.push_str(&format!(
            "{:<24} {:>5} {:>8} {:>8} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8} {:>8}\n",
            s.name,
            s.split,
            s.images,
            s.annotations,
            s.images_without_annotations,
            s.area.small,
            s.area.medium,
            s.area.large,
            s.visibility[0],
            s.visibility[1],
            s.visibility[2]
        ));
    }
    out
}
