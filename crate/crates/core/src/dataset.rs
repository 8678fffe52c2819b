//! Ground truth and annotation I/O.
//!
//! * VOC XML import (1-based inclusive pixel corners).
//! * Native JSON, one [`GroundTruthImage`] per file, lossless.
//! * Canonical export of refined annotations.
//! * A seeded synthetic corpus generator for simulation runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BBox, ImageRef, ModelError, Provenance, RefinedAnnotation};
use crate::rng;

pub type LabelTable = BTreeMap<u32, String>;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed XML: {0}")]
    Xml(#[from] roxmltree::Error),
    #[error("missing element <{0}>")]
    Missing(String),
    #[error("element <{element}> has invalid value `{value}`")]
    InvalidValue { element: String, value: String },
    #[error("<{element}>: {reason}")]
    Invalid { element: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },
    #[error("{path}: {error}")]
    File { path: PathBuf, error: Box<DatasetError> },
    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthImage {
    pub image: ImageRef,
    pub objects: Vec<GroundTruthObject>,
    pub label_table: LabelTable,
}

const BOUNDS_TOL: f64 = 1e-6;

impl GroundTruthImage {
    /// Checks that every box is inside the image and every class is named.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let frame = self.image.full_box();
        for (i, obj) in self.objects.iter().enumerate() {
            if !frame.contains_box(&obj.bbox, BOUNDS_TOL) {
                return Err(DatasetError::Invalid {
                    element: format!("object[{i}]"),
                    reason: "box extends outside the image".into(),
                });
            }
            if !self.label_table.contains_key(&obj.class_id) {
                return Err(DatasetError::Invalid {
                    element: format!("object[{i}]"),
                    reason: format!("class {} missing from label table", obj.class_id),
                });
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let gt: GroundTruthImage = serde_json::from_str(text)?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes")
    }
}

fn child<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<roxmltree::Node<'a, 'a>> {
    node.children().find(|n| n.has_tag_name(name))
}

fn text_of(node: roxmltree::Node<'_, '_>, name: &str, path: &str) -> Result<String, DatasetError> {
    child(node, name)
        .and_then(|n| n.text())
        .map(|t| t.trim().to_owned())
        .ok_or_else(|| DatasetError::Missing(format!("{path}/{name}")))
}

fn number_of(node: roxmltree::Node<'_, '_>, name: &str, path: &str) -> Result<f64, DatasetError> {
    let raw = text_of(node, name, path)?;
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or(DatasetError::InvalidValue {
            element: format!("{path}/{name}"),
            value: raw,
        })
}

/// Parses one VOC annotation. Class names not yet in `labels` are appended
/// with the next free id.
pub fn parse_voc_xml_with_labels(
    document: &str,
    labels: &mut LabelTable,
) -> Result<GroundTruthImage, DatasetError> {
    let doc = roxmltree::Document::parse(document)?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(DatasetError::Missing("annotation".into()));
    }
    let size = child(root, "size").ok_or_else(|| DatasetError::Missing("size".into()))?;
    let dim = |name: &str| -> Result<u32, DatasetError> {
        let raw = text_of(size, name, "size")?;
        raw.parse::<u32>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or(DatasetError::InvalidValue {
                element: format!("size/{name}"),
                value: raw,
            })
    };
    let (width, height) = (dim("width")?, dim("height")?);
    let filename = child(root, "filename")
        .and_then(|n| n.text())
        .map(str::trim)
        .unwrap_or("")
        .to_owned();
    let id = Path::new(&filename)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("voc-{:016x}", rng::hash_str(document)));
    let image = ImageRef::new(id, width, height, filename)?;

    let mut objects = Vec::new();
    for (i, obj) in root.children().filter(|n| n.has_tag_name("object")).enumerate() {
        let path = format!("object[{i}]");
        let name = text_of(obj, "name", &path)?;
        let bndbox = child(obj, "bndbox").ok_or_else(|| DatasetError::Missing(format!("{path}/bndbox")))?;
        let bpath = format!("{path}/bndbox");
        let xmin = number_of(bndbox, "xmin", &bpath)?;
        let ymin = number_of(bndbox, "ymin", &bpath)?;
        let xmax = number_of(bndbox, "xmax", &bpath)?;
        let ymax = number_of(bndbox, "ymax", &bpath)?;
        if xmax <= xmin {
            return Err(DatasetError::Invalid {
                element: format!("{bpath}/xmax"),
                reason: format!("xmax {xmax} must exceed xmin {xmin}"),
            });
        }
        if ymax <= ymin {
            return Err(DatasetError::Invalid {
                element: format!("{bpath}/ymax"),
                reason: format!("ymax {ymax} must exceed ymin {ymin}"),
            });
        }
        // Pixel k (1-based) spans [k-1, k] in continuous coordinates.
        let bbox = voc_corners_to_box(xmin, ymin, xmax, ymax)?;
        if !image.full_box().contains_box(&bbox, BOUNDS_TOL) {
            return Err(DatasetError::Invalid {
                element: bpath,
                reason: format!("box outside the {width}x{height} image"),
            });
        }
        let class_id = class_for(labels, &name);
        objects.push(GroundTruthObject { class_id, bbox });
    }

    Ok(GroundTruthImage {
        image,
        objects,
        label_table: labels.clone(),
    })
}

pub fn parse_voc_xml(document: &str) -> Result<GroundTruthImage, DatasetError> {
    parse_voc_xml_with_labels(document, &mut LabelTable::new())
}

/// 1-based inclusive corners to center form: `w = xmax - xmin + 1`.
pub fn voc_corners_to_box(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<BBox, ModelError> {
    BBox::new(
        (xmin - 1.0 + xmax) / 2.0,
        (ymin - 1.0 + ymax) / 2.0,
        xmax - xmin + 1.0,
        ymax - ymin + 1.0,
    )
}

fn class_for(labels: &mut LabelTable, name: &str) -> u32 {
    if let Some((&id, _)) = labels.iter().find(|(_, n)| n.as_str() == name) {
        return id;
    }
    let id = labels.keys().next_back().map_or(0, |k| k + 1);
    labels.insert(id, name.to_owned());
    id
}

/// Loads every `*.json` (native) and `*.xml` (VOC) file in `dir`, sorted by
/// image id. A `labels.json` file, when present, seeds the label table.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<GroundTruthImage>, DatasetError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |error| DatasetError::Io { path, error }
    };
    let mut labels = LabelTable::new();
    let labels_path = dir.join("labels.json");
    if labels_path.exists() {
        let text = fs::read_to_string(&labels_path).map_err(io(&labels_path))?;
        labels = serde_json::from_str(&text).map_err(|e| DatasetError::File {
            path: labels_path.clone(),
            error: Box::new(e.into()),
        })?;
    }

    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n != "labels.json"))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "xml")))
        .collect();
    paths.sort();

    let mut images = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        let wrap = |e: DatasetError| DatasetError::File {
            path: path.clone(),
            error: Box::new(e),
        };
        let gt = if path.extension().is_some_and(|e| e == "xml") {
            parse_voc_xml_with_labels(&text, &mut labels).map_err(wrap)?
        } else {
            let gt = GroundTruthImage::from_json(&text).map_err(wrap)?;
            for (id, name) in &gt.label_table {
                labels.entry(*id).or_insert_with(|| name.clone());
            }
            gt
        };
        images.push(gt);
    }
    // later VOC files may have extended the table
    for gt in &mut images {
        gt.label_table = labels.clone();
    }
    images.sort_by(|a, b| a.image.id().cmp(b.image.id()));
    for pair in images.windows(2) {
        if pair[0].image.id() == pair[1].image.id() {
            return Err(DatasetError::DuplicateImage(pair[0].image.id().to_owned()));
        }
    }
    Ok(images)
}

pub fn write_dataset_dir(dir: &Path, images: &[GroundTruthImage]) -> Result<(), DatasetError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |error| DatasetError::Io { path, error }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for gt in images {
        let path = dir.join(format!("{}.json", gt.image.id()));
        fs::write(&path, gt.to_json()).map_err(io(&path))?;
    }
    if let Some(first) = images.first() {
        let path = dir.join("labels.json");
        let text = serde_json::to_string_pretty(&first.label_table)?;
        fs::write(&path, text).map_err(io(&path))?;
    }
    Ok(())
}

/// Canonical JSON: sorted keys, no whitespace, reals with four decimals.
/// Unresolved annotations have no box and are left out.
pub fn export_annotations(results: &[RefinedAnnotation], image: &ImageRef) -> String {
    let mut out = String::from("{\"boxes\":[");
    let mut first = true;
    for ann in results {
        let Some(b) = ann.bbox else { continue };
        if !first {
            out.push(',');
        }
        first = false;
        write!(
            out,
            "{{\"class\":{},\"cx\":{:.4},\"cy\":{:.4},\"depth\":{},\"effective_prob\":{:.4},\"h\":{:.4},\"provenance\":\"{}\",\"source_click\":{},\"w\":{:.4}}}",
            ann.class_id,
            b.cx(),
            b.cy(),
            ann.depth,
            ann.effective_prob,
            b.h(),
            ann.provenance.as_str(),
            ann.source_click,
            b.w(),
        )
        .expect("write to string");
    }
    out.push_str("],\"image_id\":");
    out.push_str(&serde_json::to_string(image.id()).expect("string serializes"));
    out.push('}');
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedBox {
    pub class: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub depth: u32,
    pub effective_prob: f64,
    pub provenance: Provenance,
    pub source_click: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedAnnotations {
    pub image_id: String,
    pub boxes: Vec<ExportedBox>,
}

/// Reads back the output of [`export_annotations`].
pub fn parse_exported(text: &str) -> Result<(String, Vec<RefinedAnnotation>), DatasetError> {
    let parsed: ExportedAnnotations = serde_json::from_str(text)?;
    let anns = parsed
        .boxes
        .into_iter()
        .map(|b| {
            Ok(RefinedAnnotation {
                bbox: Some(BBox::new(b.cx, b.cy, b.w, b.h)?),
                class_id: b.class,
                effective_prob: b.effective_prob,
                provenance: b.provenance,
                source_click: b.source_click,
                depth: b.depth,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok((parsed.image_id, anns))
}

/// Shape of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: u32,
    pub min_size_frac: f64,
    pub max_size_frac: f64,
    pub width_range: (u32, u32),
    pub height_range: (u32, u32),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            images: 50,
            min_objects: 3,
            max_objects: 12,
            classes: 5,
            min_size_frac: 0.05,
            max_size_frac: 0.3,
            width_range: (320, 640),
            height_range: (240, 480),
        }
    }
}

impl SyntheticSpec {
    /// Sparse scenes, one to four objects per image.
    pub fn sparse(images: usize) -> Self {
        Self {
            images,
            min_objects: 1,
            max_objects: 4,
            ..Self::default()
        }
    }
}

/// Deterministic synthetic corpus. Object centers are kept apart by at
/// least half the larger object's side so clicks are unambiguous.
pub fn synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Vec<GroundTruthImage> {
    let labels: LabelTable = (0..spec.classes.max(1)).map(|c| (c, format!("class{c}"))).collect();
    (0..spec.images)
        .map(|i| {
            let mut r = rng::stream(&[seed, i as u64, 0x7379_6e74]);
            let width = r.random_range(spec.width_range.0..=spec.width_range.1.max(spec.width_range.0));
            let height = r.random_range(spec.height_range.0..=spec.height_range.1.max(spec.height_range.0));
            let image = ImageRef::new(format!("syn-{i:05}"), width, height, format!("syn-{i:05}.png"))
                .expect("positive size");
            let target = r.random_range(spec.min_objects..=spec.max_objects.max(spec.min_objects));
            let (fw, fh) = (f64::from(width), f64::from(height));
            let mut objects: Vec<GroundTruthObject> = Vec::with_capacity(target);
            let mut attempts = 0;
            while objects.len() < target && attempts < 200 * target.max(1) {
                attempts += 1;
                let w = r.random_range(spec.min_size_frac..=spec.max_size_frac) * fw;
                let h = r.random_range(spec.min_size_frac..=spec.max_size_frac) * fh;
                let cx = r.random_range(w / 2.0..=fw - w / 2.0);
                let cy = r.random_range(h / 2.0..=fh - h / 2.0);
                let class_id = r.random_range(0..spec.classes.max(1));
                let bbox = BBox::new(cx, cy, w, h).expect("positive size");
                let crowded = objects.iter().any(|o| {
                    let gap = 0.5 * o.bbox.w().max(o.bbox.h()).max(w.max(h));
                    (o.bbox.cx() - cx).hypot(o.bbox.cy() - cy) < gap
                });
                if !crowded {
                    objects.push(GroundTruthObject { class_id, bbox });
                }
            }
            GroundTruthImage {
                image,
                objects,
                label_table: labels.clone(),
            }
        })
        .collect()
}
