//! Line-delimited detection dumps: one `{image_id, label, score, bbox}` record per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ImageTruth;
use crate::data::{BoundingBox, DatasetManifest, Instance};
use crate::error::{Error, Result};
use crate::protocol::{Detection, DetectionSet};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image_id: u64,
    label: u32,
    score: f64,
    bbox: BoundingBox,
}

pub fn detections_to_string(sets: &[DetectionSet]) -> String {
    let mut out = String::new();
    for set in sets {
        for d in &set.detections {
            let r = Record {
                image_id: set.image_id,
                label: d.label,
                score: d.score,
                bbox: d.bbox,
            };
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
    }
    out
}

/// Groups records by image id in order of first appearance.
pub fn detections_from_str(text: &str, context: &str) -> Result<Vec<DetectionSet>> {
    let mut sets: Vec<DetectionSet> = Vec::new();
    let mut slot: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            context: context.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let k = *slot.entry(r.image_id).or_insert_with(|| {
            sets.push(DetectionSet {
                image_id: r.image_id,
                detections: Vec::new(),
            });
            sets.len() - 1
        });
        sets[k].detections.push(Detection {
            label: r.label,
            score: r.score,
            bbox: r.bbox,
        });
    }
    Ok(sets)
}

pub fn save_detections(sets: &[DetectionSet], path: &Path) -> Result<()> {
    fs::write(path, detections_to_string(sets))?;
    Ok(())
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionSet>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    detections_from_str(&fs::read_to_string(path)?, &path.display().to_string())
}

/// Ground truth of every manifest image, in manifest order, without loading pixels.
pub fn truths_from_manifest(m: &DatasetManifest) -> Result<Vec<ImageTruth>> {
    m.validate()?;
    let dims: BTreeMap<u64, (u32, u32)> = m.images.iter().map(|r| (r.id, (r.width, r.height))).collect();
    let mut per_image: BTreeMap<u64, Vec<Instance>> = BTreeMap::new();
    for a in &m.annotations {
        let (w, h) = dims[&a.image_id];
        per_image.entry(a.image_id).or_default().push(Instance {
            label: a.label,
            bbox: BoundingBox::from_pixel_xywh(a.bbox, w, h)?,
        });
    }
    Ok(m.images
        .iter()
        .map(|r| ImageTruth {
            image_id: r.id,
            instances: per_image.remove(&r.id).unwrap_or_default(),
        })
        .collect())
}
