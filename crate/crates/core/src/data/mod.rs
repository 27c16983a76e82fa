//! Synthetic open-world shapes benchmark.

mod manifest;
pub mod ppm;
mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, manifest_from_str, manifest_to_string, save_manifest, MANIFEST_VERSION};
pub use render::{
    generate_dataset, render_image, train_manifest_name, GeneratedDataset, RenderedObject, TEST_MANIFEST,
};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default shape classes; class id `i + 1` names `SHAPE_CLASSES[i]`. Id 0 is the unknown label.
pub const SHAPE_CLASSES: [&str; 8] = [
    "circle", "square", "triangle", "cross", "ring", "star", "bar", "diamond",
];

pub const UNKNOWN_LABEL: u32 = 0;

/// Normalized center-format box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h };
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(Error::contract(format!("box center outside [0,1]: {b:?}")));
        }
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(Error::contract(format!("box size outside (0,1]: {b:?}")));
        }
        Ok(b)
    }

    /// From an absolute top-left `[x, y, w, h]` pixel box.
    pub fn from_pixel_xywh(xywh: [f64; 4], width: u32, height: u32) -> Result<Self> {
        let (iw, ih) = (width as f64, height as f64);
        Self::new(
            (xywh[0] + xywh[2] / 2.0) / iw,
            (xywh[1] + xywh[3] / 2.0) / ih,
            xywh[2] / iw,
            xywh[3] / ih,
        )
    }

    pub fn to_pixel_xywh(&self, width: u32, height: u32) -> [f64; 4] {
        let (iw, ih) = (width as f64, height as f64);
        [
            (self.cx - self.w / 2.0) * iw,
            (self.cy - self.h / 2.0) * ih,
            self.w * iw,
            self.h * ih,
        ]
    }

    /// `[x0, y0, x1, y1]`
    pub fn xyxy(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Area of the part inside the unit square.
    pub fn clipped_area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.xyxy();
        (x1.min(1.0) - x0.max(0.0)).max(0.0) * (y1.min(1.0) - y0.max(0.0)).max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let [a0, a1, a2, a3] = self.xyxy();
        let [b0, b1, b2, b3] = other.xyxy();
        let iw = (a2.min(b2) - a0.max(b0)).max(0.0);
        let ih = (a3.min(b3) - a1.max(b1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub label: u32,
    pub bbox: BoundingBox,
}

/// An image raster (`3×H×W`, values in `[0,1]`) with its annotated instances.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image_id: u64,
    pub pixels: Arc<Tensor>,
    pub instances: Vec<Instance>,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderParams {
    pub width: u32,
    pub height: u32,
    /// Gaussian pixel noise standard deviation.
    pub noise: f64,
    pub min_objects: u32,
    pub max_objects: u32,
    /// Side length range of a shape's drawing square, in pixels.
    pub min_size: u32,
    pub max_size: u32,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            width: 64,
            height: 64,
            noise: 0.05,
            min_objects: 1,
            max_objects: 4,
            min_size: 12,
            max_size: 22,
        }
    }
}

/// Episode schedule over the synthetic class taxonomy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSplitConfig {
    /// Class ids introduced at each task, in order.
    pub tasks: Vec<Vec<u32>>,
    pub images_per_task_train: u32,
    pub images_test: u32,
    pub render: RenderParams,
    pub seed: u64,
    /// Whether training images may contain (unannotated) objects of classes from later tasks.
    pub future_objects_in_train: bool,
}

impl Default for TaskSplitConfig {
    fn default() -> Self {
        Self::original()
    }
}

impl TaskSplitConfig {
    /// Four tasks of two classes each, in taxonomy order.
    pub fn original() -> Self {
        TaskSplitConfig {
            tasks: vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8]],
            images_per_task_train: 40,
            images_test: 40,
            render: RenderParams::default(),
            seed: 0,
            future_objects_in_train: true,
        }
    }

    /// Tasks grouped by shape family, so later tasks share no family with earlier ones.
    pub fn super_category() -> Self {
        TaskSplitConfig {
            // round, four-sided, pointed, stroke-like
            tasks: vec![vec![1, 5], vec![2, 8], vec![3, 6], vec![4, 7]],
            ..Self::original()
        }
    }

    pub fn num_classes(&self) -> usize {
        SHAPE_CLASSES.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        let mut seen = BTreeSet::new();
        for (t, classes) in self.tasks.iter().enumerate() {
            if classes.is_empty() {
                return Err(Error::config(format!("tasks[{t}]"), "task has zero classes"));
            }
            for &c in classes {
                if c == UNKNOWN_LABEL || c as usize > SHAPE_CLASSES.len() {
                    return Err(Error::config(
                        format!("tasks[{t}]"),
                        format!("class id {c} outside 1..={}", SHAPE_CLASSES.len()),
                    ));
                }
                if !seen.insert(c) {
                    return Err(Error::config(
                        format!("tasks[{t}]"),
                        format!("class {c} appears in more than one task"),
                    ));
                }
            }
        }
        if seen.len() != SHAPE_CLASSES.len() {
            return Err(Error::config(
                "tasks",
                format!("tasks cover {} of {} classes", seen.len(), SHAPE_CLASSES.len()),
            ));
        }
        if self.images_per_task_train == 0 {
            return Err(Error::config("images_per_task_train", "must be positive"));
        }
        if self.images_test == 0 {
            return Err(Error::config("images_test", "must be positive"));
        }
        let r = &self.render;
        if r.width < 16 || r.height < 16 {
            return Err(Error::config("render.width", "images must be at least 16×16"));
        }
        if r.min_objects == 0 || r.min_objects > r.max_objects {
            return Err(Error::config("render.min_objects", "need 1 <= min_objects <= max_objects"));
        }
        if r.min_size < 6 || r.min_size > r.max_size || r.max_size > r.width.min(r.height) {
            return Err(Error::config("render.min_size", "need 6 <= min_size <= max_size <= image side"));
        }
        if !(r.noise >= 0.0 && r.noise.is_finite()) {
            return Err(Error::config("render.noise", "must be a non-negative number"));
        }
        Ok(())
    }

    /// Known classes after completing task `t` (0-based).
    pub fn known_through(&self, t: usize) -> BTreeSet<u32> {
        self.tasks[..=t].iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    pub label: u32,
    /// Absolute top-left `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
}

impl DatasetManifest {
    pub fn labels(&self) -> BTreeSet<u32> {
        self.annotations.iter().map(|a| a.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<u64> = self.images.iter().map(|i| i.id).collect();
        if ids.len() != self.images.len() {
            return Err(Error::contract("duplicate image id in manifest"));
        }
        if let Some(a) = self.annotations.iter().find(|a| !ids.contains(&a.image_id)) {
            return Err(Error::contract(format!(
                "annotation references missing image {}",
                a.image_id
            )));
        }
        Ok(())
    }

    /// Resolves manifest records into labeled images using pixels from `bank`.
    pub fn labeled_images(&self, bank: &ImageBank) -> Result<Vec<LabeledImage>> {
        let mut per_image: BTreeMap<u64, Vec<Instance>> = BTreeMap::new();
        let dims: BTreeMap<u64, (u32, u32)> =
            self.images.iter().map(|r| (r.id, (r.width, r.height))).collect();
        for a in &self.annotations {
            let &(w, h) = dims.get(&a.image_id).ok_or_else(|| {
                Error::contract(format!("annotation references missing image {}", a.image_id))
            })?;
            per_image.entry(a.image_id).or_default().push(Instance {
                label: a.label,
                bbox: BoundingBox::from_pixel_xywh(a.bbox, w, h)?,
            });
        }
        self.images
            .iter()
            .map(|r| {
                let pixels = bank
                    .get(r.id)
                    .ok_or_else(|| Error::contract(format!("no pixels for image {}", r.id)))?;
                Ok(LabeledImage {
                    image_id: r.id,
                    pixels,
                    instances: per_image.remove(&r.id).unwrap_or_default(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectMode {
    /// Drop annotations of classes outside the known set.
    Train,
    /// Relabel classes outside the known set as unknown (0).
    Eval,
}

/// Restricts a manifest to what a learner knowing `known` may see.
pub fn project_to_task(m: &DatasetManifest, known: &BTreeSet<u32>, mode: ProjectMode) -> DatasetManifest {
    let annotations = m
        .annotations
        .iter()
        .filter_map(|a| match (known.contains(&a.label), mode) {
            (true, _) => Some(a.clone()),
            (false, ProjectMode::Train) => None,
            (false, ProjectMode::Eval) => Some(Annotation {
                label: UNKNOWN_LABEL,
                ..a.clone()
            }),
        })
        .collect();
    DatasetManifest {
        images: m.images.clone(),
        annotations,
    }
}

/// Decoded rasters keyed by image id.
#[derive(Clone, Debug, Default)]
pub struct ImageBank {
    images: BTreeMap<u64, Arc<Tensor>>,
}

impl ImageBank {
    pub fn insert(&mut self, id: u64, pixels: Tensor) {
        self.images.insert(id, Arc::new(pixels));
    }

    pub fn get(&self, id: u64) -> Option<Arc<Tensor>> {
        self.images.get(&id).cloned()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Reads every raster a manifest references, resolving file paths against `root`.
    pub fn load(manifest: &DatasetManifest, root: &Path) -> Result<Self> {
        let mut bank = ImageBank::default();
        for r in &manifest.images {
            let raster = ppm::read_ppm(&root.join(&r.file))?;
            if raster.width != r.width || raster.height != r.height {
                return Err(Error::Parse {
                    context: r.file.clone(),
                    line: 0,
                    message: format!(
                        "raster is {}×{}, manifest says {}×{}",
                        raster.width, raster.height, r.width, r.height
                    ),
                });
            }
            bank.insert(r.id, raster.to_tensor());
        }
        Ok(bank)
    }

    pub fn extend(&mut self, other: &ImageBank) {
        for (k, v) in &other.images {
            self.images.insert(*k, v.clone());
        }
    }
}
