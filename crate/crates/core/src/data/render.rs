//! Shape rendering and dataset generation.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::save_manifest;
use super::ppm::{write_ppm, Raster};
use super::{Annotation, DatasetManifest, ImageBank, ImageRecord, TaskSplitConfig};
use crate::error::Result;

/// A shape drawn into an image, with the tight pixel box of its lit pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedObject {
    pub label: u32,
    /// Top-left `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    /// Lit pixel coordinates `(x, y)`.
    pub pixels: Vec<(u32, u32)>,
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    /// One training manifest per task.
    pub train: Vec<DatasetManifest>,
    /// Every object annotated with its true label.
    pub test: DatasetManifest,
    pub rasters: Vec<(u64, Raster)>,
}

impl GeneratedDataset {
    pub fn bank(&self) -> ImageBank {
        let mut bank = ImageBank::default();
        for (id, r) in &self.rasters {
            bank.insert(*id, r.to_tensor());
        }
        bank
    }

    /// Writes `images/*.ppm`, `train_task{t}.jsonl` (1-based) and `test.jsonl` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        for (id, r) in &self.rasters {
            write_ppm(&dir.join(image_file(*id)), r)?;
        }
        for (t, m) in self.train.iter().enumerate() {
            save_manifest(m, &dir.join(train_manifest_name(t)))?;
        }
        save_manifest(&self.test, &dir.join(TEST_MANIFEST))
    }
}

pub const TEST_MANIFEST: &str = "test.jsonl";

/// File name of the training manifest for 0-based task `t`.
pub fn train_manifest_name(t: usize) -> String {
    format!("train_task{}.jsonl", t + 1)
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Shape membership at normalized coordinates `x, y ∈ [-1, 1]` (y down).
fn shape_mask(label: u32, x: f64, y: f64, vertical: bool) -> bool {
    let r = (x * x + y * y).sqrt();
    match label {
        1 => r <= 0.95,
        2 => x.abs() <= 0.8 && y.abs() <= 0.8,
        3 => (-0.9..=0.9).contains(&y) && x.abs() <= (y + 0.9) / 1.8 * 0.95,
        4 => (x.abs() <= 0.25 && y.abs() <= 0.95) || (y.abs() <= 0.25 && x.abs() <= 0.95),
        5 => (0.55..=0.95).contains(&r),
        6 => {
            let star: Vec<(f64, f64)> = (0..10)
                .map(|k| {
                    let rad = if k % 2 == 0 { 0.98 } else { 0.42 };
                    let th = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
                    (rad * th.cos(), rad * th.sin())
                })
                .collect();
            point_in_polygon(x, y, &star)
        }
        7 => {
            let (a, b) = if vertical { (y, x) } else { (x, y) };
            a.abs() <= 0.95 && b.abs() <= 0.3
        }
        8 => x.abs() + y.abs() <= 0.95,
        _ => false,
    }
}

fn image_rng(seed: u64, image_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id);
    rng
}

/// Renders one image containing shapes drawn from `first` (one object) then `pool`.
///
/// Objects never overlap, so each annotation tightly bounds exactly its own lit pixels.
pub fn render_image(
    cfg: &TaskSplitConfig,
    image_id: u64,
    first: &[u32],
    pool: &[u32],
) -> (Raster, Vec<RenderedObject>) {
    let p = &cfg.render;
    let mut rng = image_rng(cfg.seed, image_id);
    let (w, h) = (p.width as usize, p.height as usize);
    let base: f64 = rng.random_range(0.05..0.25);
    let mut img = vec![0.0f64; w * h * 3];
    for v in img.iter_mut() {
        *v = base;
    }

    let count = rng.random_range(p.min_objects..=p.max_objects);
    let mut occupied: Vec<[i64; 4]> = Vec::new();
    let mut objects = Vec::new();
    for k in 0..count {
        let choices = if k == 0 && !first.is_empty() { first } else { pool };
        let label = *choices.choose(&mut rng).expect("non-empty class pool");
        let size = rng.random_range(p.min_size..=p.max_size) as i64;
        let vertical = rng.random_bool(0.5);
        let color = [
            rng.random_range(0.55..1.0),
            rng.random_range(0.55..1.0),
            rng.random_range(0.55..1.0),
        ];
        let mut placed = None;
        for _ in 0..200 {
            let x0 = rng.random_range(0..=(w as i64 - size));
            let y0 = rng.random_range(0..=(h as i64 - size));
            let clear = occupied.iter().all(|o| {
                x0 + size + 1 <= o[0] || o[2] + 1 <= x0 || y0 + size + 1 <= o[1] || o[3] + 1 <= y0
            });
            if clear {
                placed = Some((x0, y0));
                break;
            }
        }
        let Some((x0, y0)) = placed else { continue };
        let mut lit = Vec::new();
        for v in 0..size {
            for u in 0..size {
                let nx = ((u as f64 + 0.5) / size as f64) * 2.0 - 1.0;
                let ny = ((v as f64 + 0.5) / size as f64) * 2.0 - 1.0;
                if shape_mask(label, nx, ny, vertical) {
                    let (px, py) = ((x0 + u) as usize, (y0 + v) as usize);
                    for c in 0..3 {
                        img[(py * w + px) * 3 + c] = color[c];
                    }
                    lit.push((px as u32, py as u32));
                }
            }
        }
        if lit.is_empty() {
            continue;
        }
        occupied.push([x0, y0, x0 + size, y0 + size]);
        let minx = lit.iter().map(|p| p.0).min().unwrap() as f64;
        let maxx = lit.iter().map(|p| p.0).max().unwrap() as f64;
        let miny = lit.iter().map(|p| p.1).min().unwrap() as f64;
        let maxy = lit.iter().map(|p| p.1).max().unwrap() as f64;
        objects.push(RenderedObject {
            label,
            bbox: [minx, miny, maxx - minx + 1.0, maxy - miny + 1.0],
            pixels: lit,
        });
    }

    let noise = Normal::new(0.0, p.noise.max(1e-12)).expect("valid noise");
    let rgb = img
        .iter()
        .map(|&v| {
            let n = if p.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    (
        Raster {
            width: p.width,
            height: p.height,
            rgb,
        },
        objects,
    )
}

fn image_file(id: u64) -> String {
    format!("images/{id:06}.ppm")
}

/// Renders per-task training manifests and a fully-annotated test manifest.
///
/// Training images of task `t` contain at least one object of a task-`t` class and
/// annotate only task-`t` classes; every other object stays in the pixels unannotated.
/// Image ids are sequential: training tasks first, then test.
pub fn generate_dataset(cfg: &TaskSplitConfig) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let all: Vec<u32> = cfg.tasks.iter().flatten().copied().collect();
    let mut next_id = 1u64;
    let mut rasters = Vec::new();
    let mut train = Vec::with_capacity(cfg.tasks.len());
    for (t, classes) in cfg.tasks.iter().enumerate() {
        let pool: Vec<u32> = if cfg.future_objects_in_train {
            all.clone()
        } else {
            cfg.known_through(t).into_iter().collect()
        };
        let annotated: BTreeSet<u32> = classes.iter().copied().collect();
        let mut m = DatasetManifest::default();
        for _ in 0..cfg.images_per_task_train {
            let id = next_id;
            next_id += 1;
            let (raster, objs) = render_image(cfg, id, classes, &pool);
            m.images.push(ImageRecord {
                id,
                file: image_file(id),
                width: raster.width,
                height: raster.height,
            });
            m.annotations.extend(objs.iter().filter(|o| annotated.contains(&o.label)).map(|o| Annotation {
                image_id: id,
                label: o.label,
                bbox: o.bbox,
            }));
            rasters.push((id, raster));
        }
        train.push(m);
    }
    let mut test = DatasetManifest::default();
    for _ in 0..cfg.images_test {
        let id = next_id;
        next_id += 1;
        let (raster, objs) = render_image(cfg, id, &[], &all);
        test.images.push(ImageRecord {
            id,
            file: image_file(id),
            width: raster.width,
            height: raster.height,
        });
        test.annotations.extend(objs.iter().map(|o| Annotation {
            image_id: id,
            label: o.label,
            bbox: o.bbox,
        }));
        rasters.push((id, raster));
    }
    Ok(GeneratedDataset { train, test, rasters })
}
