//! Line-delimited JSON manifest files.
//!
//! ```text
//! {"format":"owdetr-manifest","version":1,"images":2,"annotations":1}
//! {"image":{"id":1,"file":"images/000001.ppm","width":64,"height":64}}
//! {"annotation":{"image_id":1,"label":3,"bbox":[10.0,12.0,14.0,9.0]}}
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, DatasetManifest, ImageRecord};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const FORMAT: &str = "owdetr-manifest";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    images: usize,
    annotations: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Image(ImageRecord),
    Annotation(Annotation),
}

pub fn manifest_to_string(m: &DatasetManifest) -> String {
    let mut out = String::new();
    let header = Header {
        format: FORMAT.into(),
        version: MANIFEST_VERSION,
        images: m.images.len(),
        annotations: m.annotations.len(),
    };
    let _ = writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"));
    for r in &m.images {
        let rec = Record::Image(r.clone());
        let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"));
    }
    for a in &m.annotations {
        let rec = Record::Annotation(a.clone());
        let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"));
    }
    out
}

pub fn manifest_from_str(text: &str, context: &str) -> Result<DatasetManifest> {
    let perr = |line: usize, message: String| Error::Parse {
        context: context.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| perr(1, "empty file, missing header".into()))?;
    let raw: serde_json::Value =
        serde_json::from_str(first).map_err(|e| perr(1, format!("bad header: {e}")))?;
    let version = raw
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| perr(1, "header has no version field".into()))?;
    if version != MANIFEST_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            expected: MANIFEST_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| perr(1, format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(perr(1, format!("unknown format {:?}", header.format)));
    }

    let mut m = DatasetManifest::default();
    let mut ids = BTreeSet::new();
    let mut refs = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let rec: Record = serde_json::from_str(line).map_err(|e| perr(line_no, e.to_string()))?;
        match rec {
            Record::Image(r) => {
                if !ids.insert(r.id) {
                    return Err(perr(line_no, format!("duplicate image id {}", r.id)));
                }
                m.images.push(r);
            }
            Record::Annotation(a) => {
                if a.bbox.iter().any(|v| !v.is_finite()) || a.bbox[2] <= 0.0 || a.bbox[3] <= 0.0 {
                    return Err(perr(line_no, format!("degenerate box {:?}", a.bbox)));
                }
                refs.push((line_no, a.image_id));
                m.annotations.push(a);
            }
        }
    }
    if let Some((line_no, id)) = refs.into_iter().find(|(_, id)| !ids.contains(id)) {
        return Err(perr(line_no, format!("annotation references missing image_id {id}")));
    }
    if m.images.len() != header.images || m.annotations.len() != header.annotations {
        return Err(perr(
            1,
            format!(
                "header declares {} images / {} annotations, file has {} / {}",
                header.images,
                header.annotations,
                m.images.len(),
                m.annotations.len()
            ),
        ));
    }
    Ok(m)
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, manifest_to_string(m))?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    manifest_from_str(&text, &path.display().to_string())
}
