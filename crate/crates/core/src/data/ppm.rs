//! Binary RGB PPM (`P6`, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// 8-bit interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
}

impl Raster {
    /// Channel-major `3×H×W` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width as usize, self.height as usize);
        Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            self.rgb[p * 3 + c] as f64 / 255.0
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn decode(bytes: &[u8], context: &str) -> Result<Self> {
        let err = |message: String| Error::Parse {
            context: context.to_string(),
            line: 0,
            message,
        };
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(err("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P6" {
            return Err(err(format!("expected P6 magic, found {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<u32>().map_err(|_| err(format!("bad header number {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(err(format!("unsupported maxval {maxval}")));
        }
        let need = width as usize * height as usize * 3;
        if bytes.len() < pos || bytes.len() - pos != need {
            return Err(err(format!(
                "raster has {} bytes, expected {need}",
                bytes.len().saturating_sub(pos)
            )));
        }
        Ok(Raster {
            width,
            height,
            rgb: bytes[pos..].to_vec(),
        })
    }
}

pub fn write_ppm(path: &Path, raster: &Raster) -> Result<()> {
    fs::write(path, raster.encode())?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Raster::decode(&bytes, &path.display().to_string())
}
