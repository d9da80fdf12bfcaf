//! Fixed-layout little-endian raster formats.
//!
//! `PFC1`: magic, u32 H, u32 W, u32 D, then H*W*D f32 values, pixel-major then band.
//! `PLM1`: magic, u32 H, u32 W, u16 C, then H*W u16 labels (0 = unlabeled).

use std::fs;
use std::path::Path;

use super::{FeatureImage, LabelMap};
use crate::error::{Error, Result};

const PFC_MAGIC: [u8; 4] = *b"PFC1";
const PLM_MAGIC: [u8; 4] = *b"PLM1";
const PFC_HEADER: usize = 16;
const PLM_HEADER: usize = 14;

/// Label colours for PPM renders; label 0 is always black.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [255, 255, 255],
];

pub(crate) fn check_magic(bytes: &[u8], expected: [u8; 4]) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

pub(crate) fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
}

fn u16_at(bytes: &[u8], off: usize) -> u16 {
    u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap())
}

fn payload_len(dims: &[usize], elem: usize, what: &str) -> Result<usize> {
    dims.iter()
        .try_fold(elem, |acc, d| acc.checked_mul(*d))
        .filter(|n| *n <= isize::MAX as usize)
        .ok_or_else(|| Error::DimensionOverflow(format!("{what} dimensions {dims:?}")))
}

pub fn write_raster(img: &FeatureImage) -> Result<Vec<u8>> {
    let dims = [img.height(), img.width(), img.depth()];
    for d in dims {
        if d > u32::MAX as usize {
            return Err(Error::DimensionOverflow(format!("raster dimension {d}")));
        }
    }
    let mut out = Vec::with_capacity(PFC_HEADER + img.data().len() * 4);
    out.extend_from_slice(&PFC_MAGIC);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn read_raster(bytes: &[u8]) -> Result<FeatureImage> {
    check_magic(bytes, PFC_MAGIC)?;
    if bytes.len() < PFC_HEADER {
        return Err(Error::Truncated {
            expected: PFC_HEADER,
            found: bytes.len(),
        });
    }
    let h = u32_at(bytes, 4) as usize;
    let w = u32_at(bytes, 8) as usize;
    let d = u32_at(bytes, 12) as usize;
    let need = payload_len(&[h, w, d], 4, "raster")?
        .checked_add(PFC_HEADER)
        .ok_or_else(|| Error::DimensionOverflow("raster size".into()))?;
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    let data = bytes[PFC_HEADER..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureImage::new(h, w, d, data)
}

pub fn write_labels(lm: &LabelMap) -> Result<Vec<u8>> {
    for d in [lm.height(), lm.width()] {
        if d > u32::MAX as usize {
            return Err(Error::DimensionOverflow(format!("label map dimension {d}")));
        }
    }
    let mut out = Vec::with_capacity(PLM_HEADER + lm.labels().len() * 2);
    out.extend_from_slice(&PLM_MAGIC);
    out.extend_from_slice(&(lm.height() as u32).to_le_bytes());
    out.extend_from_slice(&(lm.width() as u32).to_le_bytes());
    out.extend_from_slice(&(lm.num_classes() as u16).to_le_bytes());
    for l in lm.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn read_labels(bytes: &[u8]) -> Result<LabelMap> {
    check_magic(bytes, PLM_MAGIC)?;
    if bytes.len() < PLM_HEADER {
        return Err(Error::Truncated {
            expected: PLM_HEADER,
            found: bytes.len(),
        });
    }
    let h = u32_at(bytes, 4) as usize;
    let w = u32_at(bytes, 8) as usize;
    let c = u16_at(bytes, 12) as usize;
    let need = payload_len(&[h, w], 2, "label map")?
        .checked_add(PLM_HEADER)
        .ok_or_else(|| Error::DimensionOverflow("label map size".into()))?;
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    let labels = bytes[PLM_HEADER..need]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabelMap::new(h, w, c, labels)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<FeatureImage> {
    read_raster(&read_file(path.as_ref())?)
}

pub fn save_raster(img: &FeatureImage, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &write_raster(img)?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    read_labels(&read_file(path.as_ref())?)
}

pub fn save_labels(lm: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &write_labels(lm)?)
}

/// Binary P6 rendering of a label map with [`PALETTE`]; labels above 15 wrap
/// around the non-black entries.
pub fn render_ppm(lm: &LabelMap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", lm.width(), lm.height()).into_bytes();
    for &l in lm.labels() {
        let idx = if l == 0 { 0 } else { 1 + (l as usize - 1) % 15 };
        out.extend_from_slice(&PALETTE[idx]);
    }
    out
}
