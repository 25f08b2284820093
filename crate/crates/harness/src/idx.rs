//! Unsigned-byte IDX files (MNIST layout): big-endian magic and extents, then raw bytes.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{HarnessError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| HarnessError::format(self.pos as u64, format!("file ends inside the {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses one IDX file and returns its extents and payload.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let mut r = Reader { bytes, pos: 0 };
    let found = r.u32("magic number")?;
    if found != magic {
        return Err(HarnessError::format(0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        dims.push(r.u32(&format!("extent {d}"))? as usize);
    }
    let need: usize = dims.iter().product();
    let payload = &bytes[r.pos..];
    if payload.len() < need {
        return Err(HarnessError::format(
            bytes.len() as u64,
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(HarnessError::format(
            (r.pos + need) as u64,
            format!("{} trailing bytes after the payload", payload.len() - need),
        ));
    }
    Ok((dims, payload))
}

pub fn encode_idx(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend(magic.to_be_bytes());
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Builds a dataset from image and label bytes.
///
/// Gray values are scaled to `[0, 1]`, replicated over 3 channels and placed
/// centered on a `size×size` canvas (zero border, or a centered crop when larger).
pub fn dataset_from_idx(images: &[u8], labels: &[u8], size: usize, num_classes: usize) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(images, IMAGES_MAGIC)?;
    let (ldims, label_bytes) = parse_idx(labels, LABELS_MAGIC)?;
    let (n, rows, cols) = (idims[0], idims[1], idims[2]);
    if ldims[0] != n {
        return Err(HarnessError::format(4, format!("{} labels for {n} images", ldims[0])));
    }
    let header = 4 + 4 * ldims.len();
    let mut out_labels = Vec::with_capacity(n);
    for (i, &l) in label_bytes.iter().enumerate() {
        if l as usize >= num_classes {
            return Err(HarnessError::format((header + i) as u64, format!("label {l} outside {num_classes} classes")));
        }
        out_labels.push(l as usize);
    }
    let mut data = vec![0f32; n * size * size * 3];
    let (oy, ox) = (size as isize - rows as isize, size as isize - cols as isize);
    let (oy, ox) = (oy.div_euclid(2), ox.div_euclid(2));
    for i in 0..n {
        let img = &pixels[i * rows * cols..(i + 1) * rows * cols];
        for y in 0..rows {
            let ty = y as isize + oy;
            if ty < 0 || ty >= size as isize {
                continue;
            }
            for x in 0..cols {
                let tx = x as isize + ox;
                if tx < 0 || tx >= size as isize {
                    continue;
                }
                let v = f32::from(img[y * cols + x]) / 255.0;
                let base = ((i * size + ty as usize) * size + tx as usize) * 3;
                data[base..base + 3].fill(v);
            }
        }
    }
    Ok(Dataset { images: data, labels: out_labels, height: size, width: size, channels: 3, num_classes })
}

pub fn load_idx(images: &Path, labels: &Path, size: usize, num_classes: usize) -> Result<Dataset> {
    let ib = fs::read(images).map_err(HarnessError::io(images))?;
    let lb = fs::read(labels).map_err(HarnessError::io(labels))?;
    dataset_from_idx(&ib, &lb, size, num_classes)
}

/// Writes the first channel of every image as bytes.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let n = ds.len();
    let mut pixels = Vec::with_capacity(n * ds.height * ds.width);
    for i in 0..n {
        pixels.extend(ds.image(i).chunks(ds.channels).map(|px| (px[0].clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let label_bytes: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    fs::write(images, encode_idx(IMAGES_MAGIC, &[n, ds.height, ds.width], &pixels)).map_err(HarnessError::io(images))?;
    fs::write(labels, encode_idx(LABELS_MAGIC, &[n], &label_bytes)).map_err(HarnessError::io(labels))
}
