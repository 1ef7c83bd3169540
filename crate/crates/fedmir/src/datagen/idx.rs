//! IDX file ingestion (big-endian, standard image/label layout).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::datagen::{DataPoint, Group};
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Loads an image/label IDX pair into ungrouped data points with pixel
/// values scaled to `[0,1]`. `source_index` is the position in the file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<DataPoint>> {
    let mut images = BufReader::new(File::open(images_path)?);
    let magic = read_u32(&mut images, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(format!(
            "{}: bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let count = read_u32(&mut images, images_path)? as usize;
    let rows = read_u32(&mut images, images_path)? as usize;
    let cols = read_u32(&mut images, images_path)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    images.read_exact(&mut pixels).map_err(|_| {
        Error::format(format!("{}: truncated image data", images_path.display()))
    })?;

    let mut labels = BufReader::new(File::open(labels_path)?);
    let magic = read_u32(&mut labels, labels_path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(format!(
            "{}: bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let label_count = read_u32(&mut labels, labels_path)? as usize;
    if label_count != count {
        return Err(Error::input(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let mut label_bytes = vec![0u8; count];
    labels.read_exact(&mut label_bytes).map_err(|_| {
        Error::format(format!("{}: truncated label data", labels_path.display()))
    })?;

    let dim = rows * cols;
    Ok((0..count)
        .map(|i| DataPoint {
            features: pixels[i * dim..(i + 1) * dim].iter().map(|&b| b as f64 / 255.0).collect(),
            label: label_bytes[i] as usize,
            group: Group::Majority,
            source_index: i,
        })
        .collect())
}

/// Writes points back out as an IDX pair, quantizing features to bytes.
pub fn write_idx(
    points: &[DataPoint],
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let dim = rows * cols;
    let mut images = BufWriter::new(File::create(images_path)?);
    images.write_u32::<BigEndian>(IMAGE_MAGIC)?;
    images.write_u32::<BigEndian>(points.len() as u32)?;
    images.write_u32::<BigEndian>(rows as u32)?;
    images.write_u32::<BigEndian>(cols as u32)?;
    for p in points {
        if p.features.len() != dim {
            return Err(Error::input(format!(
                "point has {} features, expected {dim}",
                p.features.len()
            )));
        }
        for &v in &p.features {
            images.write_u8((v * 255.0).round().clamp(0.0, 255.0) as u8)?;
        }
    }
    images.flush()?;

    let mut labels = BufWriter::new(File::create(labels_path)?);
    labels.write_u32::<BigEndian>(LABEL_MAGIC)?;
    labels.write_u32::<BigEndian>(points.len() as u32)?;
    for p in points {
        if p.label > u8::MAX as usize {
            return Err(Error::input(format!("label {} does not fit in a byte", p.label)));
        }
        labels.write_u8(p.label as u8)?;
    }
    labels.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    r.read_u32::<BigEndian>()
        .map_err(|_| Error::format(format!("{}: truncated header", path.display())))
}
