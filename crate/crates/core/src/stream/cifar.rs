//! CIFAR-100 binary layout: per record one coarse-label byte, one fine-label byte and
//! 3072 pixel bytes (1024 red, 1024 green, 1024 blue, each a row-major 32 x 32 plane).

use std::path::Path;

use super::{Dataset, ImageSet};
use crate::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 3074;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const CLASSES: usize = 100;

/// Parses records into HWC images labelled with their fine label.
pub fn parse_cifar100(bytes: &[u8]) -> Result<ImageSet> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD_BYTES;
        return Err(Error::Format(format!(
            "truncated record at byte offset {offset}: {} trailing bytes, records are {CIFAR_RECORD_BYTES} bytes",
            bytes.len() - offset
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * 3 * PLANE);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let fine = rec[1] as usize;
        if fine >= CLASSES || rec[0] as usize >= 20 {
            return Err(Error::Format(format!(
                "record {r} at byte offset {}: label bytes ({}, {}) out of range",
                r * CIFAR_RECORD_BYTES,
                rec[0],
                rec[1]
            )));
        }
        labels.push(fine);
        let planes = &rec[2..];
        for p in 0..PLANE {
            pixels.extend_from_slice(&[planes[p], planes[PLANE + p], planes[2 * PLANE + p]]);
        }
    }
    ImageSet::new([SIDE, SIDE, 3], pixels, labels)
}

pub fn load_cifar100(path: &Path) -> Result<ImageSet> {
    let bytes = std::fs::read(path)?;
    parse_cifar100(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads `train.bin` and `test.bin` from a `cifar-100-binary` directory.
pub fn load_cifar100_dir(dir: &Path) -> Result<Dataset> {
    Ok(Dataset { num_classes: CLASSES, train: load_cifar100(&dir.join("train.bin"))?, test: load_cifar100(&dir.join("test.bin"))? })
}

/// Encodes one record from an HWC `32 x 32 x 3` byte image.
pub fn encode_cifar100_record(coarse: u8, fine: u8, hwc: &[u8]) -> Result<[u8; CIFAR_RECORD_BYTES]> {
    if hwc.len() != 3 * PLANE {
        return Err(Error::Format(format!("record image needs {} bytes, got {}", 3 * PLANE, hwc.len())));
    }
    let mut rec = [0u8; CIFAR_RECORD_BYTES];
    rec[0] = coarse;
    rec[1] = fine;
    for p in 0..PLANE {
        for ch in 0..3 {
            rec[2 + ch * PLANE + p] = hwc[p * 3 + ch];
        }
    }
    Ok(rec)
}
