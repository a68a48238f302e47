//! CIFAR-10 binary loader. Each record is one label byte followed by 3072
//! channel-major pixels (1024 red, 1024 green, 1024 blue). Rows are
//! re-flattened with per-pixel channel interleaving, so each of the 32 row
//! steps carries 96 features: R,G,B for pixel 0, then pixel 1, and so on.

use std::fs;
use std::path::Path;

use crate::data::ClassificationData;
use crate::error::{Error, Result};

const RECORD: usize = 3073;
const SIDE: usize = 32;
const CHANNEL: usize = SIDE * SIDE;

pub const TRAIN_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_BATCH: &str = "test_batch.bin";

/// Interleave one channel-major image into row-major R,G,B-per-pixel order.
fn interleave(pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(3 * CHANNEL);
    for row in 0..SIDE {
        for col in 0..SIDE {
            let p = row * SIDE + col;
            out.push(pixels[p]);
            out.push(pixels[CHANNEL + p]);
            out.push(pixels[2 * CHANNEL + p]);
        }
    }
    out
}

fn read_batch(path: &Path, images: &mut Vec<u8>, labels: &mut Vec<u8>) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: (bytes.len() / RECORD * RECORD) as u64,
            msg: format!(
                "file size {} is not a multiple of the {RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    for record in bytes.chunks(RECORD) {
        let label = record[0];
        if label > 9 {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: (labels.len() * RECORD) as u64,
                msg: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        images.extend(interleave(&record[1..]));
    }
    Ok(())
}

/// Load the six CIFAR-10 binary batches into row-sequence form.
pub fn load_cifar10(dir: &Path) -> Result<ClassificationData> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for name in TRAIN_BATCHES {
        read_batch(&dir.join(name), &mut train_images, &mut train_labels)?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    read_batch(&dir.join(TEST_BATCH), &mut test_images, &mut test_labels)?;

    let mut data = ClassificationData {
        steps: SIDE,
        features: 3 * SIDE,
        train_images,
        train_labels,
        test_images,
        test_labels,
        train_mean: 0.0,
        train_std: 1.0,
    };
    data.compute_train_stats();
    Ok(data)
}

/// One image (channel-major 3072 bytes) as a 32-step sequence of 96
/// [0,1]-scaled features.
pub fn row_sequence(pixels: &[u8]) -> Vec<Vec<f64>> {
    assert_eq!(pixels.len(), 3 * CHANNEL);
    interleave(pixels)
        .chunks(3 * SIDE)
        .map(|row| row.iter().map(|&p| p as f64 / 255.0).collect())
        .collect()
}
