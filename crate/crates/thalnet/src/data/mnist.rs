//! MNIST IDX loader. Accepts the four standard files either raw or
//! gzip-compressed (`<name>` or `<name>.gz`).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::data::ClassificationData;
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

/// Read a file, transparently gunzipping when the name ends in `.gz`.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| format_err(path, 0, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Locate `name` or `name.gz` under `dir`.
fn locate(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} (or .gz) not found in {}", name, dir.display()),
    )))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(path, offset as u64, "file truncated in header"))
}

/// Parse an IDX image file: (pixels, count, rows, cols).
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok((bytes[16..].to_vec(), count, rows, cols))
}

/// Parse an IDX label file: (labels, count).
pub fn read_idx_labels(path: &Path) -> Result<(Vec<u8>, usize)> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok((bytes[8..].to_vec(), count))
}

/// Load the four-file MNIST directory into row-sequence form.
pub fn load_mnist(dir: &Path) -> Result<ClassificationData> {
    let (train_images, train_n, rows, cols) =
        read_idx_images(&locate(dir, "train-images-idx3-ubyte")?)?;
    let (train_labels, train_ln) = read_idx_labels(&locate(dir, "train-labels-idx1-ubyte")?)?;
    let (test_images, test_n, trows, tcols) =
        read_idx_images(&locate(dir, "t10k-images-idx3-ubyte")?)?;
    let (test_labels, test_ln) = read_idx_labels(&locate(dir, "t10k-labels-idx1-ubyte")?)?;

    if train_n != train_ln || test_n != test_ln {
        return Err(Error::Format {
            path: dir.display().to_string(),
            offset: 0,
            msg: format!(
                "image/label count mismatch: train {train_n}/{train_ln}, test {test_n}/{test_ln}"
            ),
        });
    }
    if (rows, cols) != (trows, tcols) {
        return Err(Error::Format {
            path: dir.display().to_string(),
            offset: 0,
            msg: "train and test image dimensions differ".into(),
        });
    }

    let mut data = ClassificationData {
        steps: rows,
        features: cols,
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

/// One image as a row-per-step sequence of [0,1]-scaled feature vectors.
pub fn rows_sequence(pixels: &[u8], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    assert_eq!(pixels.len(), rows * cols);
    pixels
        .chunks(cols)
        .map(|row| row.iter().map(|&p| p as f64 / 255.0).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn write_idx_images(path: &Path, images: &[Vec<u8>], rows: usize, cols: usize, gz: bool) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&(rows as u32).to_be_bytes());
        bytes.extend_from_slice(&(cols as u32).to_be_bytes());
        for img in images {
            bytes.extend_from_slice(img);
        }
        write_file(path, &bytes, gz);
    }

    fn write_idx_labels(path: &Path, labels: &[u8], gz: bool) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        write_file(path, &bytes, gz);
    }

    fn write_file(path: &Path, bytes: &[u8], gz: bool) {
        if gz {
            let f = fs::File::create(path).unwrap();
            let mut enc = GzEncoder::new(f, Compression::default());
            enc.write_all(bytes).unwrap();
            enc.finish().unwrap();
        } else {
            fs::write(path, bytes).unwrap();
        }
    }

    fn tiny_dataset(dir: &Path, gz: bool) {
        let suffix = if gz { ".gz" } else { "" };
        let train: Vec<Vec<u8>> = vec![vec![0; 4], vec![10, 20, 30, 40]];
        let test: Vec<Vec<u8>> = vec![vec![255; 4]];
        write_idx_images(
            &dir.join(format!("train-images-idx3-ubyte{suffix}")),
            &train,
            2,
            2,
            gz,
        );
        write_idx_labels(
            &dir.join(format!("train-labels-idx1-ubyte{suffix}")),
            &[7, 3],
            gz,
        );
        write_idx_images(
            &dir.join(format!("t10k-images-idx3-ubyte{suffix}")),
            &test,
            2,
            2,
            gz,
        );
        write_idx_labels(&dir.join(format!("t10k-labels-idx1-ubyte{suffix}")), &[1], gz);
    }

    #[test]
    fn loads_raw_and_gzipped_files_identically() {
        let raw_dir = tempfile::tempdir().unwrap();
        let gz_dir = tempfile::tempdir().unwrap();
        tiny_dataset(raw_dir.path(), false);
        tiny_dataset(gz_dir.path(), true);
        let a = load_mnist(raw_dir.path()).unwrap();
        let b = load_mnist(gz_dir.path()).unwrap();
        assert_eq!(a.train_images, b.train_images);
        assert_eq!(a.train_labels, vec![7, 3]);
        assert_eq!(a.test_labels, vec![1]);
        assert_eq!((a.steps, a.features), (2, 2));
    }

    #[test]
    fn all_zero_image_becomes_zero_vectors() {
        let seq = rows_sequence(&[0; 784], 28, 28);
        assert_eq!(seq.len(), 28);
        assert!(seq.iter().all(|row| row.len() == 28));
        assert!(seq.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_magic_reports_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train-images-idx3-ubyte");
        let mut bytes = vec![0u8; 16];
        bytes[3] = 0x99;
        fs::write(&path, &bytes).unwrap();
        match read_idx_images(&path) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 0);
                assert!(msg.contains("magic"));
            }
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t10k-images-idx3-ubyte");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 3]); // needs 8 pixel bytes
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_idx_images(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn real_dataset_has_published_shape_when_present() {
        // Gated on the real files being staged locally.
        let dir = Path::new("../../data/mnist");
        if !dir.join("train-images-idx3-ubyte").exists() {
            eprintln!("real MNIST not present; skipping");
            return;
        }
        let d = load_mnist(dir).unwrap();
        assert_eq!(d.count(crate::data::Split::Train), 60_000);
        assert_eq!(d.count(crate::data::Split::Eval), 10_000);
        assert_eq!((d.steps, d.features), (28, 28));
        // First training label in the published file.
        assert_eq!(d.train_labels[0], 5);
    }
}
