//! Byte-stream corpus loader for next-byte prediction. The file is split by
//! fraction: training takes the first `train_frac` of the bytes and
//! evaluation the following `eval_frac`.

use std::fs;
use std::path::Path;

use crate::data::LmData;
use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_FRAC: f64 = 0.90;
pub const DEFAULT_EVAL_FRAC: f64 = 0.05;

pub fn load_text8(path: &Path, train_frac: f64, eval_frac: f64) -> Result<LmData> {
    if !(0.0..=1.0).contains(&train_frac)
        || !(0.0..=1.0).contains(&eval_frac)
        || train_frac + eval_frac > 1.0
    {
        return Err(Error::Argument(format!(
            "invalid split fractions {train_frac}/{eval_frac}"
        )));
    }
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            msg: "empty corpus".into(),
        });
    }
    let n = bytes.len();
    let train_end = (n as f64 * train_frac) as usize;
    let eval_end = (n as f64 * (train_frac + eval_frac)) as usize;
    Ok(LmData {
        train: bytes[..train_end].to_vec(),
        eval: bytes[train_end..eval_end].to_vec(),
    })
}

/// Reduce arbitrary text to the canonical 27-symbol alphabet used by the
/// corpus: lowercase letters survive, everything else becomes a space, and
/// runs of spaces collapse to one.
pub fn canonicalize(text: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(text.len());
    let mut last_space = true;
    for &b in text {
        let c = b.to_ascii_lowercase();
        if c.is_ascii_lowercase() {
            out.push(c);
            last_space = false;
        } else if !last_space {
            out.push(b' ');
            last_space = true;
        }
    }
    if out.last() == Some(&b' ') {
        out.pop();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    #[test]
    fn split_boundaries_follow_the_fractions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus");
        let bytes: Vec<u8> = (0..100).map(|i| (i % 256) as u8).collect();
        fs::write(&path, &bytes).unwrap();
        let lm = load_text8(&path, 0.90, 0.05).unwrap();
        assert_eq!(lm.train.len(), 90);
        assert_eq!(lm.eval.len(), 5);
        assert_eq!(lm.train[..], bytes[..90]);
        assert_eq!(lm.eval[..], bytes[90..95]);
    }

    #[test]
    fn one_hot_extent_is_256() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus");
        fs::write(&path, b"hello world hello world").unwrap();
        let lm = load_text8(&path, 1.0, 0.0).unwrap();
        let b = lm.batch(Split::Train, 4, &[0]).unwrap();
        assert_eq!(b.features(), 256);
    }

    #[test]
    fn bad_fractions_and_empty_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus");
        fs::write(&path, b"abc").unwrap();
        assert!(load_text8(&path, 0.9, 0.2).is_err());
        let empty = dir.path().join("empty");
        fs::write(&empty, b"").unwrap();
        assert!(matches!(
            load_text8(&empty, 0.9, 0.05),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn canonicalize_reduces_to_lowercase_and_single_spaces() {
        assert_eq!(canonicalize(b"Hello,  World!"), b"hello world".to_vec());
        assert_eq!(canonicalize(b"  a  b  "), b"a b".to_vec());
        assert_eq!(canonicalize(b"123"), b"".to_vec());
        let out = canonicalize(b"The GNU General Public License v3.0");
        assert!(out
            .iter()
            .all(|&c| c == b' ' || c.is_ascii_lowercase()));
    }
}
