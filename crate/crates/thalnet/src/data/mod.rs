//! Dataset ingestion and sequence construction.
//!
//! Classification tasks feed images row by row (MNIST: 28 steps of 28
//! features, CIFAR-10: 32 steps of 96 features); language modeling feeds
//! one-hot bytes. All loaders are deterministic; any shuffling happens in the
//! training loop as a pure function of (seed, epoch).

pub mod cifar;
pub mod mnist;
pub mod text8;

use crate::error::{Error, Result};
use crate::model::LossSpec;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Labels {
    /// One class per sequence.
    Classes(Vec<usize>),
    /// labels[t][b] is the byte following token t of batch row b.
    NextBytes(Vec<Vec<usize>>),
}

/// A batch of equal-length sequences ready for unrolling.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// [batch × time × features]
    pub inputs: Tensor,
    pub labels: Labels,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    pub fn batch(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.inputs.shape()[2]
    }

    /// The [batch × features] slice for token `t`.
    pub fn token(&self, t: usize) -> Tensor {
        let (b, time, f) = (self.batch(), self.tokens(), self.features());
        assert!(t < time, "token {t} out of {time}");
        let mut data = vec![0.0; b * f];
        for row in 0..b {
            let src = (row * time + t) * f;
            data[row * f..(row + 1) * f].copy_from_slice(&self.inputs.data()[src..src + f]);
        }
        Tensor::from_vec(&[b, f], data).expect("token slice shape is valid")
    }

    /// All token slices in order.
    pub fn token_tensors(&self) -> Vec<Tensor> {
        (0..self.tokens()).map(|t| self.token(t)).collect()
    }

    pub fn loss_spec(&self) -> LossSpec {
        match &self.labels {
            Labels::Classes(c) => LossSpec::ClassifyLast(c.clone()),
            Labels::NextBytes(n) => LossSpec::NextByte(n.clone()),
        }
    }

    /// Class labels, if this is a classification batch.
    pub fn class_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Classes(c) => Some(c),
            Labels::NextBytes(_) => None,
        }
    }
}

// ── Pixel permutation ────────────────────────────────────────────────────

/// Fixed random permutation over pixel indices, shared by every image in
/// both splits of a run.
///
/// The index map comes from a Fisher–Yates shuffle driven by an explicit
/// 64-bit linear congruential generator so that runs are reproducible across
/// implementations:
///
/// ```text
/// state ← state × 6364136223846793005 + 1442695040888963407   (mod 2⁶⁴)
/// output ← state >> 33
/// ```
///
/// starting from `state = seed`, with swap index `j = output mod (i + 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    pub seed: u64,
    map: Vec<usize>,
}

const LCG_MUL: u64 = 6364136223846793005;
const LCG_ADD: u64 = 1442695040888963407;

impl Permutation {
    pub fn identity(n: usize) -> Permutation {
        Permutation {
            seed: 0,
            map: (0..n).collect(),
        }
    }

    pub fn from_seed(seed: u64, n: usize) -> Permutation {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(LCG_MUL).wrapping_add(LCG_ADD);
            state >> 33
        };
        let mut map: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (next() % (i as u64 + 1)) as usize;
            map.swap(i, j);
        }
        Permutation { seed, map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    /// output[k] = input[map[k]]
    pub fn apply<T: Copy>(&self, input: &[T]) -> Vec<T> {
        assert_eq!(input.len(), self.map.len(), "permutation length mismatch");
        self.map.iter().map(|&src| input[src]).collect()
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.map.len()];
        for (dst, &src) in self.map.iter().enumerate() {
            inv[src] = dst;
        }
        Permutation {
            seed: self.seed,
            map: inv,
        }
    }
}

// ── Classification data ──────────────────────────────────────────────────

/// Row-sequence image classification data. Image bytes are stored row-major
/// per image (`steps × features` pixels) for both splits.
#[derive(Debug, Clone)]
pub struct ClassificationData {
    pub steps: usize,
    pub features: usize,
    pub train_images: Vec<u8>,
    pub train_labels: Vec<u8>,
    pub test_images: Vec<u8>,
    pub test_labels: Vec<u8>,
    /// Mean and standard deviation of train pixels on the [0,1] scale, for
    /// the optional standardization flag.
    pub train_mean: f64,
    pub train_std: f64,
}

impl ClassificationData {
    pub fn pixels_per_image(&self) -> usize {
        self.steps * self.features
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_labels.len(),
            Split::Eval => self.test_labels.len(),
        }
    }

    pub fn image(&self, split: Split, index: usize) -> (&[u8], usize) {
        let n = self.pixels_per_image();
        match split {
            Split::Train => (
                &self.train_images[index * n..(index + 1) * n],
                self.train_labels[index] as usize,
            ),
            Split::Eval => (
                &self.test_images[index * n..(index + 1) * n],
                self.test_labels[index] as usize,
            ),
        }
    }

    pub(crate) fn compute_train_stats(&mut self) {
        let n = self.train_images.len().max(1);
        let mean = self.train_images.iter().map(|&p| p as f64 / 255.0).sum::<f64>() / n as f64;
        let var = self
            .train_images
            .iter()
            .map(|&p| {
                let d = p as f64 / 255.0 - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        self.train_mean = mean;
        self.train_std = var.sqrt().max(1e-8);
    }

    /// Assemble a batch from image indices. The permutation, when present,
    /// reorders each image's pixels before the rows are cut; standardization
    /// replaces the [0,1] scaling by (x − mean)/std over train statistics.
    pub fn batch(
        &self,
        split: Split,
        indices: &[usize],
        perm: Option<&Permutation>,
        standardize: bool,
    ) -> Result<SequenceBatch> {
        if indices.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let pixels = self.pixels_per_image();
        if let Some(p) = perm {
            if p.len() != pixels {
                return Err(Error::Argument(format!(
                    "permutation covers {} pixels but images have {pixels}",
                    p.len()
                )));
            }
        }
        let (b, t, f) = (indices.len(), self.steps, self.features);
        let mut data = Vec::with_capacity(b * t * f);
        let mut classes = Vec::with_capacity(b);
        for &i in indices {
            let (img, label) = self.image(split, i);
            classes.push(label);
            let arranged: Vec<u8> = match perm {
                Some(p) => p.apply(img),
                None => img.to_vec(),
            };
            data.extend(arranged.iter().map(|&px| {
                let v = px as f64 / 255.0;
                if standardize {
                    (v - self.train_mean) / self.train_std
                } else {
                    v
                }
            }));
        }
        Ok(SequenceBatch {
            inputs: Tensor::from_vec(&[b, t, f], data)?,
            labels: Labels::Classes(classes),
            lengths: vec![t; b],
        })
    }
}

// ── Language-model data ──────────────────────────────────────────────────

/// Byte streams for next-byte prediction.
#[derive(Debug, Clone)]
pub struct LmData {
    pub train: Vec<u8>,
    pub eval: Vec<u8>,
}

pub const BYTE_CLASSES: usize = 256;

impl LmData {
    pub fn stream(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    /// Number of contiguous non-overlapping windows of `seq_len` bytes that
    /// also have a next byte available for the final target.
    pub fn window_count(&self, split: Split, seq_len: usize) -> usize {
        let len = self.stream(split).len();
        if len <= seq_len {
            0
        } else {
            (len - 1) / seq_len
        }
    }

    /// Build a batch of one-hot byte windows. `windows` are window indices;
    /// window w covers input bytes [w·L, w·L+L) with targets shifted one.
    pub fn batch(&self, split: Split, seq_len: usize, windows: &[usize]) -> Result<SequenceBatch> {
        let stream = self.stream(split);
        if stream.len() < seq_len + 1 {
            return Err(Error::Argument(format!(
                "stream of {} bytes is shorter than seq_len+1 = {}",
                stream.len(),
                seq_len + 1
            )));
        }
        if windows.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let available = self.window_count(split, seq_len);
        if let Some(&w) = windows.iter().find(|&&w| w >= available) {
            return Err(Error::Argument(format!(
                "window {w} out of range ({available} available)"
            )));
        }
        let b = windows.len();
        let mut data = vec![0.0; b * seq_len * BYTE_CLASSES];
        let mut targets = vec![vec![0usize; b]; seq_len];
        for (row, &w) in windows.iter().enumerate() {
            let start = w * seq_len;
            for t in 0..seq_len {
                let byte = stream[start + t] as usize;
                data[(row * seq_len + t) * BYTE_CLASSES + byte] = 1.0;
                targets[t][row] = stream[start + t + 1] as usize;
            }
        }
        Ok(SequenceBatch {
            inputs: Tensor::from_vec(&[b, seq_len, BYTE_CLASSES], data)?,
            labels: Labels::NextBytes(targets),
            lengths: vec![seq_len; b],
        })
    }
}

/// Task data for the training loop.
#[derive(Debug, Clone)]
pub enum Dataset {
    Classification(ClassificationData),
    LanguageModel(LmData),
}

impl Dataset {
    pub fn input_features(&self) -> usize {
        match self {
            Dataset::Classification(c) => c.features,
            Dataset::LanguageModel(_) => BYTE_CLASSES,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Dataset::Classification(_) => 10,
            Dataset::LanguageModel(_) => BYTE_CLASSES,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_is_a_seeded_bijection() {
        let p = Permutation::from_seed(7, 784);
        let mut seen = vec![false; 784];
        for &i in p.map() {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.into_iter().all(|s| s));
        assert_eq!(p, Permutation::from_seed(7, 784));
        assert_ne!(p.map(), Permutation::from_seed(8, 784).map());
    }

    #[test]
    fn permutation_matches_documented_generator() {
        // Re-derive the map with a standalone implementation of the
        // documented LCG + Fisher–Yates.
        let n = 16;
        let seed = 99u64;
        let mut state = seed;
        let mut map: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let j = ((state >> 33) % (i as u64 + 1)) as usize;
            map.swap(i, j);
        }
        assert_eq!(Permutation::from_seed(seed, n).map(), &map[..]);
    }

    #[test]
    fn identity_and_inverse_permutations() {
        let data: Vec<u8> = (0..=255).collect();
        let id = Permutation::identity(256);
        assert_eq!(id.apply(&data), data);

        let p = Permutation::from_seed(3, 256);
        let shuffled = p.apply(&data);
        let back = p.inverse().apply(&shuffled);
        assert_ne!(shuffled, data);
        assert_eq!(back, data);

        let mut hist = [0usize; 256];
        for &b in &shuffled {
            hist[b as usize] += 1;
        }
        assert!(hist.iter().all(|&c| c == 1));
    }

    fn tiny_classification() -> ClassificationData {
        // Two 2×3 train images and one test image with distinct pixels.
        let mut d = ClassificationData {
            steps: 2,
            features: 3,
            train_images: vec![0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60],
            train_labels: vec![1, 2],
            test_images: vec![5, 5, 5, 5, 5, 5],
            test_labels: vec![0],
            train_mean: 0.0,
            train_std: 1.0,
        };
        d.compute_train_stats();
        d
    }

    #[test]
    fn classification_batch_scales_and_orders_rows() {
        let d = tiny_classification();
        let b = d.batch(Split::Train, &[1, 0], None, false).unwrap();
        assert_eq!(b.inputs.shape(), &[2, 2, 3]);
        assert_eq!(b.class_labels().unwrap(), &[2, 1]);
        // First batch row is image 1.
        let t0 = b.token(0);
        assert!((t0.data()[0] - 10.0 / 255.0).abs() < 1e-12);
        assert!((t0.data()[3] - 0.0).abs() < 1e-12);
        let t1 = b.token(1);
        assert!((t1.data()[0] - 40.0 / 255.0).abs() < 1e-12);
        assert!((t1.data()[5] - 1.0).abs() < 1e-12);
        assert_eq!(b.lengths, vec![2, 2]);
    }

    #[test]
    fn standardized_batch_has_train_statistics_applied() {
        let d = tiny_classification();
        let b = d.batch(Split::Train, &[0], None, true).unwrap();
        let want = (0.0 / 255.0 - d.train_mean) / d.train_std;
        assert!((b.inputs.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn lm_batch_shifts_targets_by_one() {
        let lm = LmData {
            train: b"abcd".to_vec(),
            eval: vec![],
        };
        assert_eq!(lm.window_count(Split::Train, 3), 1);
        let b = lm.batch(Split::Train, 3, &[0]).unwrap();
        assert_eq!(b.inputs.shape(), &[1, 3, 256]);
        // Inputs one-hot a, b, c.
        for (t, &byte) in b"abc".iter().enumerate() {
            let tok = b.token(t);
            assert_eq!(tok.data()[byte as usize], 1.0);
            assert_eq!(tok.data().iter().sum::<f64>(), 1.0);
        }
        // Targets b, c, d.
        let Labels::NextBytes(targets) = &b.labels else {
            unreachable!()
        };
        assert_eq!(
            targets.iter().map(|row| row[0] as u8).collect::<Vec<_>>(),
            b"bcd".to_vec()
        );
    }

    #[test]
    fn lm_short_stream_is_rejected() {
        let lm = LmData {
            train: b"ab".to_vec(),
            eval: vec![],
        };
        assert!(matches!(
            lm.batch(Split::Train, 3, &[0]),
            Err(Error::Argument(_))
        ));
        assert_eq!(lm.window_count(Split::Train, 3), 0);
    }

    #[test]
    fn lm_windows_do_not_overlap() {
        let lm = LmData {
            train: (0..=9u8).collect(),
            eval: vec![],
        };
        // 10 bytes, seq_len 3 → windows [0..3], [3..6], [6..9] (byte 9 is
        // the last target).
        assert_eq!(lm.window_count(Split::Train, 3), 3);
        let b = lm.batch(Split::Train, 3, &[0, 1, 2]).unwrap();
        let Labels::NextBytes(targets) = &b.labels else {
            unreachable!()
        };
        assert_eq!(targets[0], vec![1, 4, 7]);
        assert_eq!(targets[2], vec![3, 6, 9]);
    }

    #[test]
    fn token_extraction_matches_flat_layout() {
        let inputs = Tensor::from_vec(&[2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let batch = SequenceBatch {
            inputs,
            labels: Labels::Classes(vec![0, 1]),
            lengths: vec![2, 2],
        };
        assert_eq!(batch.token(0).data(), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(batch.token(1).data(), &[3.0, 4.0, 7.0, 8.0]);
    }
}
