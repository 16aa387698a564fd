//! Benchmark data: the copying task and pixel-by-pixel MNIST.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use thiserror::Error;

use crate::numerics::Rng;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message} (at byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("image file has {images} entries but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("prediction has {got} entries, target has {expected}")]
    Length { expected: usize, got: usize },
    #[error("invalid copying-task parameters: {0}")]
    BadParams(String),
}

pub type Result<T> = std::result::Result<T, TaskError>;

/// Number of distinct copying-task tokens `a_0..a_9`.
pub const COPY_VOCAB: usize = 10;
/// Token used for blanks / the delay.
pub const BLANK: u8 = 8;
/// Token marking "start reproducing now".
pub const DELIMITER: u8 = 9;
/// Length of the pattern to memorize.
pub const PATTERN_LEN: usize = 10;

/// One copying-task example with delay `T`; both sequences have `T + 20`
/// entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub inputs: Vec<u8>,
    pub targets: Vec<u8>,
    pub delay: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Checks the layout: 10 pattern tokens from `0..8`, `T − 1` blanks,
    /// a delimiter, 10 blanks; targets are `T + 10` blanks then the pattern.
    pub fn check_layout(&self) -> std::result::Result<(), String> {
        let t = self.delay;
        let len = t + 20;
        if self.inputs.len() != len || self.targets.len() != len {
            return Err(format!("expected length {len}"));
        }
        if let Some(k) = self.inputs[..PATTERN_LEN].iter().position(|&a| a >= BLANK) {
            return Err(format!("pattern token at {k} outside 0..8"));
        }
        if let Some(k) = (PATTERN_LEN..PATTERN_LEN + t - 1).find(|&k| self.inputs[k] != BLANK) {
            return Err(format!("delay position {k} is not blank"));
        }
        if self.inputs[t + 9] != DELIMITER {
            return Err(format!("position {} is not the delimiter", t + 9));
        }
        if let Some(k) = (t + 10..len).find(|&k| self.inputs[k] != BLANK) {
            return Err(format!("tail position {k} is not blank"));
        }
        if let Some(k) = (0..t + 10).find(|&k| self.targets[k] != BLANK) {
            return Err(format!("target position {k} is not blank"));
        }
        if self.targets[t + 10..] != self.inputs[..PATTERN_LEN] {
            return Err("recall block does not match the pattern".into());
        }
        Ok(())
    }

    /// Positions of the final 10 outputs (the recall block).
    pub fn recall_range(&self) -> std::ops::Range<usize> {
        self.delay + 10..self.delay + 20
    }
}

pub fn gen_copying(delay: usize, count: usize, rng: &mut Rng) -> Result<Vec<TokenSequence>> {
    if delay == 0 || count == 0 {
        return Err(TaskError::BadParams(format!("delay={delay}, count={count}; both must be >= 1")));
    }
    Ok((0..count).map(|_| copying_example(delay, rng)).collect())
}

fn copying_example(delay: usize, rng: &mut Rng) -> TokenSequence {
    let len = delay + 20;
    let mut inputs = vec![BLANK; len];
    for tok in &mut inputs[..PATTERN_LEN] {
        *tok = rng.below(8) as u8;
    }
    inputs[delay + 9] = DELIMITER;
    let mut targets = vec![BLANK; len];
    targets[delay + 10..].copy_from_slice(&inputs[..PATTERN_LEN]);
    TokenSequence { inputs, targets, delay }
}

/// `(recall_acc, full_acc)`: accuracy over the final 10 positions and over
/// the whole sequence.
pub fn copying_metrics(pred: &[u8], target: &TokenSequence) -> Result<(f64, f64)> {
    if pred.len() != target.targets.len() {
        return Err(TaskError::Length {
            expected: target.targets.len(),
            got: pred.len(),
        });
    }
    let correct = |r: std::ops::Range<usize>| r.clone().filter(|&k| pred[k] == target.targets[k]).count();
    let recall = correct(target.recall_range()) as f64 / PATTERN_LEN as f64;
    let full = correct(0..pred.len()) as f64 / pred.len() as f64;
    Ok((recall, full))
}

const COPY_CACHE_MAGIC: &[u8; 4] = b"HDCP";
const COPY_CACHE_VERSION: u32 = 1;

/// Writes a generated copying dataset.
///
/// Layout (little-endian): `b"HDCP"`, `version: u32 = 1`, `delay: u32`,
/// `count: u32`, `seed: u64`, then per example `T + 20` input bytes
/// followed by `T + 20` target bytes.
pub fn write_copying_cache(path: &Path, seed: u64, data: &[TokenSequence]) -> Result<()> {
    let io_err = |source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    };
    let delay = data.first().map_or(0, |s| s.delay);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut header = Vec::with_capacity(24);
    header.extend_from_slice(COPY_CACHE_MAGIC);
    header.extend_from_slice(&COPY_CACHE_VERSION.to_le_bytes());
    header.extend_from_slice(&(delay as u32).to_le_bytes());
    header.extend_from_slice(&(data.len() as u32).to_le_bytes());
    header.extend_from_slice(&seed.to_le_bytes());
    w.write_all(&header).map_err(io_err)?;
    for s in data {
        if s.delay != delay {
            return Err(TaskError::BadParams("mixed delays in one cache file".into()));
        }
        w.write_all(&s.inputs).map_err(io_err)?;
        w.write_all(&s.targets).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a file written by [`write_copying_cache`]; returns `(seed, data)`.
pub fn read_copying_cache(path: &Path) -> Result<(u64, Vec<TokenSequence>)> {
    let bytes = read_all(path)?;
    let fmt_err = |offset: usize, message: &str| TaskError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 24 || &bytes[..4] != COPY_CACHE_MAGIC {
        return Err(fmt_err(0, "missing HDCP header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != COPY_CACHE_VERSION {
        return Err(fmt_err(4, &format!("unsupported version {}", u32_at(4))));
    }
    let delay = u32_at(8) as usize;
    let count = u32_at(12) as usize;
    let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let len = delay + 20;
    if bytes.len() != 24 + count * 2 * len {
        return Err(fmt_err(24, &format!("expected {} payload bytes, found {}", count * 2 * len, bytes.len() - 24)));
    }
    let data = bytes[24..]
        .chunks_exact(2 * len)
        .map(|chunk| TokenSequence {
            inputs: chunk[..len].to_vec(),
            targets: chunk[len..].to_vec(),
            delay,
        })
        .collect();
    Ok((seed, data))
}

/// A grayscale image read one pixel per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSequence {
    /// Values in `[0, 1]`, row-major.
    pub pixels: Vec<f64>,
    pub label: u8,
    /// Side length of the square image the pixels came from.
    pub side: usize,
}

impl PixelSequence {
    /// 2×2 average pooling: 28×28 (784 steps) becomes 14×14 (196 steps).
    pub fn downsample_2x(&self) -> PixelSequence {
        let side = self.side / 2;
        let mut pixels = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                let at = |rr: usize, cc: usize| self.pixels[rr * self.side + cc];
                let sum = at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1);
                pixels.push(sum / 4.0);
            }
        }
        PixelSequence {
            pixels,
            label: self.label,
            side,
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let io_err = |source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes).map_err(io_err)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes).map_err(io_err)?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| TaskError::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX3 image file (raw or `.gz`) into `(rows, cols, images)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let bytes = read_all(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(TaskError::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let payload = &bytes[16..];
    let want = count * rows * cols;
    if payload.len() != want {
        return Err(TaskError::Format {
            path: path.to_path_buf(),
            offset: 16,
            message: format!("header promises {count}x{rows}x{cols} = {want} bytes, found {}", payload.len()),
        });
    }
    let images = if rows * cols == 0 {
        vec![Vec::new(); count]
    } else {
        payload.chunks_exact(rows * cols).map(<[u8]>::to_vec).collect()
    };
    Ok((rows, cols, images))
}

/// Parses an IDX1 label file (raw or `.gz`).
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_all(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(TaskError::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(TaskError::Format {
            path: path.to_path_buf(),
            offset: 8,
            message: format!("header promises {count} labels, found {}", payload.len()),
        });
    }
    if let Some(k) = payload.iter().position(|&l| l > 9) {
        return Err(TaskError::Format {
            path: path.to_path_buf(),
            offset: 8 + k as u64,
            message: format!("label {} is not a digit", payload[k]),
        });
    }
    Ok(payload.to_vec())
}

/// Loads paired IDX image and label files as pixel sequences scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<PixelSequence>> {
    let (rows, cols, images) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(TaskError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    if rows != cols {
        return Err(TaskError::Format {
            path: images_path.to_path_buf(),
            offset: 8,
            message: format!("expected square images, got {rows}x{cols}"),
        });
    }
    Ok(images
        .into_iter()
        .zip(labels)
        .map(|(img, label)| PixelSequence {
            pixels: img.iter().map(|&b| b as f64 / 255.0).collect(),
            label,
            side: rows,
        })
        .collect())
}

/// Splits the official 60k training file into 50k train and the last 10k as
/// validation. Smaller files are split proportionally (5/6 train).
pub fn split_train_val(mut data: Vec<PixelSequence>) -> (Vec<PixelSequence>, Vec<PixelSequence>) {
    let n_train = if data.len() == 60_000 { 50_000 } else { data.len() * 5 / 6 };
    let val = data.split_off(n_train);
    (data, val)
}

/// A fixed reordering of pixel positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    indices: Vec<usize>,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        Permutation {
            indices: (0..len).collect(),
        }
    }

    /// Fisher-Yates shuffle driven by `Rng::new(seed)`.
    pub fn from_seed(len: usize, seed: u64) -> Self {
        let mut indices: Vec<usize> = (0..len).collect();
        Rng::new(seed).shuffle(&mut indices);
        Permutation { indices }
    }

    pub fn from_indices(indices: Vec<usize>) -> Option<Self> {
        let mut seen = vec![false; indices.len()];
        for &i in &indices {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return None;
            }
        }
        Some(Permutation { indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.indices.len()];
        for (i, &p) in self.indices.iter().enumerate() {
            inv[p] = i;
        }
        Permutation { indices: inv }
    }
}

/// `output[i] = input[perm(i)]`; the label is unchanged.
pub fn apply_permutation(seq: &PixelSequence, perm: &Permutation) -> PixelSequence {
    assert_eq!(seq.pixels.len(), perm.len(), "permutation length mismatch");
    PixelSequence {
        pixels: perm.indices.iter().map(|&j| seq.pixels[j]).collect(),
        label: seq.label,
        side: seq.side,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn short_delay_layout() {
        let data = gen_copying(5, 20, &mut Rng::new(1)).unwrap();
        for s in &data {
            assert_eq!(s.len(), 25);
            assert!(s.inputs[10..14].iter().all(|&a| a == BLANK));
            assert_eq!(s.inputs[14], DELIMITER);
            assert_eq!(s.targets[15..], s.inputs[..10]);
            s.check_layout().unwrap();
        }
    }

    #[test]
    fn bad_params_rejected() {
        assert!(gen_copying(0, 3, &mut Rng::new(0)).is_err());
        assert!(gen_copying(3, 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn pattern_tokens_are_uniform_over_eight() {
        // 1e5 draws, p = 1/8: 3 sigma of a frequency is 0.0031.
        let data = gen_copying(10, 10_000, &mut Rng::new(2)).unwrap();
        let mut counts = [0usize; 8];
        for s in &data {
            for &a in &s.inputs[..10] {
                counts[a as usize] += 1;
            }
        }
        let total = 100_000.0;
        let mut chi2 = 0.0;
        for &c in &counts {
            let freq = c as f64 / total;
            assert!((freq - 0.125).abs() < 0.01, "{counts:?}");
            chi2 += (c as f64 - total / 8.0).powi(2) / (total / 8.0);
        }
        // 99.9th percentile of chi-square with 7 degrees of freedom.
        assert!(chi2 < 24.32, "chi2 {chi2}");
    }

    #[test]
    fn metrics_examples() {
        let s = &gen_copying(30, 1, &mut Rng::new(3)).unwrap()[0];
        assert_eq!(copying_metrics(&s.targets, s).unwrap(), (1.0, 1.0));
        let blank = vec![BLANK; s.len()];
        let (recall, full) = copying_metrics(&blank, s).unwrap();
        assert_eq!(recall, 0.0);
        assert_eq!(full, 40.0 / 50.0);
        assert!(copying_metrics(&blank[1..], s).is_err());
    }

    #[test]
    fn random_predictor_recalls_one_in_ten() {
        let mut rng = Rng::new(4);
        let data = gen_copying(5, 5000, &mut rng).unwrap();
        let mean: f64 = data
            .iter()
            .map(|s| {
                let pred: Vec<u8> = (0..s.len()).map(|_| rng.below(10) as u8).collect();
                copying_metrics(&pred, s).unwrap().0
            })
            .sum::<f64>()
            / 5000.0;
        // SE of the mean is sqrt(0.09 / 50000) = 0.0013.
        assert!((mean - 0.1).abs() < 0.005, "{mean}");
    }

    #[test]
    fn copy_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("copy.bin");
        let data = gen_copying(7, 13, &mut Rng::new(5)).unwrap();
        write_copying_cache(&path, 5, &data).unwrap();
        let (seed, back) = read_copying_cache(&path).unwrap();
        assert_eq!(seed, 5);
        assert_eq!(back, data);
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_copying_cache(&path), Err(TaskError::Format { .. })));
    }

    fn write_idx(dir: &Path, images: &[Vec<u8>], labels: &[u8], side: u32) -> (PathBuf, PathBuf) {
        let ip = dir.join("img-idx3-ubyte");
        let lp = dir.join("lbl-idx1-ubyte");
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, images.len() as u32, side, side] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        for img in images {
            b.extend_from_slice(img);
        }
        std::fs::write(&ip, b).unwrap();
        let mut b = Vec::new();
        for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(labels);
        std::fs::write(&lp, b).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_parsing_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = vec![vec![0, 255, 51, 102], vec![255, 255, 0, 0]];
        let (ip, lp) = write_idx(dir.path(), &imgs, &[3, 9], 2);
        let seqs = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].pixels, vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(seqs[1].label, 9);
        let pooled = seqs[0].downsample_2x();
        assert_eq!(pooled.pixels.len(), 1);
        assert!((pooled.pixels[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[vec![1, 2, 3, 4]], &[12], 2);
        match read_idx_labels(&lp) {
            Err(TaskError::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        // Swap the files: wrong magic at offset 0.
        match read_idx_images(&lp) {
            Err(TaskError::Format { offset, message, .. }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("0x00000801"));
            }
            other => panic!("{other:?}"),
        }
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.pop();
        std::fs::write(&ip, bytes).unwrap();
        assert!(matches!(read_idx_images(&ip), Err(TaskError::Format { offset: 16, .. })));
        assert!(matches!(
            read_idx_images(&dir.path().join("missing")),
            Err(TaskError::Io { .. })
        ));
    }

    #[test]
    fn permutation_basics() {
        let seq = PixelSequence {
            pixels: (0..16).map(|i| i as f64).collect(),
            label: 4,
            side: 4,
        };
        assert_eq!(apply_permutation(&seq, &Permutation::identity(16)), seq);
        let perm = Permutation::from_seed(16, 9);
        assert_eq!(perm, Permutation::from_seed(16, 9));
        let there = apply_permutation(&seq, &perm);
        assert_eq!(there.label, 4);
        assert_eq!(there.pixels[3], seq.pixels[perm.indices()[3]]);
        assert_eq!(apply_permutation(&there, &perm.inverse()), seq);
        assert!(Permutation::from_indices(vec![0, 0]).is_none());
    }

    #[test]
    fn split_uses_last_block_for_validation() {
        let data: Vec<PixelSequence> = (0..12)
            .map(|i| PixelSequence {
                pixels: vec![i as f64],
                label: 0,
                side: 1,
            })
            .collect();
        let (train, val) = split_train_val(data);
        assert_eq!(train.len(), 10);
        assert_eq!(val[0].pixels[0], 10.0);
    }

    proptest! {
        #[test]
        fn generated_sequences_pass_layout(delay in 1usize..120, seed in any::<u64>()) {
            let a = gen_copying(delay, 4, &mut Rng::new(seed)).unwrap();
            for s in &a {
                prop_assert!(s.check_layout().is_ok());
            }
            prop_assert_eq!(a, gen_copying(delay, 4, &mut Rng::new(seed)).unwrap());
        }
    }
}
