//! Benchmark corpora as labelled sequences.
//!
//! Spatial samples are MNIST bitmaps fed one 28-pixel row per step. Temporal
//! samples are pen trajectories, one `(dx, dy, end_of_stroke, end_of_digit)`
//! tuple per step.
//!
//! # Stroke text format
//!
//! A corpus is a directory of sample files named `<index>.txt` (indices
//! `0..n`, contiguous) plus a label file with one class index per line; line
//! `i` labels `<i>.txt`. Each sample line holds four whitespace-separated
//! numbers `dx dy eos eod`. Only the last line may, and must, have `eod = 1`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;
pub const STROKE_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("trailing bytes after {expected} bytes of payload ({found} present)")]
    TrailingBytes { expected: usize, found: usize },
    #[error("image dimensions {rows}x{cols}, expected 28x28")]
    BadDimensions { rows: usize, cols: usize },
    #[error("label {0} out of range 0..=9")]
    LabelRange(usize),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("{0}: empty sample")]
    EmptySample(String),
    #[error("{0}: missing end-of-digit terminator")]
    MissingTerminator(String),
    #[error("train size {train} invalid for a corpus of {corpus}")]
    SplitSize { train: usize, corpus: usize },
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("inconsistent sample dimensions in batch")]
    RaggedBatch,
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A labelled sequence of stimulus vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub steps: Vec<Vec<f64>>,
    pub label: usize,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Stimulus width `S` (0 for an empty sample).
    pub fn dim(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrokeStep {
    pub dx: f64,
    pub dy: f64,
    pub end_of_stroke: bool,
    pub end_of_digit: bool,
}

impl StrokeStep {
    pub fn to_stimulus(self) -> Vec<f64> {
        vec![self.dx, self.dy, f64::from(u8::from(self.end_of_stroke)), f64::from(u8::from(self.end_of_digit))]
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { needed: offset + 4, found: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], needed: usize) -> Result<()> {
    match bytes.len().cmp(&needed) {
        std::cmp::Ordering::Less => Err(DataError::Truncated { needed, found: bytes.len() }),
        std::cmp::Ordering::Greater => Err(DataError::TrailingBytes { expected: needed, found: bytes.len() }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

/// Parses an in-memory IDX image file into 784-byte row-major images.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(DataError::BadDimensions { rows, cols });
    }
    check_payload(bytes, 16 + count * IMAGE_PIXELS)?;
    Ok(bytes[16..].chunks_exact(IMAGE_PIXELS).map(<[u8]>::to_vec).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    check_payload(bytes, 8 + count)?;
    bytes[8..]
        .iter()
        .map(|&b| if (b as usize) < NUM_CLASSES { Ok(b as usize) } else { Err(DataError::LabelRange(b as usize)) })
        .collect()
}

/// Reads an IDX image file (raw or gzip-compressed).
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<Vec<u8>>> {
    parse_idx_images(&read_bytes(path.as_ref())?)
}

/// Reads an IDX label file (raw or gzip-compressed).
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    parse_idx_labels(&read_bytes(path.as_ref())?)
}

pub fn encode_idx_images(images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * IMAGE_PIXELS);
    for v in [IMAGE_MAGIC, images.len() as u32, IMAGE_SIDE as u32, IMAGE_SIDE as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    images.iter().for_each(|img| out.extend_from_slice(img));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// One normalized row per step: pixel / 255.
pub fn to_row_sequence(image: &[u8]) -> Vec<Vec<f64>> {
    image.chunks(IMAGE_SIDE).map(|row| row.iter().map(|&p| f64::from(p) / 255.0).collect()).collect()
}

/// Pairs images with labels as row-sequence samples.
pub fn pair_spatial(images: &[Vec<u8>], labels: &[usize]) -> Result<Vec<SequenceSample>> {
    if images.len() != labels.len() {
        return Err(DataError::CountMismatch { images: images.len(), labels: labels.len() });
    }
    Ok(images.iter().zip(labels).map(|(img, &label)| SequenceSample { steps: to_row_sequence(img), label }).collect())
}

fn find_idx(dir: &Path, stem: &str) -> PathBuf {
    let raw = dir.join(stem);
    if raw.exists() {
        raw
    } else {
        dir.join(format!("{stem}.gz"))
    }
}

/// Loads the full 70,000-image corpus (training file followed by the t10k
/// file) from an MNIST directory.
pub fn load_spatial_dir(dir: impl AsRef<Path>) -> Result<Vec<SequenceSample>> {
    let dir = dir.as_ref();
    let mut corpus = Vec::new();
    for prefix in ["train", "t10k"] {
        let images = load_idx_images(find_idx(dir, &format!("{prefix}-images-idx3-ubyte")))?;
        let labels = load_idx_labels(find_idx(dir, &format!("{prefix}-labels-idx1-ubyte")))?;
        corpus.extend(pair_spatial(&images, &labels)?);
    }
    Ok(corpus)
}

/// Parses one stroke sample file.
pub fn parse_stroke_sample(text: &str, file: &str) -> Result<Vec<StrokeStep>> {
    let mut steps = Vec::new();
    let err = |line: usize, msg: String| DataError::Parse { file: file.to_string(), line, msg };
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lineno = n + 1;
        if steps.last().is_some_and(|s: &StrokeStep| s.end_of_digit) {
            return Err(err(lineno, "step after end of digit".into()));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != STROKE_DIM {
            return Err(err(lineno, format!("expected 4 tokens, found {}", tokens.len())));
        }
        let mut vals = [0.0; STROKE_DIM];
        for (v, tok) in vals.iter_mut().zip(&tokens) {
            *v = tok.parse::<f64>().map_err(|_| err(lineno, format!("non-numeric token {tok:?}")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite token {tok:?}")));
            }
        }
        let flag = |v: f64| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(err(lineno, format!("flag {v} not in {{0,1}}"))),
        };
        steps.push(StrokeStep {
            dx: vals[0],
            dy: vals[1],
            end_of_stroke: flag(vals[2])?,
            end_of_digit: flag(vals[3])?,
        });
    }
    match steps.last() {
        None => Err(DataError::EmptySample(file.to_string())),
        Some(s) if !s.end_of_digit => Err(DataError::MissingTerminator(file.to_string())),
        Some(_) => Ok(steps),
    }
}

fn parse_label_file(text: &str, file: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let v: usize = l.trim().parse().map_err(|_| DataError::Parse {
                file: file.to_string(),
                line: n + 1,
                msg: format!("bad label {:?}", l.trim()),
            })?;
            if v < NUM_CLASSES {
                Ok(v)
            } else {
                Err(DataError::LabelRange(v))
            }
        })
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Loads a stroke corpus in the canonical text format (see module docs).
pub fn load_strokes(dir: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Vec<SequenceSample>> {
    let dir = dir.as_ref();
    let labels_path = labels_path.as_ref();
    let labels = parse_label_file(&read_text(labels_path)?, &labels_path.display().to_string())?;
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let mut files = 0;
    for e in entries {
        let e = e.map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
        let p = e.path();
        if p.extension().is_some_and(|x| x == "txt") && p != labels_path {
            files += 1;
        }
    }
    if files != labels.len() {
        return Err(DataError::CountMismatch { images: files, labels: labels.len() });
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let path = dir.join(format!("{i}.txt"));
            let steps = parse_stroke_sample(&read_text(&path)?, &path.display().to_string())?;
            Ok(SequenceSample { steps: steps.into_iter().map(StrokeStep::to_stimulus).collect(), label })
        })
        .collect()
}

/// Writes samples in the canonical stroke format.
pub fn write_strokes(dir: impl AsRef<Path>, labels_path: impl AsRef<Path>, samples: &[SequenceSample]) -> Result<()> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut labels = String::new();
    for (i, s) in samples.iter().enumerate() {
        let path = dir.join(format!("{i}.txt"));
        let mut f = fs::File::create(&path).map_err(io(&path))?;
        for step in &s.steps {
            writeln!(f, "{} {} {} {}", step[0], step[1], step[2], step[3]).map_err(io(&path))?;
        }
        labels.push_str(&format!("{}\n", s.label));
    }
    fs::write(labels_path.as_ref(), labels).map_err(io(labels_path.as_ref()))
}

/// Reads samples laid out as in the public stroke-sequence release:
/// `<prefix>-<i>-inputdata.txt` holds `dx dy eos eod` lines and
/// `<prefix>-<i>-targetdata.txt` starts each line with the one-hot digit
/// label in its first ten columns.
pub fn load_published_strokes(dir: impl AsRef<Path>, prefix: &str, count: usize) -> Result<Vec<SequenceSample>> {
    let dir = dir.as_ref();
    (0..count)
        .map(|i| {
            let input = dir.join(format!("{prefix}-{i}-inputdata.txt"));
            let target = dir.join(format!("{prefix}-{i}-targetdata.txt"));
            let steps = parse_stroke_sample(&read_text(&input)?, &input.display().to_string())?;
            let text = read_text(&target)?;
            let file = target.display().to_string();
            let first = text.lines().next().ok_or_else(|| DataError::EmptySample(file.clone()))?;
            let onehot: Vec<f64> = first
                .split_whitespace()
                .take(NUM_CLASSES)
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| DataError::Parse { file: file.clone(), line: 1, msg: e.to_string() })?;
            let label = onehot
                .iter()
                .position(|&v| v == 1.0)
                .filter(|_| onehot.len() == NUM_CLASSES)
                .ok_or_else(|| DataError::Parse { file, line: 1, msg: "no one-hot label".into() })?;
            Ok(SequenceSample { steps: steps.into_iter().map(StrokeStep::to_stimulus).collect(), label })
        })
        .collect()
}

/// Digit skeletons on a 10×10 box, one polyline per pen stroke.
fn digit_template(digit: usize) -> Vec<Vec<(f64, f64)>> {
    let ring = |cx: f64, cy: f64, rx: f64, ry: f64, n: usize| -> Vec<(f64, f64)> {
        (0..=n)
            .map(|k| {
                let a = -std::f64::consts::FRAC_PI_2 - 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect()
    };
    match digit {
        0 => vec![ring(5.0, 5.0, 3.5, 5.0, 12)],
        1 => vec![vec![(3.0, 2.0), (5.5, 0.0), (5.5, 10.0)]],
        2 => vec![vec![(1.5, 2.0), (4.0, 0.0), (7.5, 0.5), (8.5, 3.0), (6.0, 6.0), (1.0, 10.0), (9.0, 10.0)]],
        3 => vec![vec![(1.5, 1.0), (5.0, 0.0), (8.0, 2.0), (4.5, 5.0), (8.5, 7.5), (5.0, 10.0), (1.0, 9.0)]],
        4 => vec![vec![(6.5, 0.0), (0.5, 7.0), (9.0, 7.0)], vec![(7.0, 3.5), (7.0, 10.0)]],
        5 => vec![vec![(8.5, 0.0), (2.5, 0.0), (1.5, 4.5), (6.0, 4.0), (8.5, 7.0), (5.5, 10.0), (1.0, 9.0)]],
        6 => vec![vec![(7.5, 0.0), (3.0, 3.0), (1.0, 7.5), (4.0, 10.0), (7.5, 8.5), (7.0, 5.5), (2.0, 6.0)]],
        7 => vec![vec![(1.0, 0.0), (9.0, 0.0), (4.0, 10.0)]],
        8 => vec![vec![
            (5.0, 5.0),
            (8.0, 2.5),
            (5.0, 0.0),
            (2.0, 2.5),
            (5.0, 5.0),
            (8.5, 7.5),
            (5.0, 10.0),
            (1.5, 7.5),
            (5.0, 5.0),
        ]],
        _ => vec![vec![(8.0, 3.0), (5.0, 0.0), (2.0, 2.0), (4.0, 5.0), (8.0, 3.0), (7.0, 10.0)]],
    }
}

/// Generates a balanced synthetic pen-stroke corpus.
///
/// Each digit skeleton is randomly scaled, sheared and jittered, traced in
/// short pen moves and quantized to integer pixel deltas, so samples have
/// variable length and carry the same four channels as the real corpus.
pub fn synthetic_strokes(count: usize, seed: u64) -> Vec<SequenceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let label = i % NUM_CLASSES;
            let scale = rng.gen_range(2.0..2.8);
            let sx = scale * rng.gen_range(0.85..1.15);
            let shear = rng.gen_range(-0.25..0.25);
            let spacing = rng.gen_range(1.6..2.4);
            let mut points: Vec<(i64, i64, bool)> = Vec::new();
            for stroke in digit_template(label) {
                let pts: Vec<(f64, f64)> = stroke
                    .iter()
                    .map(|&(x, y)| {
                        let jx = rng.gen_range(-0.35..0.35);
                        let jy = rng.gen_range(-0.35..0.35);
                        ((x + jx + shear * (y - 5.0)) * sx, (y + jy) * scale)
                    })
                    .collect();
                let mut traced = vec![pts[0]];
                for w in pts.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                    let n = (len / spacing).ceil().max(1.0) as usize;
                    traced.extend((1..=n).map(|k| {
                        let t = k as f64 / n as f64;
                        (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
                    }));
                }
                let last = traced.len() - 1;
                points.extend(
                    traced.iter().enumerate().map(|(k, p)| (p.0.round() as i64, p.1.round() as i64, k == last)),
                );
            }
            let mut prev = (0, 0);
            let last = points.len() - 1;
            let steps = points
                .iter()
                .enumerate()
                .map(|(k, &(x, y, eos))| {
                    let step = StrokeStep {
                        dx: (x - prev.0) as f64,
                        dy: (y - prev.1) as f64,
                        end_of_stroke: eos,
                        end_of_digit: k == last,
                    };
                    prev = (x, y);
                    step.to_stimulus()
                })
                .collect();
            SequenceSample { steps, label }
        })
        .collect()
}

/// A seeded, disjoint train/test partition of a corpus.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
    pub seed: u64,
}

impl DatasetSplit {
    /// Shuffles `corpus` with `seed`; the first `train_size` samples train,
    /// the next `test_size` (default: all the rest) test.
    pub fn new(corpus: &[SequenceSample], seed: u64, train_size: usize, test_size: Option<usize>) -> Result<Self> {
        Ok(Self::from_indices(corpus, &split_indices(corpus.len(), seed, train_size, test_size)?, seed))
    }

    fn from_indices(corpus: &[SequenceSample], idx: &(Vec<usize>, Vec<usize>), seed: u64) -> Self {
        Self {
            train: idx.0.iter().map(|&i| corpus[i].clone()).collect(),
            test: idx.1.iter().map(|&i| corpus[i].clone()).collect(),
            seed,
        }
    }
}

/// Index form of [`DatasetSplit::new`].
pub fn split_indices(
    corpus: usize,
    seed: u64,
    train_size: usize,
    test_size: Option<usize>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if train_size == 0 || train_size >= corpus {
        return Err(DataError::SplitSize { train: train_size, corpus });
    }
    let rest = corpus - train_size;
    let test = test_size.unwrap_or(rest);
    if test == 0 || test > rest {
        return Err(DataError::SplitSize { train: train_size, corpus });
    }
    let mut order: Vec<usize> = (0..corpus).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..train_size].to_vec();
    let test = order[train_size..train_size + test].to_vec();
    Ok((train, test))
}

/// Groups sample indices into mini-batches of equal sequence length.
///
/// Samples are bucketed by length, each bucket is shuffled and chunked, and
/// the resulting batches are shuffled again, all from `seed`.
pub fn batch_indices(samples: &[SequenceSample], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(DataError::BatchSize);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in samples.iter().enumerate() {
        buckets.entry(s.len()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in buckets {
        idx.shuffle(&mut rng);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Rectangular mini-batch: one `[B, S]` tensor per step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub steps: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a SequenceSample>) -> Result<Self> {
        let samples: Vec<&SequenceSample> = samples.into_iter().collect();
        let first = samples.first().ok_or(DataError::RaggedBatch)?;
        let (len, dim) = (first.len(), first.dim());
        if samples.iter().any(|s| s.len() != len || s.steps.iter().any(|st| st.len() != dim)) || len == 0 {
            return Err(DataError::RaggedBatch);
        }
        let b = samples.len();
        let steps = (0..len)
            .map(|t| {
                let data: Vec<f64> = samples.iter().flat_map(|s| s.steps[t].iter().copied()).collect();
                Tensor::new(vec![b, dim], data).map_err(|_| DataError::RaggedBatch)
            })
            .collect::<Result<_>>()?;
        Ok(Self { steps, labels: samples.iter().map(|s| s.label).collect() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u8) -> Vec<u8> {
        (0..IMAGE_PIXELS).map(|i| (i as u8).wrapping_mul(seed)).collect()
    }

    #[test]
    fn idx_magic_is_checked() {
        let imgs = encode_idx_images(&[image(3)]);
        assert_eq!(&imgs[..4], &[0, 0, 8, 3]);
        assert!(parse_idx_images(&imgs).is_ok());
        let mut wrong = imgs.clone();
        wrong[3] = 1;
        assert!(matches!(parse_idx_images(&wrong), Err(DataError::BadMagic { found: 0x801, .. })));
        let labels = encode_idx_labels(&[1]);
        assert!(matches!(parse_idx_images(&labels), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn idx_images_round_trip_and_truncation() {
        let imgs = vec![image(3), image(7)];
        let bytes = encode_idx_images(&imgs);
        assert_eq!(parse_idx_images(&bytes).unwrap(), imgs);
        assert!(matches!(parse_idx_images(&bytes[..bytes.len() - 1]), Err(DataError::Truncated { .. })));
        let mut bad_dims = bytes.clone();
        bad_dims[11] = 27;
        assert!(matches!(parse_idx_images(&bad_dims), Err(DataError::BadDimensions { rows: 27, .. })));
    }

    #[test]
    fn idx_labels_round_trip_and_range() {
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[0, 9, 5])).unwrap(), vec![0, 9, 5]);
        assert!(matches!(parse_idx_labels(&encode_idx_labels(&[10])), Err(DataError::LabelRange(10))));
        assert!(matches!(pair_spatial(&[image(1)], &[1, 2]), Err(DataError::CountMismatch { .. })));
    }

    #[test]
    fn gzip_files_are_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&encode_idx_labels(&[4, 2])).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx_labels(&path).unwrap(), vec![4, 2]);
    }

    #[test]
    fn row_sequence_normalization() {
        let zero = to_row_sequence(&[0; IMAGE_PIXELS]);
        assert_eq!(zero.len(), 28);
        assert!(zero.iter().all(|r| r.len() == 28 && r.iter().all(|&v| v == 0.0)));
        let mut img = vec![0u8; IMAGE_PIXELS];
        img[30] = 255;
        assert_eq!(to_row_sequence(&img)[1][2], 1.0);
        let img = image(5);
        let flat: Vec<f64> = to_row_sequence(&img).concat();
        let expected: Vec<f64> = img.iter().map(|&p| p as f64 / 255.0).collect();
        assert_eq!(flat, expected);
    }

    #[test]
    fn stroke_parsing_rules() {
        let steps = parse_stroke_sample("1 0 0 0\n0 1 1 1\n", "s").unwrap();
        assert_eq!(steps.len(), 2);
        assert!(steps[1].end_of_digit && steps[1].end_of_stroke);
        assert!(matches!(parse_stroke_sample("", "s"), Err(DataError::EmptySample(_))));
        assert!(matches!(parse_stroke_sample("1 0 0 0\n", "s"), Err(DataError::MissingTerminator(_))));
        assert!(matches!(parse_stroke_sample("1 x 0 1\n", "s"), Err(DataError::Parse { .. })));
        assert!(matches!(parse_stroke_sample("1 0 2 1\n", "s"), Err(DataError::Parse { .. })));
        assert!(matches!(parse_stroke_sample("1 0 0 1\n1 0 0 1\n", "s"), Err(DataError::Parse { line: 2, .. })));
    }

    #[test]
    fn synthetic_corpus_round_trips() {
        let corpus = synthetic_strokes(10, 4);
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("labels.txt");
        let samples = dir.path().join("samples");
        write_strokes(&samples, &labels, &corpus).unwrap();
        assert_eq!(load_strokes(&samples, &labels).unwrap(), corpus);

        fs::write(&labels, "1\n").unwrap();
        assert!(matches!(load_strokes(&samples, &labels), Err(DataError::CountMismatch { .. })));
    }

    #[test]
    fn synthetic_samples_are_well_formed() {
        for s in synthetic_strokes(50, 1) {
            assert!(s.len() >= 2 && s.dim() == STROKE_DIM && s.label < 10);
            let eod: Vec<bool> = s.steps.iter().map(|st| st[3] == 1.0).collect();
            assert!(eod[..eod.len() - 1].iter().all(|&e| !e) && eod[eod.len() - 1]);
        }
        assert_eq!(synthetic_strokes(20, 9), synthetic_strokes(20, 9));
    }

    #[test]
    fn published_layout_adapter() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("trainimg-0-inputdata.txt"), "0 0 0 0\n2 -1 1 1\n").unwrap();
        fs::write(dir.path().join("trainimg-0-targetdata.txt"), "0 0 0 1 0 0 0 0 0 0 0 0 0 0\n").unwrap();
        let s = load_published_strokes(dir.path(), "trainimg", 1).unwrap();
        assert_eq!(s[0].label, 3);
        assert_eq!(s[0].steps[1], vec![2.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let corpus = synthetic_strokes(70, 0);
        let a = DatasetSplit::new(&corpus, 5, 60, None).unwrap();
        let b = DatasetSplit::new(&corpus, 5, 60, None).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (60, 10));
        assert_eq!(a.train, b.train);
        assert!(DatasetSplit::new(&corpus, 5, 70, None).is_err());
        assert!(DatasetSplit::new(&corpus, 5, 60, Some(11)).is_err());
        let (tr, te) = split_indices(70_000, 1, 60_000, None).unwrap();
        assert_eq!((tr.len(), te.len()), (60_000, 10_000));
    }

    #[test]
    fn batches_cover_training_set_once() {
        let corpus = synthetic_strokes(200, 2);
        let batches = batch_indices(&corpus, 16, 3).unwrap();
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.len() <= 16);
            assert!(b.iter().all(|&i| corpus[i].len() == corpus[b[0]].len()));
            let batch = Batch::from_samples(b.iter().map(|&i| &corpus[i])).unwrap();
            assert_eq!(batch.steps[0].shape(), &[b.len(), 4]);
        }
        assert!(batch_indices(&corpus, 0, 3).is_err());
    }
}
