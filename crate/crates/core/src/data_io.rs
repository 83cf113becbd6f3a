//! IDX ingestion, subsets and a synthetic Gaussian-blob generator.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::write_atomic;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub pixels: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    n: usize,
    classes: usize,
    source: String,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, classes: usize, source: impl Into<String>) -> Result<Self> {
        let n = examples.first().map_or(0, |e| e.pixels.len());
        for (i, e) in examples.iter().enumerate() {
            if e.pixels.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: e.pixels.len(),
                });
            }
            if e.label >= classes {
                return Err(Error::BadLabel {
                    label: e.label,
                    classes,
                });
            }
            if e.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidArgument(format!(
                    "example {i} has pixels outside [0, 1]"
                )));
            }
        }
        Ok(Dataset {
            examples,
            n,
            classes,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    /// Widen the class count, e.g. when a test split lacks some labels.
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if let Some(e) = self.examples.iter().find(|e| e.label >= classes) {
            return Err(Error::BadLabel {
                label: e.label,
                classes,
            });
        }
        self.classes = classes;
        Ok(self)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// All pixels as a `len x n` matrix.
    pub fn features(&self) -> Array2<f64> {
        self.batch_features(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn batch_features(&self, idx: &[usize]) -> Array2<f64> {
        let mut x = Array2::zeros((idx.len(), self.n));
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r)
                .iter_mut()
                .zip(&self.examples[i].pixels)
                .for_each(|(d, s)| *d = *s);
        }
        x
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.examples[i].label).collect()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
            n: self.n,
            classes: self.classes,
            source: self.source.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// Split off the first `count` examples as one dataset, the rest as another.
    pub fn split_at(&self, count: usize) -> Result<(Dataset, Dataset)> {
        if count > self.len() {
            return Err(Error::InvalidArgument(format!(
                "split at {count} exceeds {} examples",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..count).collect();
        let tail: Vec<usize> = (count..self.len()).collect();
        Ok((self.select(&head), self.select(&tail)))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_len(bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed(format!(
            "{} bytes after the IDX payload",
            bytes.len() - expected
        )));
    }
    Ok(())
}

/// Magic first, so a label file passed as images reports the wrong magic
/// rather than a short header.
fn check_header(bytes: &[u8], magic: u32, header: usize) -> Result<()> {
    if bytes.len() >= 4 && be_u32(bytes, 0) != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found: be_u32(bytes, 0),
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Decode an IDX image/label pair held in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    check_header(images, IDX_IMAGES_MAGIC, 16)?;
    check_header(labels, IDX_LABELS_MAGIC, 8)?;
    let count = be_u32(images, 4) as usize;
    let n = be_u32(images, 8) as usize * be_u32(images, 12) as usize;
    let label_count = be_u32(labels, 4) as usize;
    if count != label_count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let payload = count
        .checked_mul(n)
        .and_then(|p| p.checked_add(16))
        .ok_or_else(|| Error::Malformed(format!("{count} images of {n} pixels overflow")))?;
    check_len(images, payload)?;
    check_len(labels, 8 + count)?;

    let pixels = &images[16..];
    let label_bytes = &labels[8..];
    let examples: Vec<LabeledExample> = (0..count)
        .map(|i| LabeledExample {
            pixels: pixels[i * n..(i + 1) * n]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
            label: label_bytes[i] as usize,
        })
        .collect();
    let classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(1);
    let mut ds = Dataset::new(examples, classes, "idx")?;
    ds.n = n;
    Ok(ds)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::file(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::file(labels_path, e))?;
    let mut ds = parse_idx(&images, &labels)?;
    ds.source = format!("idx:{}", images_path.display());
    Ok(ds)
}

/// Encode as IDX bytes. Pixels are quantized to `round(255 p)`; images are
/// written as `sqrt(n) x sqrt(n)` when `n` is a square and `1 x n` otherwise.
pub fn encode_idx(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if dataset.classes() > 256 {
        return Err(Error::InvalidArgument("IDX labels are single bytes".into()));
    }
    let n = dataset.n();
    let side = (n as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == n { (side, side) } else { (1, n) };
    let mut images = Vec::with_capacity(16 + dataset.len() * n);
    for v in [IDX_IMAGES_MAGIC, dataset.len() as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = Vec::with_capacity(8 + dataset.len());
    for v in [IDX_LABELS_MAGIC, dataset.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for e in dataset.examples() {
        images.extend(e.pixels.iter().map(|p| (p * 255.0).round() as u8));
        labels.push(e.label as u8);
    }
    Ok((images, labels))
}

pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(dataset)?;
    write_atomic(images_path, &images)?;
    write_atomic(labels_path, &labels)
}

/// Deterministic subset of `count` examples, kept in their original order.
/// Stratified subsets allocate per-class quotas by largest remainder.
pub fn subset(dataset: &Dataset, count: usize, seed: u64, stratified: bool) -> Result<Dataset> {
    if count > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "subset of {count} requested from {} examples",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = if stratified && !dataset.is_empty() {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes()];
        for (i, e) in dataset.examples().iter().enumerate() {
            by_class[e.label].push(i);
        }
        let total = dataset.len() as f64;
        let exact: Vec<f64> = by_class
            .iter()
            .map(|v| count as f64 * v.len() as f64 / total)
            .collect();
        let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
        let mut short = count - quota.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for c in order {
            if short == 0 {
                break;
            }
            if quota[c] < by_class[c].len() {
                quota[c] += 1;
                short -= 1;
            }
        }
        by_class
            .into_iter()
            .zip(quota)
            .flat_map(|(mut idx, q)| {
                idx.shuffle(&mut rng);
                idx.truncate(q);
                idx
            })
            .collect()
    } else {
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(count);
        idx
    };
    chosen.sort_unstable();
    Ok(dataset.select(&chosen))
}

/// Parameters for [`synthetic`]. `contrast` scales each center's offset from
/// the hypercube middle: 1 puts centers on hypercube vertices. The last
/// `background` coordinates are 0 in every example, like the empty border
/// of a digit image. Classes come in sibling pairs: class `2k + 1` copies the
/// center of class `2k` and flips each coordinate with probability
/// `sibling_flip`, so 0.5 makes every center independent and smaller values
/// make confusable pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    pub per_class: usize,
    pub spread: f64,
    pub contrast: f64,
    pub background: usize,
    pub sibling_flip: f64,
    pub seed: u64,
}

/// Gaussian clusters around `classes` random vertices of `[0, 1]^n`, clipped
/// to the unit box and shuffled.
pub fn synthetic_blobs(n: usize, classes: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    synthetic(&SyntheticSpec {
        n,
        classes,
        per_class,
        spread,
        contrast: 1.0,
        background: 0,
        sibling_flip: 0.5,
        seed,
    })
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec {
        n,
        classes,
        per_class,
        spread,
        contrast,
        background,
        sibling_flip,
        seed,
    } = *spec;
    if n < 2 || classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs n >= 2 and at least two classes (n={n}, C={classes})"
        )));
    }
    if background >= n {
        return Err(Error::InvalidArgument(format!(
            "background {background} leaves no informative coordinate of {n}"
        )));
    }
    let active = n - background;
    if !(0.0..=1.0).contains(&sibling_flip) {
        return Err(Error::InvalidArgument(format!(
            "sibling_flip must lie in [0, 1], got {sibling_flip}"
        )));
    }
    if !(spread >= 0.0) || !(0.0..=1.0).contains(&contrast) {
        return Err(Error::InvalidArgument(format!(
            "spread must be >= 0 and contrast in [0, 1], got {spread}, {contrast}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut signs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for c in 0..classes {
        // Redraw centers that land on an earlier one (only likely for tiny
        // n); with no flips a sibling is meant to coincide.
        let mut row = Vec::new();
        for _ in 0..64 {
            row = (0..active)
                .map(|j| {
                    if c % 2 == 1 {
                        let flip = rng.random_bool(sibling_flip);
                        if flip { -signs[c - 1][j] } else { signs[c - 1][j] }
                    } else if rng.random_bool(0.5) {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect::<Vec<f64>>();
            let deliberate = c % 2 == 1 && sibling_flip == 0.0;
            if deliberate || !signs.contains(&row) {
                break;
            }
        }
        signs.push(row);
    }
    let centers: Vec<Vec<f64>> = signs
        .iter()
        .map(|row| row.iter().map(|s| 0.5 + 0.5 * contrast * s).collect())
        .collect();
    let noise: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let mut examples = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (label, c) in centers.iter().enumerate() {
            let mut pixels: Vec<f64> = c
                .iter()
                .map(|&m| (m + spread * noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            pixels.resize(n, 0.0);
            examples.push(LabeledExample { pixels, label });
        }
    }
    examples.shuffle(&mut rng);
    let source = format!(
        "synthetic:n={n},C={classes},per_class={per_class},spread={spread},contrast={contrast},background={background},sibling_flip={sibling_flip},seed={seed}"
    );
    Dataset::new(examples, classes, source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 4, 2, 2] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend((0u8..16).map(|b| b * 17));
        let mut labels = Vec::new();
        for v in [IDX_LABELS_MAGIC, 4] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        labels.extend([3u8, 1, 4, 1]);
        (images, labels)
    }

    #[test]
    fn parses_fixture() {
        let (im, lb) = fixture();
        let ds = parse_idx(&im, &lb).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.examples()[1].pixels[0], (4.0 * 17.0) / 255.0);
        assert_eq!(ds.examples()[3].pixels[3], 1.0);
        assert_eq!(ds.labels(), vec![3, 1, 4, 1]);
    }

    #[test]
    fn error_paths() {
        let (im, lb) = fixture();
        assert!(matches!(parse_idx(&lb, &lb), Err(Error::BadMagic { .. })));
        assert!(matches!(parse_idx(&im, &im), Err(Error::BadMagic { .. })));
        assert!(matches!(
            parse_idx(&im[..im.len() - 1], &lb),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(parse_idx(&im[..10], &lb), Err(Error::Truncated { .. })));
        let mut short = lb.clone();
        short[7] = 3;
        short.pop();
        assert!(matches!(parse_idx(&im, &short), Err(Error::CountMismatch { .. })));
    }

    #[test]
    fn stratified_subset_is_balanced() {
        let ds = synthetic_blobs(3, 10, 30, 0.1, 4).unwrap();
        let s = subset(&ds, 100, 9, true).unwrap();
        assert_eq!(s.class_counts(), vec![10; 10]);
        assert_eq!(subset(&ds, 100, 9, true).unwrap(), s);
        assert!(subset(&ds, 301, 0, false).is_err());
        let all = subset(&ds, ds.len(), 1, false).unwrap();
        assert_eq!(all, ds);
    }

    #[test]
    fn zero_spread_sits_on_centers() {
        let ds = synthetic_blobs(6, 3, 5, 0.0, 2).unwrap();
        for e in ds.examples() {
            assert!(e.pixels.iter().all(|&p| p == 0.0 || p == 1.0));
        }
        let same: Vec<_> = ds
            .examples()
            .iter()
            .filter(|e| e.label == 0)
            .map(|e| e.pixels.clone())
            .collect();
        assert!(same.windows(2).all(|w| w[0] == w[1]));
    }
}
