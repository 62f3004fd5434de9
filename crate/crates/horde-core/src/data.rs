//! Dataset ingestion and batch sampling: IDX image files, synthetic
//! Gaussian-mixture feature sets for the oracle tests, a procedurally
//! rendered 10-class digit set in IDX format for desk-scale training, and
//! the P-classes × Q-images batch sampler.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::{derive_seed, Real};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803; // 2051
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801; // 2049

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{file}: bad magic {got:#010x}, expected {expected:#010x}")]
    BadMagic {
        file: String,
        got: u32,
        expected: u32,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}: truncated (expected {expected} payload bytes, got {got})")]
    Truncated {
        file: String,
        expected: usize,
        got: usize,
    },
    #[error("class {class} has {have} images, batch spec needs {need}")]
    ClassTooSmall {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("dataset has {have} classes, batch spec needs {need}")]
    TooFewClasses { have: usize, need: usize },
    #[error("batch spec needs P ≥ 2 and Q ≥ 2, got P = {p}, Q = {q}")]
    BadBatchSpec { p: usize, q: usize },
    #[error("dataset holds {kind}, operation needs {need}")]
    WrongKind {
        kind: &'static str,
        need: &'static str,
    },
    #[error("spread must be positive, got {0}")]
    BadSpread(f64),
    #[error("csv parse error at {path}:{line}: {detail}")]
    Csv {
        path: String,
        line: usize,
        detail: String,
    },
}

/// Either images (for training) or raw per-sample feature vectors
/// (synthetic mode; bypasses the backbone so oracle tests run directly).
#[derive(Debug, Clone)]
pub enum DatasetItems<T> {
    /// `N×H×W×1`, values in `[0, 1]`.
    Images(Tensor<T>),
    /// `N` feature vectors in `R^c`.
    Features(Vec<Vec<T>>),
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub items: DatasetItems<T>,
    pub labels: Vec<usize>,
    pub split: String,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn images(&self) -> Result<&Tensor<T>, DataError> {
        match &self.items {
            DatasetItems::Images(t) => Ok(t),
            DatasetItems::Features(_) => Err(DataError::WrongKind {
                kind: "features",
                need: "images",
            }),
        }
    }

    pub fn features(&self) -> Result<&Vec<Vec<T>>, DataError> {
        match &self.items {
            DatasetItems::Features(f) => Ok(f),
            DatasetItems::Images(_) => Err(DataError::WrongKind {
                kind: "images",
                need: "features",
            }),
        }
    }

    /// Copy out the images at the given indices as one `B×H×W×1` tensor.
    pub fn gather_images(&self, indices: &[usize]) -> Result<Tensor<T>, DataError> {
        let images = self.images()?;
        let per = images.len() / self.len();
        let mut shape = images.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
        }
        Ok(Tensor::new(shape, data).expect("gathered shape"))
    }
}

// ── IDX format ──────────────────────────────────────────────────────

fn read_u32_be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Load an IDX image/label file pair (big-endian headers, pixels scaled by
/// 1/255).
pub fn load_idx<T: Real>(
    images_path: &Path,
    labels_path: &Path,
    split: &str,
) -> Result<Dataset<T>, DataError> {
    let img_bytes = fs::read(images_path)?;
    let img_name = images_path.display().to_string();
    if img_bytes.len() < 16 {
        return Err(DataError::Truncated {
            file: img_name,
            expected: 16,
            got: img_bytes.len(),
        });
    }
    let magic = read_u32_be(&img_bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            file: img_name,
            got: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = read_u32_be(&img_bytes, 4) as usize;
    let h = read_u32_be(&img_bytes, 8) as usize;
    let w = read_u32_be(&img_bytes, 12) as usize;
    let expected = n * h * w;
    if img_bytes.len() - 16 != expected {
        return Err(DataError::Truncated {
            file: img_name,
            expected,
            got: img_bytes.len() - 16,
        });
    }

    let lbl_bytes = fs::read(labels_path)?;
    let lbl_name = labels_path.display().to_string();
    if lbl_bytes.len() < 8 {
        return Err(DataError::Truncated {
            file: lbl_name,
            expected: 8,
            got: lbl_bytes.len(),
        });
    }
    let magic = read_u32_be(&lbl_bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            file: lbl_name,
            got: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_labels = read_u32_be(&lbl_bytes, 4) as usize;
    if lbl_bytes.len() - 8 != n_labels {
        return Err(DataError::Truncated {
            file: lbl_name,
            expected: n_labels,
            got: lbl_bytes.len() - 8,
        });
    }
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let denom = T::cast(255.0);
    let data: Vec<T> = img_bytes[16..]
        .iter()
        .map(|&b| T::cast(f64::from(b)) / denom)
        .collect();
    let labels = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    Ok(Dataset {
        items: DatasetItems::Images(
            Tensor::new(vec![n, h, w, 1], data).expect("idx image shape"),
        ),
        labels,
        split: split.to_string(),
    })
}

/// Write a dataset back out as an IDX pair (pixels quantized to bytes).
pub fn write_idx<T: Real>(
    dataset: &Dataset<T>,
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DataError> {
    let images = dataset.images()?;
    let shape = images.shape();
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let mut img = fs::File::create(images_path)?;
    img.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    img.write_all(&(n as u32).to_be_bytes())?;
    img.write_all(&(h as u32).to_be_bytes())?;
    img.write_all(&(w as u32).to_be_bytes())?;
    let bytes: Vec<u8> = images
        .data()
        .iter()
        .map(|v| {
            let x = v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
            (x * 255.0).round() as u8
        })
        .collect();
    img.write_all(&bytes)?;
    let mut lbl = fs::File::create(labels_path)?;
    lbl.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lbl.write_all(&(n as u32).to_be_bytes())?;
    let lbytes: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    lbl.write_all(&lbytes)?;
    Ok(())
}

// ── synthetic Gaussian mixture (feature mode) ───────────────────────

/// Per class: an isotropic Gaussian at a random unit-norm center, samples
/// clipped to the unit ball so the oracle tail bounds stay valid.
pub fn synth_mixture<T: Real>(
    num_classes: usize,
    per_class: usize,
    c: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<T>, DataError> {
    if spread <= 0.0 {
        return Err(DataError::BadSpread(spread));
    }
    let mut features = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("class{class}")));
        let mut center = vec![0.0f64; c];
        let mut norm = 0.0;
        while norm < 1e-9 {
            for v in &mut center {
                *v = gauss(&mut rng);
            }
            norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        for v in &mut center {
            *v /= norm;
        }
        for _ in 0..per_class {
            let mut x: Vec<f64> = center.iter().map(|&m| m + spread * gauss(&mut rng)).collect();
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r > 1.0 {
                for v in &mut x {
                    *v /= r;
                }
            }
            features.push(x.into_iter().map(T::cast).collect());
            labels.push(class);
        }
    }
    Ok(Dataset {
        items: DatasetItems::Features(features),
        labels,
        split: "synthetic".to_string(),
    })
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ── procedural digit images (IDX-compatible training data) ──────────

/// Segment endpoints on the unit square for a seven-segment digit layout.
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((0.25, 0.18), (0.75, 0.18)), // A: top
    ((0.75, 0.18), (0.75, 0.50)), // B: top right
    ((0.75, 0.50), (0.75, 0.82)), // C: bottom right
    ((0.25, 0.82), (0.75, 0.82)), // D: bottom
    ((0.25, 0.50), (0.25, 0.82)), // E: bottom left
    ((0.25, 0.18), (0.25, 0.50)), // F: top left
    ((0.25, 0.50), (0.75, 0.50)), // G: middle
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 4, 2, 3],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

fn seg_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len_sq = dx * dx + dy * dy;
    let t = (((px - ax) * dx + (py - ay) * dy) / len_sq).clamp(0.0, 1.0);
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Render `per_class` jittered 28×28 images of each digit 0–9: random
/// rotation, scale, translation, stroke width, and pixel noise, quantized
/// to bytes exactly like an IDX file stores them.
pub fn synth_digits<T: Real>(per_class: usize, seed: u64, split: &str) -> Dataset<T> {
    const SIDE: usize = 28;
    let n = per_class * 10;
    let mut data = vec![T::zero(); n * SIDE * SIDE];
    let mut labels = Vec::with_capacity(n);
    let denom = T::cast(255.0);
    for class in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("digit{class}")));
        for item in 0..per_class {
            let idx = class * per_class + item;
            labels.push(class);
            let angle: f64 = (rng.gen::<f64>() - 0.5) * 0.5; // ±0.25 rad
            let scale: f64 = 0.8 + rng.gen::<f64>() * 0.35;
            let tx: f64 = (rng.gen::<f64>() - 0.5) * 0.24;
            let ty: f64 = (rng.gen::<f64>() - 0.5) * 0.24;
            let thick: f64 = 0.05 + rng.gen::<f64>() * 0.04;
            let (sin, cos) = angle.sin_cos();
            let segs = DIGIT_SEGMENTS[class];
            for py in 0..SIDE {
                for px in 0..SIDE {
                    // map pixel to glyph coordinates (inverse affine)
                    let ux = (px as f64 + 0.5) / SIDE as f64 - 0.5 - tx;
                    let uy = (py as f64 + 0.5) / SIDE as f64 - 0.5 - ty;
                    let gx = (cos * ux + sin * uy) / scale + 0.5;
                    let gy = (-sin * ux + cos * uy) / scale + 0.5;
                    let mut dist = f64::INFINITY;
                    for &s in segs {
                        let d = seg_distance(gx, gy, SEGMENTS[s].0, SEGMENTS[s].1);
                        if d < dist {
                            dist = d;
                        }
                    }
                    let mut v = ((thick - dist) / 0.02 + 0.5).clamp(0.0, 1.0);
                    v += 0.08 * gauss(&mut rng);
                    let byte = (v.clamp(0.0, 1.0) * 255.0).round();
                    data[(idx * SIDE + py) * SIDE + px] = T::cast(byte) / denom;
                }
            }
        }
    }
    Dataset {
        items: DatasetItems::Images(
            Tensor::new(vec![n, SIDE, SIDE, 1], data).expect("digit shape"),
        ),
        labels,
        split: split.to_string(),
    }
}

// ── batch sampling ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct BatchSpec {
    pub classes_per_batch: usize,
    pub images_per_class: usize,
    pub seed: u64,
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.images_per_class
    }

    /// Canonical label layout of every batch: class blocks of Q.
    pub fn canonical_labels(&self) -> Vec<usize> {
        (0..self.classes_per_batch)
            .flat_map(|c| std::iter::repeat(c).take(self.images_per_class))
            .collect()
    }
}

/// Infinite stream of P×Q batches: each batch holds P distinct classes with
/// Q images each, drawn without replacement within an epoch where possible.
#[derive(Debug)]
pub struct BatchSampler<'a, T> {
    dataset: &'a Dataset<T>,
    spec: BatchSpec,
    rng: ChaCha8Rng,
    /// Per class: indices not yet consumed this epoch.
    pools: Vec<Vec<usize>>,
    by_class: Vec<Vec<usize>>,
}

impl<'a, T: Real> BatchSampler<'a, T> {
    pub fn new(dataset: &'a Dataset<T>, spec: BatchSpec) -> Result<Self, DataError> {
        if spec.classes_per_batch < 2 || spec.images_per_class < 2 {
            return Err(DataError::BadBatchSpec {
                p: spec.classes_per_batch,
                q: spec.images_per_class,
            });
        }
        let num_classes = dataset.num_classes();
        if num_classes < spec.classes_per_batch {
            return Err(DataError::TooFewClasses {
                have: num_classes,
                need: spec.classes_per_batch,
            });
        }
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &l) in dataset.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for (class, members) in by_class.iter().enumerate() {
            if members.len() < spec.images_per_class {
                return Err(DataError::ClassTooSmall {
                    class,
                    have: members.len(),
                    need: spec.images_per_class,
                });
            }
        }
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(Self {
            dataset,
            spec,
            rng,
            pools: vec![Vec::new(); num_classes],
            by_class,
        })
    }

    fn refill(&mut self) {
        for (pool, members) in self.pools.iter_mut().zip(&self.by_class) {
            *pool = members.clone();
            pool.shuffle(&mut self.rng);
        }
    }

    /// Indices of the next batch, grouped as P class blocks of Q.
    pub fn next_indices(&mut self) -> Vec<usize> {
        let q = self.spec.images_per_class;
        let p = self.spec.classes_per_batch;
        // classes with the most unconsumed images first; refill when the
        // epoch cannot supply P full class blocks
        let mut order: Vec<usize> = (0..self.pools.len()).collect();
        order.sort_by_key(|&c| std::cmp::Reverse(self.pools[c].len()));
        if order.len() < p || self.pools[order[p - 1]].len() < q {
            self.refill();
            order = (0..self.pools.len()).collect();
            order.shuffle(&mut self.rng);
        } else {
            // break ties in remaining-count order deterministically by a
            // seeded shuffle, then re-sort (stable) by remaining count
            order.shuffle(&mut self.rng);
            order.sort_by_key(|&c| std::cmp::Reverse(self.pools[c].len()));
        }
        let mut indices = Vec::with_capacity(p * q);
        for &class in order.iter().take(p) {
            for _ in 0..q {
                indices.push(self.pools[class].pop().expect("pool refilled"));
            }
        }
        indices
    }

    /// Next batch as `(images, labels)`.
    pub fn next_batch(&mut self) -> Result<(Tensor<T>, Vec<usize>), DataError> {
        let indices = self.next_indices();
        let labels = indices.iter().map(|&i| self.dataset.labels[i]).collect();
        let images = self.dataset.gather_images(&indices)?;
        Ok((images, labels))
    }
}

// ── CSV ─────────────────────────────────────────────────────────────

/// One row per sample: `label,x1,...,xc`.
pub fn write_labeled_csv<T: Real>(
    path: &Path,
    features: &[Vec<T>],
    labels: &[usize],
) -> Result<(), DataError> {
    let mut out = String::new();
    for (f, l) in features.iter().zip(labels) {
        out.push_str(&l.to_string());
        for v in f {
            out.push(',');
            out.push_str(&format!("{:?}", v.to_f64().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// One row per sample, features only: `x1,...,xc`.
pub fn write_plain_csv<T: Real>(path: &Path, features: &[Vec<T>]) -> Result<(), DataError> {
    let mut out = String::new();
    for f in features {
        let row: Vec<String> = f
            .iter()
            .map(|v| format!("{:?}", v.to_f64().unwrap_or(f64::NAN)))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a plain feature CSV (no label column).
pub fn read_plain_csv<T: Real>(path: &Path) -> Result<Vec<Vec<T>>, DataError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<T>, _> = line
            .split(',')
            .map(|cell| cell.trim().parse::<f64>().map(T::cast))
            .collect();
        match row {
            Ok(r) => rows.push(r),
            Err(e) => {
                return Err(DataError::Csv {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    detail: e.to_string(),
                })
            }
        }
    }
    Ok(rows)
}

/// Read a labeled feature CSV (`label,x1,...`).
pub fn read_labeled_csv<T: Real>(path: &Path) -> Result<(Vec<Vec<T>>, Vec<usize>), DataError> {
    let text = fs::read_to_string(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let err = |detail: String| DataError::Csv {
            path: path.display().to_string(),
            line: lineno + 1,
            detail,
        };
        let label = cells
            .next()
            .ok_or_else(|| err("empty row".into()))?
            .trim()
            .parse::<usize>()
            .map_err(|e| err(e.to_string()))?;
        let row: Result<Vec<T>, _> = cells
            .map(|cell| cell.trim().parse::<f64>().map(T::cast))
            .collect();
        features.push(row.map_err(|e| err(e.to_string()))?);
        labels.push(label);
    }
    Ok((features, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{mmd2_gaussian, EmpiricalDistribution};

    fn random_image_dataset(n: usize, side: usize, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * side * side)
            .map(|_| f64::from(rng.gen::<u8>()) / 255.0)
            .collect();
        let labels = (0..n).map(|i| i % 3).collect();
        Dataset {
            items: DatasetItems::Images(
                Tensor::new(vec![n, side, side, 1], data).unwrap(),
            ),
            labels,
            split: "train".into(),
        }
    }

    #[test]
    fn idx_roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = random_image_dataset(9, 6, 5);
        let ip = dir.path().join("im.idx");
        let lp = dir.path().join("lb.idx");
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx::<f64>(&ip, &lp, "train").unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.images().unwrap().data(), ds.images().unwrap().data());
        assert!(back
            .images()
            .unwrap()
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_official_header_layout() {
        // headers exactly as the canonical distribution writes them
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("im.idx");
        let lp = dir.path().join("lb.idx");
        let mut img = vec![];
        img.extend_from_slice(&2051u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend(std::iter::repeat(128u8).take(2 * 28 * 28));
        fs::write(&ip, img).unwrap();
        let mut lbl = vec![];
        lbl.extend_from_slice(&2049u32.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[7u8, 3u8]);
        fs::write(&lp, lbl).unwrap();
        let ds = load_idx::<f64>(&ip, &lp, "train").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images().unwrap().shape(), &[2, 28, 28, 1]);
        assert_eq!(ds.labels, vec![7, 3]);
        let px = ds.images().unwrap().data()[0];
        assert!((px - 128.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn idx_error_paths_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("im.idx");
        let lp = dir.path().join("lb.idx");
        let ds = random_image_dataset(4, 5, 6);
        write_idx(&ds, &ip, &lp).unwrap();

        // bad magic
        let mut img = fs::read(&ip).unwrap();
        img[3] = 0x99;
        let bad = dir.path().join("bad.idx");
        fs::write(&bad, &img).unwrap();
        assert!(matches!(
            load_idx::<f64>(&bad, &lp, "t"),
            Err(DataError::BadMagic { .. })
        ));

        // truncation
        let img = fs::read(&ip).unwrap();
        fs::write(&bad, &img[..img.len() - 3]).unwrap();
        assert!(matches!(
            load_idx::<f64>(&bad, &lp, "t"),
            Err(DataError::Truncated { .. })
        ));

        // count mismatch
        let mut lbl = vec![];
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&3u32.to_be_bytes());
        lbl.extend_from_slice(&[0, 1, 2]);
        let badl = dir.path().join("badl.idx");
        fs::write(&badl, lbl).unwrap();
        assert!(matches!(
            load_idx::<f64>(&ip, &badl, "t"),
            Err(DataError::CountMismatch { .. })
        ));
    }

    #[test]
    fn mixture_is_seeded_and_degenerate_at_tiny_spread() {
        let a = synth_mixture::<f64>(3, 8, 4, 1e-9, 17).unwrap();
        let b = synth_mixture::<f64>(3, 8, 4, 1e-9, 17).unwrap();
        assert_eq!(a.features().unwrap(), b.features().unwrap());
        // within-class collapse: all samples at the class center
        let feats = a.features().unwrap();
        let class0: Vec<Vec<f64>> = feats[0..8].to_vec();
        let i = EmpiricalDistribution::new(class0[0..4].to_vec()).unwrap();
        let j = EmpiricalDistribution::new(class0[4..8].to_vec()).unwrap();
        let within = mmd2_gaussian(&i, &j, 0.5).unwrap();
        assert!(within < 1e-6, "within-class mmd² {within}");
        // distinct classes sit at distinct centers
        let other = EmpiricalDistribution::new(feats[8..16].to_vec()).unwrap();
        let between = mmd2_gaussian(&i, &other, 0.5).unwrap();
        assert!(between > 1e-3, "between-class mmd² {between}");
    }

    #[test]
    fn mixture_separates_classes_in_most_draws() {
        let mut wins = 0;
        for draw in 0..100 {
            let ds = synth_mixture::<f64>(2, 16, 4, 0.1, 1000 + draw).unwrap();
            let feats = ds.features().unwrap();
            let a = EmpiricalDistribution::new(feats[0..8].to_vec()).unwrap();
            let a2 = EmpiricalDistribution::new(feats[8..16].to_vec()).unwrap();
            let b = EmpiricalDistribution::new(feats[16..32].to_vec()).unwrap();
            let within = mmd2_gaussian(&a, &a2, 0.5).unwrap();
            let between = mmd2_gaussian(&a, &b, 0.5).unwrap();
            if between > within {
                wins += 1;
            }
        }
        assert!(wins >= 95, "between > within in only {wins}/100 draws");
    }

    #[test]
    fn mixture_stays_in_unit_ball() {
        let ds = synth_mixture::<f64>(4, 32, 6, 0.4, 3).unwrap();
        for f in ds.features().unwrap() {
            let r: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(r <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn digits_are_deterministic_and_balanced() {
        let a = synth_digits::<f64>(5, 9, "train");
        let b = synth_digits::<f64>(5, 9, "train");
        assert_eq!(a.images().unwrap().data(), b.images().unwrap().data());
        assert_eq!(a.len(), 50);
        for class in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 5);
        }
        assert!(a
            .images()
            .unwrap()
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn digit_classes_have_distinct_mean_images() {
        let ds = synth_digits::<f64>(20, 4, "train");
        let images = ds.images().unwrap();
        let per = 28 * 28;
        let mean_of = |class: usize| -> Vec<f64> {
            let mut acc = vec![0.0; per];
            let mut count = 0;
            for (i, &l) in ds.labels.iter().enumerate() {
                if l == class {
                    for (a, &v) in acc.iter_mut().zip(&images.data()[i * per..(i + 1) * per]) {
                        *a += v;
                    }
                    count += 1;
                }
            }
            acc.iter_mut().for_each(|a| *a /= count as f64);
            acc
        };
        let m1 = mean_of(1);
        let m8 = mean_of(8);
        let dist: f64 = m1
            .iter()
            .zip(&m8)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 1.0, "digit means too close: {dist}");
    }

    #[test]
    fn batches_satisfy_p_q_contract() {
        let ds = synth_digits::<f64>(16, 2, "train");
        let spec = BatchSpec {
            classes_per_batch: 5,
            images_per_class: 8,
            seed: 4,
        };
        let mut sampler = BatchSampler::new(&ds, spec).unwrap();
        for _ in 0..10 {
            let (images, labels) = sampler.next_batch().unwrap();
            assert_eq!(images.shape()[0], 40);
            assert_eq!(labels.len(), 40);
            let mut counts = std::collections::HashMap::new();
            for &l in &labels {
                *counts.entry(l).or_insert(0usize) += 1;
            }
            assert_eq!(counts.len(), 5);
            assert!(counts.values().all(|&c| c == 8));
            // class blocks are contiguous (canonical layout)
            for block in labels.chunks(8) {
                assert!(block.iter().all(|&l| l == block[0]));
            }
        }
    }

    #[test]
    fn exact_fit_dataset_is_one_batch() {
        let mut labels = vec![0, 0, 1, 1];
        let data: Vec<f64> = (0..4 * 4).map(|i| i as f64 / 16.0).collect();
        let ds = Dataset {
            items: DatasetItems::Images(Tensor::new(vec![4, 2, 2, 1], data).unwrap()),
            labels: std::mem::take(&mut labels),
            split: "train".into(),
        };
        let spec = BatchSpec {
            classes_per_batch: 2,
            images_per_class: 2,
            seed: 0,
        };
        let mut sampler = BatchSampler::new(&ds, spec).unwrap();
        let (_, labels) = sampler.next_batch().unwrap();
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 0, 1, 1]);
    }

    #[test]
    fn sampler_is_reproducible_by_seed() {
        let ds = synth_digits::<f64>(12, 2, "train");
        let spec = BatchSpec {
            classes_per_batch: 3,
            images_per_class: 4,
            seed: 77,
        };
        let seq = |spec: BatchSpec| -> Vec<Vec<usize>> {
            let mut s = BatchSampler::new(&ds, spec).unwrap();
            (0..20).map(|_| s.next_indices()).collect()
        };
        assert_eq!(seq(spec), seq(spec));
    }

    #[test]
    fn sampler_rejects_small_classes() {
        let ds = synth_digits::<f64>(3, 2, "train");
        let spec = BatchSpec {
            classes_per_batch: 2,
            images_per_class: 4,
            seed: 0,
        };
        match BatchSampler::new(&ds, spec) {
            Err(DataError::ClassTooSmall { class: _, have, need }) => {
                assert_eq!((have, need), (3, 4));
            }
            other => panic!("expected ClassTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn csv_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let feats = vec![vec![0.125f64, -1.5], vec![2.25, 0.0]];
        let labels = vec![3usize, 0];
        let lp = dir.path().join("labeled.csv");
        write_labeled_csv(&lp, &feats, &labels).unwrap();
        let (f2, l2) = read_labeled_csv::<f64>(&lp).unwrap();
        assert_eq!(f2, feats);
        assert_eq!(l2, labels);
        let pp = dir.path().join("plain.csv");
        write_plain_csv(&pp, &feats).unwrap();
        assert_eq!(read_plain_csv::<f64>(&pp).unwrap(), feats);
        assert!(matches!(
            read_plain_csv::<f64>(&dir.path().join("missing.csv")),
            Err(DataError::Io(_))
        ));
    }
}
