//! Datasets: MNIST IDX files, seeded Gaussian blobs, stratified splits.

use std::io::ErrorKind;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FeatureShape;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Eval,
}

/// Labelled examples with features in `[0, 1]`; every class is present.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    x: Tensor<S>,
    y: Vec<usize>,
    num_classes: usize,
    split: SplitTag,
    feature_shape: FeatureShape,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(
        x: Tensor<S>,
        y: Vec<usize>,
        num_classes: usize,
        split: SplitTag,
        feature_shape: FeatureShape,
    ) -> Result<Self> {
        match x.shape() {
            [n, d] if *n == y.len() && *d == feature_shape.size() => {}
            other => {
                return Err(Error::Dimension {
                    op: "dataset",
                    left: other.to_vec(),
                    right: vec![y.len(), feature_shape.size()],
                })
            }
        }
        if let Some(v) = x
            .as_slice()
            .iter()
            .find(|&&v| !(v >= S::zero() && v <= S::one()))
        {
            return Err(Error::validation(format!("feature {v} outside [0, 1]")));
        }
        let mut counts = vec![0usize; num_classes];
        for (i, &l) in y.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::validation(format!(
                    "label {l} at index {i} is outside [0, {num_classes})"
                )));
            }
            counts[l] += 1;
        }
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(Error::validation(format!("class {c} has no examples")));
        }
        Ok(Dataset {
            x,
            y,
            num_classes,
            split,
            feature_shape,
        })
    }

    pub fn x(&self) -> &Tensor<S> {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split
    }

    pub fn feature_shape(&self) -> FeatureShape {
        self.feature_shape
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_shape.size()
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.y {
            c[l] += 1;
        }
        c
    }

    /// Features and labels of the listed rows.
    pub fn select(&self, indices: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let x = self.x.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.y[i]).collect();
        Ok((x, y))
    }

    /// The first `n` rows (all rows if fewer).
    pub fn head(&self, n: usize) -> Result<(Tensor<S>, Vec<usize>)> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// A dataset of the first `n` rows; fails if a class disappears.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        let (x, y) = self.head(n)?;
        Dataset::new(x, y, self.num_classes, self.split, self.feature_shape)
    }

    /// Writes the dataset as an IDX image/label file pair, pixels `round(255·x)`.
    pub fn write_idx(&self, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
        let (rows, cols) = match self.feature_shape {
            FeatureShape::Image {
                channels: 1,
                height,
                width,
            } => (height, width),
            FeatureShape::Flat(d) => (1, d),
            other => {
                return Err(Error::validation(format!(
                    "IDX images need one channel, got {other}"
                )))
            }
        };
        let n = self.len() as u32;
        let mut img = Vec::with_capacity(16 + self.x.len());
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for v in [n, rows as u32, cols as u32] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend(self.x.as_slice().iter().map(|v| {
            (v.to_f64().unwrap_or(0.0) * 255.0).round().clamp(0.0, 255.0) as u8
        }));
        let mut lab = Vec::with_capacity(8 + self.len());
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&n.to_be_bytes());
        lab.extend(self.y.iter().map(|&l| l as u8));
        let images = images.as_ref();
        let labels = labels.as_ref();
        std::fs::write(images, img).map_err(|e| Error::io(images, e))?;
        std::fs::write(labels, lab).map_err(|e| Error::io(labels, e))?;
        Ok(())
    }
}

struct IdxFile<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
}

impl IdxFile<'_> {
    fn open(path: &Path) -> Result<IdxFile<'_>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(IdxFile { path, bytes })
    }

    fn truncated(&self, wanted: usize) -> Error {
        Error::io(
            self.path,
            std::io::Error::new(
                ErrorKind::UnexpectedEof,
                format!("file has {} bytes, needs {wanted}", self.bytes.len()),
            ),
        )
    }

    fn header(&self, words: usize, magic: u32) -> Result<Vec<u32>> {
        if self.bytes.len() < 4 * words {
            return Err(self.truncated(4 * words));
        }
        let w: Vec<u32> = self.bytes[..4 * words]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if w[0] != magic {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: format!("observed magic 0x{:08x}, expected 0x{magic:08x}", w[0]),
            });
        }
        Ok(w)
    }

    fn body(&self, offset: usize, len: usize) -> Result<&[u8]> {
        self.bytes
            .get(offset..offset + len)
            .ok_or_else(|| self.truncated(offset + len))
    }
}

/// Parses an MNIST-style IDX image/label pair; pixels are scaled by 1/255.
pub fn load_mnist_idx<S: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset<S>> {
    let images = IdxFile::open(images_path.as_ref())?;
    let labels = IdxFile::open(labels_path.as_ref())?;
    let ih = images.header(4, IDX_IMAGES_MAGIC)?;
    let lh = labels.header(2, IDX_LABELS_MAGIC)?;
    let (n, rows, cols) = (ih[1] as usize, ih[2] as usize, ih[3] as usize);
    if lh[1] as usize != n {
        return Err(Error::Format {
            path: labels.path.to_path_buf(),
            message: format!("label count {} does not match image count {n}", lh[1]),
        });
    }
    let d = rows * cols;
    let pixels = images.body(16, n * d)?;
    let y: Vec<usize> = labels.body(8, n)?.iter().map(|&b| usize::from(b)).collect();
    let scale = S::from_f64_lossy(255.0);
    let data: Vec<S> = pixels
        .iter()
        .map(|&p| S::from_f64_lossy(f64::from(p)) / scale)
        .collect();
    let x = Tensor::matrix(n, d, data)?;
    let k = y.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        x,
        y,
        k,
        SplitTag::Train,
        FeatureShape::Image {
            channels: 1,
            height: rows,
            width: cols,
        },
    )
}

/// `K` Gaussian clusters in `[0, 1]^d`; example `i` belongs to class `i mod K`.
///
/// Centers lie in `[0.2, 0.8]^d`. Among 64 seeded candidate center sets the
/// one with the largest minimum pairwise distance is used.
pub fn make_blobs<S: Scalar>(n: usize, k: usize, d: usize, spread: f64, seed: u64) -> Result<Dataset<S>> {
    if k < 2 || n < k || d < 2 {
        return Err(Error::validation(format!(
            "make_blobs needs k >= 2, n >= k, d >= 2; got n={n}, k={k}, d={d}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::validation(format!("spread must be >= 0, got {spread}")));
    }
    let min_gap = |c: &[Vec<f64>]| {
        let mut best = f64::INFINITY;
        for a in 0..c.len() {
            for b in a + 1..c.len() {
                let dist: f64 = c[a].iter().zip(&c[b]).map(|(p, q)| (p - q).powi(2)).sum();
                best = best.min(dist);
            }
        }
        best
    };
    let mut centers: Vec<Vec<f64>> = Vec::new();
    let mut best_gap = f64::NEG_INFINITY;
    for attempt in 0..64u64 {
        let mut r = rng::stream(seed, "blob-centers", &[attempt]);
        let cand: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| r.random_range(0.2..=0.8)).collect())
            .collect();
        let gap = min_gap(&cand);
        if gap > best_gap {
            best_gap = gap;
            centers = cand;
        }
    }
    let mut r = rng::stream(seed, "blob-points", &[]);
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for &m in &centers[c] {
            let z: f64 = r.sample(StandardNormal);
            let v = if spread == 0.0 { m } else { m + spread * z };
            data.push(S::from_f64_lossy(v.clamp(0.0, 1.0)));
        }
        y.push(c);
    }
    Dataset::new(
        Tensor::matrix(n, d, data)?,
        y,
        k,
        SplitTag::Train,
        FeatureShape::Flat(d),
    )
}

/// Stratified, seeded train/eval partition.
///
/// The eval side receives `round(n·fraction)` examples in total, apportioned
/// to classes by largest remainder, so each class gets within one of
/// `class_size·fraction`.
pub fn split<S: Scalar>(data: &Dataset<S>, eval_fraction: f64, seed: u64) -> Result<(Dataset<S>, Dataset<S>)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::validation(format!(
            "eval fraction must lie in (0, 1), got {eval_fraction}"
        )));
    }
    let k = data.num_classes();
    let mut members = vec![Vec::new(); k];
    for (i, &l) in data.labels().iter().enumerate() {
        members[l].push(i);
    }
    let total = (data.len() as f64 * eval_fraction).round() as usize;
    let ideal: Vec<f64> = members.iter().map(|m| m.len() as f64 * eval_fraction).collect();
    let mut take: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let assigned: usize = take.iter().sum();
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        take[c] += 1;
    }
    for (c, m) in members.iter().enumerate() {
        if take[c] == 0 || take[c] >= m.len() {
            return Err(Error::validation(format!(
                "eval fraction {eval_fraction} leaves class {c} empty on one side ({} of {})",
                take[c],
                m.len()
            )));
        }
    }
    let mut train_idx = Vec::new();
    let mut eval_idx = Vec::new();
    for (c, m) in members.iter_mut().enumerate() {
        let mut r = rng::stream(seed, "split", &[c as u64]);
        m.shuffle(&mut r);
        eval_idx.extend_from_slice(&m[..take[c]]);
        train_idx.extend_from_slice(&m[take[c]..]);
    }
    train_idx.sort_unstable();
    eval_idx.sort_unstable();
    let build = |idx: &[usize], tag| -> Result<Dataset<S>> {
        let (x, y) = data.select(idx)?;
        Dataset::new(x, y, k, tag, data.feature_shape())
    };
    Ok((build(&train_idx, SplitTag::Train)?, build(&eval_idx, SplitTag::Eval)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_deterministic_and_balanced() {
        let a: Dataset<f64> = make_blobs(101, 3, 4, 0.05, 7).unwrap();
        let b: Dataset<f64> = make_blobs(101, 3, 4, 0.05, 7).unwrap();
        assert_eq!(a, b);
        let c = a.class_counts();
        assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        assert!(make_blobs::<f64>(1, 2, 2, 0.1, 0).is_err());
        assert!(make_blobs::<f64>(10, 2, 1, 0.1, 0).is_err());
    }

    #[test]
    fn zero_spread_collapses_to_centers() {
        let a: Dataset<f64> = make_blobs(20, 2, 3, 0.0, 1).unwrap();
        for i in 2..20 {
            assert_eq!(a.x().row(i), a.x().row(i % 2));
        }
        assert!(a.x().as_slice().iter().all(|&v| (0.2..=0.8).contains(&v)));
    }

    #[test]
    fn split_examples() {
        let a: Dataset<f64> = make_blobs(10, 2, 2, 0.1, 3).unwrap();
        let (tr, ev) = split(&a, 0.5, 1).unwrap();
        assert_eq!((tr.len(), ev.len()), (5, 5));
        assert_eq!(ev.split_tag(), SplitTag::Eval);

        let b: Dataset<f64> = make_blobs(1003, 7, 2, 0.1, 3).unwrap();
        let (tr, ev) = split(&b, 0.3, 9).unwrap();
        assert_eq!(tr.len() + ev.len(), b.len());
        for (c, &size) in b.class_counts().iter().enumerate() {
            let got = ev.class_counts()[c] as f64;
            assert!((got - size as f64 * 0.3).abs() <= 1.0);
        }
        let tiny: Dataset<f64> = make_blobs(4, 2, 2, 0.1, 3).unwrap();
        assert!(split(&tiny, 0.1, 0).is_err());
        assert!(split(&tiny, 1.0, 0).is_err());
    }

    #[test]
    fn dataset_invariants_enforced() {
        let x = Tensor::from_rows(&[[0.5, 1.2]]).unwrap();
        assert!(Dataset::new(x, vec![0], 1, SplitTag::Train, FeatureShape::Flat(2)).is_err());
        let x = Tensor::from_rows(&[[0.5, 0.2], [0.1, 0.1]]).unwrap();
        let err = Dataset::new(x, vec![0, 0], 2, SplitTag::Train, FeatureShape::Flat(2)).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }
}
