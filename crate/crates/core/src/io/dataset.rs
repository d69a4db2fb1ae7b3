//! In-memory labelled datasets: CIFAR-10 from its binary release, and
//! synthetic Gaussian class blobs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    /// Already normalized values.
    Float(Vec<f64>),
    /// Raw bytes, normalized per channel when gathered.
    Bytes {
        data: Vec<u8>,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
}

/// Labelled samples of a fixed shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    sample_shape: Vec<usize>,
    classes: usize,
    labels: Vec<usize>,
    storage: Storage,
}

/// A training split and a held-out split sharing normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DatasetHandle,
    pub test: DatasetHandle,
}

impl DatasetHandle {
    /// Wraps normalized values, `labels.len()` rows of `sample_shape` each.
    pub fn from_values(
        sample_shape: Vec<usize>,
        classes: usize,
        values: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if values.len() != per * labels.len() {
            return Err(Error::Shape(format!(
                "{} values for {} samples of {per}",
                values.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            sample_shape,
            classes,
            labels,
            storage: Storage::Float(values),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Normalized inputs of the given rows, shape `(rows, sample_shape..)`.
    pub fn gather(&self, rows: &[usize]) -> Tensor {
        let per = self.sample_len();
        let mut out = Vec::with_capacity(rows.len() * per);
        match &self.storage {
            Storage::Float(v) => {
                for &r in rows {
                    out.extend_from_slice(&v[r * per..(r + 1) * per]);
                }
            }
            Storage::Bytes { data, mean, std } => {
                let plane = per / mean.len();
                for &r in rows {
                    let src = &data[r * per..(r + 1) * per];
                    for (i, b) in src.iter().enumerate() {
                        let c = i / plane;
                        out.push((f64::from(*b) / 255.0 - mean[c]) / std[c]);
                    }
                }
            }
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, out).expect("gathered length matches shape")
    }

    pub fn labels_of(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }

    /// Every sample, in order.
    pub fn all_inputs(&self) -> Tensor {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }
}

pub const CIFAR10_RECORD: usize = 1 + 3072;
pub const CIFAR10_FILE_BYTES: u64 = 30_730_000;
const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR10_TEST_FILE: &str = "test_batch.bin";

fn read_cifar_file(path: &Path, labels: &mut Vec<usize>, pixels: &mut Vec<u8>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != CIFAR10_FILE_BYTES {
        let offset = (bytes.len() / CIFAR10_RECORD * CIFAR10_RECORD) as u64;
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: offset.min(bytes.len() as u64),
            expected: CIFAR10_FILE_BYTES,
        });
    }
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = rec[0];
        if label >= 10 {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                offset: (i * CIFAR10_RECORD) as u64,
                reason: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        labels.push(usize::from(label));
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

/// Loads the binary CIFAR-10 release from `dir`. Both splits are normalized
/// per channel with the training split's mean and standard deviation of
/// pixel values scaled to `[0, 1]`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut train_labels = Vec::with_capacity(50_000);
    let mut train_pixels = Vec::with_capacity(50_000 * 3072);
    for name in CIFAR10_TRAIN_FILES {
        read_cifar_file(&dir.join(name), &mut train_labels, &mut train_pixels)?;
    }
    let mut test_labels = Vec::with_capacity(10_000);
    let mut test_pixels = Vec::with_capacity(10_000 * 3072);
    read_cifar_file(&dir.join(CIFAR10_TEST_FILE), &mut test_labels, &mut test_pixels)?;

    let (mean, std) = channel_stats(&train_pixels, 3, 1024);
    let make = |labels, data| DatasetHandle {
        sample_shape: vec![3, 32, 32],
        classes: 10,
        labels,
        storage: Storage::Bytes {
            data,
            mean: mean.clone(),
            std: std.clone(),
        },
    };
    Ok(Dataset {
        train: make(train_labels, train_pixels),
        test: make(test_labels, test_pixels),
    })
}

fn channel_stats(pixels: &[u8], channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; channels];
    let mut sumsq = vec![0.0; channels];
    for sample in pixels.chunks_exact(channels * plane) {
        for (c, chunk) in sample.chunks_exact(plane).enumerate() {
            for b in chunk {
                let v = f64::from(*b) / 255.0;
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
    }
    let count = (pixels.len() / channels) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sumsq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count - m * m).max(1e-12).sqrt())
        .collect();
    (mean, std)
}

/// Class centres for the synthetic task: orthonormal directions scaled so
/// that every pair of centres is `separation` apart (when `classes ≤ dims`).
fn class_means(classes: usize, dims: usize, separation: f64, rng: &SeededRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut v = crate::tensor::seeded_gaussian(&rng.derive(&[c as u64]), dims, 1.0);
        if c < dims {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let scale = separation / std::f64::consts::SQRT_2;
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * scale).collect())
        .collect()
}

fn raw_blobs(
    means: &[Vec<f64>],
    per_class: usize,
    rng: &SeededRng,
) -> (Vec<f64>, Vec<usize>) {
    let dims = means[0].len();
    let mut values = Vec::with_capacity(means.len() * per_class * dims);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    // Interleave classes so that prefixes of the data stay balanced.
    for i in 0..per_class {
        for (c, mu) in means.iter().enumerate() {
            let noise = crate::tensor::seeded_gaussian(&rng.derive(&[c as u64, i as u64]), dims, 1.0);
            values.extend(mu.iter().zip(noise).map(|(m, z)| m + z));
            labels.push(c);
        }
    }
    (values, labels)
}

fn standardize(values: &mut [f64], dims: usize, mean: &[f64], std: &[f64]) {
    for row in values.chunks_exact_mut(dims) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
}

fn feature_stats(values: &[f64], dims: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = (values.len() / dims) as f64;
    let mut mean = vec![0.0; dims];
    for row in values.chunks_exact(dims) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; dims];
    for row in values.chunks_exact(dims) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / rows).max(1e-24).sqrt()).collect();
    (mean, std)
}

fn check_synthetic(classes: usize, dims: usize, per_class: usize, separation: f64) -> Result<()> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be at least 1".into()));
    }
    if classes < 2 || dims == 0 {
        return Err(Error::InvalidArgument(
            "synthetic data needs at least two classes and one dimension".into(),
        ));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "separation must be non-negative, got {separation}"
        )));
    }
    Ok(())
}

/// Gaussian class blobs with unit noise and centres `separation` apart,
/// standardized per feature. Samples are interleaved by class.
pub fn gen_synthetic(
    classes: usize,
    dims: usize,
    per_class: usize,
    separation: f64,
    rng: &SeededRng,
) -> Result<DatasetHandle> {
    Ok(synthetic_task(classes, dims, per_class, 0, separation, rng)?.train)
}

/// Training and held-out blobs around the same centres; the held-out split
/// uses the training statistics for standardization.
pub fn synthetic_task(
    classes: usize,
    dims: usize,
    per_class: usize,
    test_per_class: usize,
    separation: f64,
    rng: &SeededRng,
) -> Result<Dataset> {
    check_synthetic(classes, dims, per_class, separation)?;
    let means = class_means(classes, dims, separation, &rng.derive(&[0]));
    let (mut train, train_labels) = raw_blobs(&means, per_class, &rng.derive(&[1]));
    let (mut test, test_labels) = raw_blobs(&means, test_per_class, &rng.derive(&[2]));
    let (mean, std) = feature_stats(&train, dims);
    standardize(&mut train, dims, &mean, &std);
    standardize(&mut test, dims, &mean, &std);
    Ok(Dataset {
        train: DatasetHandle::from_values(vec![dims], classes, train, train_labels)?,
        test: DatasetHandle::from_values(vec![dims], classes, test, test_labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain batch gradient descent on the binary logistic loss.
    fn logistic_probe_accuracy(x: &Tensor, y: &[usize], iters: usize) -> f64 {
        let d = x.row_len();
        let mut w = vec![0.0; d + 1];
        for _ in 0..iters {
            let mut g = vec![0.0; d + 1];
            for (i, &label) in y.iter().enumerate() {
                let r = x.row(i);
                let z: f64 = w[d] + r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let e = p - label as f64;
                g.iter_mut().zip(r).for_each(|(gi, xi)| *gi += e * xi);
                g[d] += e;
            }
            w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= 0.5 * gi / y.len() as f64);
        }
        let correct = y
            .iter()
            .enumerate()
            .filter(|(i, &label)| {
                let z: f64 = w[d] + x.row(*i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                usize::from(z > 0.0) == label
            })
            .count();
        correct as f64 / y.len() as f64
    }

    #[test]
    fn well_separated_blobs_are_linearly_separable() {
        let d = gen_synthetic(2, 32, 200, 8.0, &SeededRng::new(3, 0)).unwrap();
        let acc = logistic_probe_accuracy(&d.all_inputs(), d.labels(), 200);
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn zero_separation_leaves_a_probe_at_chance() {
        let data = synthetic_task(2, 32, 300, 300, 0.0, &SeededRng::new(4, 0)).unwrap();
        // Fit on train, score on held-out.
        let x = data.train.all_inputs();
        let d = x.row_len();
        let mut w = vec![0.0; d + 1];
        for _ in 0..100 {
            let mut g = vec![0.0; d + 1];
            for (i, &l) in data.train.labels().iter().enumerate() {
                let r = x.row(i);
                let z: f64 = w[d] + r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let e = 1.0 / (1.0 + (-z).exp()) - l as f64;
                g.iter_mut().zip(r).for_each(|(gi, xi)| *gi += e * xi);
                g[d] += e;
            }
            w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= 0.5 * gi / 600.0);
        }
        let xt = data.test.all_inputs();
        let correct = data
            .test
            .labels()
            .iter()
            .enumerate()
            .filter(|(i, &l)| {
                let z: f64 = w[d] + xt.row(*i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                usize::from(z > 0.0) == l
            })
            .count();
        let acc = correct as f64 / 600.0;
        assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn generation_is_deterministic_and_standardized() {
        let a = gen_synthetic(10, 32, 20, 3.0, &SeededRng::new(1, 0)).unwrap();
        let b = gen_synthetic(10, 32, 20, 3.0, &SeededRng::new(1, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert_eq!(&a.labels()[..3], &[0, 1, 2]);
        let x = a.all_inputs();
        let mean0: f64 = (0..200).map(|i| x.row(i)[0]).sum::<f64>() / 200.0;
        assert!(mean0.abs() < 1e-12);
        assert!(gen_synthetic(10, 32, 0, 3.0, &SeededRng::new(1, 0)).is_err());
    }

    #[test]
    fn centres_are_equidistant() {
        let means = class_means(5, 16, 6.0, &SeededRng::new(2, 0));
        for a in 0..5 {
            for b in 0..a {
                let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                assert!((d - 6.0).abs() < 1e-9);
            }
        }
    }

    fn write_cifar(dir: &Path, name: &str, label: u8, len: usize) {
        let mut bytes = vec![0u8; len];
        for (i, rec) in bytes.chunks_mut(CIFAR10_RECORD).enumerate() {
            rec[0] = (i % 10) as u8;
            for (j, b) in rec.iter_mut().enumerate().skip(1) {
                *b = ((i + j) % 251) as u8;
            }
        }
        if label >= 10 {
            bytes[CIFAR10_RECORD * 7] = label;
        }
        std::fs::write(dir.join(name), bytes).unwrap();
    }

    fn full_layout(dir: &Path) {
        for name in CIFAR10_TRAIN_FILES.iter().chain([&CIFAR10_TEST_FILE]) {
            write_cifar(dir, name, 0, CIFAR10_FILE_BYTES as usize);
        }
    }

    #[test]
    fn cifar_layout_loads() {
        let dir = tempfile::tempdir().unwrap();
        full_layout(dir.path());
        let data = load_cifar10(dir.path()).unwrap();
        assert_eq!((data.train.len(), data.test.len(), data.train.classes()), (50_000, 10_000, 10));
        assert_eq!(data.train.sample_shape(), &[3, 32, 32]);
        assert_eq!(&data.train.labels()[..3], &[0, 1, 2]);
        let x = data.train.gather(&[0, 1]);
        assert_eq!(x.shape(), &[2, 3, 32, 32]);
        assert!(x.all_finite());
    }

    #[test]
    fn cifar_errors_name_file_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        full_layout(dir.path());
        write_cifar(dir.path(), "data_batch_3.bin", 0, 5 * CIFAR10_RECORD + 100);
        match load_cifar10(dir.path()).unwrap_err() {
            Error::Truncated { path, offset, .. } => {
                assert!(path.ends_with("data_batch_3.bin"));
                assert_eq!(offset, 5 * CIFAR10_RECORD as u64);
            }
            e => panic!("{e}"),
        }
        full_layout(dir.path());
        write_cifar(dir.path(), "test_batch.bin", 12, CIFAR10_FILE_BYTES as usize);
        match load_cifar10(dir.path()).unwrap_err() {
            Error::Corrupt { path, offset, .. } => {
                assert!(path.ends_with("test_batch.bin"));
                assert_eq!(offset, 7 * CIFAR10_RECORD as u64);
            }
            e => panic!("{e}"),
        }
        std::fs::remove_file(dir.path().join("data_batch_1.bin")).unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::Io { .. })));
    }
}
