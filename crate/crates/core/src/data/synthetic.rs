use std::f64::consts::PI;

use crate::error::{invalid_input, Result};
use crate::numerics::{DenseMatrix, RandomStream};

use super::Dataset;

/// Distance of every blob center from the origin.
pub const BLOB_RADIUS: f64 = 1.5;

const DATA_STREAM: u64 = 1;

/// Class centers: vertices of a regular polygon of radius [`BLOB_RADIUS`] in
/// the first two coordinates (a segment for `dim == 1`), zero elsewhere.
pub fn blob_centers(n_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            if dim == 1 {
                let step = 2.0 * BLOB_RADIUS / (n_classes - 1).max(1) as f64;
                c[0] = -BLOB_RADIUS + step * k as f64;
            } else {
                let theta = 2.0 * PI * k as f64 / n_classes as f64;
                c[0] = BLOB_RADIUS * theta.cos();
                c[1] = BLOB_RADIUS * theta.sin();
            }
            c
        })
        .collect()
}

/// Isotropic Gaussian blobs, `n_per_class` points per class, grouped by class.
pub fn gen_gaussian_blobs(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    blobs_on_stream(n_classes, n_per_class, dim, spread, seed, DATA_STREAM)
}

pub(crate) fn blobs_on_stream(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    stream: u64,
) -> Result<Dataset> {
    if n_classes < 2 || n_per_class == 0 || dim == 0 {
        return Err(invalid_input!(
            "blobs need n_classes >= 2 and positive counts (got {n_classes}, {n_per_class}, dim {dim})"
        ));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(invalid_input!("blob spread must be positive, got {spread}"));
    }
    let centers = blob_centers(n_classes, dim);
    let mut rng = RandomStream::new(seed, stream);
    let mut values = Vec::with_capacity(n_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            values.extend(center.iter().map(|c| c + spread * rng.normal()));
            labels.push(k);
        }
    }
    Dataset::new(
        DenseMatrix::new(labels.len(), dim, values)?,
        labels,
        n_classes,
    )
}

/// Two interleaving half circles: class 0 is the upper unit half circle,
/// class 1 the lower one shifted to `(1, 0.5)`.
pub fn gen_two_moons(n_per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    moons_on_stream(n_per_class, noise, seed, DATA_STREAM)
}

pub(crate) fn moons_on_stream(
    n_per_class: usize,
    noise: f64,
    seed: u64,
    stream: u64,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(invalid_input!("moons need a positive count per class"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(invalid_input!("moon noise must be >= 0, got {noise}"));
    }
    let mut rng = RandomStream::new(seed, stream);
    let mut values = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for _ in 0..n_per_class {
            let t = PI * rng.uniform();
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let (nx, ny) = (rng.normal(), rng.normal());
            values.push(x + noise * nx);
            values.push(y + noise * ny);
            labels.push(class);
        }
    }
    Dataset::new(DenseMatrix::new(labels.len(), 2, values)?, labels, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_collapse_to_centers() {
        let ds = gen_gaussian_blobs(2, 1, 2, 1e-300, 0).unwrap();
        let centers = blob_centers(2, 2);
        for k in 0..2 {
            assert_eq!(ds.label(k), k);
            for d in 0..2 {
                assert!((ds.example(k)[d] - centers[k][d]).abs() < 1e-200);
            }
        }
    }

    #[test]
    fn blobs_deterministic() {
        let a = gen_gaussian_blobs(3, 50, 4, 0.5, 7).unwrap();
        let b = gen_gaussian_blobs(3, 50, 4, 0.5, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_gaussian_blobs(3, 50, 4, 0.5, 8).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.class_counts(), vec![50, 50, 50]);
    }

    #[test]
    fn blob_errors() {
        assert!(gen_gaussian_blobs(1, 5, 2, 0.5, 0).is_err());
        assert!(gen_gaussian_blobs(3, 0, 2, 0.5, 0).is_err());
        assert!(gen_gaussian_blobs(3, 5, 2, 0.0, 0).is_err());
        assert!(gen_gaussian_blobs(3, 5, 2, -1.0, 0).is_err());
    }

    #[test]
    fn centers_are_distinct() {
        for (k, dim) in [(2, 1), (3, 2), (5, 3), (10, 2)] {
            let c = blob_centers(k, dim);
            for i in 0..k {
                for j in i + 1..k {
                    let d: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    assert!(d.sqrt() > 0.1);
                }
            }
        }
    }

    #[test]
    fn noiseless_moons_lie_on_half_circles() {
        let ds = gen_two_moons(100, 0.0, 3).unwrap();
        assert_eq!(ds.class_counts(), vec![100, 100]);
        for i in 0..ds.len() {
            let (x, y) = (ds.example(i)[0], ds.example(i)[1]);
            if ds.label(i) == 0 {
                assert!(((x * x + y * y).sqrt() - 1.0).abs() < 1e-12);
                assert!(y >= -1e-12);
            } else {
                let (u, v) = (x - 1.0, y - 0.5);
                assert!(((u * u + v * v).sqrt() - 1.0).abs() < 1e-12);
                assert!(v <= 1e-12);
            }
        }
    }

    #[test]
    fn moons_deterministic_and_validated() {
        assert_eq!(gen_two_moons(20, 0.1, 1).unwrap(), gen_two_moons(20, 0.1, 1).unwrap());
        assert!(gen_two_moons(20, -0.1, 1).is_err());
        assert!(gen_two_moons(0, 0.1, 1).is_err());
    }
}
