//! PCA channel decorrelation of activations.
//!
//! An activation `(n, d, h, w)` is viewed as `d x (n*h*w)` observations;
//! the centered channel covariance is diagonalized with cyclic Jacobi
//! rotations and the transform is `A' = U^T (A - mean)`, which leaves the
//! transformed channels sorted by decreasing variance.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TransformCache {
    pub layer: usize,
    /// `d x d` row-major; column `j` is the `j`-th principal direction.
    pub basis: Tensor,
    /// Variances along the principal directions, descending.
    pub eigenvalues: Vec<f32>,
    pub mean: Vec<f32>,
    pub sample_count: usize,
}

impl TransformCache {
    pub fn identity(layer: usize, d: usize) -> Self {
        TransformCache {
            layer,
            basis: Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }),
            eigenvalues: vec![0.0; d],
            mean: vec![0.0; d],
            sample_count: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `U^T`, the `(out, in)` matrix of the forward transform.
    pub fn forward_matrix(&self) -> Tensor {
        let d = self.channels();
        let u = self.basis.data();
        Tensor::from_fn(&[d, d], |k| u[(k % d) * d + k / d])
    }

    /// `|U^T U - I|_F`.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.channels();
        let u = self.basis.data();
        let mut acc = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| u[k * d + i] as f64 * u[k * d + j] as f64).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                acc += (dot - want).powi(2);
            }
        }
        acc.sqrt()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "transform",
                left: x.shape().to_vec(),
                right: vec![self.channels()],
            });
        }
        Ok(())
    }

    pub fn apply(&self, a: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(a.clone());
        let out = apply_transform(&mut g, v, self)?;
        Ok(g.value(out).clone())
    }

    pub fn invert(&self, a_prime: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(a_prime.clone());
        let out = invert_transform(&mut g, v, self)?;
        Ok(g.value(out).clone())
    }
}

/// Streaming first and second moments of channel vectors.
#[derive(Clone, Debug)]
pub struct CovarianceAccumulator {
    d: usize,
    count: usize,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl CovarianceAccumulator {
    pub fn new(d: usize) -> Self {
        CovarianceAccumulator {
            d,
            count: 0,
            sum: vec![0.0; d],
            outer: vec![0.0; d * d],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn observe(&mut self, samples: &Tensor) -> Result<()> {
        let (n, c, h, w) = samples.dims4()?;
        if c != self.d {
            return Err(Error::ShapeMismatch {
                op: "fit_pca",
                left: samples.shape().to_vec(),
                right: vec![self.d],
            });
        }
        let hw = h * w;
        let d = self.d;
        let mut v = vec![0.0f64; d];
        for b in 0..n {
            let img = &samples.data()[b * c * hw..(b + 1) * c * hw];
            for p in 0..hw {
                for (ch, slot) in v.iter_mut().enumerate() {
                    *slot = img[ch * hw + p] as f64;
                }
                for i in 0..d {
                    self.sum[i] += v[i];
                    let row = &mut self.outer[i * d..i * d + i + 1];
                    for (j, o) in row.iter_mut().enumerate() {
                        *o += v[i] * v[j];
                    }
                }
            }
        }
        self.count += n * hw;
        Ok(())
    }

    /// Population covariance (divided by the observation count).
    pub fn covariance(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let m = self.count.max(1) as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / m).collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let v = self.outer[i * d + j] / m - mean[i] * mean[j];
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        (mean, cov)
    }

    pub fn finish(&self, layer: usize) -> Result<TransformCache> {
        if self.count < self.d {
            return Err(Error::InsufficientSamples {
                observations: self.count,
                channels: self.d,
                deficit: self.d - self.count,
            });
        }
        let (mean, cov) = self.covariance();
        let (values, vectors) = symmetric_eigen(cov, self.d);
        Ok(TransformCache {
            layer,
            basis: Tensor::new(vec![self.d, self.d], vectors.iter().map(|&v| v as f32).collect())?,
            eigenvalues: values.iter().map(|&v| v.max(0.0) as f32).collect(),
            mean: mean.iter().map(|&v| v as f32).collect(),
            sample_count: self.count,
        })
    }
}

/// PCA of one batch of activations `(n, d, h, w)`.
pub fn fit_pca(layer: usize, samples: &Tensor) -> Result<TransformCache> {
    let (_, d, _, _) = samples.dims4()?;
    let mut acc = CovarianceAccumulator::new(d);
    acc.observe(samples)?;
    acc.finish(layer)
}

/// `A' = U^T (A - mean)` as a differentiable graph op.
pub fn apply_transform(g: &mut Graph, a: Var, cache: &TransformCache) -> Result<Var> {
    cache.check(g.value(a))?;
    g.channel_affine(a, &cache.forward_matrix(), Some(&cache.mean), None)
}

/// `A = U A' + mean`.
pub fn invert_transform(g: &mut Graph, a_prime: Var, cache: &TransformCache) -> Result<Var> {
    cache.check(g.value(a_prime))?;
    g.channel_affine(a_prime, &cache.basis, None, Some(&cache.mean))
}

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric `d x d` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order and the row-major
/// eigenvector matrix whose columns match them. Each eigenvector is signed
/// so that its largest-magnitude entry is positive.
pub fn symmetric_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), d * d);
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale = (0..d).map(|i| a[i * d + i].abs()).fold(1.0f64, f64::max);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in p + 1..d {
                off = off.max(a[p * d + q].abs());
            }
        }
        if off < JACOBI_TOL * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].total_cmp(&a[i * d + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * d + i]).collect();
    let mut vectors = vec![0.0; d * d];
    for (col, &src) in order.iter().enumerate() {
        let mut big = 0;
        for k in 1..d {
            if v[k * d + src].abs() > v[big * d + src].abs() {
                big = k;
            }
        }
        let sign = if v[big * d + src] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..d {
            vectors[k * d + col] = sign * v[k * d + src];
        }
    }
    (values, vectors)
}
