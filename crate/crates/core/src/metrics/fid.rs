//! Fréchet distance between Gaussian fits of embedded image sets.
//!
//! FID = ||μ_a - μ_b||² + Tr(Σ_a + Σ_b - 2 (Σ_a Σ_b)^{1/2}), with the trace
//! of the matrix square root computed through the symmetric form
//! Σ_a^{1/2} Σ_b Σ_a^{1/2} and a cyclic Jacobi eigensolver (d stays small).

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Stream;

/// Mean vector and sample covariance of an embedded image set.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    /// Row-major d x d, symmetrized.
    pub sigma: Vec<f64>,
    pub dim: usize,
    pub n: usize,
}

/// Sample mean and unbiased covariance of feature rows \[n, d\].
pub fn gaussian_stats(features: &Tensor<f64>) -> Result<GaussianStats> {
    let [n, d] = features.shape()[..] else {
        return Err(Error::shape(format!(
            "gaussian_stats: expected [n, d] features, got {:?}",
            features.shape()
        )));
    };
    if n < 2 {
        return Err(Error::data(format!(
            "gaussian_stats: need at least 2 samples, got {n}"
        )));
    }
    let data = features.data();
    let mut mu = vec![0.0f64; d];
    for row in data.chunks(d) {
        for (m, &v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut sigma = vec![0.0f64; d * d];
    for row in data.chunks(d) {
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in i..d {
                sigma[i * d + j] += di * (row[j] - mu[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = sigma[i * d + j] / denom;
            sigma[i * d + j] = v;
            sigma[j * d + i] = v;
        }
    }
    Ok(GaussianStats {
        mu,
        sigma,
        dim: d,
        n,
    })
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns, row-major).
pub fn jacobi_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != d * d {
        return Err(Error::shape(format!(
            "jacobi: matrix length {} is not {d}x{d}",
            a.len()
        )));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += m[i * d + j] * m[i * d + j];
                }
            }
        }
        s.sqrt()
    };
    const TOL: f64 = 1e-10;
    const MAX_SWEEPS: usize = 100;
    let mut sweeps = 0;
    while off(&m) > TOL {
        if sweeps >= MAX_SWEEPS {
            return Err(Error::numeric(format!(
                "jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps (off = {})",
                off(&m)
            )));
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < TOL * 1e-3 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
    }
    let eig = (0..d).map(|i| m[i * d + i]).collect();
    Ok((eig, v))
}

/// Eigenvalue clipping: values in [-1e-6, 0) are numeric noise and become
/// zero; anything more negative means the input was not PSD.
fn clip_eigenvalue(l: f64) -> Result<f64> {
    if l >= 0.0 {
        Ok(l)
    } else if l >= -1e-6 {
        Ok(0.0)
    } else {
        Err(Error::numeric(format!(
            "matrix eigenvalue {l} is negative beyond tolerance"
        )))
    }
}

/// Symmetric PSD square root via eigen-decomposition.
fn sqrt_psd(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let (eig, v) = jacobi_eigen(a, d)?;
    let roots: Vec<f64> = eig
        .iter()
        .map(|&l| clip_eigenvalue(l).map(f64::sqrt))
        .collect::<Result<_>>()?;
    // V diag(sqrt) V^T
    let mut out = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += v[i * d + k] * roots[k] * v[j * d + k];
            }
            out[i * d + j] = s;
        }
    }
    Ok(out)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                c[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    c
}

/// Fréchet distance between two Gaussian fits (squared-mean convention).
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::shape(format!(
            "fid: dimension mismatch {} vs {}",
            a.dim, b.dim
        )));
    }
    let d = a.dim;
    let mean_term: f64 = a
        .mu
        .iter()
        .zip(&b.mu)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..d).map(|i| a.sigma[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| b.sigma[i * d + i]).sum();
    // Tr((Σa Σb)^{1/2}) via eigenvalues of Σa^{1/2} Σb Σa^{1/2}
    let sa = sqrt_psd(&a.sigma, d)?;
    let inner = matmul_sq(&matmul_sq(&sa, &b.sigma, d), &sa, d);
    // symmetrize against round-off before the eigensolve
    let mut sym = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (eig, _) = jacobi_eigen(&sym, d)?;
    let tr_sqrt: f64 = eig
        .iter()
        .map(|&l| clip_eigenvalue(l).map(f64::sqrt))
        .sum::<Result<f64>>()?;
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}

/// Maps an image to a fixed-length feature vector.
pub trait Embedder {
    fn embed_one(&self, image: &Tensor<f32>) -> Result<Vec<f64>>;
    fn dim(&self) -> usize;
}

/// Default embedding: average-pool each channel to 8x8, flatten, then apply
/// a fixed seeded random orthogonal projection to 64 dimensions.
pub struct DefaultEmbedder {
    channels: usize,
    /// [in_dim, 64] with orthonormal columns.
    projection: Vec<f64>,
    in_dim: usize,
}

pub const EMBED_DIM: usize = 64;
const POOL: usize = 8;

impl DefaultEmbedder {
    pub fn new(channels: usize) -> Self {
        let in_dim = channels * POOL * POOL;
        let mut stream = Stream::derive(0x5eed_f1d0, &[channels as u64]);
        // random Gaussian matrix, Gram-Schmidt orthonormalized columns
        let mut proj = vec![0.0f64; in_dim * EMBED_DIM];
        for v in proj.iter_mut() {
            *v = stream.normal_f64();
        }
        for col in 0..EMBED_DIM {
            for prev in 0..col {
                let mut dot = 0.0;
                for r in 0..in_dim {
                    dot += proj[r * EMBED_DIM + col] * proj[r * EMBED_DIM + prev];
                }
                for r in 0..in_dim {
                    proj[r * EMBED_DIM + col] -= dot * proj[r * EMBED_DIM + prev];
                }
            }
            let mut norm = 0.0;
            for r in 0..in_dim {
                norm += proj[r * EMBED_DIM + col] * proj[r * EMBED_DIM + col];
            }
            let norm = norm.sqrt().max(1e-12);
            for r in 0..in_dim {
                proj[r * EMBED_DIM + col] /= norm;
            }
        }
        DefaultEmbedder {
            channels,
            projection: proj,
            in_dim,
        }
    }

    /// Adaptive average pooling of one channel plane to POOL x POOL.
    fn pool_plane(plane: &[f32], h: usize, w: usize, out: &mut [f64]) {
        for oy in 0..POOL {
            let y0 = oy * h / POOL;
            let y1 = ((oy + 1) * h).div_ceil(POOL).max(y0 + 1).min(h);
            for ox in 0..POOL {
                let x0 = ox * w / POOL;
                let x1 = ((ox + 1) * w).div_ceil(POOL).max(x0 + 1).min(w);
                let mut s = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += plane[y * w + x] as f64;
                    }
                }
                out[oy * POOL + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
}

impl Embedder for DefaultEmbedder {
    fn embed_one(&self, image: &Tensor<f32>) -> Result<Vec<f64>> {
        let [c, h, w] = image.shape()[..] else {
            return Err(Error::shape(format!(
                "embedder expects CHW images, got {:?}",
                image.shape()
            )));
        };
        if c != self.channels {
            return Err(Error::shape(format!(
                "embedder built for {} channels, image has {c}",
                self.channels
            )));
        }
        if h < POOL || w < POOL {
            return Err(Error::shape(format!(
                "embedder needs at least {POOL}x{POOL} images, got {h}x{w}"
            )));
        }
        let mut pooled = vec![0.0f64; self.in_dim];
        for ci in 0..c {
            Self::pool_plane(
                &image.data()[ci * h * w..(ci + 1) * h * w],
                h,
                w,
                &mut pooled[ci * POOL * POOL..(ci + 1) * POOL * POOL],
            );
        }
        let mut out = vec![0.0f64; EMBED_DIM];
        for (r, &p) in pooled.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (o, outv) in out.iter_mut().enumerate() {
                *outv += p * self.projection[r * EMBED_DIM + o];
            }
        }
        Ok(out)
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }
}

/// Embed a set of images into a feature matrix \[n, d\].
pub fn embed<E: Embedder>(images: &[Tensor<f32>], embedder: &E) -> Result<Tensor<f64>> {
    if images.is_empty() {
        return Err(Error::data("embed: empty image set".to_string()));
    }
    let d = embedder.dim();
    let mut data = Vec::with_capacity(images.len() * d);
    for img in images {
        data.extend(embedder.embed_one(img)?);
    }
    Tensor::new(vec![images.len(), d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_of(rows: &[Vec<f64>]) -> GaussianStats {
        let n = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        gaussian_stats(&Tensor::new(vec![n, d], flat).unwrap()).unwrap()
    }

    #[test]
    fn constant_rows_have_zero_covariance() {
        let s = stats_of(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert_eq!(s.mu, vec![1.0, 2.0]);
        assert!(s.sigma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_case_two_points() {
        let s = stats_of(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(s.mu, vec![1.0, 0.0]);
        // unbiased variance of {0, 2} is 2
        assert_eq!(s.sigma[0], 2.0);
        assert_eq!(s.sigma[3], 0.0);
    }

    #[test]
    fn covariance_is_exactly_symmetric() {
        let mut stream = Stream::derive(1, &[0]);
        let feats = Tensor::<f64>::randn(&[20, 5], &mut stream);
        let s = gaussian_stats(&feats).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(s.sigma[i * 5 + j], s.sigma[j * 5 + i]);
            }
        }
    }

    #[test]
    fn single_sample_rejected() {
        let f = Tensor::<f64>::ones(&[1, 4]);
        assert!(gaussian_stats(&f).is_err());
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(3, 1) rotated by 45 degrees
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let v = [r, -r, r, r];
        let mut a = [0.0f64; 4];
        let lam = [3.0, 1.0];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    a[i * 2 + j] += v[i * 2 + k] * lam[k] * v[j * 2 + k];
                }
            }
        }
        let (mut eig, _) = jacobi_eigen(&a, 2).unwrap();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        assert!((eig[0] - 3.0).abs() < 1e-10);
        assert!((eig[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn fid_identical_stats_is_zero() {
        let mut stream = Stream::derive(2, &[0]);
        let feats = Tensor::<f64>::randn(&[30, 6], &mut stream);
        let s = gaussian_stats(&feats).unwrap();
        let d = fid(&s, &s).unwrap();
        assert!(d.abs() < 1e-6, "fid(a,a) = {d}");
    }

    #[test]
    fn fid_symmetry() {
        let mut stream = Stream::derive(3, &[0]);
        let fa = Tensor::<f64>::randn(&[40, 5], &mut stream);
        let fb = Tensor::<f64>::randn(&[35, 5], &mut stream);
        let sa = gaussian_stats(&fa).unwrap();
        let sb = gaussian_stats(&fb).unwrap();
        let ab = fid(&sa, &sb).unwrap();
        let ba = fid(&sb, &sa).unwrap();
        assert!((ab - ba).abs() < 1e-6, "{ab} vs {ba}");
    }

    #[test]
    fn fid_one_dimensional_closed_form() {
        // N(0,1) vs N(2,1): squared-mean convention gives 4
        let a = GaussianStats {
            mu: vec![0.0],
            sigma: vec![1.0],
            dim: 1,
            n: 100,
        };
        let b = GaussianStats {
            mu: vec![2.0],
            sigma: vec![1.0],
            dim: 1,
            n: 100,
        };
        let d = fid(&a, &b).unwrap();
        assert!((d - 4.0).abs() < 1e-9, "fid = {d}");
    }

    #[test]
    fn fid_diagonal_case_sums_per_axis() {
        // diagonal covariances: distance decomposes into scalar cases
        let a = GaussianStats {
            mu: vec![0.0, 1.0, -1.0],
            sigma: vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.5],
            dim: 3,
            n: 10,
        };
        let b = GaussianStats {
            mu: vec![1.0, 1.0, 0.0],
            sigma: vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.5],
            dim: 3,
            n: 10,
        };
        let want: f64 = {
            let scalar = |m1: f64, v1: f64, m2: f64, v2: f64| {
                (m1 - m2).powi(2) + v1 + v2 - 2.0 * (v1 * v2).sqrt()
            };
            scalar(0.0, 1.0, 1.0, 2.0) + scalar(1.0, 2.0, 1.0, 2.0) + scalar(-1.0, 0.5, 0.0, 1.5)
        };
        let d = fid(&a, &b).unwrap();
        assert!((d - want).abs() < 1e-9, "{d} vs {want}");
    }

    #[test]
    fn fid_mean_shift_response() {
        let mut stream = Stream::derive(4, &[0]);
        let fa = Tensor::<f64>::randn(&[50, 4], &mut stream);
        let delta = [0.5, -1.0, 0.25, 2.0];
        let shifted = Tensor::new(
            vec![50, 4],
            fa.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + delta[i % 4])
                .collect(),
        )
        .unwrap();
        let sa = gaussian_stats(&fa).unwrap();
        let sb = gaussian_stats(&shifted).unwrap();
        let want: f64 = delta.iter().map(|d| d * d).sum();
        let got = fid(&sa, &sb).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn default_embedder_is_deterministic_with_dim_64() {
        let e = DefaultEmbedder::new(1);
        assert_eq!(e.dim(), 64);
        let img = Tensor::<f32>::from_fn(&[1, 16, 16], |i| (i % 7) as f32 / 7.0);
        let a = e.embed_one(&img).unwrap();
        let b = e.embed_one(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let feats = embed(&[img.clone(), img], &e).unwrap();
        assert_eq!(feats.shape(), &[2, 64]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = GaussianStats {
            mu: vec![0.0; 3],
            sigma: vec![0.0; 9],
            dim: 3,
            n: 5,
        };
        let b = GaussianStats {
            mu: vec![0.0; 2],
            sigma: vec![0.0; 4],
            dim: 2,
            n: 5,
        };
        assert!(fid(&a, &b).is_err());
    }
}
