use crate::error::{Error, Result};

/// Ridge added to both covariances before the matrix square root.
pub const FRECHET_RIDGE: f64 = 1e-6;

const JACOBI_SWEEPS: usize = 100;

pub fn mean_vector(xs: &[Vec<f64>]) -> Vec<f64> {
    let d = xs[0].len();
    let mut m = vec![0.0; d];
    for x in xs {
        for (a, v) in m.iter_mut().zip(x) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= xs.len() as f64);
    m
}

/// Sample covariance with `1/(n−1)` normalisation, row-major `d×d`.
pub fn covariance(xs: &[Vec<f64>]) -> Vec<f64> {
    let d = xs[0].len();
    let mu = mean_vector(xs);
    let mut c = vec![0.0; d * d];
    for x in xs {
        for i in 0..d {
            let di = x[i] - mu[i];
            for j in i..d {
                c[i * d + j] += di * (x[j] - mu[j]);
            }
        }
    }
    let norm = (xs.len() - 1) as f64;
    for i in 0..d {
        for j in i..d {
            c[i * d + j] /= norm;
            c[j * d + i] = c[i * d + j];
        }
    }
    c
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues and the column-major eigenvector matrix (column `k`
/// is `v[k*d..(k+1)*d]`).
fn jacobi_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _ in 0..JACOBI_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
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
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[p * d + k], v[q * d + k]);
                    v[p * d + k] = c * vkp - s * vkq;
                    v[q * d + k] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// Principal square root of a symmetric positive semi-definite matrix.
fn sqrt_psd(a: &[f64], d: usize) -> Vec<f64> {
    let (vals, vecs) = jacobi_eigen(a, d);
    let mut out = vec![0.0; d * d];
    for (k, &lam) in vals.iter().enumerate() {
        let r = lam.max(0.0).sqrt();
        let col = &vecs[k * d..(k + 1) * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] += r * col[i] * col[j];
            }
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                c[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    c
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// `‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2})`, with both covariances
/// ridged by [`FRECHET_RIDGE`]. The cross term is evaluated as
/// `Tr √(√Σ_A Σ_B √Σ_A)`, which keeps every root symmetric.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Validation("Fréchet distance needs at least two vectors per set".into()));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::Shape("feature vectors differ in dimension".into()));
    }
    if a.len() <= d || b.len() <= d {
        log::warn!(
            "Fréchet distance over {} and {} samples of dimension {d}; covariances are rank-deficient",
            a.len(),
            b.len()
        );
    }
    let (mu_a, mu_b) = (mean_vector(a), mean_vector(b));
    let mut ca = covariance(a);
    let mut cb = covariance(b);
    for i in 0..d {
        ca[i * d + i] += FRECHET_RIDGE;
        cb[i * d + i] += FRECHET_RIDGE;
    }
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let ra = sqrt_psd(&ca, d);
    let mut inner = matmul(&matmul(&ra, &cb, d), &ra, d);
    // symmetrise away rounding before the second root
    for i in 0..d {
        for j in i + 1..d {
            let m = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = m;
            inner[j * d + i] = m;
        }
    }
    let (vals, _) = jacobi_eigen(&inner, d);
    let cross: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    let trace: f64 = (0..d).map(|i| ca[i * d + i] + cb[i * d + i]).sum();
    let dist = mean_term + trace - 2.0 * cross;
    if !dist.is_finite() {
        return Err(Error::Numerical("Fréchet distance is not finite".into()));
    }
    Ok(dist)
}
