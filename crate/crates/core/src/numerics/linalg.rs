use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;

/// Eigenvalues of a symmetric matrix (row-major, n×n) by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        let diag: f64 = (0..n).map(|i| m[i * n + i] * m[i * n + i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}

/// Smallest of the `min(n, d)` singular values of an n×d matrix.
pub fn min_singular_value(v: &Tensor) -> f64 {
    let (n, d) = (v.rows(), v.cols());
    let data = v.data();
    // Gram matrix on the smaller side
    let (size, gram) = if n <= d {
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let s: f64 = data[i * d..(i + 1) * d]
                    .iter()
                    .zip(&data[j * d..(j + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                g[i * n + j] = s;
                g[j * n + i] = s;
            }
        }
        (n, g)
    } else {
        let mut g = vec![0.0; d * d];
        for r in 0..n {
            let row = &data[r * d..(r + 1) * d];
            for i in 0..d {
                for j in i..d {
                    g[i * d + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                g[i * d + j] = g[j * d + i];
            }
        }
        (d, g)
    };
    let lambda_min = symmetric_eigenvalues(&gram, size)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    libm::sqrt(lambda_min.max(0.0))
}
