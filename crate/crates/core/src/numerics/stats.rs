use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Row-wise softmax of `x / temperature`, max-shifted for stability.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter {
            name: "temperature",
            value: temperature,
        });
    }
    if !x.is_matrix() {
        return dim_err("softmax_rows", x.shape(), &[]);
    }
    let mut out = x.clone();
    let n = x.cols();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row, 1.0 / temperature);
    }
    Ok(out)
}

/// Softmax of `row * inv_temp` in place.
pub(crate) fn softmax_in_place(row: &mut [f64], inv_temp: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp((*v - max) * inv_temp);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Log-softmax of `row * inv_temp` in place.
pub(crate) fn log_softmax_in_place(row: &mut [f64], inv_temp: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let total: f64 = row.iter().map(|&v| libm::exp((v - max) * inv_temp)).sum();
    let lse = libm::log(total);
    for v in row.iter_mut() {
        *v = (*v - max) * inv_temp - lse;
    }
}

/// Per-channel mean and population standard deviation over the rows of an N×D matrix.
pub fn channel_stats(f: &Tensor) -> Result<(Tensor, Tensor)> {
    if !f.is_matrix() {
        return dim_err("channel_stats", f.shape(), &[]);
    }
    let (n, d) = (f.rows(), f.cols());
    if n < 2 {
        return Err(Error::InsufficientSamples {
            op: "channel_stats",
            needed: 2,
            got: n,
        });
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(f.row(r)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for r in 0..n {
        for ((s, &v), &m) in var.iter_mut().zip(f.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| libm::sqrt(s / n as f64)).collect();
    Ok((Tensor::row_vector(mean), Tensor::row_vector(std)))
}

/// `Σ p log(p/q)` for two distributions given as flat slices.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return dim_err("kl_divergence", &[p.len()], &[q.len()]);
    }
    for (name, dist) in [("p", p), ("q", q)] {
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-9 || dist.iter().any(|&v| v < 0.0) {
            return Err(Error::Parameter {
                name: if name == "p" { "p (sum)" } else { "q (sum)" },
                value: total,
            });
        }
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::DivergenceUndefined { index: i });
            }
            kl += pi * libm::log(pi / qi);
        }
    }
    // rounding can push tiny divergences below zero
    Ok(kl.max(0.0))
}

/// Shannon entropy (nats) of a distribution.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * libm::log(v)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_rows() {
        let s = softmax_rows(&Tensor::zeros(&[1, 3]), 1.0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_logit_limit() {
        let x = Tensor::from_rows(&[vec![10.0, 0.0]]).unwrap();
        let s = softmax_rows(&x, 0.01).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-8);
        assert!(s.data()[1] < 1e-8);
    }

    #[test]
    fn softmax_123_matches_extended_precision() {
        // e^k / (e + e^2 + e^3) evaluated with 30-digit arithmetic
        let expected = [
            0.090_030_573_170_380_458_f64,
            0.244_728_471_054_797_65,
            0.665_240_955_774_821_89,
        ];
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = softmax_rows(&x, 1.0).unwrap();
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(softmax_rows(&x, 0.0), Err(Error::Parameter { .. })));
        assert!(matches!(softmax_rows(&x, -1.0), Err(Error::Parameter { .. })));
    }

    #[test]
    fn constant_channels_have_zero_std() {
        let (m, s) = channel_stats(&Tensor::full(&[5, 3], 2.5)).unwrap();
        assert!(m.data().iter().all(|&v| v == 2.5));
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_stats() {
        let (m, s) = channel_stats(&Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap()).unwrap();
        assert_eq!(m.data(), &[1.0]);
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn single_row_is_insufficient() {
        assert!(matches!(
            channel_stats(&Tensor::zeros(&[1, 4])),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kl_support_violation() {
        assert_eq!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::DivergenceUndefined { index: 1 })
        );
    }
}
