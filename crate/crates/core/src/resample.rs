//! Bilinear resampling on channels-last grids (half-pixel centres, edge clamp).

use alloc::vec::Vec;

/// Resizes an `h × w × c` grid to `out_h × out_w × c`.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), h * w * c);
    let ys = sample_positions(h, out_h);
    let xs = sample_positions(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    out
}

/// For each output index: the two source indices and the blend fraction.
fn sample_positions(src_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            if src_len == out_len {
                return (i, i, 0.0);
            }
            let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = libm::floor(pos) as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
