//! Per-pixel palette assignment kernels shared by the autograd op (`f32`)
//! and the standalone domain API (`f64`).
//!
//! Layouts: logits `[K, P]`, palette `[K, 3]`, image `[3, P]`, weights
//! `[K, P]`, where `P` is the number of pixels of one image.

use num_traits::Float;

/// Temperature softmax over the K logits of every pixel, blended with the
/// palette. Writes the blended image into `out` and the softmax weights
/// into `weights`.
pub fn soft_assign<T: Float>(
    logits: &[T],
    palette: &[T],
    k: usize,
    pixels: usize,
    tau: T,
    out: &mut [T],
    weights: &mut [T],
) {
    debug_assert_eq!(logits.len(), k * pixels);
    debug_assert_eq!(palette.len(), k * 3);
    let inv_tau = T::one() / tau;
    for p in 0..pixels {
        let mut max = logits[p];
        for c in 1..k {
            let v = logits[c * pixels + p];
            if v > max {
                max = v;
            }
        }
        let mut denom = T::zero();
        for c in 0..k {
            let e = ((logits[c * pixels + p] - max) * inv_tau).exp();
            weights[c * pixels + p] = e;
            denom = denom + e;
        }
        let inv = T::one() / denom;
        let mut rgb = [T::zero(); 3];
        for c in 0..k {
            let s = weights[c * pixels + p] * inv;
            weights[c * pixels + p] = s;
            for (ch, acc) in rgb.iter_mut().enumerate() {
                *acc = *acc + s * palette[c * 3 + ch];
            }
        }
        for (ch, v) in rgb.into_iter().enumerate() {
            out[ch * pixels + p] = v;
        }
    }
}

/// Backward pass of [`soft_assign`]. Accumulates into `dlogits` and
/// `dpalette`.
pub fn soft_assign_backward<T: Float>(
    weights: &[T],
    palette: &[T],
    dout: &[T],
    k: usize,
    pixels: usize,
    tau: T,
    dlogits: Option<&mut [T]>,
    dpalette: Option<&mut [T]>,
) {
    if let Some(dpal) = dpalette {
        for c in 0..k {
            let w = &weights[c * pixels..(c + 1) * pixels];
            for ch in 0..3 {
                let g = &dout[ch * pixels..(ch + 1) * pixels];
                let mut acc = T::zero();
                for (a, b) in w.iter().zip(g) {
                    acc = acc + *a * *b;
                }
                dpal[c * 3 + ch] = dpal[c * 3 + ch] + acc;
            }
        }
    }
    if let Some(dl) = dlogits {
        let inv_tau = T::one() / tau;
        let mut ds = vec![T::zero(); k];
        for p in 0..pixels {
            let g = [dout[p], dout[pixels + p], dout[2 * pixels + p]];
            let mut dot = T::zero();
            for (c, d) in ds.iter_mut().enumerate() {
                *d = g[0] * palette[c * 3] + g[1] * palette[c * 3 + 1] + g[2] * palette[c * 3 + 2];
                dot = dot + *d * weights[c * pixels + p];
            }
            for (c, d) in ds.iter().enumerate() {
                let s = weights[c * pixels + p];
                dl[c * pixels + p] = dl[c * pixels + p] + s * (*d - dot) * inv_tau;
            }
        }
    }
}

/// Per-pixel argmax over the K logits, lowest index on ties.
pub fn argmax_index<T: Float>(logits: &[T], k: usize, pixels: usize) -> Vec<usize> {
    (0..pixels)
        .map(|p| {
            let mut best = 0;
            let mut best_v = logits[p];
            for c in 1..k {
                let v = logits[c * pixels + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

/// Writes `palette[index[p]]` into every pixel of `out`.
pub fn hard_assign<T: Float>(logits: &[T], palette: &[T], k: usize, pixels: usize, out: &mut [T]) {
    for (p, m) in argmax_index(logits, k, pixels).into_iter().enumerate() {
        for ch in 0..3 {
            out[ch * pixels + p] = palette[m * 3 + ch];
        }
    }
}
