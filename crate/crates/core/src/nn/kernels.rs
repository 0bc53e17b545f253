//! Raw compute kernels behind the graph ops: sgemm wrapper, im2col
//! convolution, pooling and resampling.

use super::tensor::Tensor;

/// Strided matrix view for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows × cols` buffer.
    pub fn t(data: &'a [f32], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f32, c: &mut [f32]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(c.len() >= m * n);
    let a_extent = (m - 1) * a.rs + (k - 1) * a.cs;
    let b_extent = (k - 1) * b.rs + (n - 1) * b.cs;
    assert!(a_extent < a.data.len() && b_extent < b.data.len());
    // SAFETY: extents checked above, `c` holds m*n elements with row stride n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let off = kj as isize - g.pad as isize;
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize + off;
                            *d = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched 2-D convolution, `x: [N,C,H,W]`, `w: [O,C,kh,kw]`.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    assert_eq!(w.dim(1), c, "conv2d channel mismatch");
    let g = ConvGeom { c, h, w: wd, kh, kw, stride, pad };
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let k = g.col_rows();
    let mut out = vec![0.0f32; n * o * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; k * plane] };
    let in_per = c * h * wd;
    for s in 0..n {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let dst = &mut out[s * o * plane..(s + 1) * o * plane];
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let src: &[f32] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(o, k, plane, Mat::rows(w.data(), k), Mat::rows(src, plane), beta, dst);
    }
    Tensor::new(&[n, o, ho, wo], out)
}

/// Returns `(dx, dw, db)` for [`conv2d_forward`].
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    let g = ConvGeom { c, h, w: wd, kh, kw, stride, pad };
    let plane = g.out_h() * g.out_w();
    let k = g.col_rows();
    let in_per = c * h * wd;
    let mut dw = vec![0.0f32; o * k];
    let mut db = vec![0.0f32; o];
    let mut dx = if need_dx { vec![0.0f32; x.len()] } else { Vec::new() };
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; k * plane] };
    let mut dcols = if need_dx && !g.is_pointwise() { vec![0.0f32; k * plane] } else { Vec::new() };
    for s in 0..n {
        let dys = &dy.data()[s * o * plane..(s + 1) * o * plane];
        for (oc, chunk) in dys.chunks(plane).enumerate() {
            db[oc] += chunk.iter().sum::<f32>();
        }
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        if need_dw {
            let src: &[f32] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(o, plane, k, Mat::rows(dys, plane), Mat::t(src, plane), 1.0, &mut dw);
        }
        if need_dx {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            if g.is_pointwise() {
                gemm(k, o, plane, Mat::t(w.data(), k), Mat::rows(dys, plane), 1.0, dxs);
            } else {
                gemm(k, o, plane, Mat::t(w.data(), k), Mat::rows(dys, plane), 0.0, &mut dcols);
                col2im(&dcols, &g, dxs);
            }
        }
    }
    (
        need_dx.then(|| Tensor::new(x.shape(), dx)),
        need_dw.then(|| Tensor::new(w.shape(), dw)),
        Tensor::new(&[o], db),
    )
}

/// Depthwise convolution with square kernel, stride 1, `w: [C,1,k,k]`.
pub(crate) fn dwconv_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let k = w.dim(2);
    let g = ConvGeom { c: 1, h, w: wd, kh: k, kw: k, stride: 1, pad };
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![0.0f32; n * c * ho * wo];
    for s in 0..n {
        for ch in 0..c {
            let xp = &x.data()[(s * c + ch) * h * wd..(s * c + ch + 1) * h * wd];
            let kern = &w.data()[ch * k * k..(ch + 1) * k * k];
            let op = &mut out[(s * c + ch) * ho * wo..(s * c + ch + 1) * ho * wo];
            op.fill(b.data()[ch]);
            for ki in 0..k {
                for kj in 0..k {
                    let kv = kern[ki * k + kj];
                    for oy in 0..ho {
                        let iy = (oy + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox + kj) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                op[oy * wo + ox] += kv * xp[iy as usize * wd + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub(crate) fn dwconv_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let k = w.dim(2);
    let (ho, wo) = (dy.dim(2), dy.dim(3));
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; c];
    for s in 0..n {
        for ch in 0..c {
            let base_x = (s * c + ch) * h * wd;
            let base_y = (s * c + ch) * ho * wo;
            let dyp = &dy.data()[base_y..base_y + ho * wo];
            db[ch] += dyp.iter().sum::<f32>();
            for ki in 0..k {
                for kj in 0..k {
                    let kv = w.data()[ch * k * k + ki * k + kj];
                    let mut acc = 0.0f32;
                    for oy in 0..ho {
                        let iy = (oy + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox + kj) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                let xi = base_x + iy as usize * wd + ix as usize;
                                let g = dyp[oy * wo + ox];
                                acc += g * x.data()[xi];
                                dx[xi] += g * kv;
                            }
                        }
                    }
                    dw[ch * k * k + ki * k + kj] += acc;
                }
            }
        }
    }
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(w.shape(), dw),
        Tensor::new(&[c], db),
    )
}

/// Max pooling; returns the output and the flat input index of each maximum.
pub(crate) fn maxpool_forward(x: &Tensor, k: usize, stride: usize, pad: usize) -> (Tensor, Vec<u32>) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let g = ConvGeom { c: 1, h, w, kh: k, kw: k, stride, pad };
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![0.0f32; n * c * ho * wo];
    let mut idx = vec![0u32; n * c * ho * wo];
    for p in 0..n * c {
        let base = p * h * w;
        let xp = &x.data()[base..base + h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if best_i == usize::MAX || xp[i] > best {
                            best = xp[i];
                            best_i = i;
                        }
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                out[o] = best;
                idx[o] = (base + best_i) as u32;
            }
        }
    }
    (Tensor::new(&[n, c, ho, wo], out), idx)
}

/// Nearest-neighbour 2× upsampling.
pub(crate) fn upsample2_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = vec![0.0f32; n * c * 4 * h * w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * 2 * w..(y + 1) * 2 * w];
            for (x2, d) in drow.iter_mut().enumerate() {
                *d = srow[x2 / 2];
            }
        }
    }
    Tensor::new(&[n, c, 2 * h, 2 * w], out)
}

pub(crate) fn upsample2_backward(dy: &Tensor, x_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let mut dx = vec![0.0f32; n * c * h * w];
    for p in 0..n * c {
        let src = &dy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for x2 in 0..2 * w {
                dst[(y / 2) * w + x2 / 2] += src[y * 2 * w + x2];
            }
        }
    }
    Tensor::new(x_shape, dx)
}

/// Zero-filled shift of channel groups along `axis` (2 = rows, 3 = columns).
/// Group `i` of `groups` is shifted by `i - groups / 2`.
pub(crate) fn shift_channels(x: &Tensor, axis: usize, groups: usize, reverse: bool) -> Tensor {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let per_group = c.div_ceil(groups);
    let mut out = vec![0.0f32; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let mut off = (ch / per_group) as isize - (groups / 2) as isize;
            if reverse {
                off = -off;
            }
            let base = (s * c + ch) * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let (sy, sx) = if axis == 2 {
                        (y as isize - off, xx as isize)
                    } else {
                        (y as isize, xx as isize - off)
                    };
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        out[base + y * w + xx] = x.data()[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}
