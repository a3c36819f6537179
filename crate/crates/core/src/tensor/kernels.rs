//! Raw numeric kernels over row-major slices. No shape validation happens
//! here; callers in `graph` check shapes before dispatching.

/// Geometry of a 2-D convolution over NCHW input with OCkk kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.col_cols()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.col_rows()
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]`, with optional transposition of the
/// stored operands (`a` stored k×m when `ta`, `b` stored n×k when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the m×k, k×n and m×n extents addressed
    // through the row/column strides computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let ncols = oh * ow;
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (x, v) in line.iter_mut().enumerate() {
                        let ix = (x * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let ncols = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for x in 0..ow {
                        let ix = (x * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(g: &ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * ncols;
    let mut out = vec![0.0; g.output_len()];
    let mut cols = vec![0.0; rows * ncols];
    for n in 0..g.batch {
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
        gemm(
            g.out_channels,
            rows,
            ncols,
            weight,
            false,
            &cols,
            false,
            0.0,
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    out
}

/// Vector-Jacobian product of `conv2d` with respect to its input.
pub fn conv2d_grad_input(g: &ConvGeom, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * ncols;
    let mut grad_in = vec![0.0; g.input_len()];
    let mut cols = vec![0.0; rows * ncols];
    for n in 0..g.batch {
        gemm(
            rows,
            g.out_channels,
            ncols,
            weight,
            true,
            &grad_out[n * out_len..(n + 1) * out_len],
            false,
            0.0,
            &mut cols,
        );
        col2im_add(g, &cols, &mut grad_in[n * in_len..(n + 1) * in_len]);
    }
    grad_in
}

/// Vector-Jacobian product of `conv2d` with respect to its kernels.
pub fn conv2d_grad_weight(g: &ConvGeom, input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * ncols;
    let mut grad_w = vec![0.0; g.weight_len()];
    let mut cols = vec![0.0; rows * ncols];
    for n in 0..g.batch {
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
        gemm(
            g.out_channels,
            ncols,
            rows,
            &grad_out[n * out_len..(n + 1) * out_len],
            false,
            &cols,
            true,
            1.0,
            &mut grad_w,
        );
    }
    grad_w
}

pub fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Tiles `src[mid]` into an `outer × mid × inner` block.
pub fn expand(src: &[f64], outer: usize, inner: usize) -> Vec<f64> {
    let mid = src.len();
    let mut out = Vec::with_capacity(outer * mid * inner);
    for _ in 0..outer {
        for &v in src {
            out.extend(std::iter::repeat(v).take(inner));
        }
    }
    out
}

/// Sums an `outer × mid × inner` block over its outer and inner axes.
pub fn reduce_expand(src: &[f64], outer: usize, mid: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; mid];
    for o in 0..outer {
        for (m, acc) in out.iter_mut().enumerate() {
            let base = (o * mid + m) * inner;
            *acc += src[base..base + inner].iter().sum::<f64>();
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling over the trailing two axes.
pub fn upsample2(src: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                d[y * ow + x] = s[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// 2×2 sum pooling over the trailing two axes; adjoint of [`upsample2`].
pub fn sumpool2(src: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                d[(y / 2) * ow + x / 2] += s[y * w + x];
            }
        }
    }
    out
}

/// Forward difference along the last (`along_w`) or second-to-last axis.
/// The differenced axis shrinks by one.
pub fn diff(src: &[f64], planes: usize, h: usize, w: usize, along_w: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(src.len());
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        if along_w {
            for y in 0..h {
                for x in 0..w - 1 {
                    out.push(s[y * w + x + 1] - s[y * w + x]);
                }
            }
        } else {
            for y in 0..h - 1 {
                for x in 0..w {
                    out.push(s[(y + 1) * w + x] - s[y * w + x]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`diff`]; `h`, `w` are the extents of the undifferenced tensor.
pub fn diff_adjoint(src: &[f64], planes: usize, h: usize, w: usize, along_w: bool) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let d = &mut out[p * h * w..(p + 1) * h * w];
        if along_w {
            let sw = w - 1;
            let s = &src[p * h * sw..(p + 1) * h * sw];
            for y in 0..h {
                for x in 0..sw {
                    let v = s[y * sw + x];
                    d[y * w + x + 1] += v;
                    d[y * w + x] -= v;
                }
            }
        } else {
            let s = &src[p * (h - 1) * w..(p + 1) * (h - 1) * w];
            for y in 0..h - 1 {
                for x in 0..w {
                    let v = s[y * w + x];
                    d[(y + 1) * w + x] += v;
                    d[y * w + x] -= v;
                }
            }
        }
    }
    out
}

/// Row-wise log-softmax of an `rows × cols` matrix using the max shift.
pub fn log_softmax(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}
