//! Convolution kernels on raw slices: im2col lowering onto a dense GEMM.
//!
//! All loops run in a fixed order, so results are bit-reproducible for a
//! given build.

/// Sliding-window geometry of one convolution, input side and output side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(channels: usize, in_h: usize, in_w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let out_h = (in_h + 2 * pad - k) / stride + 1;
        let out_w = (in_w + 2 * pad - k) / stride + 1;
        Window {
            channels,
            in_h,
            in_w,
            k,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    /// Rows of the lowered matrix: `channels * k * k`.
    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    /// Columns of the lowered matrix: one per output position.
    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Row-major `c = alpha * a * b + beta * c` with explicit operand strides.
/// `a` is `m x k` with strides `(rsa, csa)`, `b` is `k x n` with `(rsb, csb)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm lhs out of bounds");
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm rhs out of bounds");
    }
    // SAFETY: the asserts above bound every index the kernel touches for
    // the given dimensions and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower one `(channels, in_h, in_w)` image into a `rows x cols` matrix.
pub(crate) fn im2col(src: &[f64], win: &Window, col: &mut [f64]) {
    let cols = win.cols();
    let (k, s, p) = (win.k, win.stride, win.pad as isize);
    for c in 0..win.channels {
        let plane = &src[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..win.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    if iy < 0 || iy >= win.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &plane[iy as usize * win.in_w..(iy as usize + 1) * win.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= win.in_w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a lowered matrix back onto a `(channels, in_h, in_w)` image.
pub(crate) fn col2im(col: &[f64], win: &Window, dst: &mut [f64]) {
    let cols = win.cols();
    let (k, s, p) = (win.k, win.stride, win.pad as isize);
    for c in 0..win.channels {
        let plane = &mut dst[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..win.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= win.in_h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * win.in_w..(iy as usize + 1) * win.in_w];
                    for ox in 0..win.out_w {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < win.in_w as isize {
                            drow[ix as usize] += src[oy * win.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation for a batch.
/// `input` is `n x cin x h x w`, `weight` is `cout x cin x k x k`.
pub(crate) fn conv2d_forward(
    input: &[f64],
    n: usize,
    win: &Window,
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let cout = bias.len();
    let (rows, cols) = (win.rows(), win.cols());
    let in_item = win.channels * win.in_h * win.in_w;
    let mut col = if win.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * cols]
    };
    for b in 0..n {
        let src = &input[b * in_item..(b + 1) * in_item];
        let dst = &mut out[b * cout * cols..(b + 1) * cout * cols];
        for (o, &bv) in bias.iter().enumerate() {
            dst[o * cols..(o + 1) * cols].fill(bv);
        }
        let lowered: &[f64] = if win.is_pointwise() {
            src
        } else {
            im2col(src, win, &mut col);
            &col
        };
        gemm(cout, rows, cols, weight, (rows, 1), lowered, (cols, 1), 1.0, dst);
    }
}

/// Gradients of a batched conv2d. Accumulates into `d_weight` and `d_bias`;
/// writes `d_input` (if requested) from scratch.
pub(crate) fn conv2d_backward(
    input: &[f64],
    n: usize,
    win: &Window,
    weight: &[f64],
    d_out: &[f64],
    cout: usize,
    d_input: Option<&mut [f64]>,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) {
    let (rows, cols) = (win.rows(), win.cols());
    let in_item = win.channels * win.in_h * win.in_w;
    let mut col = vec![0.0; rows * cols];
    let mut d_input = d_input;
    if let Some(dx) = d_input.as_deref_mut() {
        dx.fill(0.0);
    }
    for b in 0..n {
        let dy = &d_out[b * cout * cols..(b + 1) * cout * cols];
        for (o, db) in d_bias.iter_mut().enumerate() {
            *db += dy[o * cols..(o + 1) * cols].iter().sum::<f64>();
        }
        let src = &input[b * in_item..(b + 1) * in_item];
        if win.is_pointwise() {
            col.copy_from_slice(src);
        } else {
            im2col(src, win, &mut col);
        }
        // dW (cout x rows) += dY (cout x cols) * col^T
        gemm(cout, cols, rows, dy, (cols, 1), &col, (1, cols), 1.0, d_weight);
        if let Some(dx) = d_input.as_deref_mut() {
            // dcol (rows x cols) = W^T * dY
            gemm(rows, cout, cols, weight, (1, rows), dy, (cols, 1), 0.0, &mut col);
            let dst = &mut dx[b * in_item..(b + 1) * in_item];
            if win.is_pointwise() {
                dst.copy_from_slice(&col);
            } else {
                col2im(&col, win, dst);
            }
        }
    }
}

/// Geometry of a stride-`s`, zero-padding transposed convolution, described
/// as the conv2d whose input gradient it computes: that conv reads the
/// `cout x out_h x out_w` output and produces the `h x w` input grid.
pub(crate) fn transposed_window(cout: usize, h: usize, w: usize, k: usize, stride: usize) -> Window {
    let out_h = (h - 1) * stride + k;
    let out_w = (w - 1) * stride + k;
    let win = Window::new(cout, out_h, out_w, k, stride, 0);
    debug_assert_eq!((win.out_h, win.out_w), (h, w));
    win
}

/// Forward transposed convolution for a batch.
/// `input` is `n x cin x h x w`, `weight` is `cin x cout x k x k`.
pub(crate) fn conv_transpose2d_forward(
    input: &[f64],
    n: usize,
    cin: usize,
    win: &Window,
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let (rows, cols) = (win.rows(), win.cols());
    let out_item = win.channels * win.in_h * win.in_w;
    let plane = win.in_h * win.in_w;
    let mut col = vec![0.0; rows * cols];
    for b in 0..n {
        let x = &input[b * cin * cols..(b + 1) * cin * cols];
        // col (rows x cols) = W^T (rows x cin) * X (cin x cols)
        gemm(rows, cin, cols, weight, (1, rows), x, (cols, 1), 0.0, &mut col);
        let dst = &mut out[b * out_item..(b + 1) * out_item];
        for (o, &bv) in bias.iter().enumerate() {
            dst[o * plane..(o + 1) * plane].fill(bv);
        }
        col2im(&col, win, dst);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward(
    input: &[f64],
    n: usize,
    cin: usize,
    win: &Window,
    weight: &[f64],
    d_out: &[f64],
    d_input: Option<&mut [f64]>,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) {
    let (rows, cols) = (win.rows(), win.cols());
    let out_item = win.channels * win.in_h * win.in_w;
    let plane = win.in_h * win.in_w;
    let mut col = vec![0.0; rows * cols];
    let mut d_input = d_input;
    for b in 0..n {
        let dy = &d_out[b * out_item..(b + 1) * out_item];
        for (o, db) in d_bias.iter_mut().enumerate() {
            *db += dy[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        im2col(dy, win, &mut col);
        let x = &input[b * cin * cols..(b + 1) * cin * cols];
        // dW (cin x rows) += X (cin x cols) * dcol^T
        gemm(cin, cols, rows, x, (cols, 1), &col, (1, cols), 1.0, d_weight);
        if let Some(dx) = d_input.as_deref_mut() {
            // dX (cin x cols) = W (cin x rows) * dcol
            let dst = &mut dx[b * cin * cols..(b + 1) * cin * cols];
            gemm(cin, rows, cols, weight, (rows, 1), &col, (cols, 1), 0.0, dst);
        }
    }
}
