// Numeric kernels shared by forward and backward rules.

/// Strided read-only view of a row-major matrix.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    pub fn t_if(self, transpose: bool) -> Self {
        if transpose {
            self.t()
        } else {
            self
        }
    }
}

/// `c = a * b + beta * c` where `c` is a dense row-major `a.rows x b.cols` block.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views were constructed from slices covering every element
    // addressed by (rows, cols, strides), and `c` holds m * n contiguous values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output spatial size of a `k x k` convolution with "same" padding `(k-1)/2`.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(n: usize, h: usize, w: usize, c: usize, k: usize, stride: usize) -> Self {
        ConvGeom {
            n,
            h,
            w,
            c,
            k,
            stride,
            ho: conv_out_dim(h, k, stride),
            wo: conv_out_dim(w, k, stride),
        }
    }

    fn pad(&self) -> isize {
        ((self.k - 1) / 2) as isize
    }

    /// Input coordinate for output `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride) as isize + t as isize - self.pad();
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }
}

/// Depthwise convolution; `w` has layout `(k, k, C)`.
pub fn depthwise_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let c = g.c;
    let mut out = vec![0.0; g.n * g.ho * g.wo * c];
    for n in 0..g.n {
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let o_base = ((n * g.ho + oh) * g.wo + ow) * c;
                let o = &mut out[o_base..o_base + c];
                for kh in 0..g.k {
                    let Some(ih) = g.src(oh, kh, g.h) else {
                        continue;
                    };
                    for kw in 0..g.k {
                        let Some(iw) = g.src(ow, kw, g.w) else {
                            continue;
                        };
                        let x_base = ((n * g.h + ih) * g.w + iw) * c;
                        let w_base = (kh * g.k + kw) * c;
                        let xs = &x[x_base..x_base + c];
                        let ws = &w[w_base..w_base + c];
                        for ch in 0..c {
                            o[ch] += xs[ch] * ws[ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`depthwise_forward`] with respect to input and kernel.
pub fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let c = g.c;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    for n in 0..g.n {
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let o_base = ((n * g.ho + oh) * g.wo + ow) * c;
                let go = &grad_out[o_base..o_base + c];
                for kh in 0..g.k {
                    let Some(ih) = g.src(oh, kh, g.h) else {
                        continue;
                    };
                    for kw in 0..g.k {
                        let Some(iw) = g.src(ow, kw, g.w) else {
                            continue;
                        };
                        let x_base = ((n * g.h + ih) * g.w + iw) * c;
                        let w_base = (kh * g.k + kw) * c;
                        if let Some(dx) = dx.as_mut() {
                            let ws = &w[w_base..w_base + c];
                            let d = &mut dx[x_base..x_base + c];
                            for ch in 0..c {
                                d[ch] += go[ch] * ws[ch];
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            let xs = &x[x_base..x_base + c];
                            let d = &mut dw[w_base..w_base + c];
                            for ch in 0..c {
                                d[ch] += go[ch] * xs[ch];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Unfolds `(N, H, W, C)` into rows of `(N*Ho*Wo, k*k*C)` patches.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let c = g.c;
    let row_len = g.k * g.k * c;
    let mut cols = vec![0.0; g.n * g.ho * g.wo * row_len];
    for n in 0..g.n {
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let r_base = ((n * g.ho + oh) * g.wo + ow) * row_len;
                for kh in 0..g.k {
                    let Some(ih) = g.src(oh, kh, g.h) else {
                        continue;
                    };
                    for kw in 0..g.k {
                        let Some(iw) = g.src(ow, kw, g.w) else {
                            continue;
                        };
                        let x_base = ((n * g.h + ih) * g.w + iw) * c;
                        let dst = r_base + (kh * g.k + kw) * c;
                        cols[dst..dst + c].copy_from_slice(&x[x_base..x_base + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let c = g.c;
    let row_len = g.k * g.k * c;
    let mut x = vec![0.0; g.n * g.h * g.w * c];
    for n in 0..g.n {
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let r_base = ((n * g.ho + oh) * g.wo + ow) * row_len;
                for kh in 0..g.k {
                    let Some(ih) = g.src(oh, kh, g.h) else {
                        continue;
                    };
                    for kw in 0..g.k {
                        let Some(iw) = g.src(ow, kw, g.w) else {
                            continue;
                        };
                        let x_base = ((n * g.h + ih) * g.w + iw) * c;
                        let src = r_base + (kh * g.k + kw) * c;
                        for ch in 0..c {
                            x[x_base + ch] += cols[src + ch];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposed_views() {
        // a = [[1,2,3],[4,5,6]] ; a^T a = [[17,22,27],[22,29,36],[27,36,45]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let av = MatRef::new(&a, 2, 3);
        let mut c = vec![0.0; 9];
        gemm(av.t(), av, 0.0, &mut c);
        assert_eq!(
            c,
            vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]
        );
        let mut d = vec![1.0; 4];
        gemm(av, av.t(), 1.0, &mut d);
        assert_eq!(d, vec![15.0, 33.0, 33.0, 78.0]);
    }

    #[test]
    fn conv_out_dims() {
        assert_eq!(conv_out_dim(4, 3, 1), 4);
        assert_eq!(conv_out_dim(5, 3, 2), 3);
        assert_eq!(conv_out_dim(28, 3, 2), 14);
        assert_eq!(conv_out_dim(7, 1, 1), 7);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(1, 5, 4, 2, 3, 2);
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
