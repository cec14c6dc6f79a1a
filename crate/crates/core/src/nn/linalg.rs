//! Dense kernels behind the convolution layers: row-major GEMM and the
//! 3x3 im2col / col2im pair with one pixel of zero padding.

/// `c = a * b + beta * c` for row-major operands. `a_t` / `b_t` mean the
/// operand is stored transposed (`a` as k x m, `b` as n x k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above pin every slice to the extent implied by
    // (m, k, n) and the strides, so all indexed elements are in bounds.
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

/// `c = a * b + beta * c` in single precision, row-major, no transposes.
pub(crate) fn sgemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 3x3 convolution over a batch laid out as
/// `[channel][example][row][col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_side: usize,
    pub out_side: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn patch_len(&self) -> usize {
        self.in_channels * 9
    }

    pub fn in_area(&self) -> usize {
        self.in_side * self.in_side
    }

    pub fn out_area(&self) -> usize {
        self.out_side * self.out_side
    }

    /// Unfold `x` (`in_channels x batch*in_area`) into
    /// `cols` (`in_channels*9 x batch*out_area`).
    /// Output positions `o` along one axis whose input `o*stride + k - 1`
    /// falls inside the image.
    fn valid_range(&self, k: usize) -> std::ops::Range<usize> {
        let lo = usize::from(k == 0);
        let hi = ((self.in_side + 1 - k) + self.stride - 1) / self.stride;
        lo..hi.min(self.out_side)
    }

    pub fn im2col<T: Copy + Default>(&self, x: &[T], batch: usize, cols: &mut Vec<T>) {
        let (ia, oa) = (self.in_area(), self.out_area());
        let (is, os, s) = (self.in_side, self.out_side, self.stride);
        let width = batch * oa;
        cols.clear();
        cols.resize(self.patch_len() * width, T::default());
        for c in 0..self.in_channels {
            for ky in 0..3 {
                let rows = self.valid_range(ky);
                for kx in 0..3 {
                    let xs = self.valid_range(kx);
                    let row = (c * 9 + ky * 3 + kx) * width;
                    for b in 0..batch {
                        let src = &x[c * batch * ia + b * ia..][..ia];
                        let dst = &mut cols[row + b * oa..][..oa];
                        for oy in rows.clone() {
                            let src_row = &src[(oy * s + ky - 1) * is..][..is];
                            let dst_row = &mut dst[oy * os..][..os];
                            if s == 1 {
                                dst_row[xs.clone()]
                                    .copy_from_slice(&src_row[xs.start + kx - 1..xs.end + kx - 1]);
                            } else {
                                for ox in xs.clone() {
                                    dst_row[ox] = src_row[ox * s + kx - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn col2im(&self, cols: &[f64], batch: usize, dx: &mut Vec<f64>) {
        let (ia, oa) = (self.in_area(), self.out_area());
        let (is, os, s) = (self.in_side as isize, self.out_side, self.stride as isize);
        let width = batch * oa;
        dx.clear();
        dx.resize(self.in_channels * batch * ia, 0.0);
        for c in 0..self.in_channels {
            for ky in 0..3isize {
                for kx in 0..3isize {
                    let row = (c * 9 + (ky * 3 + kx) as usize) * width;
                    for b in 0..batch {
                        let src = &cols[row + b * oa..][..oa];
                        let dst = &mut dx[c * batch * ia + b * ia..][..ia];
                        for oy in 0..os {
                            let iy = oy as isize * s + ky - 1;
                            if iy < 0 || iy >= is {
                                continue;
                            }
                            for ox in 0..os {
                                let ix = ox as isize * s + kx - 1;
                                if ix >= 0 && ix < is {
                                    dst[(iy * is + ix) as usize] += src[oy * os + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
