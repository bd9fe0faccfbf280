//! Dense numeric kernels shared by the tape primitives and the metric feature extractors.

/// `c = op(a) · op(b) + beta · c` on row-major buffers.
///
/// `op(a)` is `m × k`; when `a_t` is set, `a` is stored as `k × m` and used transposed.
/// Likewise `op(b)` is `k × n`.
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
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
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
    // SAFETY: the strides above address exactly the m×k, k×n and m×n row-major buffers whose
    // lengths are checked by the debug assertions and guaranteed by every caller.
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

/// Geometry of a 2-D cross-correlation over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input coordinate touched by kernel tap `k` at output position `o`, if inside the image.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Unfold `img` (`C×H×W`) into `cols` (`C·kh·kw × out_h·out_w`).
    pub fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let plane = self.col_cols();
        for c in 0..self.channels {
            let chan = &img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match Self::source(oy, ki, self.stride, self.pad, self.height) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                let src = &chan[iy * self.width..(iy + 1) * self.width];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = Self::source(ox, kj, self.stride, self.pad, self.width)
                                        .map_or(0.0, |ix| src[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add `cols` back into `img`.
    pub fn col2im_add(&self, cols: &[f64], img: &mut [f64]) {
        let plane = self.col_cols();
        for c in 0..self.channels {
            let chan = &mut img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let Some(iy) = Self::source(oy, ki, self.stride, self.pad, self.height)
                        else {
                            continue;
                        };
                        let dst = &mut chan[iy * self.width..(iy + 1) * self.width];
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, &v) in line.iter().enumerate() {
                            if let Some(ix) =
                                Self::source(ox, kj, self.stride, self.pad, self.width)
                            {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
