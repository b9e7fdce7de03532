//! Raw numeric kernels over flat row-major buffers.

/// Row-major matrix view description used by [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    /// Interpret the stored row-major `cols x rows` buffer as its transpose.
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// View of the transpose of a stored `rows x cols` matrix.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows: cols,
            cols: rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    assert_eq!(a.data.len(), m * k);
    assert_eq!(b.data.len(), k * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every index the kernel touches,
    // (i*rs + j*cs) for i < rows and j < cols, lies inside the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

impl ConvGeometry {
    /// Output columns `lo..hi` whose input column `ox * stride + kj - padding`
    /// falls inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kj).div_ceil(self.stride);
        let hi = (self.w + self.padding).saturating_sub(kj).div_ceil(self.stride).min(self.out_w);
        (lo.min(hi), hi)
    }

    fn input_row(&self, oy: usize, ki: usize) -> Option<usize> {
        (oy * self.stride + ki).checked_sub(self.padding).filter(|&iy| iy < self.h)
    }
}

/// Unfolds one `c_in x h x w` image into a `patch_len x out_len` matrix.
pub(crate) fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let p_len = g.out_len();
    for ci in 0..g.c_in {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p_len..(row + 1) * p_len];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.out_h {
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let Some(iy) = g.input_row(oy, ki) else {
                        out_row.fill(0.0);
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, x) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = *x;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back into an image,
/// accumulating overlapping contributions.
pub(crate) fn col2im_add(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let p_len = g.out_len();
    for ci in 0..g.c_in {
        let plane = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p_len..(row + 1) * p_len];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.out_h {
                    let Some(iy) = g.input_row(oy, ki) else { continue };
                    if lo == hi {
                        continue;
                    }
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let first = lo * g.stride + kj - g.padding;
                    let s = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling over `planes` planes of `h x w`.
/// Returns pooled values and the flat input index of each maximum
/// (first occurrence wins on ties).
pub(crate) fn max_pool(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * size * w + ox * size;
                for dy in 0..size {
                    let row = base + (oy * size + dy) * w + ox * size;
                    for dx in 0..size {
                        let v = input[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}
