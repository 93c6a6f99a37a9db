//! Raw slice kernels behind the differentiable layer ops.

/// `c (m×n) = op(a) · op(b)`, optionally accumulating into `c`.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n`
/// (or `n×k` when `trans_b`), all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the slices for the given dimensions and strides.
    unsafe {
        matrixmultiply::sgemm(
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

/// Geometry of a strided, unpadded sliding window over a `B×C×H×W` image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.height - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Unfolds `image` into a `(C·kh·kw) × (B·Ho·Wo)` matrix.
    pub fn im2col(&self, image: &[f32]) -> Vec<f32> {
        let (ho, wo) = (self.out_h(), self.out_w());
        let ncols = self.col_cols();
        let mut cols = vec![0.0f32; self.col_rows() * ncols];
        let plane = self.height * self.width;
        for ci in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for bi in 0..self.batch {
                        let src = &image[(bi * self.channels + ci) * plane..][..plane];
                        for oi in 0..ho {
                            let y = oi * self.stride + ki;
                            let line = &src[y * self.width..(y + 1) * self.width];
                            let out = &mut dst[(bi * ho + oi) * wo..][..wo];
                            for (oj, o) in out.iter_mut().enumerate() {
                                *o = line[oj * self.stride + kj];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Window::im2col`]: scatters-adds `cols` back into `image`.
    pub fn col2im_add(&self, cols: &[f32], image: &mut [f32]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let ncols = self.col_cols();
        let plane = self.height * self.width;
        for ci in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for bi in 0..self.batch {
                        let dst = &mut image[(bi * self.channels + ci) * plane..][..plane];
                        for oi in 0..ho {
                            let y = oi * self.stride + ki;
                            let line = &mut dst[y * self.width..(y + 1) * self.width];
                            let vals = &src[(bi * ho + oi) * wo..][..wo];
                            for (oj, v) in vals.iter().enumerate() {
                                line[oj * self.stride + kj] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `B×C×S` → `C×(B·S)`.
pub(crate) fn batch_major_to_channel_major(x: &[f32], b: usize, c: usize, s: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(ci * b + bi) * s..][..s].copy_from_slice(&x[(bi * c + ci) * s..][..s]);
        }
    }
    out
}

/// `C×(B·S)` → `B×C×S`.
pub(crate) fn channel_major_to_batch_major(x: &[f32], b: usize, c: usize, s: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * s..][..s].copy_from_slice(&x[(ci * b + bi) * s..][..s]);
        }
    }
    out
}
