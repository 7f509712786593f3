//! im2col convolution kernels. The matrix products go through
//! `matrixmultiply`, which is single-threaded here and therefore
//! bit-reproducible.

use std::cell::RefCell;

use super::Tensor;
use crate::error::{Error, Result};

thread_local! {
    // im2col buffers reused across calls; every use overwrites the prefix it reads
    static SCRATCH: RefCell<[Vec<f64>; 2]> = const { RefCell::new([Vec::new(), Vec::new()]) };
}

fn with_scratch<T>(n: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> T) -> T {
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        let [a, b] = &mut *s;
        for v in [&mut *a, &mut *b] {
            if v.len() < n {
                v.resize(n, 0.0);
            }
        }
        f(&mut a[..n], &mut b[..n])
    })
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, k: &Tensor, b: &Tensor, pad: usize, stride: usize) -> Result<Self> {
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects rank-4 input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        if xs[1] != ks[1] {
            return Err(Error::shape(format!(
                "conv2d input has {} channels, kernel expects {}",
                xs[1], ks[1]
            )));
        }
        if b.len() != ks[0] {
            return Err(Error::shape(format!(
                "conv2d bias has {} entries for {} output channels",
                b.len(),
                ks[0]
            )));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel {ks:?} must be odd-sized"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (h, w) = (xs[2], xs[3]);
        if h + 2 * pad < ks[2] || w + 2 * pad < ks[3] {
            return Err(Error::shape(format!(
                "conv2d kernel {ks:?} larger than padded input {xs:?}"
            )));
        }
        Ok(ConvGeom {
            n: xs[0],
            cin: xs[1],
            h,
            w,
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            pad,
            stride,
            ho: (h + 2 * pad - ks[2]) / stride + 1,
            wo: (w + 2 * pad - ks[3]) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }
}

/// Output columns `oj` whose input column `oj * stride + kj - pad` is
/// inside the image.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo < hi {
                        let j0 = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[j0..j0 + hi - lo]);
                        } else {
                            for (t, d) in line[lo..hi].iter_mut().enumerate() {
                                *d = src[j0 + t * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let j0 = lo * g.stride + kj - g.pad;
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ii as usize) * g.w..][..g.w];
                    let s = &src[oi * g.wo + lo..oi * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[j0..j0 + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (t, &v) in s.iter().enumerate() {
                            dst[j0 + t * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = beta*c + op(a) * op(b)` on row-major buffers, where `op` optionally
/// transposes. `a` is `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
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
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the buffers are at least as long as the strided extents above.
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

pub(crate) fn forward(g: &ConvGeom, x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![0.0; g.n * g.cout * cols];
    let in_sz = g.cin * g.h * g.w;
    with_scratch(rows * cols, |col, _| {
        for n in 0..g.n {
            im2col(&x.data()[n * in_sz..(n + 1) * in_sz], g, col);
            let o = &mut out[n * g.cout * cols..(n + 1) * g.cout * cols];
            for (co, line) in o.chunks_mut(cols).enumerate() {
                line.fill(b.data()[co]);
            }
            gemm(g.cout, rows, cols, k.data(), false, col, false, 1.0, o);
        }
    });
    Tensor::new(&g.out_shape(), out).expect("conv output shape")
}

pub(crate) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dk: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub(crate) fn backward(
    g: &ConvGeom,
    x: &Tensor,
    k: &Tensor,
    gout: &Tensor,
    need: [bool; 3],
) -> ConvGrads {
    let (rows, cols) = (g.rows(), g.cols());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * cols;
    let mut dx = need[0].then(|| vec![0.0; g.n * in_sz]);
    let mut dk = need[1].then(|| vec![0.0; k.len()]);
    let mut db = need[2].then(|| vec![0.0; g.cout]);
    with_scratch(rows * cols, |col, dcol| {
        for n in 0..g.n {
            let go = &gout.data()[n * out_sz..(n + 1) * out_sz];
            if let Some(dk) = dk.as_mut() {
                im2col(&x.data()[n * in_sz..(n + 1) * in_sz], g, col);
                gemm(g.cout, cols, rows, go, false, col, true, 1.0, dk);
            }
            if let Some(db) = db.as_mut() {
                for (co, line) in go.chunks(cols).enumerate() {
                    db[co] += line.iter().sum::<f64>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm(rows, g.cout, cols, k.data(), true, go, false, 0.0, dcol);
                col2im(dcol, g, &mut dx[n * in_sz..(n + 1) * in_sz]);
            }
        }
    });
    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d).expect("dx shape")),
        dk: dk.map(|d| Tensor::new(k.shape(), d).expect("dk shape")),
        db: db.map(|d| Tensor::new(&[g.cout], d).expect("db shape")),
    }
}
