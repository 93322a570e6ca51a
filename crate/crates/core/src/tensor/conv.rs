//! 2-D cross-correlation, its transpose, and its weight gradient.
//!
//! All three share one geometry: output position `i` reads input position
//! `i * stride - padding + a` for kernel offset `a`, zero outside the input.
//! The transposed convolution is exactly the input-gradient of the forward
//! one, which keeps the family closed under differentiation.

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::Tensor;

/// Kernel geometry. `Conv-xyz` is `{kernel: x, stride: y, padding: z}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

/// The candidate pool shared by every searchable cell: 421, 622, 823.
pub const CANDIDATE_SPECS: [(usize, usize, usize); 3] = [(4, 2, 1), (6, 2, 2), (8, 2, 3)];

impl ConvSpec {
    pub const fn conv(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            transposed: false,
        }
    }

    pub const fn up(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            transposed: true,
        }
    }

    /// Output extent along one spatial axis.
    pub fn output_extent(&self, n: usize) -> Result<usize> {
        let err = || Error::EmptyConvOutput {
            input: n,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        };
        if self.kernel == 0 || self.stride == 0 || n == 0 {
            return Err(err());
        }
        if self.transposed {
            let grown = (n - 1) * self.stride + self.kernel;
            if grown <= 2 * self.padding {
                return Err(err());
            }
            Ok(grown - 2 * self.padding)
        } else {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return Err(err());
            }
            Ok((padded - self.kernel) / self.stride + 1)
        }
    }
}

impl std::fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = if self.transposed { "UpConv" } else { "Conv" };
        write!(f, "{name}-{}{}{}", self.kernel, self.stride, self.padding)
    }
}

fn forward_extent(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    ConvSpec::conv(k, s, p).output_extent(n)
}

/// Geometry bundle of one correlation: big side (h, w), small side (oh, ow).
#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl Geom {
    fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Output indices `lo..hi` whose tap at kernel offset `a` lands inside
    /// an input extent `n`.
    #[inline]
    fn valid_range(&self, a: usize, n: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.s, self.p);
        let lo = if p > a { (p - a).div_ceil(s) } else { 0 };
        let hi = (n + p).saturating_sub(a).div_ceil(s).min(out);
        (lo, hi.max(lo))
    }

    /// Calls `f(column row offset, input row offset, j range, x of first j)`
    /// for every in-bounds row segment of every tap.
    #[inline]
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let ncols = self.cols_len();
        for c in 0..self.c {
            for a in 0..self.k {
                let (i_lo, i_hi) = self.valid_range(a, self.h, self.oh);
                for b in 0..self.k {
                    let (j_lo, j_hi) = self.valid_range(b, self.w, self.ow);
                    if j_lo == j_hi {
                        continue;
                    }
                    let row = ((c * self.k) + a) * self.k + b;
                    let x0 = j_lo * self.s + b - self.p;
                    for i in i_lo..i_hi {
                        let y = i * self.s + a - self.p;
                        f(row * ncols + i * self.ow, (c * self.h + y) * self.w, j_lo, j_hi, x0);
                    }
                }
            }
        }
    }
}

/// Fills the in-bounds entries of `cols`; padded entries keep whatever the
/// buffer held, so callers zero it once and reuse it across samples.
fn im2col<T: Real>(g: &Geom, sample: &[T], cols: &mut [T]) {
    let s = g.s;
    g.for_each_segment(|dst, src, j_lo, j_hi, x0| {
        let out = &mut cols[dst + j_lo..dst + j_hi];
        if s == 1 {
            out.copy_from_slice(&sample[src + x0..src + x0 + out.len()]);
        } else {
            for (o, v) in out.iter_mut().zip(sample[src + x0..].iter().step_by(s)) {
                *o = *v;
            }
        }
    });
}

fn col2im<T: Real>(g: &Geom, cols: &[T], sample: &mut [T]) {
    let s = g.s;
    g.for_each_segment(|dst, src, j_lo, j_hi, x0| {
        let inp = &cols[dst + j_lo..dst + j_hi];
        for (o, v) in sample[src + x0..].iter_mut().step_by(s).zip(inp) {
            *o += *v;
        }
    });
}

fn dims4<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    t.expect_rank(4, op)?;
    let s = t.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

fn square_kernel<T: Real>(w: &Tensor<T>, op: &'static str) -> Result<[usize; 3]> {
    let [o, c, k, k2] = dims4(w, op)?;
    if k != k2 {
        return Err(Error::InvalidShape {
            op,
            msg: format!("non-square kernel {:?}", w.shape()),
        });
    }
    Ok([o, c, k])
}

/// `y[n,o,i,j] = Σ x[n,c,i·s−p+a, j·s−p+b] · w[o,c,a,b]`.
pub(crate) fn correlate<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let [n, c, h, wd] = dims4(x, "conv2d")?;
    let [o, wc, k] = square_kernel(w, "conv2d")?;
    if wc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d channels",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let oh = forward_extent(h, k, stride, padding)?;
    let ow = forward_extent(wd, k, stride, padding)?;
    let g = Geom { c, h, w: wd, oh, ow, k, s: stride, p: padding };
    let (rows, ncols) = (g.cols_rows(), g.cols_len());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); n * o * ncols];
    let in_len = c * h * wd;
    for b in 0..n {
        im2col(&g, &x.data()[b * in_len..(b + 1) * in_len], &mut cols);
        let dst = &mut out[b * o * ncols..(b + 1) * o * ncols];
        T::gemm(o, rows, ncols, w.data(), (rows as isize, 1), &cols, (ncols as isize, 1), T::zero(), dst, (ncols as isize, 1));
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

/// Adjoint of [`correlate`] with respect to its input: scatters `gy` back to
/// a `(h, w)` plane. This is the transposed convolution.
pub(crate) fn correlate_input_grad<T: Real>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    (h, wd): (usize, usize),
) -> Result<Tensor<T>> {
    let [n, go, oh, ow] = dims4(gy, "conv_transpose2d")?;
    let [o, c, k] = square_kernel(w, "conv_transpose2d")?;
    if go != o {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d channels",
            lhs: gy.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if forward_extent(h, k, stride, padding)? != oh || forward_extent(wd, k, stride, padding)? != ow {
        return Err(Error::InvalidShape {
            op: "conv_transpose2d",
            msg: format!("target {h}x{wd} inconsistent with {oh}x{ow} (k={k}, s={stride}, p={padding})"),
        });
    }
    let g = Geom { c, h, w: wd, oh, ow, k, s: stride, p: padding };
    let (rows, ncols) = (g.cols_rows(), g.cols_len());
    let mut cols = vec![T::zero(); rows * ncols];
    let in_len = c * h * wd;
    let mut out = vec![T::zero(); n * in_len];
    for b in 0..n {
        let src = &gy.data()[b * o * ncols..(b + 1) * o * ncols];
        // cols = wᵀ · gy_b, with w viewed as (o × rows)
        T::gemm(rows, o, ncols, w.data(), (1, rows as isize), src, (ncols as isize, 1), T::zero(), &mut cols, (ncols as isize, 1));
        col2im(&g, &cols, &mut out[b * in_len..(b + 1) * in_len]);
    }
    Tensor::new(vec![n, c, h, wd], out)
}

/// Adjoint of [`correlate`] with respect to its weight.
pub(crate) fn correlate_weight_grad<T: Real>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    padding: usize,
    k: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, wd] = dims4(x, "conv_weight_grad")?;
    let [gn, o, oh, ow] = dims4(gy, "conv_weight_grad")?;
    if gn != n || forward_extent(h, k, stride, padding)? != oh || forward_extent(wd, k, stride, padding)? != ow {
        return Err(Error::ShapeMismatch {
            op: "conv_weight_grad",
            lhs: x.shape().to_vec(),
            rhs: gy.shape().to_vec(),
        });
    }
    let g = Geom { c, h, w: wd, oh, ow, k, s: stride, p: padding };
    let (rows, ncols) = (g.cols_rows(), g.cols_len());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); o * rows];
    let in_len = c * h * wd;
    for b in 0..n {
        im2col(&g, &x.data()[b * in_len..(b + 1) * in_len], &mut cols);
        let src = &gy.data()[b * o * ncols..(b + 1) * o * ncols];
        // out += gy_b · colsᵀ
        T::gemm(o, ncols, rows, src, (ncols as isize, 1), &cols, (1, ncols as isize), T::one(), &mut out, (rows as isize, 1));
    }
    Tensor::new(vec![o, c, k, k], out)
}

/// Convolution (or transposed convolution) with zero padding and optional
/// per-output-channel bias.
///
/// Weight layout is `[out, in, k, k]` for the forward case and
/// `[in, out, k, k]` for the transposed case, so a transposed convolution
/// shares its weight tensor with the forward convolution it inverts.
pub fn conv2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: ConvSpec) -> Result<Tensor<T>> {
    let [_, c, h, w] = dims4(input, "conv2d")?;
    let [wo, wi, k] = square_kernel(weight, "conv2d")?;
    if k != spec.kernel {
        return Err(Error::InvalidShape {
            op: "conv2d",
            msg: format!("kernel extent {k} disagrees with {spec}"),
        });
    }
    let out = if spec.transposed {
        if wo != c {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d channels",
                lhs: input.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let target = (spec.output_extent(h)?, spec.output_extent(w)?);
        correlate_input_grad(input, weight, spec.stride, spec.padding, target)?
    } else {
        if wi != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                lhs: input.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        correlate(input, weight, spec.stride, spec.padding)?
    };
    match bias {
        None => Ok(out),
        Some(b) => out.add(&b.channel_broadcast(out.shape())?),
    }
}
