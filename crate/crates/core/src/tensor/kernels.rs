//! Raw loops behind the graph ops: broadcasting index maps and the
//! patch-gather / scatter pair used by 3D convolution.

use super::Float;
use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output shape of a trailing-aligned broadcast.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(op, a, b)),
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// shape `src` broadcast up to it.
pub(crate) fn broadcast_index(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        let o = i + rank - src.len();
        eff[o] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let n: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    if n == 0 {
        return idx;
    }
    if rank == 0 {
        idx.push(0);
        return idx;
    }
    // Innermost axis is filled as a run; the odometer walks the rest.
    let (inner, step) = (out_shape[rank - 1], eff[rank - 1]);
    let outer = rank - 1;
    let mut counter = vec![0usize; outer];
    let mut cur = 0usize;
    for _ in 0..n / inner {
        idx.extend((0..inner).map(|j| cur + j * step));
        for d in (0..outer).rev() {
            counter[d] += 1;
            cur += eff[d];
            if counter[d] < out_shape[d] {
                break;
            }
            cur -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Reduce a gradient of broadcast shape back onto `src` by summation.
pub(crate) fn accumulate_broadcast<T: Float>(dst: &mut [T], grad: &[T], index: Option<&[usize]>, scale: Option<&[T]>) {
    match (index, scale) {
        (None, None) => dst.iter_mut().zip(grad).for_each(|(d, &g)| *d += g),
        (None, Some(s)) => dst
            .iter_mut()
            .zip(grad.iter().zip(s))
            .for_each(|(d, (&g, &s))| *d += g * s),
        (Some(ix), None) => ix.iter().zip(grad).for_each(|(&i, &g)| dst[i] += g),
        (Some(ix), Some(s)) => ix
            .iter()
            .zip(grad.iter().zip(s))
            .for_each(|(&i, (&g, &s))| dst[i] += g * s),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub out: [usize; 3],
}

impl ConvGeom {
    pub fn new(c: usize, dims: [usize; 3], kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Result<Self> {
        let mut out = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 {
                return Err(Error::Config("conv3d stride must be positive".into()));
            }
            let span = dims[a] + 2 * padding[a];
            if span < kernel[a] {
                return Err(Error::Config(format!(
                    "conv3d output dimension non-positive on axis {a}: input {} padding {} kernel {}",
                    dims[a], padding[a], kernel[a]
                )));
            }
            out[a] = (span - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            c,
            dims,
            kernel,
            stride,
            padding,
            out,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }

    pub fn positions(&self) -> usize {
        self.out.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.c * self.dims.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Walk every contiguous run of taps: `visit(dst, src, len)` covers the
    /// patch-matrix entries `dst..dst + len` and the input voxels
    /// `src, src + stride_w, ..`.
    #[inline]
    fn for_each_run(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let [f, h, w] = self.dims;
        let [kf, kh, kw] = self.kernel;
        let [sf, sh, sw] = self.stride;
        let [pf, ph, pw] = self.padding;
        let [of, oh, ow] = self.out;
        let p = self.positions();
        // Output index range whose tap `k` lands inside `0..n`.
        let valid = |k: usize, pad: usize, s: usize, n: usize, on: usize| {
            let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
            let hi = if n + pad > k { ((n + pad - k - 1) / s + 1).min(on) } else { 0 };
            (lo, hi.max(lo))
        };
        let mut row = 0;
        for ci in 0..self.c {
            let cbase = ci * f * h * w;
            for a in 0..kf {
                let (z_lo, z_hi) = valid(a, pf, sf, f, of);
                for b in 0..kh {
                    let (y_lo, y_hi) = valid(b, ph, sh, h, oh);
                    for e in 0..kw {
                        let (x_lo, x_hi) = valid(e, pw, sw, w, ow);
                        let rbase = row * p;
                        row += 1;
                        if x_lo >= x_hi {
                            continue;
                        }
                        let x0 = x_lo * sw + e - pw;
                        for zo in z_lo..z_hi {
                            let z = zo * sf + a - pf;
                            for yo in y_lo..y_hi {
                                let y = yo * sh + b - ph;
                                visit(
                                    rbase + (zo * oh + yo) * ow + x_lo,
                                    cbase + (z * h + y) * w + x0,
                                    x_hi - x_lo,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gather input patches into a `[patch_len × positions]` matrix.
    pub fn im2col<T: Float>(&self, input: &[T], cols: &mut Vec<T>) {
        cols.clear();
        if self.is_pointwise() {
            cols.extend_from_slice(input);
            return;
        }
        cols.resize(self.patch_len() * self.positions(), T::zero());
        let sw = self.stride[2];
        if sw == 1 {
            self.for_each_run(|dst, src, n| cols[dst..dst + n].copy_from_slice(&input[src..src + n]));
        } else {
            self.for_each_run(|dst, src, n| {
                for (d, s) in cols[dst..dst + n].iter_mut().zip(input[src..].iter().step_by(sw)) {
                    *d = *s;
                }
            });
        }
    }

    /// Scatter-add a `[patch_len × positions]` gradient back onto the input.
    pub fn col2im<T: Float>(&self, cols: &[T], grad_input: &mut [T]) {
        if self.is_pointwise() {
            grad_input.iter_mut().zip(cols).for_each(|(g, &c)| *g += c);
            return;
        }
        let sw = self.stride[2];
        if sw == 1 {
            self.for_each_run(|src, dst, n| {
                for (g, &c) in grad_input[dst..dst + n].iter_mut().zip(&cols[src..src + n]) {
                    *g += c;
                }
            });
        } else {
            self.for_each_run(|src, dst, n| {
                for (g, &c) in grad_input[dst..].iter_mut().step_by(sw).zip(&cols[src..src + n]) {
                    *g += c;
                }
            });
        }
    }
}
