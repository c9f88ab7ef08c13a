//! Raw slice kernels behind the graph ops. Layouts are channel-major
//! (`C x H x W`) per batch item.

use crate::scalar::Scalar;

/// Kernel shape, stride, zero padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Square kernel with "same" padding at stride one.
    pub fn same(k: usize, dilation: usize) -> Self {
        let pad = dilation * (k - 1) / 2;
        Self { kh: k, kw: k, stride: 1, pad_h: pad, pad_w: pad, dilation }
    }

    /// Square kernel with "same"-style padding and the given stride.
    pub fn strided(k: usize, stride: usize) -> Self {
        Self { kh: k, kw: k, stride, pad_h: (k - 1) / 2, pad_w: (k - 1) / 2, dilation: 1 }
    }

    /// Rectangular `kh x kw` kernel, stride one, padded to keep the size.
    pub fn rect(kh: usize, kw: usize) -> Self {
        Self { kh, kw, stride: 1, pad_h: (kh - 1) / 2, pad_w: (kw - 1) / 2, dilation: 1 }
    }

    pub fn pointwise() -> Self {
        Self::same(1, 1)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    pub fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let eh = self.dilation * (self.kh - 1) + 1;
        let ew = self.dilation * (self.kw - 1) + 1;
        if h + 2 * self.pad_h < eh || w + 2 * self.pad_w < ew {
            return None;
        }
        Some((
            (h + 2 * self.pad_h - eh) / self.stride + 1,
            (w + 2 * self.pad_w - ew) / self.stride + 1,
        ))
    }
}

#[inline]
fn src_index(o: usize, k: usize, g: &ConvGeom, pad: usize, limit: usize) -> Option<usize> {
    let pos = (o * g.stride + k * g.dilation) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
}

/// Unfold `x` (`c x h x w`) into `cols` (`c*kh*kw x oh*ow`).
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = g.out_size(h, w).expect("valid geometry");
    let plane = oh * ow;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    match src_index(oy, ki, g, g.pad_h, h) {
                        None => d.fill(T::zero()),
                        Some(iy) => {
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = match src_index(ox, kj, g, g.pad_w, w) {
                                    Some(ix) => xc[iy * w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `cols` back into `dx`.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = g.out_size(h, w).expect("valid geometry");
    let plane = oh * ow;
    for ci in 0..c {
        let xc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let Some(iy) = src_index(oy, ki, g, g.pad_h, h) else { continue };
                    for ox in 0..ow {
                        if let Some(ix) = src_index(ox, kj, g, g.pad_w, w) {
                            xc[iy * w + ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Interpolation taps for one axis of a bilinear resize (half-pixel centers).
#[derive(Clone, Debug)]
pub struct Taps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub fn bilinear_taps(input: usize, output: usize) -> Taps {
    let scale = input as f64 / output as f64;
    let mut taps = Taps { lo: vec![], hi: vec![], frac: vec![] };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(src - lo as f64);
    }
    taps
}

/// Bilinear resize of `planes` stacked `h x w` planes.
pub fn bilinear_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    out: &mut [T],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let ly = T::of(ty.frac[oy]);
            let r0 = &src[ty.lo[oy] * w..][..w];
            let r1 = &src[ty.hi[oy] * w..][..w];
            for ox in 0..ow {
                let lx = T::of(tx.frac[ox]);
                let (a, b) = (tx.lo[ox], tx.hi[ox]);
                let top = r0[a] + lx * (r0[b] - r0[a]);
                let bot = r1[a] + lx * (r1[b] - r1[a]);
                dst[oy * ow + ox] = top + ly * (bot - top);
            }
        }
    }
}

pub fn bilinear_backward<T: Scalar>(
    g: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [T],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let one = T::one();
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let ly = T::of(ty.frac[oy]);
            for ox in 0..ow {
                let lx = T::of(tx.frac[ox]);
                let v = src[oy * ow + ox];
                let (a, b) = (tx.lo[ox], tx.hi[ox]);
                let top = v * (one - ly);
                let bot = v * ly;
                dst[ty.lo[oy] * w + a] += top * (one - lx);
                dst[ty.lo[oy] * w + b] += top * lx;
                dst[ty.hi[oy] * w + a] += bot * (one - lx);
                dst[ty.hi[oy] * w + b] += bot * lx;
            }
        }
    }
}

/// Nearest-neighbour source index (half-pixel centers) for resizing
/// `input` samples to `output`.
pub fn nearest_index(o: usize, input: usize, output: usize) -> usize {
    ((2 * o + 1) * input / (2 * output)).min(input - 1)
}

pub fn nearest_resize<V: Copy>(x: &[V], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<V> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let iy = nearest_index(oy, h, oh);
        for ox in 0..ow {
            out.push(x[iy * w + nearest_index(ox, w, ow)]);
        }
    }
    out
}
