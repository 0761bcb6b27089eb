//! Convolution kernels: spatial 2D convolution via im2col + GEMM, and the
//! per-pixel temporal convolution used to build factorised (2+1)D blocks.

use crate::scalar::{gemm, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds `x` (`[batch, in_ch, h, w]`) into `[patch, batch * out_pixels]`.
pub fn im2col<F: Scalar>(x: &[F], g: &Conv2dGeom) -> Vec<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let cols_n = g.batch * p;
    let mut cols = vec![F::zero(); g.patch() * cols_n];
    for ci in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for img in 0..g.batch {
                    let src = &x[(img * g.in_ch + ci) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut dst_row[img * p..(img + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        let dst_line = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx`.
pub fn col2im<F: Scalar>(cols: &[F], g: &Conv2dGeom, dx: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let cols_n = g.batch * p;
    for ci in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for img in 0..g.batch {
                    let dst = &mut dx[(img * g.in_ch + ci) * g.height * g.width..][..g.height * g.width];
                    let src = &src_row[img * p..(img + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_line = &mut dst[iy as usize * g.width..][..g.width];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_line[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output `[batch, out_ch, oh, ow]` and the unfolded input.
pub fn conv2d_forward<F: Scalar>(x: &[F], weight: &[F], bias: Option<&[F]>, g: &Conv2dGeom) -> (Vec<F>, Vec<F>) {
    let cols = im2col(x, g);
    let p = g.out_pixels();
    let cols_n = g.batch * p;
    let mut y = vec![F::zero(); g.out_ch * cols_n];
    gemm(false, false, g.out_ch, cols_n, g.patch(), weight, &cols, &mut y, false);
    let mut out = vec![F::zero(); g.batch * g.out_ch * p];
    for oc in 0..g.out_ch {
        let b = bias.map_or(F::zero(), |b| b[oc]);
        for img in 0..g.batch {
            let src = &y[oc * cols_n + img * p..][..p];
            let dst = &mut out[(img * g.out_ch + oc) * p..][..p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    (out, cols)
}

/// Gradients of the 2D convolution. Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward<F: Scalar>(
    dout: &[F],
    weight: &[F],
    cols: &[F],
    g: &Conv2dGeom,
    need_dx: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let p = g.out_pixels();
    let cols_n = g.batch * p;
    let mut dy = vec![F::zero(); g.out_ch * cols_n];
    let mut db = vec![F::zero(); g.out_ch];
    for img in 0..g.batch {
        for oc in 0..g.out_ch {
            let src = &dout[(img * g.out_ch + oc) * p..][..p];
            dy[oc * cols_n + img * p..][..p].copy_from_slice(src);
            db[oc] += src.iter().copied().sum::<F>();
        }
    }
    let mut dw = vec![F::zero(); g.out_ch * g.patch()];
    gemm(false, true, g.out_ch, g.patch(), cols_n, &dy, cols, &mut dw, false);
    let dx = need_dx.then(|| {
        let mut dcols = vec![F::zero(); g.patch() * cols_n];
        gemm(true, false, g.patch(), cols_n, g.out_ch, weight, &dy, &mut dcols, false);
        let mut dx = vec![F::zero(); g.batch * g.in_ch * g.height * g.width];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}

/// Shape of a temporal convolution over `seqs` sequences of `seq_len` frames,
/// each frame holding `in_ch x pixels` features. Weights are `[kt, out, in]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalGeom {
    pub seq_len: usize,
    pub valid_len: Vec<usize>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub pixels: usize,
    pub kt: usize,
    pub causal: bool,
}

impl TemporalGeom {
    pub fn seqs(&self) -> usize {
        self.valid_len.len()
    }

    /// Offset subtracted from the tap index to get the source frame.
    pub fn lag(&self) -> usize {
        if self.causal {
            self.kt - 1
        } else {
            (self.kt - 1) / 2
        }
    }

    fn source(&self, t: usize, tap: usize, len: usize) -> Option<usize> {
        let src = t as isize + tap as isize - self.lag() as isize;
        (src >= 0 && (src as usize) < len).then_some(src as usize)
    }
}

/// `y[s, t] = bias + sum_d W_d x[s, t + d - lag]`, zero-padded at sequence
/// boundaries. Frames beyond a sequence's valid length produce zeros.
pub fn temporal_forward<F: Scalar>(x: &[F], weight: &[F], bias: Option<&[F]>, g: &TemporalGeom) -> Vec<F> {
    let in_sz = g.in_ch * g.pixels;
    let out_sz = g.out_ch * g.pixels;
    let w_sz = g.out_ch * g.in_ch;
    let mut y = vec![F::zero(); g.seqs() * g.seq_len * out_sz];
    for (s, &len) in g.valid_len.iter().enumerate() {
        for t in 0..len {
            let frame = s * g.seq_len + t;
            let dst = &mut y[frame * out_sz..(frame + 1) * out_sz];
            if let Some(b) = bias {
                for oc in 0..g.out_ch {
                    dst[oc * g.pixels..(oc + 1) * g.pixels].iter_mut().for_each(|v| *v = b[oc]);
                }
            }
            for tap in 0..g.kt {
                if let Some(src) = g.source(t, tap, len) {
                    let xs = &x[(s * g.seq_len + src) * in_sz..][..in_sz];
                    let w = &weight[tap * w_sz..(tap + 1) * w_sz];
                    gemm(false, false, g.out_ch, g.pixels, g.in_ch, w, xs, dst, true);
                }
            }
        }
    }
    y
}

/// Returns `(dx, dweight, dbias)` for [`temporal_forward`].
pub fn temporal_backward<F: Scalar>(
    dout: &[F],
    x: &[F],
    weight: &[F],
    g: &TemporalGeom,
    need_dx: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let in_sz = g.in_ch * g.pixels;
    let out_sz = g.out_ch * g.pixels;
    let w_sz = g.out_ch * g.in_ch;
    let mut dw = vec![F::zero(); g.kt * w_sz];
    let mut db = vec![F::zero(); g.out_ch];
    let mut dx = need_dx.then(|| vec![F::zero(); x.len()]);
    for (s, &len) in g.valid_len.iter().enumerate() {
        for t in 0..len {
            let frame = s * g.seq_len + t;
            let dy = &dout[frame * out_sz..(frame + 1) * out_sz];
            for oc in 0..g.out_ch {
                db[oc] += dy[oc * g.pixels..(oc + 1) * g.pixels].iter().copied().sum::<F>();
            }
            for tap in 0..g.kt {
                if let Some(src) = g.source(t, tap, len) {
                    let off = (s * g.seq_len + src) * in_sz;
                    let xs = &x[off..off + in_sz];
                    gemm(false, true, g.out_ch, g.in_ch, g.pixels, dy, xs, &mut dw[tap * w_sz..(tap + 1) * w_sz], true);
                    if let Some(dx) = dx.as_mut() {
                        let w = &weight[tap * w_sz..(tap + 1) * w_sz];
                        gemm(true, false, g.in_ch, g.pixels, g.out_ch, w, dy, &mut dx[off..off + in_sz], true);
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
