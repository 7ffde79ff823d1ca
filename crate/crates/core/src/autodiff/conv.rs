//! Direct 2D convolution kernels over NCHW slices.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = n + 2 * pad;
        if padded < k || stride == 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    }
}

/// Output positions `[lo, hi)` whose tap at kernel offset `k` lands inside `[0, n_in)`.
fn valid_range(n_out: usize, n_in: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // in = out * stride + k - pad
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let top = (n_in + pad).saturating_sub(k); // in < n_in  <=>  out * stride < n_in + pad - k
    let hi = if top == 0 { 0 } else { (top - 1) / stride + 1 };
    (lo.min(n_out), hi.min(n_out).max(lo.min(n_out)))
}

struct Taps {
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl Taps {
    fn new(g: &ConvGeom) -> Self {
        Taps {
            rows: (0..g.kh)
                .map(|ky| valid_range(g.out_h, g.in_h, ky, g.stride, g.pad))
                .collect(),
            cols: (0..g.kw)
                .map(|kx| valid_range(g.out_w, g.in_w, kx, g.stride, g.pad))
                .collect(),
        }
    }
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let taps = Taps::new(g);
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.batch * g.out_ch * out_plane];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let dst = &mut out[(b * g.out_ch + o) * out_plane..][..out_plane];
            if let Some(bias) = bias {
                dst.fill(bias[o]);
            }
            for i in 0..g.in_ch {
                let src = &input[(b * g.in_ch + i) * in_plane..][..in_plane];
                let wbase = (o * g.in_ch + i) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let (ylo, yhi) = taps.rows[ky];
                    for kx in 0..g.kw {
                        let (xlo, xhi) = taps.cols[kx];
                        if xlo >= xhi {
                            continue;
                        }
                        let w = weight[wbase + ky * g.kw + kx];
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let drow = &mut dst[oy * g.out_w..][xlo..xhi];
                            let ix0 = xlo * g.stride + kx - g.pad;
                            let srow = &src[iy * g.in_w..][..g.in_w];
                            if g.stride == 1 {
                                for (d, &s) in drow.iter_mut().zip(&srow[ix0..ix0 + (xhi - xlo)]) {
                                    *d += w * s;
                                }
                            } else {
                                for (j, d) in drow.iter_mut().enumerate() {
                                    *d += w * srow[ix0 + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    gout: &[T],
    input: &[T],
    weight: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let taps = Taps::new(g);
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;

    let dinput = need_input.then(|| {
        let mut din = vec![T::zero(); input.len()];
        for b in 0..g.batch {
            for i in 0..g.in_ch {
                let dst = &mut din[(b * g.in_ch + i) * in_plane..][..in_plane];
                for o in 0..g.out_ch {
                    let src = &gout[(b * g.out_ch + o) * out_plane..][..out_plane];
                    let wbase = (o * g.in_ch + i) * g.kh * g.kw;
                    for ky in 0..g.kh {
                        let (ylo, yhi) = taps.rows[ky];
                        for kx in 0..g.kw {
                            let (xlo, xhi) = taps.cols[kx];
                            if xlo >= xhi {
                                continue;
                            }
                            let w = weight[wbase + ky * g.kw + kx];
                            for oy in ylo..yhi {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &src[oy * g.out_w..][xlo..xhi];
                                let ix0 = xlo * g.stride + kx - g.pad;
                                let drow = &mut dst[iy * g.in_w..][..g.in_w];
                                if g.stride == 1 {
                                    for (d, &s) in drow[ix0..ix0 + (xhi - xlo)].iter_mut().zip(grow) {
                                        *d += w * s;
                                    }
                                } else {
                                    for (j, &s) in grow.iter().enumerate() {
                                        drow[ix0 + j * g.stride] += w * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        din
    });

    let dweight = need_weight.then(|| {
        let mut dw = vec![T::zero(); weight.len()];
        for o in 0..g.out_ch {
            for i in 0..g.in_ch {
                let wbase = (o * g.in_ch + i) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let (ylo, yhi) = taps.rows[ky];
                    for kx in 0..g.kw {
                        let (xlo, xhi) = taps.cols[kx];
                        if xlo >= xhi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for b in 0..g.batch {
                            let gsrc = &gout[(b * g.out_ch + o) * out_plane..][..out_plane];
                            let isrc = &input[(b * g.in_ch + i) * in_plane..][..in_plane];
                            for oy in ylo..yhi {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &gsrc[oy * g.out_w..][xlo..xhi];
                                let ix0 = xlo * g.stride + kx - g.pad;
                                let irow = &isrc[iy * g.in_w..][..g.in_w];
                                if g.stride == 1 {
                                    for (&a, &c) in grow.iter().zip(&irow[ix0..ix0 + (xhi - xlo)]) {
                                        acc += a * c;
                                    }
                                } else {
                                    for (j, &a) in grow.iter().enumerate() {
                                        acc += a * irow[ix0 + j * g.stride];
                                    }
                                }
                            }
                        }
                        dw[wbase + ky * g.kw + kx] = acc;
                    }
                }
            }
        }
        dw
    });

    let dbias = need_bias.then(|| {
        let mut db = vec![T::zero(); g.out_ch];
        for b in 0..g.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += gout[(b * g.out_ch + o) * out_plane..][..out_plane]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        db
    });

    ConvGrads {
        input: dinput,
        weight: dweight,
        bias: dbias,
    }
}
