//! Raw 3D convolution, pooling and normalization kernels over NCDHW buffers.
//!
//! Batches are processed one sample per rayon task. Every cross-sample
//! reduction is summed sequentially in sample order so results do not depend
//! on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Geometry of a same-padded 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn cube(k: usize, stride: usize) -> Self {
        Self {
            kernel: [k, k, k],
            stride,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn pad(&self, axis: usize) -> usize {
        self.dilation * (self.kernel[axis] - 1) / 2
    }

    pub fn out_dim(&self, n: usize, axis: usize) -> usize {
        pooled_dim(n, self.kernel[axis], self.stride, self.dilation)
    }

    pub fn out_spatial(&self, d: [usize; 3]) -> [usize; 3] {
        [self.out_dim(d[0], 0), self.out_dim(d[1], 1), self.out_dim(d[2], 2)]
    }
}

/// Output extent of a same-padded window: `ceil(n / stride)` for odd kernels.
pub fn pooled_dim(n: usize, k: usize, stride: usize, dilation: usize) -> usize {
    let pad = dilation * (k - 1) / 2;
    (n + 2 * pad - dilation * (k - 1) - 1) / stride + 1
}

/// Output positions `o` whose input index `o * stride + offset` lies in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { ((-offset) + s - 1) / s } else { 0 };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) + 1).min(out_len as isize);
    (lo as usize, hi.max(lo) as usize)
}

pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub ind: [usize; 3],
    pub outd: [usize; 3],
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(xdims: [usize; 5], cout: usize, spec: ConvSpec) -> Self {
        let ind = [xdims[2], xdims[3], xdims[4]];
        Self {
            n: xdims[0],
            cin: xdims[1],
            cout,
            ind,
            outd: spec.out_spatial(ind),
            spec,
        }
    }

    fn in_size(&self) -> usize {
        self.ind.iter().product()
    }

    fn out_size(&self) -> usize {
        self.outd.iter().product()
    }

    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn ksize(&self) -> usize {
        self.spec.kernel.iter().product()
    }

    /// Visit every (kernel tap, valid output row) pair of one input/output
    /// channel pair: `f(k_flat, out_offset, in_offset, run_len)` with strided runs.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let s = self.spec.stride;
        let dil = self.spec.dilation;
        let [kd, kh, kw] = self.spec.kernel;
        let [id_, ih_, iw_] = self.ind;
        let [od_, oh_, ow_] = self.outd;
        let pd = self.spec.pad(0) as isize;
        let ph = self.spec.pad(1) as isize;
        let pw = self.spec.pad(2) as isize;
        for a in 0..kd {
            let offd = (a * dil) as isize - pd;
            let (d0, d1) = valid_range(od_, id_, offd, s);
            for b in 0..kh {
                let offh = (b * dil) as isize - ph;
                let (h0, h1) = valid_range(oh_, ih_, offh, s);
                for c in 0..kw {
                    let offw = (c * dil) as isize - pw;
                    let (w0, w1) = valid_range(ow_, iw_, offw, s);
                    if w1 <= w0 {
                        continue;
                    }
                    let k = (a * kh + b) * kw + c;
                    for od in d0..d1 {
                        let idd = (od * s) as isize + offd;
                        for oh in h0..h1 {
                            let ihh = (oh * s) as isize + offh;
                            let out_off = (od * oh_ + oh) * ow_ + w0;
                            let in_off = ((idd as usize) * ih_ + ihh as usize) * iw_
                                + ((w0 * s) as isize + offw) as usize;
                            f(k, out_off, in_off, w1 - w0);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let isz = g.in_size();
    let osz = g.out_size();
    let ks = g.ksize();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let s = g.spec.stride;
    let mut out = vec![T::zero(); g.n * g.cout * osz];
    out.par_chunks_mut(g.cout * osz)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * g.cin * isz..(n + 1) * g.cin * isz];
            for oc in 0..g.cout {
                let grp = oc / cout_g;
                let out_c = &mut out_n[oc * osz..(oc + 1) * osz];
                for icl in 0..cin_g {
                    let ic = grp * cin_g + icl;
                    let x_c = &x_n[ic * isz..(ic + 1) * isz];
                    let w_c = &w[(oc * cin_g + icl) * ks..(oc * cin_g + icl + 1) * ks];
                    g.for_each_tap(|k, o, i, len| {
                        let wv = w_c[k];
                        for t in 0..len {
                            out_c[o + t] = out_c[o + t] + wv * x_c[i + t * s];
                        }
                    });
                }
            }
        });
    out
}

pub fn conv3d_backward_input<T: Scalar>(grad: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let isz = g.in_size();
    let osz = g.out_size();
    let ks = g.ksize();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let s = g.spec.stride;
    let mut gx = vec![T::zero(); g.n * g.cin * isz];
    gx.par_chunks_mut(g.cin * isz)
        .enumerate()
        .for_each(|(n, gx_n)| {
            let g_n = &grad[n * g.cout * osz..(n + 1) * g.cout * osz];
            for oc in 0..g.cout {
                let grp = oc / cout_g;
                let g_c = &g_n[oc * osz..(oc + 1) * osz];
                for icl in 0..cin_g {
                    let ic = grp * cin_g + icl;
                    let gx_c = &mut gx_n[ic * isz..(ic + 1) * isz];
                    let w_c = &w[(oc * cin_g + icl) * ks..(oc * cin_g + icl + 1) * ks];
                    g.for_each_tap(|k, o, i, len| {
                        let wv = w_c[k];
                        for t in 0..len {
                            gx_c[i + t * s] = gx_c[i + t * s] + wv * g_c[o + t];
                        }
                    });
                }
            }
        });
    gx
}

pub fn conv3d_backward_weight<T: Scalar>(grad: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let isz = g.in_size();
    let osz = g.out_size();
    let ks = g.ksize();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let s = g.spec.stride;
    let wlen = g.cout * cin_g * ks;
    let partials: Vec<Vec<T>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let mut gw = vec![T::zero(); wlen];
            let g_n = &grad[n * g.cout * osz..(n + 1) * g.cout * osz];
            let x_n = &x[n * g.cin * isz..(n + 1) * g.cin * isz];
            for oc in 0..g.cout {
                let grp = oc / cout_g;
                let g_c = &g_n[oc * osz..(oc + 1) * osz];
                for icl in 0..cin_g {
                    let ic = grp * cin_g + icl;
                    let x_c = &x_n[ic * isz..(ic + 1) * isz];
                    let gw_c = &mut gw[(oc * cin_g + icl) * ks..(oc * cin_g + icl + 1) * ks];
                    g.for_each_tap(|k, o, i, len| {
                        let mut acc = T::zero();
                        for t in 0..len {
                            acc = acc + g_c[o + t] * x_c[i + t * s];
                        }
                        gw_c[k] = gw_c[k] + acc;
                    });
                }
            }
            gw
        })
        .collect();
    sum_partials(partials, wlen)
}

fn sum_partials<T: Scalar>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for p in partials {
        for (a, b) in total.iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    total
}

/// Pooling window geometry: 3x3x3, padding 1, stride 1 or 2.
pub struct PoolGeom {
    pub nc: usize,
    pub ind: [usize; 3],
    pub outd: [usize; 3],
    pub stride: usize,
}

impl PoolGeom {
    pub fn new(xdims: [usize; 5], stride: usize) -> Self {
        let ind = [xdims[2], xdims[3], xdims[4]];
        let outd = [
            pooled_dim(ind[0], 3, stride, 1),
            pooled_dim(ind[1], 3, stride, 1),
            pooled_dim(ind[2], 3, stride, 1),
        ];
        Self {
            nc: xdims[0] * xdims[1],
            ind,
            outd,
            stride,
        }
    }

    /// In-bounds input offsets of the window for output `(od, oh, ow)`.
    fn window(&self, od: usize, oh: usize, ow: usize, buf: &mut Vec<usize>) {
        buf.clear();
        let [id_, ih_, iw_] = self.ind;
        let c = |o: usize, len: usize| {
            let center = (o * self.stride) as isize;
            let lo = (center - 1).max(0) as usize;
            let hi = ((center + 1) as usize).min(len - 1);
            lo..=hi
        };
        for d in c(od, id_) {
            for h in c(oh, ih_) {
                for w in c(ow, iw_) {
                    buf.push((d * ih_ + h) * iw_ + w);
                }
            }
        }
    }

    fn out_size(&self) -> usize {
        self.outd.iter().product()
    }

    fn in_size(&self) -> usize {
        self.ind.iter().product()
    }
}

/// Average pooling that divides by the number of in-bounds elements.
pub fn avg_pool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let (isz, osz) = (g.in_size(), g.out_size());
    let mut out = vec![T::zero(); g.nc * osz];
    out.par_chunks_mut(osz).enumerate().for_each(|(c, out_c)| {
        let x_c = &x[c * isz..(c + 1) * isz];
        let mut buf = Vec::with_capacity(27);
        let [od_, oh_, ow_] = g.outd;
        for od in 0..od_ {
            for oh in 0..oh_ {
                for ow in 0..ow_ {
                    g.window(od, oh, ow, &mut buf);
                    let s: T = buf.iter().map(|&i| x_c[i]).sum();
                    out_c[(od * oh_ + oh) * ow_ + ow] = s / T::of(buf.len() as f64);
                }
            }
        }
    });
    out
}

pub fn avg_pool_backward<T: Scalar>(grad: &[T], g: &PoolGeom) -> Vec<T> {
    let (isz, osz) = (g.in_size(), g.out_size());
    let mut gx = vec![T::zero(); g.nc * isz];
    gx.par_chunks_mut(isz).enumerate().for_each(|(c, gx_c)| {
        let g_c = &grad[c * osz..(c + 1) * osz];
        let mut buf = Vec::with_capacity(27);
        let [od_, oh_, ow_] = g.outd;
        for od in 0..od_ {
            for oh in 0..oh_ {
                for ow in 0..ow_ {
                    g.window(od, oh, ow, &mut buf);
                    let share = g_c[(od * oh_ + oh) * ow_ + ow] / T::of(buf.len() as f64);
                    for &i in &buf {
                        gx_c[i] = gx_c[i] + share;
                    }
                }
            }
        }
    });
    gx
}

/// Max pooling over in-bounds elements; also returns the winning input offset
/// (within its channel) of every output element. Ties keep the first offset.
pub fn max_pool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let (isz, osz) = (g.in_size(), g.out_size());
    let mut out = vec![T::zero(); g.nc * osz];
    let mut arg = vec![0usize; g.nc * osz];
    out.par_chunks_mut(osz)
        .zip(arg.par_chunks_mut(osz))
        .enumerate()
        .for_each(|(c, (out_c, arg_c))| {
            let x_c = &x[c * isz..(c + 1) * isz];
            let mut buf = Vec::with_capacity(27);
            let [od_, oh_, ow_] = g.outd;
            for od in 0..od_ {
                for oh in 0..oh_ {
                    for ow in 0..ow_ {
                        g.window(od, oh, ow, &mut buf);
                        let mut best = buf[0];
                        for &i in &buf[1..] {
                            if x_c[i] > x_c[best] {
                                best = i;
                            }
                        }
                        let o = (od * oh_ + oh) * ow_ + ow;
                        out_c[o] = x_c[best];
                        arg_c[o] = best;
                    }
                }
            }
        });
    (out, arg)
}

pub fn max_pool_backward<T: Scalar>(grad: &[T], arg: &[usize], g: &PoolGeom) -> Vec<T> {
    let (isz, osz) = (g.in_size(), g.out_size());
    let mut gx = vec![T::zero(); g.nc * isz];
    for c in 0..g.nc {
        for o in 0..osz {
            let i = c * isz + arg[c * osz + o];
            gx[i] = gx[i] + grad[c * osz + o];
        }
    }
    gx
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics over the batch and spatial axes (biased variance).
pub fn channel_stats<T: Scalar>(x: &[T], dims: [usize; 5]) -> (Vec<T>, Vec<T>) {
    let [n, c, ..] = dims;
    let sp: usize = dims[2..].iter().product();
    let m = T::of((n * sp) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * sp;
            s = s + x[off..off + sp].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * sp;
            v = v + x[off..off + sp].iter().map(|&a| (a - mu) * (a - mu)).sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}
