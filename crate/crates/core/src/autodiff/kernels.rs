//! Raw 3D convolution and pooling loops over `[B, C, D, H, W]` buffers.
//!
//! Convolutions are evaluated kernel-offset by kernel-offset: for a fixed
//! `(kd, kh, kw)` every output row is a scaled, shifted copy of an input row,
//! so the innermost loop runs over a contiguous slice of the W axis.

/// Geometry of a 3D convolution. The same padding, stride and dilation apply
/// to all three spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// Stride-1 "same" convolution for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            pad: (kernel / 2) * dilation,
            dilation,
            groups: 1,
        }
    }

    pub fn strided(stride: usize) -> Self {
        Self {
            stride,
            pad: 0,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn depthwise(mut self, channels: usize) -> Self {
        self.groups = channels;
        self
    }

    /// Output length along one axis, or `None` when the kernel does not fit.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims5 {
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims5 {
    pub fn from_shape(s: &[usize]) -> Self {
        Self {
            b: s[0],
            c: s[1],
            d: s[2],
            h: s[3],
            w: s[4],
        }
    }

    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }
}

/// Output positions `o` in `[lo, hi)` whose input index `o * stride + off`
/// falls inside `[0, input)`.
#[inline]
fn valid_range(out: usize, input: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let lim = input as isize - 1 - off;
    if lim < 0 {
        return (0, 0);
    }
    let hi = (lim as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

struct ConvPlan {
    x: Dims5,
    o: Dims5,
    k: usize,
    g: ConvGeom,
    cin_g: usize,
    cout_g: usize,
}

impl ConvPlan {
    fn new(x: Dims5, o: Dims5, k: usize, g: ConvGeom) -> Self {
        Self {
            cin_g: x.c / g.groups,
            cout_g: o.c / g.groups,
            x,
            o,
            k,
            g,
        }
    }

    /// Visits every (output plane, input plane, weight index, kernel offset)
    /// combination with the valid output ranges already clipped.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(Tap)) {
        let ConvPlan { x, o, k, g, cin_g, cout_g } = *self;
        let k3 = k * k * k;
        let off = |t: usize| (t * g.dilation) as isize - g.pad as isize;
        for b in 0..x.b {
            for grp in 0..g.groups {
                for col in 0..cout_g {
                    let co = grp * cout_g + col;
                    for cil in 0..cin_g {
                        let ci = grp * cin_g + cil;
                        let wbase = (co * cin_g + cil) * k3;
                        for kd in 0..k {
                            let offd = off(kd);
                            let rd = valid_range(o.d, x.d, g.stride, offd);
                            for kh in 0..k {
                                let offh = off(kh);
                                let rh = valid_range(o.h, x.h, g.stride, offh);
                                for kw in 0..k {
                                    let offw = off(kw);
                                    let rw = valid_range(o.w, x.w, g.stride, offw);
                                    if rd.0 >= rd.1 || rh.0 >= rh.1 || rw.0 >= rw.1 {
                                        continue;
                                    }
                                    f(Tap {
                                        out_plane: (b * o.c + co) * o.spatial(),
                                        in_plane: (b * x.c + ci) * x.spatial(),
                                        widx: wbase + (kd * k + kh) * k + kw,
                                        rd,
                                        rh,
                                        rw,
                                        offd,
                                        offh,
                                        offw,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[inline]
    fn rows(&self, t: &Tap, mut f: impl FnMut(usize, usize)) {
        let s = self.g.stride as isize;
        for od in t.rd.0..t.rd.1 {
            let id = (od as isize * s + t.offd) as usize;
            for oh in t.rh.0..t.rh.1 {
                let ih = (oh as isize * s + t.offh) as usize;
                let orow = t.out_plane + (od * self.o.h + oh) * self.o.w;
                let irow = t.in_plane + (id * self.x.h + ih) * self.x.w;
                f(orow, irow);
            }
        }
    }
}

struct Tap {
    out_plane: usize,
    in_plane: usize,
    widx: usize,
    rd: (usize, usize),
    rh: (usize, usize),
    rw: (usize, usize),
    offd: isize,
    offh: isize,
    offw: isize,
}

pub(crate) fn conv3d_forward(
    x: &[f64],
    xd: Dims5,
    w: &[f64],
    k: usize,
    od: Dims5,
    g: ConvGeom,
) -> Vec<f64> {
    let plan = ConvPlan::new(xd, od, k, g);
    let mut out = vec![0.0; od.b * od.c * od.spatial()];
    let stride = g.stride;
    plan.for_each_tap(|t| {
        let wv = w[t.widx];
        let (w0, w1) = t.rw;
        let n = w1 - w0;
        let iw0 = (w0 as isize * stride as isize + t.offw) as usize;
        plan.rows(&t, |orow, irow| {
            let o = &mut out[orow + w0..orow + w1];
            if stride == 1 {
                let i = &x[irow + iw0..irow + iw0 + n];
                for (o, i) in o.iter_mut().zip(i) {
                    *o += wv * i;
                }
            } else {
                for (j, o) in o.iter_mut().enumerate() {
                    *o += wv * x[irow + iw0 + j * stride];
                }
            }
        });
    });
    out
}

/// Gradients of a convolution with respect to its input and/or weight.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward(
    x: &[f64],
    xd: Dims5,
    w: &[f64],
    k: usize,
    od: Dims5,
    g: ConvGeom,
    gout: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
) {
    let plan = ConvPlan::new(xd, od, k, g);
    let stride = g.stride;
    let mut gx = gx;
    let mut gw = gw;
    plan.for_each_tap(|t| {
        let wv = w[t.widx];
        let (w0, w1) = t.rw;
        let n = w1 - w0;
        let iw0 = (w0 as isize * stride as isize + t.offw) as usize;
        let mut acc = 0.0;
        plan.rows(&t, |orow, irow| {
            let go = &gout[orow + w0..orow + w1];
            if let Some(gx) = gx.as_deref_mut() {
                if stride == 1 {
                    for (gi, go) in gx[irow + iw0..irow + iw0 + n].iter_mut().zip(go) {
                        *gi += wv * go;
                    }
                } else {
                    for (j, go) in go.iter().enumerate() {
                        gx[irow + iw0 + j * stride] += wv * go;
                    }
                }
            }
            if gw.is_some() {
                if stride == 1 {
                    let xi = &x[irow + iw0..irow + iw0 + n];
                    acc += go.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                } else {
                    acc += go
                        .iter()
                        .enumerate()
                        .map(|(j, go)| go * x[irow + iw0 + j * stride])
                        .sum::<f64>();
                }
            }
        });
        if let Some(gw) = gw.as_deref_mut() {
            gw[t.widx] += acc;
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Stride-1 pooling with `pad = kernel / 2`, so spatial dims are preserved.
/// Returns the output and, for max pooling, the in-plane argmax of each
/// output voxel (first maximum in d, h, w scan order).
pub(crate) fn pool3d_forward(
    x: &[f64],
    xd: Dims5,
    k: usize,
    mode: PoolMode,
) -> (Vec<f64>, Vec<u32>) {
    let r = (k / 2) as isize;
    let s = xd.spatial();
    let mut out = vec![0.0; x.len()];
    let mut arg = if mode == PoolMode::Max {
        vec![0u32; x.len()]
    } else {
        Vec::new()
    };
    let span = |c: usize, n: usize| {
        let lo = (c as isize - r).max(0) as usize;
        let hi = ((c as isize + r) as usize).min(n - 1);
        (lo, hi)
    };
    for plane in 0..xd.b * xd.c {
        let base = plane * s;
        let xp = &x[base..base + s];
        for d in 0..xd.d {
            let (d0, d1) = span(d, xd.d);
            for h in 0..xd.h {
                let (h0, h1) = span(h, xd.h);
                for w in 0..xd.w {
                    let (w0, w1) = span(w, xd.w);
                    let oi = (d * xd.h + h) * xd.w + w;
                    match mode {
                        PoolMode::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = 0usize;
                            for dd in d0..=d1 {
                                for hh in h0..=h1 {
                                    let row = (dd * xd.h + hh) * xd.w;
                                    for ww in w0..=w1 {
                                        let v = xp[row + ww];
                                        if v > best {
                                            best = v;
                                            at = row + ww;
                                        }
                                    }
                                }
                            }
                            out[base + oi] = best;
                            arg[base + oi] = at as u32;
                        }
                        PoolMode::Avg => {
                            let mut sum = 0.0;
                            for dd in d0..=d1 {
                                for hh in h0..=h1 {
                                    let row = (dd * xd.h + hh) * xd.w;
                                    sum += xp[row + w0..=row + w1].iter().sum::<f64>();
                                }
                            }
                            let count = (d1 - d0 + 1) * (h1 - h0 + 1) * (w1 - w0 + 1);
                            out[base + oi] = sum / count as f64;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn pool3d_backward(
    xd: Dims5,
    k: usize,
    mode: PoolMode,
    argmax: &[u32],
    gout: &[f64],
    gx: &mut [f64],
) {
    let s = xd.spatial();
    match mode {
        PoolMode::Max => {
            for plane in 0..xd.b * xd.c {
                let base = plane * s;
                for i in 0..s {
                    gx[base + argmax[base + i] as usize] += gout[base + i];
                }
            }
        }
        PoolMode::Avg => {
            let r = (k / 2) as isize;
            let span = |c: usize, n: usize| {
                let lo = (c as isize - r).max(0) as usize;
                let hi = ((c as isize + r) as usize).min(n - 1);
                (lo, hi)
            };
            for plane in 0..xd.b * xd.c {
                let base = plane * s;
                for d in 0..xd.d {
                    let (d0, d1) = span(d, xd.d);
                    for h in 0..xd.h {
                        let (h0, h1) = span(h, xd.h);
                        for w in 0..xd.w {
                            let (w0, w1) = span(w, xd.w);
                            let count = (d1 - d0 + 1) * (h1 - h0 + 1) * (w1 - w0 + 1);
                            let g = gout[base + (d * xd.h + h) * xd.w + w] / count as f64;
                            for dd in d0..=d1 {
                                for hh in h0..=h1 {
                                    let row = base + (dd * xd.h + hh) * xd.w;
                                    gx[row + w0..=row + w1].iter_mut().for_each(|v| *v += g);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-fold loop, independent of the row-slicing scheme above.
    fn naive_conv(x: &[f64], xd: Dims5, w: &[f64], k: usize, g: ConvGeom) -> (Vec<f64>, Dims5) {
        let o = Dims5 {
            b: xd.b,
            c: w.len() / (xd.c / g.groups * k * k * k),
            d: g.out_len(xd.d, k).unwrap(),
            h: g.out_len(xd.h, k).unwrap(),
            w: g.out_len(xd.w, k).unwrap(),
        };
        let cin_g = xd.c / g.groups;
        let cout_g = o.c / g.groups;
        let mut out = vec![0.0; o.b * o.c * o.spatial()];
        for b in 0..o.b {
            for co in 0..o.c {
                let grp = co / cout_g;
                for od in 0..o.d {
                    for oh in 0..o.h {
                        for ow in 0..o.w {
                            let mut acc = 0.0;
                            for cil in 0..cin_g {
                                let ci = grp * cin_g + cil;
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let id = (od * g.stride + kd * g.dilation) as isize - g.pad as isize;
                                            let ih = (oh * g.stride + kh * g.dilation) as isize - g.pad as isize;
                                            let iw = (ow * g.stride + kw * g.dilation) as isize - g.pad as isize;
                                            if id < 0 || ih < 0 || iw < 0 {
                                                continue;
                                            }
                                            let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                            if id >= xd.d || ih >= xd.h || iw >= xd.w {
                                                continue;
                                            }
                                            let xv = x[(((b * xd.c + ci) * xd.d + id) * xd.h + ih) * xd.w + iw];
                                            let wv = w[(((co * cin_g + cil) * k + kd) * k + kh) * k + kw];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out[(((b * o.c + co) * o.d + od) * o.h + oh) * o.w + ow] = acc;
                        }
                    }
                }
            }
        }
        (out, o)
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 101) as f64 * scale - 0.5).collect()
    }

    #[test]
    fn matches_naive_loops() {
        let cases = [
            (2, 3, 3, ConvGeom::same(3, 1)),
            (2, 3, 5, ConvGeom::same(5, 1)),
            (2, 2, 3, ConvGeom::same(3, 2)),
            (3, 3, 3, ConvGeom::same(3, 1).depthwise(3)),
            (2, 4, 1, ConvGeom::strided(2)),
            (2, 1, 1, ConvGeom::strided(4)),
        ];
        for (cin, cout, k, g) in cases {
            let xd = Dims5 { b: 2, c: cin, d: 4, h: 5, w: 8 };
            let x = ramp(xd.b * xd.c * xd.spatial(), 0.01);
            let w = ramp(cout * cin / g.groups * k * k * k, 0.003);
            let (want, od) = naive_conv(&x, xd, &w, k, g);
            let got = conv3d_forward(&x, xd, &w, k, od, g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn valid_range_clips() {
        assert_eq!(valid_range(4, 4, 1, -1), (1, 4));
        assert_eq!(valid_range(4, 4, 1, 1), (0, 3));
        assert_eq!(valid_range(2, 4, 2, 0), (0, 2));
        assert_eq!(valid_range(1, 1, 1, 2), (0, 0));
    }
}
