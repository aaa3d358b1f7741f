//! Raw forward/backward kernels over flat NCHW buffers.
//!
//! Gradient kernels accumulate (`+=`) into their output buffers.

/// Geometry of a 2-D convolution. Weight layout is `[out, in / groups, kh, kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            pad,
            dilation,
            groups,
        }
    }

    /// Stride-1 convolution with no padding.
    pub fn valid() -> Self {
        Self::new(1, 0, 1, 1)
    }
}

/// Geometry of a square pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn out_size(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` with `0 <= o * stride + offset < in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let limit = in_len as isize - offset;
    let hi = if limit <= 0 { 0 } else { (limit + s - 1) / s };
    let lo = (lo as usize).min(out_len);
    let hi = (hi as usize).min(out_len);
    (lo, hi.max(lo))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    fn icpg(&self, g: &ConvGeom) -> usize {
        self.c / g.groups
    }
    fn ocpg(&self, g: &ConvGeom) -> usize {
        self.oc / g.groups
    }
    fn pointwise(&self, g: &ConvGeom) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == 1 && g.pad == 0 && self.oh == self.h && self.ow == self.w
    }
}

/// Visits every (weight index, input row offset, output row offset, column range) tap.
/// `f(w_idx, in_plane, out_plane, ih, oh, ow_lo, ow_hi, iw_off)`.
#[inline]
fn for_each_tap(
    d: &ConvDims,
    g: &ConvGeom,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, isize),
) {
    let icpg = d.icpg(g);
    let ocpg = d.ocpg(g);
    for n in 0..d.n {
        for oc in 0..d.oc {
            let grp = oc / ocpg;
            let out_plane = (n * d.oc + oc) * d.oh * d.ow;
            for icl in 0..icpg {
                let ic = grp * icpg + icl;
                let in_plane = (n * d.c + ic) * d.h * d.w;
                for ki in 0..d.kh {
                    let row_off = (ki * g.dilation) as isize - g.pad as isize;
                    let (oh_lo, oh_hi) = valid_range(d.oh, d.h, row_off, g.stride);
                    for kj in 0..d.kw {
                        let col_off = (kj * g.dilation) as isize - g.pad as isize;
                        let (ow_lo, ow_hi) = valid_range(d.ow, d.w, col_off, g.stride);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let w_idx = ((oc * icpg + icl) * d.kh + ki) * d.kw + kj;
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * g.stride) as isize + row_off;
                            f(w_idx, in_plane, out_plane, ih as usize, oh, ow_lo, ow_hi, col_off);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], d: &ConvDims, g: &ConvGeom) -> Vec<f32> {
    let mut out = vec![0.0f32; d.n * d.oc * d.oh * d.ow];
    if d.pointwise(g) {
        let hw = d.h * d.w;
        let icpg = d.icpg(g);
        let ocpg = d.ocpg(g);
        for n in 0..d.n {
            for oc in 0..d.oc {
                let grp = oc / ocpg;
                let o = &mut out[(n * d.oc + oc) * hw..][..hw];
                for icl in 0..icpg {
                    let wv = w[oc * icpg + icl];
                    let i = &x[(n * d.c + grp * icpg + icl) * hw..][..hw];
                    for (ov, iv) in o.iter_mut().zip(i) {
                        *ov += wv * iv;
                    }
                }
            }
        }
        return out;
    }
    let s = g.stride;
    for_each_tap(d, g, |w_idx, ip, op, ih, oh, lo, hi, col_off| {
        let wv = w[w_idx];
        let out_row = &mut out[op + oh * d.ow..op + (oh + 1) * d.ow];
        let in_row = &x[ip + ih * d.w..ip + (ih + 1) * d.w];
        if s == 1 {
            let start = (lo as isize + col_off) as usize;
            for (ov, iv) in out_row[lo..hi].iter_mut().zip(&in_row[start..]) {
                *ov += wv * iv;
            }
        } else {
            for ow in lo..hi {
                out_row[ow] += wv * in_row[((ow * s) as isize + col_off) as usize];
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward_input(dout: &[f32], w: &[f32], d: &ConvDims, g: &ConvGeom, dx: &mut [f32]) {
    if d.pointwise(g) {
        let hw = d.h * d.w;
        let icpg = d.icpg(g);
        let ocpg = d.ocpg(g);
        for n in 0..d.n {
            for oc in 0..d.oc {
                let grp = oc / ocpg;
                let go = &dout[(n * d.oc + oc) * hw..][..hw];
                for icl in 0..icpg {
                    let wv = w[oc * icpg + icl];
                    let gi = &mut dx[(n * d.c + grp * icpg + icl) * hw..][..hw];
                    for (iv, ov) in gi.iter_mut().zip(go) {
                        *iv += wv * ov;
                    }
                }
            }
        }
        return;
    }
    let s = g.stride;
    for_each_tap(d, g, |w_idx, ip, op, ih, oh, lo, hi, col_off| {
        let wv = w[w_idx];
        let go = &dout[op + oh * d.ow..op + (oh + 1) * d.ow];
        let gi = &mut dx[ip + ih * d.w..ip + (ih + 1) * d.w];
        if s == 1 {
            let start = (lo as isize + col_off) as usize;
            for (iv, ov) in gi[start..].iter_mut().zip(&go[lo..hi]) {
                *iv += wv * ov;
            }
        } else {
            for ow in lo..hi {
                gi[((ow * s) as isize + col_off) as usize] += wv * go[ow];
            }
        }
    });
}

pub(crate) fn conv2d_backward_weight(dout: &[f32], x: &[f32], d: &ConvDims, g: &ConvGeom, dw: &mut [f32]) {
    if d.pointwise(g) {
        let hw = d.h * d.w;
        let icpg = d.icpg(g);
        let ocpg = d.ocpg(g);
        for n in 0..d.n {
            for oc in 0..d.oc {
                let grp = oc / ocpg;
                let go = &dout[(n * d.oc + oc) * hw..][..hw];
                for icl in 0..icpg {
                    let i = &x[(n * d.c + grp * icpg + icl) * hw..][..hw];
                    let acc: f32 = go.iter().zip(i).map(|(a, b)| a * b).sum();
                    dw[oc * icpg + icl] += acc;
                }
            }
        }
        return;
    }
    let s = g.stride;
    for_each_tap(d, g, |w_idx, ip, op, ih, oh, lo, hi, col_off| {
        let go = &dout[op + oh * d.ow..op + (oh + 1) * d.ow];
        let in_row = &x[ip + ih * d.w..ip + (ih + 1) * d.w];
        let mut acc = 0.0f32;
        if s == 1 {
            let start = (lo as isize + col_off) as usize;
            for (ov, iv) in go[lo..hi].iter().zip(&in_row[start..]) {
                acc += ov * iv;
            }
        } else {
            for ow in lo..hi {
                acc += go[ow] * in_row[((ow * s) as isize + col_off) as usize];
            }
        }
        dw[w_idx] += acc;
    });
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolDims {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Max pooling with implicit `-inf` padding. Returns outputs and the flat input
/// index each output was taken from (first maximum in scan order).
pub(crate) fn max_pool_forward(x: &[f32], d: &PoolDims, g: &PoolGeom) -> (Vec<f32>, Vec<usize>) {
    let mut out = Vec::with_capacity(d.planes * d.oh * d.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..d.planes {
        let base = p * d.h * d.w;
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..g.kernel {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * d.w + iw as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Average pooling that excludes padded positions from the divisor.
pub(crate) fn avg_pool_forward(x: &[f32], d: &PoolDims, g: &PoolGeom) -> Vec<f32> {
    let mut out = Vec::with_capacity(d.planes * d.oh * d.ow);
    for p in 0..d.planes {
        let base = p * d.h * d.w;
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let mut acc = 0.0f32;
                let mut count = 0usize;
                visit_window(d, g, oh, ow, |ih, iw| {
                    acc += x[base + ih * d.w + iw];
                    count += 1;
                });
                out.push(acc / count as f32);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dout: &[f32], d: &PoolDims, g: &PoolGeom, dx: &mut [f32]) {
    for p in 0..d.planes {
        let base = p * d.h * d.w;
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let mut count = 0usize;
                visit_window(d, g, oh, ow, |_, _| count += 1);
                let share = dout[(p * d.oh + oh) * d.ow + ow] / count as f32;
                visit_window(d, g, oh, ow, |ih, iw| dx[base + ih * d.w + iw] += share);
            }
        }
    }
}

#[inline]
fn visit_window(d: &PoolDims, g: &PoolGeom, oh: usize, ow: usize, mut f: impl FnMut(usize, usize)) {
    for ki in 0..g.kernel {
        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
        if ih < 0 || ih >= d.h as isize {
            continue;
        }
        for kj in 0..g.kernel {
            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
            if iw < 0 || iw >= d.w as isize {
                continue;
            }
            f(ih as usize, iw as usize);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_handles_padding_and_stride() {
        // out 4, in 8, offset -1, stride 2: o*2-1 in [0,8) -> o in [1,4)
        assert_eq!(valid_range(4, 8, -1, 2), (1, 4));
        assert_eq!(valid_range(8, 8, 1, 1), (0, 7));
        assert_eq!(valid_range(3, 2, 5, 1), (0, 0));
    }

    #[test]
    fn out_size_matches_standard_arithmetic() {
        assert_eq!(out_size(8, 3, 1, 1, 1), Some(8));
        assert_eq!(out_size(8, 3, 2, 1, 1), Some(4));
        assert_eq!(out_size(8, 5, 1, 4, 2), Some(8));
        assert_eq!(out_size(2, 5, 1, 0, 1), None);
    }

    #[test]
    fn strided_conv_matches_naive_loop() {
        let d = ConvDims { n: 1, c: 2, h: 5, w: 5, oc: 2, kh: 3, kw: 3, oh: 3, ow: 3 };
        let g = ConvGeom::new(2, 1, 1, 1);
        let x: Vec<f32> = (0..50).map(|i| (i as f32 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..36).map(|i| (i as f32 * 0.11).cos()).collect();
        let got = conv2d_forward(&x, &w, &d, &g);
        for oc in 0..2 {
            for oh in 0..3 {
                for ow in 0..3 {
                    let mut acc = 0.0f32;
                    for ic in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ih = (oh * 2 + ki) as isize - 1;
                                let iw = (ow * 2 + kj) as isize - 1;
                                if ih < 0 || iw < 0 || ih >= 5 || iw >= 5 {
                                    continue;
                                }
                                acc += w[((oc * 2 + ic) * 3 + ki) * 3 + kj]
                                    * x[(ic * 5 + ih as usize) * 5 + iw as usize];
                            }
                        }
                    }
                    let v = got[(oc * 3 + oh) * 3 + ow];
                    assert!((v - acc).abs() < 1e-5, "{v} vs {acc}");
                }
            }
        }
    }
}
