//! Straightforward f64 forward passes, written independently of the library
//! kernels. Layouts: NCHW activations, `[out, in / groups, kh, kw]` conv weights,
//! `[out, in]` linear weights.

use dass::tensor::{ConvGeom, PoolGeom};

pub fn out_len(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    (input + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1
}

pub fn conv2d(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], g: ConvGeom) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let [oc, icpg, kh, kw] = ws;
    let (oh, ow) = (out_len(h, kh, g.stride, g.pad, g.dilation), out_len(wd, kw, g.stride, g.pad, g.dilation));
    let ocpg = oc / g.groups;
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            let grp = o / ocpg;
            for y in 0..oh {
                for z in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..icpg {
                        let ci = grp * icpg + i;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let r = (y * g.stride + ki * g.dilation) as isize - g.pad as isize;
                                let s = (z * g.stride + kj * g.dilation) as isize - g.pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ci) * h + r as usize) * wd + s as usize];
                                acc += xv * w[((o * icpg + i) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((b * oc + o) * oh + y) * ow + z] = acc;
                }
            }
        }
    }
    out
}

pub fn linear(x: &[f64], batch: usize, fan_in: usize, w: &[f64], fan_out: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; batch * fan_out];
    for r in 0..batch {
        for o in 0..fan_out {
            let dot: f64 = (0..fan_in).map(|i| x[r * fan_in + i] * w[o * fan_in + i]).sum();
            out[r * fan_out + o] = dot + bias.map_or(0.0, |b| b[o]);
        }
    }
    out
}

/// Per-channel normalization; statistics from the batch unless given.
pub fn batch_norm(
    x: &[f64],
    (n, c, hw): (usize, usize, usize),
    gamma: Option<&[f64]>,
    beta: Option<&[f64]>,
    stats: Option<(&[f64], &[f64])>,
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| (0..hw).map(move |j| (b * c + ch) * hw + j)).map(|i| x[i]).collect();
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                (m, vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64)
            }
        };
        let (gm, bt) = (gamma.map_or(1.0, |g| g[ch]), beta.map_or(0.0, |b| b[ch]));
        for b in 0..n {
            for j in 0..hw {
                let i = (b * c + ch) * hw + j;
                out[i] = (x[i] - mean) / (var + eps).sqrt() * gm + bt;
            }
        }
    }
    out
}

/// Max or mean over each window, ignoring padded positions.
pub fn pool(x: &[f64], [n, c, h, w]: [usize; 4], g: PoolGeom, max: bool) -> Vec<f64> {
    let (oh, ow) = (out_len(h, g.kernel, g.stride, g.pad, 1), out_len(w, g.kernel, g.stride, g.pad, 1));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for y in 0..oh {
            for z in 0..ow {
                let mut seen = Vec::new();
                for ki in 0..g.kernel {
                    for kj in 0..g.kernel {
                        let r = (y * g.stride + ki) as isize - g.pad as isize;
                        let s = (z * g.stride + kj) as isize - g.pad as isize;
                        if r >= 0 && s >= 0 && r < h as isize && s < w as isize {
                            seen.push(x[(p * h + r as usize) * w + s as usize]);
                        }
                    }
                }
                out.push(if max {
                    seen.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    seen.iter().sum::<f64>() / seen.len() as f64
                });
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &[f64], planes: usize, hw: usize) -> Vec<f64> {
    (0..planes).map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

/// Channel concatenation of `parts` with the given channel counts.
pub fn concat(parts: &[&[f64]], channels: &[usize], n: usize, hw: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for b in 0..n {
        for (p, &c) in parts.iter().zip(channels) {
            out.extend_from_slice(&p[b * c * hw..(b + 1) * c * hw]);
        }
    }
    out
}

pub fn crop(x: &[f64], planes: usize, h: usize, w: usize, top: usize, left: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..planes {
        for r in top..h {
            for s in left..w {
                out.push(x[(p * h + r) * w + s]);
            }
        }
    }
    out
}

pub fn softmax(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter().map(move |v| (v - m).exp() / z).collect::<Vec<_>>()
        })
        .collect()
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let p = softmax(logits, k);
    labels.iter().enumerate().map(|(r, &l)| -p[r * k + l].ln()).sum::<f64>() / labels.len() as f64
}
