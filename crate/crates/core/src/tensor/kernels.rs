//! Raw numeric kernels behind the tape ops.
//!
//! All kernels are deterministic: parallelism only splits work into disjoint
//! output regions, and every accumulation runs in a fixed index order.

use rayon::prelude::*;

/// Spatial output extent of a convolution/pooling axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Cross-correlation forward: out[b,co,oy,ox] = sum_{ci,ky,kx} x[...] k[...].
pub fn conv2d_forward(x: &[f64], k: &[f64], d: &ConvDims, out: &mut [f64]) {
    let in_img = d.cin * d.h * d.w;
    let out_img = d.cout * d.oh * d.ow;
    out.par_chunks_mut(out_img)
        .zip(x.par_chunks(in_img))
        .for_each(|(out_b, x_b)| {
            for co in 0..d.cout {
                let k_co = &k[co * d.cin * d.kh * d.kw..(co + 1) * d.cin * d.kh * d.kw];
                for oy in 0..d.oh {
                    let iy0 = (oy * d.stride) as isize - d.padding as isize;
                    for ox in 0..d.ow {
                        let ix0 = (ox * d.stride) as isize - d.padding as isize;
                        let mut acc = 0.0;
                        for ci in 0..d.cin {
                            let x_c = &x_b[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                            let k_c = &k_co[ci * d.kh * d.kw..(ci + 1) * d.kh * d.kw];
                            for ky in 0..d.kh {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let row = &x_c[iy as usize * d.w..(iy as usize + 1) * d.w];
                                let krow = &k_c[ky * d.kw..(ky + 1) * d.kw];
                                for kx in 0..d.kw {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    acc += row[ix as usize] * krow[kx];
                                }
                            }
                        }
                        out_b[co * d.oh * d.ow + oy * d.ow + ox] = acc;
                    }
                }
            }
        });
}

/// Gradient w.r.t. the convolution input; accumulates into `dx`.
pub fn conv2d_backward_input(g: &[f64], k: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let in_img = d.cin * d.h * d.w;
    let out_img = d.cout * d.oh * d.ow;
    dx.par_chunks_mut(in_img)
        .zip(g.par_chunks(out_img))
        .for_each(|(dx_b, g_b)| {
            for co in 0..d.cout {
                let k_co = &k[co * d.cin * d.kh * d.kw..(co + 1) * d.cin * d.kh * d.kw];
                let g_co = &g_b[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
                for oy in 0..d.oh {
                    let iy0 = (oy * d.stride) as isize - d.padding as isize;
                    for ox in 0..d.ow {
                        let gv = g_co[oy * d.ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        let ix0 = (ox * d.stride) as isize - d.padding as isize;
                        for ci in 0..d.cin {
                            let dx_c = &mut dx_b[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                            let k_c = &k_co[ci * d.kh * d.kw..(ci + 1) * d.kh * d.kw];
                            for ky in 0..d.kh {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let base = iy as usize * d.w;
                                for kx in 0..d.kw {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    dx_c[base + ix as usize] += gv * k_c[ky * d.kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Gradient w.r.t. the kernel; accumulates into `dk`. Parallel over output
/// channels so each dk slice has a single writer summing batches in order.
pub fn conv2d_backward_kernel(g: &[f64], x: &[f64], d: &ConvDims, dk: &mut [f64]) {
    let in_img = d.cin * d.h * d.w;
    let out_img = d.cout * d.oh * d.ow;
    let k_sz = d.cin * d.kh * d.kw;
    dk.par_chunks_mut(k_sz).enumerate().for_each(|(co, dk_co)| {
        for b in 0..d.batch {
            let x_b = &x[b * in_img..(b + 1) * in_img];
            let g_co = &g[b * out_img + co * d.oh * d.ow..b * out_img + (co + 1) * d.oh * d.ow];
            for oy in 0..d.oh {
                let iy0 = (oy * d.stride) as isize - d.padding as isize;
                for ox in 0..d.ow {
                    let gv = g_co[oy * d.ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    let ix0 = (ox * d.stride) as isize - d.padding as isize;
                    for ci in 0..d.cin {
                        let x_c = &x_b[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                        let dk_c = &mut dk_co[ci * d.kh * d.kw..(ci + 1) * d.kh * d.kw];
                        for ky in 0..d.kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let base = iy as usize * d.w;
                            for kx in 0..d.kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                dk_c[ky * d.kw + kx] += gv * x_c[base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub struct PoolDims {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub wh: usize,
    pub ww: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Max pooling; records the flat input index of each window argmax
/// (first index in row-major order wins ties).
pub fn max_pool_forward(x: &[f64], d: &PoolDims, out: &mut [f64], argmax: &mut [usize]) {
    let plane = d.h * d.w;
    let oplane = d.oh * d.ow;
    for bc in 0..d.batch * d.channels {
        let x_p = &x[bc * plane..(bc + 1) * plane];
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for wy in 0..d.wh {
                    let iy = oy * d.sh + wy;
                    for wx in 0..d.ww {
                        let ix = ox * d.sw + wx;
                        let v = x_p[iy * d.w + ix];
                        if v > best {
                            best = v;
                            best_idx = iy * d.w + ix;
                        }
                    }
                }
                out[bc * oplane + oy * d.ow + ox] = best;
                argmax[bc * oplane + oy * d.ow + ox] = bc * plane + best_idx;
            }
        }
    }
}

pub fn avg_pool_forward(x: &[f64], d: &PoolDims, out: &mut [f64]) {
    let plane = d.h * d.w;
    let oplane = d.oh * d.ow;
    let inv = 1.0 / (d.wh * d.ww) as f64;
    for bc in 0..d.batch * d.channels {
        let x_p = &x[bc * plane..(bc + 1) * plane];
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let mut acc = 0.0;
                for wy in 0..d.wh {
                    let iy = oy * d.sh + wy;
                    for wx in 0..d.ww {
                        acc += x_p[iy * d.w + ox * d.sw + wx];
                    }
                }
                out[bc * oplane + oy * d.ow + ox] = acc * inv;
            }
        }
    }
}

pub fn avg_pool_backward(g: &[f64], d: &PoolDims, dx: &mut [f64]) {
    let plane = d.h * d.w;
    let oplane = d.oh * d.ow;
    let inv = 1.0 / (d.wh * d.ww) as f64;
    for bc in 0..d.batch * d.channels {
        let dx_p = &mut dx[bc * plane..(bc + 1) * plane];
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let gv = g[bc * oplane + oy * d.ow + ox] * inv;
                for wy in 0..d.wh {
                    let iy = oy * d.sh + wy;
                    for wx in 0..d.ww {
                        dx_p[iy * d.w + ox * d.sw + wx] += gv;
                    }
                }
            }
        }
    }
}

/// C[m,n] = sum_k A[m,k] B[k,n].
pub fn matmul_nn(a: &[f64], b: &[f64], _m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        row.fill(0.0);
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (r, &bv) in row.iter_mut().zip(b_row) {
                *r += av * bv;
            }
        }
    });
}

/// C[m,n] += sum_k A[m,k] B[n,k]  (B transposed). Accumulates into `out`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let _ = m;
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, r) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *r += a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum::<f64>();
        }
    });
}

/// C[m,n] = sum_k A[k,m] B[k,n]  (A transposed). Accumulates into `out`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (r, &bv) in row.iter_mut().zip(b_row) {
                *r += av * bv;
            }
        }
    });
}

/// Attention projection: out[b,m,y,x] = sum_c w[m,c] f[b,c,y,x].
pub fn project_channels_forward(
    w: &[f64],
    f: &[f64],
    _batch: usize,
    m: usize,
    c: usize,
    plane: usize,
    out: &mut [f64],
) {
    out.par_chunks_mut(m * plane)
        .zip(f.par_chunks(c * plane))
        .for_each(|(out_b, f_b)| {
            for mi in 0..m {
                let o = &mut out_b[mi * plane..(mi + 1) * plane];
                o.fill(0.0);
                for ci in 0..c {
                    let wv = w[mi * c + ci];
                    if wv == 0.0 {
                        continue;
                    }
                    let f_c = &f_b[ci * plane..(ci + 1) * plane];
                    for (ov, &fv) in o.iter_mut().zip(f_c) {
                        *ov += wv * fv;
                    }
                }
            }
        });
}

/// dW[m,c] += sum_{b,y,x} g[b,m,y,x] f[b,c,y,x]; dF[b,c,y,x] += sum_m w[m,c] g[b,m,y,x].
pub fn project_channels_backward(
    g: &[f64],
    w: &[f64],
    f: &[f64],
    batch: usize,
    m: usize,
    c: usize,
    plane: usize,
    dw: Option<&mut [f64]>,
    df: Option<&mut [f64]>,
) {
    if let Some(dw) = dw {
        dw.par_chunks_mut(c).enumerate().for_each(|(mi, dw_m)| {
            for b in 0..batch {
                let g_m = &g[(b * m + mi) * plane..(b * m + mi + 1) * plane];
                for (ci, d) in dw_m.iter_mut().enumerate() {
                    let f_c = &f[(b * c + ci) * plane..(b * c + ci + 1) * plane];
                    *d += g_m.iter().zip(f_c).map(|(&gv, &fv)| gv * fv).sum::<f64>();
                }
            }
        });
    }
    if let Some(df) = df {
        df.par_chunks_mut(c * plane)
            .zip(g.par_chunks(m * plane))
            .for_each(|(df_b, g_b)| {
                for mi in 0..m {
                    let g_m = &g_b[mi * plane..(mi + 1) * plane];
                    for ci in 0..c {
                        let wv = w[mi * c + ci];
                        if wv == 0.0 {
                            continue;
                        }
                        let df_c = &mut df_b[ci * plane..(ci + 1) * plane];
                        for (d, &gv) in df_c.iter_mut().zip(g_m) {
                            *d += wv * gv;
                        }
                    }
                }
            });
    }
}

/// Weighted global average pooling: out[b,m,c] = (1/plane) sum_p a[b,m,p] f[b,c,p].
pub fn weighted_gap_forward(
    a: &[f64],
    f: &[f64],
    _batch: usize,
    m: usize,
    c: usize,
    plane: usize,
    out: &mut [f64],
) {
    let inv = 1.0 / plane as f64;
    out.par_chunks_mut(m * c)
        .zip(a.par_chunks(m * plane).zip(f.par_chunks(c * plane)))
        .for_each(|(out_b, (a_b, f_b))| {
            for mi in 0..m {
                let a_m = &a_b[mi * plane..(mi + 1) * plane];
                for ci in 0..c {
                    let f_c = &f_b[ci * plane..(ci + 1) * plane];
                    out_b[mi * c + ci] =
                        inv * a_m.iter().zip(f_c).map(|(&av, &fv)| av * fv).sum::<f64>();
                }
            }
        });
}

/// dA[b,m,p] += (1/plane) sum_c g[b,m,c] f[b,c,p]; dF[b,c,p] += (1/plane) sum_m g[b,m,c] a[b,m,p].
pub fn weighted_gap_backward(
    g: &[f64],
    a: &[f64],
    f: &[f64],
    _batch: usize,
    m: usize,
    c: usize,
    plane: usize,
    da: Option<&mut [f64]>,
    df: Option<&mut [f64]>,
) {
    let inv = 1.0 / plane as f64;
    if let Some(da) = da {
        da.par_chunks_mut(m * plane)
            .zip(g.par_chunks(m * c).zip(f.par_chunks(c * plane)))
            .for_each(|(da_b, (g_b, f_b))| {
                for mi in 0..m {
                    let da_m = &mut da_b[mi * plane..(mi + 1) * plane];
                    for ci in 0..c {
                        let gv = g_b[mi * c + ci] * inv;
                        if gv == 0.0 {
                            continue;
                        }
                        let f_c = &f_b[ci * plane..(ci + 1) * plane];
                        for (d, &fv) in da_m.iter_mut().zip(f_c) {
                            *d += gv * fv;
                        }
                    }
                }
            });
    }
    if let Some(df) = df {
        df.par_chunks_mut(c * plane)
            .zip(g.par_chunks(m * c).zip(a.par_chunks(m * plane)))
            .for_each(|(df_b, (g_b, a_b))| {
                for mi in 0..m {
                    let a_m = &a_b[mi * plane..(mi + 1) * plane];
                    for ci in 0..c {
                        let gv = g_b[mi * c + ci] * inv;
                        if gv == 0.0 {
                            continue;
                        }
                        let df_c = &mut df_b[ci * plane..(ci + 1) * plane];
                        for (d, &av) in df_c.iter_mut().zip(a_m) {
                            *d += gv * av;
                        }
                    }
                }
            });
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softplus ln(1 + e^x) = max(x,0) + ln(1 + e^{-|x|}).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
