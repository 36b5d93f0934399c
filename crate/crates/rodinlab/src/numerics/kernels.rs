//! Pure compute kernels shared by the autodiff graph and the plain inference
//! paths. No allocation tricks, just cache-friendly loops; the `ikj` matmul
//! order and contiguous inner loops are what the whole pipeline's speed
//! hangs on.

use super::Real;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// C[m,k] = A[m,n] * B[k,n]^T
pub fn matmul_a_bt(a: &[Real], b: &[Real], m: usize, n: usize, k: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn matmul_at_b(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub fn conv_out_extent(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Unfold an HWC image into rows of receptive-field patches, zero padded.
/// Output is `[oh*ow, kh*kw*cin]`, column order (kh, kw, cin) to match a
/// kernel reshaped as `[kh*kw*cin, cout]`.
pub fn im2col(
    x: &[Real],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<Real> {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let patch = kh * kw * cin;
    let mut cols = vec![0.0; oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize * w) + ix as usize) * cin;
                    let dst = (ky * kw + kx) * cin;
                    row[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

/// Transpose of `im2col`: scatter-add patch-row gradients back into the image.
pub fn col2im_add(
    dcols: &[Real],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [Real],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let patch = kh * kw * cin;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dcols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = ((iy as usize * w) + ix as usize) * cin;
                    let src = (ky * kw + kx) * cin;
                    for c in 0..cin {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// One bilinear tap along a normalized axis: grid nodes sit at pixel centers,
/// borders clamp. Returns (lo index, hi index, hi weight).
pub fn bilinear_tap(x01: Real, n: usize) -> (usize, usize, Real) {
    let g = (x01 * n as Real - 0.5).clamp(0.0, (n - 1) as Real);
    let i0 = g.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, g - i0 as Real)
}

/// Sample an `[h,w,c]` plane at `uvs = [(x,y); npts]` (x along W, y along H).
pub fn bilinear_gather(
    plane: &[Real],
    h: usize,
    w: usize,
    c: usize,
    uvs: &[Real],
) -> Vec<Real> {
    let npts = uvs.len() / 2;
    let mut out = vec![0.0; npts * c];
    for p in 0..npts {
        let (c0, c1, fx) = bilinear_tap(uvs[2 * p], w);
        let (r0, r1, fy) = bilinear_tap(uvs[2 * p + 1], h);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w01 = fx * (1.0 - fy);
        let w10 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let o = &mut out[p * c..(p + 1) * c];
        let s00 = (r0 * w + c0) * c;
        let s01 = (r0 * w + c1) * c;
        let s10 = (r1 * w + c0) * c;
        let s11 = (r1 * w + c1) * c;
        for ch in 0..c {
            o[ch] = w00 * plane[s00 + ch]
                + w01 * plane[s01 + ch]
                + w10 * plane[s10 + ch]
                + w11 * plane[s11 + ch];
        }
    }
    out
}

/// Transpose of `bilinear_gather`: accumulate output grads into the four
/// touched texels of each point.
pub fn bilinear_scatter_add(
    dout: &[Real],
    h: usize,
    w: usize,
    c: usize,
    uvs: &[Real],
    dplane: &mut [Real],
) {
    let npts = uvs.len() / 2;
    for p in 0..npts {
        let (c0, c1, fx) = bilinear_tap(uvs[2 * p], w);
        let (r0, r1, fy) = bilinear_tap(uvs[2 * p + 1], h);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w01 = fx * (1.0 - fy);
        let w10 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let d = &dout[p * c..(p + 1) * c];
        let s00 = (r0 * w + c0) * c;
        let s01 = (r0 * w + c1) * c;
        let s10 = (r1 * w + c0) * c;
        let s11 = (r1 * w + c1) * c;
        for ch in 0..c {
            dplane[s00 + ch] += w00 * d[ch];
            dplane[s01 + ch] += w01 * d[ch];
            dplane[s10 + ch] += w10 * d[ch];
            dplane[s11 + ch] += w11 * d[ch];
        }
    }
}

/// Center-aligned bilinear resize of an `[h,w,c]` map. Equal extents are an
/// exact copy, so a no-op resize is bitwise identity.
pub fn resize_bilinear(
    x: &[Real],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<Real> {
    if oh == h && ow == w {
        return x.to_vec();
    }
    let mut out = vec![0.0; oh * ow * c];
    let sy = h as Real / oh as Real;
    let sx = w as Real / ow as Real;
    for r in 0..oh {
        let gy = ((r as Real + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as Real);
        let r0 = gy.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let fy = gy - r0 as Real;
        for col in 0..ow {
            let gx = ((col as Real + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as Real);
            let c0 = gx.floor() as usize;
            let c1 = (c0 + 1).min(w - 1);
            let fx = gx - c0 as Real;
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w01 = fx * (1.0 - fy);
            let w10 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            let o = &mut out[(r * ow + col) * c..(r * ow + col + 1) * c];
            let s00 = (r0 * w + c0) * c;
            let s01 = (r0 * w + c1) * c;
            let s10 = (r1 * w + c0) * c;
            let s11 = (r1 * w + c1) * c;
            for ch in 0..c {
                o[ch] = w00 * x[s00 + ch]
                    + w01 * x[s01 + ch]
                    + w10 * x[s10 + ch]
                    + w11 * x[s11 + ch];
            }
        }
    }
    out
}

/// Transpose of `resize_bilinear`.
pub fn resize_bilinear_back(
    dout: &[Real],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    dx: &mut [Real],
) {
    if oh == h && ow == w {
        for (d, g) in dx.iter_mut().zip(dout) {
            *d += g;
        }
        return;
    }
    let sy = h as Real / oh as Real;
    let sx = w as Real / ow as Real;
    for r in 0..oh {
        let gy = ((r as Real + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as Real);
        let r0 = gy.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let fy = gy - r0 as Real;
        for col in 0..ow {
            let gx = ((col as Real + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as Real);
            let c0 = gx.floor() as usize;
            let c1 = (c0 + 1).min(w - 1);
            let fx = gx - c0 as Real;
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w01 = fx * (1.0 - fy);
            let w10 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            let d = &dout[(r * ow + col) * c..(r * ow + col + 1) * c];
            let s00 = (r0 * w + c0) * c;
            let s01 = (r0 * w + c1) * c;
            let s10 = (r1 * w + c0) * c;
            let s11 = (r1 * w + c1) * c;
            for ch in 0..c {
                dx[s00 + ch] += w00 * d[ch];
                dx[s01 + ch] += w01 * d[ch];
                dx[s10 + ch] += w10 * d[ch];
                dx[s11 + ch] += w11 * d[ch];
            }
        }
    }
}

/// Normalize each channel group of an `[h,w,c]` map over (H, W, group
/// channels). Returns the normalized map and per-group (mean, inv_std).
pub fn group_norm_fwd(
    x: &[Real],
    h: usize,
    w: usize,
    c: usize,
    groups: usize,
    eps: Real,
) -> (Vec<Real>, Vec<(Real, Real)>) {
    let cs = c / groups;
    let m = (h * w * cs) as Real;
    let mut out = vec![0.0; x.len()];
    let mut stats = Vec::with_capacity(groups);
    for g in 0..groups {
        let clo = g * cs;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for hw in 0..h * w {
            for ch in clo..clo + cs {
                let v = x[hw * c + ch];
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum / m;
        let var = (sq / m - mean * mean).max(0.0);
        let inv_std = 1.0 / (var + eps).sqrt();
        for hw in 0..h * w {
            for ch in clo..clo + cs {
                out[hw * c + ch] = (x[hw * c + ch] - mean) * inv_std;
            }
        }
        stats.push((mean, inv_std));
    }
    (out, stats)
}

/// Backward for `group_norm_fwd`: dx = s * (dy - mean(dy) - xhat * mean(dy*xhat))
/// with means over each group.
pub fn group_norm_bwd(
    dy: &[Real],
    y: &[Real], // normalized output (xhat)
    h: usize,
    w: usize,
    c: usize,
    groups: usize,
    stats: &[(Real, Real)],
    dx: &mut [Real],
) {
    let cs = c / groups;
    let m = (h * w * cs) as Real;
    for g in 0..groups {
        let clo = g * cs;
        let (_, inv_std) = stats[g];
        let mut mean_dy = 0.0;
        let mut mean_dy_xhat = 0.0;
        for hw in 0..h * w {
            for ch in clo..clo + cs {
                let i = hw * c + ch;
                mean_dy += dy[i];
                mean_dy_xhat += dy[i] * y[i];
            }
        }
        mean_dy /= m;
        mean_dy_xhat /= m;
        for hw in 0..h * w {
            for ch in clo..clo + cs {
                let i = hw * c + ch;
                dx[i] += inv_std * (dy[i] - mean_dy - y[i] * mean_dy_xhat);
            }
        }
    }
}

/// Row-wise softmax of an `[n, m]` matrix, max-shifted for stability.
pub fn softmax_rows(x: &[Real], n: usize, m: usize) -> Vec<Real> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let mx = row.iter().fold(Real::NEG_INFINITY, |a, &b| a.max(b));
        let orow = &mut out[i * m..(i + 1) * m];
        let mut z = 0.0;
        for j in 0..m {
            let e = (row[j] - mx).exp();
            orow[j] = e;
            z += e;
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub fn softplus(x: Real) -> Real {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
