//! Dense compute kernels behind the tape primitives.
//!
//! Everything here is plain slice arithmetic on row-major buffers; the tape
//! layer owns shape checking. Convolutions are lowered to im2col + matmul so
//! the three matmul variants carry nearly all of the FLOPs.

use super::Scalar;

/// c += a[m,k] @ b[k,n]
pub fn matmul_nn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &ail) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + ail * bv;
            }
        }
    }
}

pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_nn_acc(a, b, &mut c, m, k, n);
    c
}

/// c += a[m,k] @ b[n,k]^T  (row-by-row dot products)
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *cv = *cv + acc;
        }
    }
}

pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_nt_acc(a, b, &mut c, m, k, n);
    c
}

/// c += a[k,m]^T @ b[k,n]
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for (i, &ali) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + ali * bv;
            }
        }
    }
}

pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_tn_acc(a, b, &mut c, m, k, n);
    c
}

/// y += 3x3-filtered x (zero same-padding, stride 1): one input plane
/// accumulated into one output plane with taps t[3u + v].
fn conv_plane_acc<S: Scalar>(x: &[S], y: &mut [S], h: usize, w: usize, t: &[S]) {
    debug_assert!(w >= 2 && t.len() == 9);
    for i in 0..h {
        let y_row = &mut y[i * w..(i + 1) * w];
        for u in 0..3usize {
            let si = i + u; // source row index + 1
            if si == 0 || si > h {
                continue;
            }
            let src = &x[(si - 1) * w..si * w];
            let (t0, t1, t2) = (t[u * 3], t[u * 3 + 1], t[u * 3 + 2]);
            y_row[0] = y_row[0] + t1 * src[0] + t2 * src[1];
            for j in 1..w - 1 {
                y_row[j] = y_row[j] + t0 * src[j - 1] + t1 * src[j] + t2 * src[j + 1];
            }
            y_row[w - 1] = y_row[w - 1] + t0 * src[w - 2] + t1 * src[w - 1];
        }
    }
}

/// gw[3u + v] += sum_ij gy[i,j] * x[i+u-1, j+v-1]: the per-tap correlation
/// dots behind the kernel gradient, for one (input, cotangent) plane pair.
fn conv_plane_wgrad<S: Scalar>(x: &[S], gy: &[S], h: usize, w: usize, gw: &mut [S]) {
    debug_assert!(w >= 2 && gw.len() == 9);
    for i in 0..h {
        let g_row = &gy[i * w..(i + 1) * w];
        for u in 0..3usize {
            let si = i + u;
            if si == 0 || si > h {
                continue;
            }
            let src = &x[(si - 1) * w..si * w];
            let mut a0 = S::zero();
            let mut a1 = S::zero();
            let mut a2 = S::zero();
            for j in 1..w - 1 {
                let g = g_row[j];
                a0 = a0 + g * src[j - 1];
                a1 = a1 + g * src[j];
                a2 = a2 + g * src[j + 1];
            }
            a1 = a1 + g_row[0] * src[0] + g_row[w - 1] * src[w - 1];
            a2 = a2 + g_row[0] * src[1];
            a0 = a0 + g_row[w - 1] * src[w - 2];
            gw[u * 3] = gw[u * 3] + a0;
            gw[u * 3 + 1] = gw[u * 3 + 1] + a1;
            gw[u * 3 + 2] = gw[u * 3 + 2] + a2;
        }
    }
}

/// Accumulates row `i` of a 3x3-filtered plane into `acc`, all three tap
/// rows fused so the strip stays in registers across the channel loop.
#[inline(always)]
fn conv_row_acc_fixed<S: Scalar, const W: usize>(
    plane: &[S],
    t: &[S],
    i: usize,
    h: usize,
    acc: &mut [S; W],
) {
    for u in 0..3usize {
        let si = i + u;
        if si == 0 || si > h {
            continue;
        }
        let src = &plane[(si - 1) * W..si * W];
        let (t0, t1, t2) = (t[u * 3], t[u * 3 + 1], t[u * 3 + 2]);
        acc[0] = acc[0] + t1 * src[0] + t2 * src[1];
        for j in 1..W - 1 {
            acc[j] = acc[j] + t0 * src[j - 1] + t1 * src[j] + t2 * src[j + 1];
        }
        acc[W - 1] = acc[W - 1] + t0 * src[W - 2] + t1 * src[W - 1];
    }
}

/// conv2d specialized to a compile-time plane width: for each output row,
/// one register strip accumulates every input channel before a single store.
fn conv2d_fixed<S: Scalar, const W: usize>(
    x: &[S],
    w: &[S],
    y: &mut [S],
    b: usize,
    ch: usize,
    h: usize,
    k: usize,
) {
    let hw = h * W;
    for img in 0..b {
        let xi = &x[img * ch * hw..(img + 1) * ch * hw];
        for kk in 0..k {
            let yk = &mut y[(img * k + kk) * hw..(img * k + kk + 1) * hw];
            let wk = &w[kk * ch * 9..(kk + 1) * ch * 9];
            for i in 0..h {
                let mut acc = [S::zero(); W];
                for c in 0..ch {
                    conv_row_acc_fixed::<S, W>(
                        &xi[c * hw..(c + 1) * hw],
                        &wk[c * 9..c * 9 + 9],
                        i,
                        h,
                        &mut acc,
                    );
                }
                yk[i * W..(i + 1) * W].copy_from_slice(&acc);
            }
        }
    }
}

/// Input-gradient twin of [`conv2d_fixed`]; `wt` holds 180-degree-rotated
/// taps transposed to `[c][k][9]` so the inner loop reads contiguously.
fn conv2d_igrad_fixed<S: Scalar, const W: usize>(
    gy: &[S],
    wt: &[S],
    gx: &mut [S],
    b: usize,
    ch: usize,
    h: usize,
    k: usize,
) {
    let hw = h * W;
    for img in 0..b {
        let gyi = &gy[img * k * hw..(img + 1) * k * hw];
        for c in 0..ch {
            let gxc = &mut gx[(img * ch + c) * hw..(img * ch + c + 1) * hw];
            let wc = &wt[c * k * 9..(c + 1) * k * 9];
            for i in 0..h {
                let mut acc = [S::zero(); W];
                for kk in 0..k {
                    conv_row_acc_fixed::<S, W>(
                        &gyi[kk * hw..(kk + 1) * hw],
                        &wc[kk * 9..kk * 9 + 9],
                        i,
                        h,
                        &mut acc,
                    );
                }
                gxc[i * W..(i + 1) * W].copy_from_slice(&acc);
            }
        }
    }
}

/// Weight-gradient twin: nine vector accumulators per (k, c) pair, reduced
/// horizontally once per plane pair.
fn conv2d_wgrad_fixed<S: Scalar, const W: usize>(
    x: &[S],
    gy: &[S],
    gw: &mut [S],
    b: usize,
    ch: usize,
    h: usize,
    k: usize,
) {
    let hw = h * W;
    for img in 0..b {
        let xi = &x[img * ch * hw..(img + 1) * ch * hw];
        let gyi = &gy[img * k * hw..(img + 1) * k * hw];
        for kk in 0..k {
            let gyp = &gyi[kk * hw..(kk + 1) * hw];
            for c in 0..ch {
                let xp = &xi[c * hw..(c + 1) * hw];
                let mut acc = [[S::zero(); W]; 9];
                for i in 0..h {
                    let g_row = &gyp[i * W..(i + 1) * W];
                    for u in 0..3usize {
                        let si = i + u;
                        if si == 0 || si > h {
                            continue;
                        }
                        let src = &xp[(si - 1) * W..si * W];
                        let a = &mut acc[u * 3..u * 3 + 3];
                        for j in 1..W {
                            a[0][j] = a[0][j] + g_row[j] * src[j - 1];
                        }
                        for j in 0..W {
                            a[1][j] = a[1][j] + g_row[j] * src[j];
                        }
                        for j in 0..W - 1 {
                            a[2][j] = a[2][j] + g_row[j] * src[j + 1];
                        }
                    }
                }
                let out = &mut gw[(kk * ch + c) * 9..(kk * ch + c) * 9 + 9];
                for (o, strip) in out.iter_mut().zip(&acc) {
                    let mut sum = S::zero();
                    for &v in strip.iter() {
                        sum = sum + v;
                    }
                    *o = *o + sum;
                }
            }
        }
    }
}

/// y[b,k,:,:] = w[k,c,3,3] * x[b,c,:,:], zero same-padding, stride 1.
pub fn conv2d<S: Scalar>(x: &[S], w: &[S], b: usize, ch: usize, h: usize, wd: usize, k: usize) -> Vec<S> {
    let hw = h * wd;
    let mut y = vec![S::zero(); b * k * hw];
    match wd {
        64 => conv2d_fixed::<S, 64>(x, w, &mut y, b, ch, h, k),
        32 => conv2d_fixed::<S, 32>(x, w, &mut y, b, ch, h, k),
        16 => conv2d_fixed::<S, 16>(x, w, &mut y, b, ch, h, k),
        8 => conv2d_fixed::<S, 8>(x, w, &mut y, b, ch, h, k),
        _ => {
            for img in 0..b {
                for kk in 0..k {
                    let (head, y_plane) = y.split_at_mut((img * k + kk) * hw);
                    let _ = head;
                    let y_plane = &mut y_plane[..hw];
                    for c in 0..ch {
                        let x_plane = &x[(img * ch + c) * hw..(img * ch + c + 1) * hw];
                        conv_plane_acc(x_plane, y_plane, h, wd, &w[(kk * ch + c) * 9..(kk * ch + c) * 9 + 9]);
                    }
                }
            }
        }
    }
    y
}

/// Gradient of conv2d w.r.t. its input: correlation of gy with the
/// 180-degree-rotated kernel (tap order reversed).
pub fn conv2d_input_grad<S: Scalar>(
    gy: &[S],
    w: &[S],
    b: usize,
    ch: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<S> {
    let hw = h * wd;
    let mut gx = vec![S::zero(); b * ch * hw];
    // flip taps and transpose to [c][k][9] up front
    let mut wt = vec![S::zero(); k * ch * 9];
    for kk in 0..k {
        for c in 0..ch {
            let src = &w[(kk * ch + c) * 9..(kk * ch + c) * 9 + 9];
            let dst = &mut wt[(c * k + kk) * 9..(c * k + kk) * 9 + 9];
            for (d, &v) in dst.iter_mut().zip(src.iter().rev()) {
                *d = v;
            }
        }
    }
    match wd {
        64 => conv2d_igrad_fixed::<S, 64>(gy, &wt, &mut gx, b, ch, h, k),
        32 => conv2d_igrad_fixed::<S, 32>(gy, &wt, &mut gx, b, ch, h, k),
        16 => conv2d_igrad_fixed::<S, 16>(gy, &wt, &mut gx, b, ch, h, k),
        8 => conv2d_igrad_fixed::<S, 8>(gy, &wt, &mut gx, b, ch, h, k),
        _ => {
            for img in 0..b {
                for c in 0..ch {
                    let gx_plane = &mut gx[(img * ch + c) * hw..(img * ch + c + 1) * hw];
                    for kk in 0..k {
                        let gy_plane = &gy[(img * k + kk) * hw..(img * k + kk + 1) * hw];
                        conv_plane_acc(gy_plane, gx_plane, h, wd, &wt[(c * k + kk) * 9..(c * k + kk) * 9 + 9]);
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of conv2d w.r.t. the kernel, summed over the batch.
pub fn conv2d_weight_grad<S: Scalar>(
    x: &[S],
    gy: &[S],
    b: usize,
    ch: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<S> {
    let hw = h * wd;
    let mut gw = vec![S::zero(); k * ch * 9];
    match wd {
        64 => conv2d_wgrad_fixed::<S, 64>(x, gy, &mut gw, b, ch, h, k),
        32 => conv2d_wgrad_fixed::<S, 32>(x, gy, &mut gw, b, ch, h, k),
        16 => conv2d_wgrad_fixed::<S, 16>(x, gy, &mut gw, b, ch, h, k),
        8 => conv2d_wgrad_fixed::<S, 8>(x, gy, &mut gw, b, ch, h, k),
        _ => {
            for img in 0..b {
                for kk in 0..k {
                    let gy_plane = &gy[(img * k + kk) * hw..(img * k + kk + 1) * hw];
                    for c in 0..ch {
                        let x_plane = &x[(img * ch + c) * hw..(img * ch + c + 1) * hw];
                        conv_plane_wgrad(x_plane, gy_plane, h, wd, &mut gw[(kk * ch + c) * 9..(kk * ch + c) * 9 + 9]);
                    }
                }
            }
        }
    }
    gw
}

/// 2x2 stride-2 max pooling. Returns the pooled values and, per output
/// element, the flat index of the winning input element (first maximum in
/// scan order on ties).
pub fn max_pool2x2<S: Scalar>(x: &[S], b: usize, ch: usize, h: usize, w: usize) -> (Vec<S>, Vec<u32>) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(b * ch * oh * ow);
    let mut idx = Vec::with_capacity(b * ch * oh * ow);
    for plane in 0..b * ch {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + (2 * i) * w + 2 * j;
                let mut bv = x[best];
                for (du, dv) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let p = base + (2 * i + du) * w + 2 * j + dv;
                    if x[p] > bv {
                        bv = x[p];
                        best = p;
                    }
                }
                y.push(bv);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}

/// Row-wise log-softmax over a [rows, cols] matrix.
pub fn log_softmax<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut y = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = S::zero();
        for &v in row {
            sum = sum + (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for (o, &v) in y[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    y
}
