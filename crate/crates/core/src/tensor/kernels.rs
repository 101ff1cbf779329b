//! Raw slice kernels shared by the forward and backward passes. All of them
//! accumulate into `out` (`out += ...`) so gradients can be summed in place.

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && b.len() == n * k && out.len() == m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == k * m && b.len() == k * n && out.len() == m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Half-open range of output columns `j` for which `j + d - 1` is a valid
/// input column, with kernel offset `d` in `0..3` and zero padding of one.
#[inline]
fn tap_range(d: usize, len: usize) -> (usize, usize) {
    let lo = if d == 0 { 1 } else { 0 };
    let hi = if d == 2 { len.saturating_sub(1) } else { len };
    (lo, hi)
}

/// Depthwise 3x3 convolution, stride 1, zero padding 1.
/// `x: [c,h,w]`, `k: [c,3,3]`, `out: [c,h,w]`.
pub fn depthwise3x3(x: &[f64], k: &[f64], out: &mut [f64], c: usize, h: usize, w: usize) {
    let hw = h * w;
    for ch in 0..c {
        let xs = &x[ch * hw..(ch + 1) * hw];
        let os = &mut out[ch * hw..(ch + 1) * hw];
        for dy in 0..3 {
            let (ilo, ihi) = tap_range(dy, h);
            for dx in 0..3 {
                let kv = k[ch * 9 + dy * 3 + dx];
                if kv == 0.0 {
                    continue;
                }
                let (jlo, jhi) = tap_range(dx, w);
                for i in ilo..ihi {
                    let src = (i + dy - 1) * w;
                    let orow = &mut os[i * w + jlo..i * w + jhi];
                    let xrow = &xs[src + jlo + dx - 1..src + jhi + dx - 1];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += kv * xv;
                    }
                }
            }
        }
    }
}

/// Backward of [`depthwise3x3`]: accumulates `gx` and `gk` from `g`.
pub fn depthwise3x3_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    gx: Option<&mut [f64]>,
    gk: Option<&mut [f64]>,
    c: usize,
    h: usize,
    w: usize,
) {
    let hw = h * w;
    if let Some(gx) = gx {
        for ch in 0..c {
            let gs = &g[ch * hw..(ch + 1) * hw];
            let gxs = &mut gx[ch * hw..(ch + 1) * hw];
            for dy in 0..3 {
                let (ilo, ihi) = tap_range(dy, h);
                for dx in 0..3 {
                    let kv = k[ch * 9 + dy * 3 + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    let (jlo, jhi) = tap_range(dx, w);
                    for i in ilo..ihi {
                        let dst = (i + dy - 1) * w;
                        let grow = &gs[i * w + jlo..i * w + jhi];
                        let xrow = &mut gxs[dst + jlo + dx - 1..dst + jhi + dx - 1];
                        for (o, &gv) in xrow.iter_mut().zip(grow) {
                            *o += kv * gv;
                        }
                    }
                }
            }
        }
    }
    if let Some(gk) = gk {
        for ch in 0..c {
            let gs = &g[ch * hw..(ch + 1) * hw];
            let xs = &x[ch * hw..(ch + 1) * hw];
            for dy in 0..3 {
                let (ilo, ihi) = tap_range(dy, h);
                for dx in 0..3 {
                    let (jlo, jhi) = tap_range(dx, w);
                    let mut acc = 0.0;
                    for i in ilo..ihi {
                        let src = (i + dy - 1) * w;
                        let grow = &gs[i * w + jlo..i * w + jhi];
                        let xrow = &xs[src + jlo + dx - 1..src + jhi + dx - 1];
                        acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gk[ch * 9 + dy * 3 + dx] += acc;
                }
            }
        }
    }
}

/// Output extent of a 3x3, padding-1 convolution with the given stride.
pub fn conv_out(len: usize, stride: usize) -> usize {
    (len + 2 - 3) / stride + 1
}

/// Unfolds `x: [c,h,w]` into `[c*9, ho*wo]` columns for a 3x3, padding-1
/// convolution.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let mut cols = vec![0.0; c * 9 * ho * wo];
    for ch in 0..c {
        for dy in 0..3 {
            for dx in 0..3 {
                let row = (ch * 9 + dy * 3 + dx) * ho * wo;
                for i in 0..ho {
                    let yi = (i * stride + dy) as isize - 1;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let xj = (j * stride + dx) as isize - 1;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        cols[row + i * wo + j] = x[ch * h * w + yi as usize * w + xj as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto `gx: [c,h,w]`.
pub fn col2im(cols: &[f64], gx: &mut [f64], c: usize, h: usize, w: usize, stride: usize) {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    for ch in 0..c {
        for dy in 0..3 {
            for dx in 0..3 {
                let row = (ch * 9 + dy * 3 + dx) * ho * wo;
                for i in 0..ho {
                    let yi = (i * stride + dy) as isize - 1;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let xj = (j * stride + dx) as isize - 1;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        gx[ch * h * w + yi as usize * w + xj as usize] += cols[row + i * wo + j];
                    }
                }
            }
        }
    }
}

/// Splits a shape at `axis` into `(outer, n, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
