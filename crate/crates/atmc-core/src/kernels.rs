//! Low-level compute kernels: GEMM variants, im2col/col2im, max pooling.
//!
//! All kernels accumulate into their output slice and use a fixed reduction
//! order (ascending over the shared dimension). Parallel paths split work by
//! disjoint output rows only, so results are bit-identical for any worker
//! count.

use rayon::prelude::*;

use crate::tensor::Element;

/// Work threshold below which GEMMs stay single-threaded.
const PAR_FLOPS: usize = 1 << 19;

/// out[m,n] += a[m,p] * b[p,n]
pub fn mm_nn_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, p: usize, n: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |out_row: &mut [E], i: usize| {
        let a_row = &a[i * p..(i + 1) * p];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_il * bv;
            }
        }
    };
    if m * n * p >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(r, i));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(r, i);
        }
    }
}

/// out[m,n] += a[m,p] * b[n,p]^T  (b stored row-major as [n,p])
pub fn mm_nt_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, p: usize, n: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * n);
    let row = |out_row: &mut [E], i: usize| {
        let a_row = &a[i * p..(i + 1) * p];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * p..(j + 1) * p];
            let mut acc = E::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    };
    if m * n * p >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(r, i));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(r, i);
        }
    }
}

/// out[m,n] += a[p,m]^T * b[p,n]  (a stored row-major as [p,m])
pub fn mm_tn_acc<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, p: usize, n: usize) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |out_row: &mut [E], i: usize| {
        for l in 0..p {
            let a_li = a[l * m + i];
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_li * bv;
            }
        }
    };
    if m * n * p >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(r, i));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(r, i);
        }
    }
}

/// Output spatial size of a convolution/pool along one axis, if positive.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Lower one sample [C,H,W] into patch columns [C*kh*kw, OH*OW].
/// Row index is c*kh*kw + ki*kw + kj; column index is oh*OW + ow.
#[allow(clippy::too_many_arguments)]
pub fn im2col_sample<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let ospatial = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let row = &mut cols[r * ospatial..(r + 1) * ospatial];
                for oi in 0..oh {
                    let yi = (oi * stride + ki) as isize - pad as isize;
                    let out_row = &mut row[oi * ow..(oi + 1) * ow];
                    if yi < 0 || yi as usize >= h {
                        for v in out_row.iter_mut() {
                            *v = E::zero();
                        }
                        continue;
                    }
                    let src = &plane[yi as usize * w..(yi as usize + 1) * w];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let xj = (oj * stride + kj) as isize - pad as isize;
                        *v = if xj < 0 || xj as usize >= w {
                            E::zero()
                        } else {
                            src[xj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of patch-column gradients back to the input layout.
#[allow(clippy::too_many_arguments)]
pub fn col2im_sample<E: Element>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [E],
) {
    debug_assert_eq!(dx.len(), c * h * w);
    let ospatial = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let row = &cols[r * ospatial..(r + 1) * ospatial];
                for oi in 0..oh {
                    let yi = (oi * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi as usize >= h {
                        continue;
                    }
                    let dst = &mut plane[yi as usize * w..(yi as usize + 1) * w];
                    for oj in 0..ow {
                        let xj = (oj * stride + kj) as isize - pad as isize;
                        if xj >= 0 && (xj as usize) < w {
                            dst[xj as usize] = dst[xj as usize] + row[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over [N,C,H,W]; ties take the first element in scan order
/// (row-major within the window). Returns flat argmax indices into `x`.
#[allow(clippy::too_many_arguments)]
pub fn maxpool_forward<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
    out: &mut [E],
    argmax: &mut [u32],
) {
    debug_assert_eq!(out.len(), n * c * oh * ow);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let obase = (ni * c + ci) * oh * ow;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = x[base + oi * s * w + oj * s];
                    let mut best_idx = base + oi * s * w + oj * s;
                    for ki in 0..k {
                        for kj in 0..k {
                            let idx = base + (oi * s + ki) * w + (oj * s + kj);
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[obase + oi * ow + oj] = best;
                    argmax[obase + oi * ow + oj] = best_idx as u32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm_ref(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..p {
                    c[i * n + j] += a[i * p + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let (m, p, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * p).map(|_| rng.random::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..p * n).map(|_| rng.random::<f64>() - 0.5).collect();
        let want = mm_ref(&a, &b, m, p, n);

        let mut c = vec![0.0; m * n];
        mm_nn_acc(&a, &b, &mut c, m, p, n);
        assert_eq!(c, want);

        // b^T stored as [n,p]
        let mut bt = vec![0.0; n * p];
        for l in 0..p {
            for j in 0..n {
                bt[j * p + l] = b[l * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        mm_nt_acc(&a, &bt, &mut c, m, p, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // a^T stored as [p,m]
        let mut at = vec![0.0; p * m];
        for i in 0..m {
            for l in 0..p {
                at[l * m + i] = a[i * p + l];
            }
        }
        let mut c = vec![0.0; m * n];
        mm_tn_acc(&at, &b, &mut c, m, p, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_identity_kernel() {
        // 1x1 kernel: columns are just the flattened input.
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut cols = vec![0.0; 9];
        im2col_sample(&x, 1, 3, 3, 1, 1, 1, 0, 3, 3, &mut cols);
        assert_eq!(cols, x);
    }

    #[test]
    fn conv_out_size_rejects_degenerate() {
        assert_eq!(conv_out_size(3, 5, 1, 0), None);
        assert_eq!(conv_out_size(28, 5, 1, 0), Some(24));
        assert_eq!(conv_out_size(12, 2, 2, 0), Some(6));
    }
}
