//! Shared low-level kernels: im2col, col2im, and a plain matmul.
//!
//! The same im2col lowering is reused by the masked-offload executor over
//! field elements, so it is generic over the scalar type.

/// Lower a `[c_in, h, w]` image into a `[c_in*k*k, oh*ow]` column matrix.
/// Out-of-bounds (padding) positions read as `T::default()`.
pub fn im2col<T: Copy + Default>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    im2col_padval(input, c_in, h, w, k, stride, pad, T::default())
}

/// `im2col` with an explicit value for padding positions. The quantized
/// field path needs this: a real-valued zero quantizes to the zero point,
/// not to field element zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col_padval<T: Copy>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    pad_value: T,
) -> Vec<T> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![pad_value; c_in * k * k * oh * ow];
    let cols = oh * ow;
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let ii = oi * stride + ki;
                        let jj = oj * stride + kj;
                        if ii >= pad && jj >= pad && ii - pad < h && jj - pad < w {
                            out[row * cols + oi * ow + oj] =
                                input[(c * h + ii - pad) * w + jj - pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add a `[c_in*k*k, oh*ow]` column-gradient back to `[c_in, h, w]`.
pub fn col2im_add(
    cols_grad: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let cols = oh * ow;
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let ii = oi * stride + ki;
                        let jj = oj * stride + kj;
                        if ii >= pad && jj >= pad && ii - pad < h && jj - pad < w {
                            out[(c * h + ii - pad) * w + jj - pad] +=
                                cols_grad[row * cols + oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `C[m,n] = A[m,k] * B[k,n]`, row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `C[m,n] = A^T[m,k] * B[k,n]` where `A` is stored as `[k, m]`.
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for l in 0..k {
        for i in 0..m {
            let av = a[l * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `C[m,n] = A[m,k] * B^T[k,n]` where `B` is stored as `[n, k]`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[j * k + l];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Numerically-stable softmax over a flat slice.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_identity_kernel() {
        // 1x1 kernel, stride 1, no pad: columns are just the flattened input.
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let cols = im2col(&x, 3, 2, 2, 1, 1, 0);
        assert_eq!(cols, x);
    }

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn col2im_inverts_im2col_without_overlap() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let cols = im2col(&x, 1, 4, 4, 2, 2, 0);
        let mut back = vec![0.0; 16];
        col2im_add(&cols, 1, 4, 4, 2, 2, 0, &mut back);
        assert_eq!(back, x);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
