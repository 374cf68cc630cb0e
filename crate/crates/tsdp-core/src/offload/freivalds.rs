//! Freivalds verification of offloaded matrix products.
//!
//! For a claimed `C = W * H` over `Z_p`, the trusted side samples `s` over
//! the output dimension, uses the offline precomputation `s~ = W^T s`, and
//! checks `s^T C == s~^T H` column by column. A wrong product survives one
//! round with probability at most `1/p`.

use crate::error::{Error, Result};
use crate::offload::field::FieldParams;
use crate::rng::Rng;
use rand::Rng as _;

/// One round's challenge: `s` (length = output rows of the product) and its
/// precomputed image `s~ = W^T s` (length = inner dimension).
#[derive(Debug, Clone)]
pub struct Challenge {
    pub s: Vec<u64>,
    pub s_tilde: Vec<u64>,
}

/// Sample a challenge for weight matrix `w` of shape `[rows, inner]`.
pub fn sample_challenge(w: &[u64], rows: usize, inner: usize, fp: &FieldParams, rng: &mut Rng) -> Challenge {
    let s: Vec<u64> = (0..rows).map(|_| rng.gen_range(0..fp.p)).collect();
    // s~ = W^T s
    let mut s_tilde = vec![0u64; inner];
    for i in 0..rows {
        let si = s[i];
        if si == 0 {
            continue;
        }
        for k in 0..inner {
            s_tilde[k] = (s_tilde[k] + fp.mul(si, w[i * inner + k])) % fp.p;
        }
    }
    Challenge { s, s_tilde }
}

/// Verify a claimed product against the input columns, one challenge per
/// round. `h` is `[inner, cols]`, `claimed` is `[rows, cols]`.
pub fn freivalds_verify(
    h: &[u64],
    claimed: &[u64],
    challenges: &[Challenge],
    cols: usize,
    fp: &FieldParams,
) -> Result<bool> {
    if cols == 0 {
        return Err(Error::invalid("verification over zero columns"));
    }
    if h.len() % cols != 0 || claimed.len() % cols != 0 {
        return Err(Error::shape(
            "freivalds operand columns",
            &[cols],
            &[h.len(), claimed.len()],
        ));
    }
    let inner = h.len() / cols;
    let rows = claimed.len() / cols;
    for ch in challenges {
        if ch.s.len() != rows || ch.s_tilde.len() != inner {
            return Err(Error::shape(
                "freivalds challenge dims",
                &[rows, inner],
                &[ch.s.len(), ch.s_tilde.len()],
            ));
        }
        for j in 0..cols {
            let mut lhs = 0u64;
            for i in 0..rows {
                lhs = (lhs + fp.mul(ch.s[i], claimed[i * cols + j])) % fp.p;
            }
            let mut rhs = 0u64;
            for k in 0..inner {
                rhs = (rhs + fp.mul(ch.s_tilde[k], h[k * cols + j])) % fp.p;
            }
            if lhs != rhs {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;

    #[test]
    fn correct_product_always_accepts() {
        let fp = FieldParams::default();
        let mut rng = derive(3, "freivalds-complete");
        for _ in 0..100 {
            let (rows, inner, cols) = (3, 5, 2);
            let w: Vec<u64> = (0..rows * inner).map(|_| rng.gen_range(0..fp.p)).collect();
            let h: Vec<u64> = (0..inner * cols).map(|_| rng.gen_range(0..fp.p)).collect();
            let c = fp.matmul(&w, &h, rows, inner, cols);
            let chs: Vec<Challenge> = (0..3)
                .map(|_| sample_challenge(&w, rows, inner, &fp, &mut rng))
                .collect();
            assert!(freivalds_verify(&h, &c, &chs, cols, &fp).unwrap());
        }
    }

    #[test]
    fn exhaustive_small_field_acceptance_is_one_fifth() {
        // p=5, 2-dim output, single column: for any non-zero corruption the
        // fraction of accepting challenge vectors s in Z_5^2 is exactly 1/5.
        let fp = FieldParams::new(5).unwrap();
        let (rows, inner, cols) = (2, 2, 1);
        let w: Vec<u64> = vec![1, 2, 3, 4];
        let h: Vec<u64> = vec![2, 3];
        let truth = fp.matmul(&w, &h, rows, inner, cols);
        for corrupt_idx in 0..rows {
            for delta in 1..5u64 {
                let mut claimed = truth.clone();
                claimed[corrupt_idx] = (claimed[corrupt_idx] + delta) % 5;
                let mut accepts = 0;
                let mut total = 0;
                for s0 in 0..5u64 {
                    for s1 in 0..5u64 {
                        let s = vec![s0, s1];
                        let s_tilde = vec![
                            (fp.mul(s0, w[0]) + fp.mul(s1, w[2])) % 5,
                            (fp.mul(s0, w[1]) + fp.mul(s1, w[3])) % 5,
                        ];
                        let ch = Challenge { s, s_tilde };
                        total += 1;
                        if freivalds_verify(&h, &claimed, &[ch], cols, &fp).unwrap() {
                            accepts += 1;
                        }
                    }
                }
                assert_eq!(total, 25);
                assert_eq!(accepts, 5, "acceptance fraction must be exactly 1/5");
            }
        }
    }

    #[test]
    fn random_corruptions_are_caught_at_large_prime() {
        let fp = FieldParams::default();
        let mut rng = derive(4, "freivalds-sound");
        use rand::Rng as _;
        let (rows, inner, cols) = (4, 6, 3);
        let w: Vec<u64> = (0..rows * inner).map(|_| rng.gen_range(0..fp.p)).collect();
        let h: Vec<u64> = (0..inner * cols).map(|_| rng.gen_range(0..fp.p)).collect();
        let truth = fp.matmul(&w, &h, rows, inner, cols);
        for _ in 0..1000 {
            let mut claimed = truth.clone();
            let idx = rng.gen_range(0..claimed.len());
            claimed[idx] = (claimed[idx] + rng.gen_range(1..fp.p)) % fp.p;
            let ch = sample_challenge(&w, rows, inner, &fp, &mut rng);
            assert!(!freivalds_verify(&h, &claimed, &[ch], cols, &fp).unwrap());
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let fp = FieldParams::default();
        let ch = Challenge {
            s: vec![1, 2],
            s_tilde: vec![1],
        };
        assert!(freivalds_verify(&[1, 2, 3], &[1, 2], &[ch], 2, &fp).is_err());
    }
}
