//! Prime-field parameters and modular helpers.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default modulus: the Mersenne prime 2^31 - 1. Large enough that an
/// 8-bit-by-8-bit dot product of length up to 2^15 never wraps, so field
/// results can be read back as exact integers.
pub const DEFAULT_PRIME: u64 = (1 << 31) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldParams {
    pub p: u64,
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    if n % 2 == 0 {
        return n == 2;
    }
    let mut d = 3;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 2;
    }
    true
}

impl FieldParams {
    /// Any prime works for the Freivalds check itself.
    pub fn new(p: u64) -> Result<Self> {
        if !is_prime(p) {
            return Err(Error::invalid(format!("{p} is not prime")));
        }
        Ok(FieldParams { p })
    }

    /// The masked-offload identity needs `p > 2^8`; exact integer readback
    /// of a dot product of `terms` 8-bit values needs `terms * 255^2 < p`.
    pub fn check_otp(&self, terms: usize) -> Result<()> {
        if self.p <= 256 {
            return Err(Error::invalid(format!(
                "modulus {} too small for 8-bit masking (need p > 2^8)",
                self.p
            )));
        }
        if (terms as u64).saturating_mul(255 * 255) >= self.p {
            return Err(Error::invalid(format!(
                "dot products of length {terms} can wrap modulus {}",
                self.p
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        (a + b) % self.p
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        (a + self.p - b % self.p) % self.p
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        // p < 2^32, operands reduced: the product fits u64.
        (a % self.p) * (b % self.p) % self.p
    }

    /// `C[m,n] = A[m,k] * B[k,n] mod p`, row-major.
    pub fn matmul(&self, a: &[u64], b: &[u64], m: usize, k: usize, n: usize) -> Vec<u64> {
        let mut c = vec![0u64; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = a[i * k + l] % self.p;
                if av == 0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = (*cv + av * (bv % self.p)) % self.p;
                }
            }
        }
        c
    }

    /// Dot product mod p.
    pub fn dot(&self, a: &[u64], b: &[u64]) -> u64 {
        a.iter()
            .zip(b)
            .fold(0u64, |acc, (&x, &y)| (acc + self.mul(x, y)) % self.p)
    }
}

impl Default for FieldParams {
    fn default() -> Self {
        FieldParams { p: DEFAULT_PRIME }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primality_gate() {
        assert!(FieldParams::new(5).is_ok());
        assert!(FieldParams::new(DEFAULT_PRIME).is_ok());
        assert!(FieldParams::new(9).is_err());
        assert!(FieldParams::new(1).is_err());
    }

    #[test]
    fn otp_gate_needs_large_prime() {
        assert!(FieldParams::new(5).unwrap().check_otp(1).is_err());
        assert!(FieldParams::new(257).unwrap().check_otp(1).is_err()); // 255^2 > 257
        assert!(FieldParams::default().check_otp(1 << 15).is_ok());
        assert!(FieldParams::default().check_otp(1 << 16).is_err());
    }

    #[test]
    fn modular_ops() {
        let fp = FieldParams::new(257).unwrap();
        assert_eq!(fp.add(5, 250), 255);
        assert_eq!(fp.add(10, 251), 4);
        assert_eq!(fp.sub(4, 251), 10);
        assert_eq!(fp.mul(256, 256), 1); // (-1)^2 mod 257
    }
}
