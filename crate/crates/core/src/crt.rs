//! Residue number system for accumulators wider than a native ciphertext.
//!
//! Signed values in `[-offset, product - offset)` are shifted by `offset`
//! before reduction so residues stay nonnegative. Linear combinations carry
//! the offset through their constant term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::OutOfDomainPolicy;

pub const DEFAULT_MODULI: [u32; 5] = [7, 8, 9, 11, 13];
pub const MAX_MODULUS: u32 = 256;
pub const MIN_PRODUCT: u64 = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CrtError {
    #[error("moduli {a} and {b} are not coprime")]
    NotCoprime { a: u32, b: u32 },
    #[error("modulus {0} outside [2, {MAX_MODULUS}]")]
    BadModulus(u32),
    #[error("basis product {0} is too small")]
    ProductTooSmall(u64),
    #[error("{value} is outside the representable range [{lo}, {hi}]")]
    Overflow { value: i64, lo: i64, hi: i64 },
    #[error("residue {residue} at position {index} is not below modulus {modulus}")]
    InvalidResidue { index: usize, residue: u32, modulus: u32 },
    #[error("expected {expected} residues, found {found}")]
    Arity { expected: usize, found: usize },
    #[error("lookup index {value} outside table domain [{lo}, {hi}]")]
    OutOfDomain { value: i64, lo: i64, hi: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BasisSpec", into = "BasisSpec")]
pub struct CrtBasis {
    moduli: Vec<u32>,
    product: u64,
    offset: u64,
    /// `M_i * (M_i^{-1} mod m_i)` for Bezout recombination, `M_i = product / m_i`.
    coefficients: Vec<u128>,
}

#[derive(Serialize, Deserialize)]
struct BasisSpec {
    moduli: Vec<u32>,
    signed: bool,
}

impl TryFrom<BasisSpec> for CrtBasis {
    type Error = CrtError;
    fn try_from(s: BasisSpec) -> Result<Self, CrtError> {
        if s.signed {
            CrtBasis::new(&s.moduli)
        } else {
            CrtBasis::nonnegative(&s.moduli)
        }
    }
}

impl From<CrtBasis> for BasisSpec {
    fn from(b: CrtBasis) -> Self {
        BasisSpec { signed: b.offset != 0, moduli: b.moduli }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn inverse_mod(a: u64, m: u64) -> u64 {
    let (mut t, mut new_t) = (0i128, 1i128);
    let (mut r, mut new_r) = (m as i128, (a % m) as i128);
    while new_r != 0 {
        let q = r / new_r;
        (t, new_t) = (new_t, t - q * new_t);
        (r, new_r) = (new_r, r - q * new_r);
    }
    debug_assert_eq!(r, 1);
    t.rem_euclid(m as i128) as u64
}

impl CrtBasis {
    /// Signed basis with offset `product / 2`.
    pub fn new(moduli: &[u32]) -> Result<Self, CrtError> {
        Self::with_min_product(moduli, true, MIN_PRODUCT)
    }

    /// Offset-0 basis representing `[0, product)`.
    pub fn nonnegative(moduli: &[u32]) -> Result<Self, CrtError> {
        Self::with_min_product(moduli, false, MIN_PRODUCT)
    }

    /// Basis with a caller-chosen product floor, for reduced test bases.
    pub fn with_min_product(moduli: &[u32], signed: bool, min_product: u64) -> Result<Self, CrtError> {
        for &m in moduli {
            if !(2..=MAX_MODULUS).contains(&m) {
                return Err(CrtError::BadModulus(m));
            }
        }
        for (i, &a) in moduli.iter().enumerate() {
            for &b in &moduli[i + 1..] {
                if gcd(a as u64, b as u64) != 1 {
                    return Err(CrtError::NotCoprime { a, b });
                }
            }
        }
        let product: u64 = moduli.iter().map(|&m| m as u64).product();
        if product < min_product {
            return Err(CrtError::ProductTooSmall(product));
        }
        let coefficients = moduli
            .iter()
            .map(|&m| {
                let mi = product / m as u64;
                mi as u128 * inverse_mod(mi % m as u64, m as u64) as u128
            })
            .collect();
        let offset = if signed { product / 2 } else { 0 };
        Ok(Self { moduli: moduli.to_vec(), product, offset, coefficients })
    }

    pub fn moduli(&self) -> &[u32] {
        &self.moduli
    }

    pub fn product(&self) -> u64 {
        self.product
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn residue_count(&self) -> usize {
        self.moduli.len()
    }

    /// Inclusive representable range.
    pub fn range(&self) -> (i64, i64) {
        let lo = -(self.offset as i64);
        (lo, lo + self.product as i64 - 1)
    }

    /// Bits needed for the residues of modulus `i`: `ceil(log2 m_i)`.
    pub fn residue_bits(&self, i: usize) -> u32 {
        u32::BITS - (self.moduli[i] - 1).leading_zeros()
    }
}

impl Default for CrtBasis {
    fn default() -> Self {
        Self::new(&DEFAULT_MODULI).expect("default moduli are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CrtValue {
    pub residues: Vec<u32>,
}

pub fn encode(x: i64, basis: &CrtBasis) -> Result<CrtValue, CrtError> {
    let (lo, hi) = basis.range();
    if x < lo || x > hi {
        return Err(CrtError::Overflow { value: x, lo, hi });
    }
    let shifted = (x + basis.offset as i64) as u64;
    Ok(CrtValue { residues: basis.moduli.iter().map(|&m| (shifted % m as u64) as u32).collect() })
}

pub fn decode(v: &CrtValue, basis: &CrtBasis) -> Result<i64, CrtError> {
    if v.residues.len() != basis.moduli.len() {
        return Err(CrtError::Arity { expected: basis.moduli.len(), found: v.residues.len() });
    }
    let p = basis.product as u128;
    let mut acc: u128 = 0;
    for (index, ((&r, &m), &c)) in v.residues.iter().zip(&basis.moduli).zip(&basis.coefficients).enumerate() {
        if r >= m {
            return Err(CrtError::InvalidResidue { index, residue: r, modulus: m });
        }
        acc = (acc + r as u128 * c) % p;
    }
    Ok(acc as i64 - basis.offset as i64)
}

/// Residue-wise `Σ w_j x_j`. With `r_j = x_j + offset (mod m)`,
/// `Σ w_j r_j - offset (Σ w_j - 1) = Σ w_j x_j + offset (mod m)`.
pub fn crt_dot_accumulate(inputs: &[CrtValue], weights: &[i64], basis: &CrtBasis) -> CrtValue {
    assert_eq!(inputs.len(), weights.len());
    let wsum: i128 = weights.iter().map(|&w| w as i128).sum();
    let correction = basis.offset as i128 * (wsum - 1);
    let residues = basis
        .moduli
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let m = m as i128;
            let s: i128 = inputs.iter().zip(weights).map(|(v, &w)| (w as i128 % m) * v.residues[i] as i128).sum();
            (s - correction).rem_euclid(m) as u32
        })
        .collect();
    CrtValue { residues }
}

/// Dot product of native (unencrypted-width) integers promoted to CRT.
pub fn crt_dot_accumulate_native(inputs: &[i64], weights: &[i64], basis: &CrtBasis) -> Result<CrtValue, CrtError> {
    let encoded = inputs.iter().map(|&x| encode(x, basis)).collect::<Result<Vec<_>, _>>()?;
    Ok(crt_dot_accumulate(&encoded, weights, basis))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TluOutput {
    Native(i32),
    Crt(CrtValue),
}

/// Decode, look up `table[x - domain_lo]`, and re-encode when the consumer
/// expects CRT.
pub fn crt_tlu(
    v: &CrtValue,
    table: &[i32],
    domain_lo: i64,
    basis: &CrtBasis,
    reencode: bool,
    policy: OutOfDomainPolicy,
) -> Result<TluOutput, CrtError> {
    let x = decode(v, basis)?;
    let hi = domain_lo + table.len() as i64 - 1;
    let x = match policy {
        _ if (domain_lo..=hi).contains(&x) => x,
        OutOfDomainPolicy::Clamp => x.clamp(domain_lo, hi),
        OutOfDomainPolicy::Strict => return Err(CrtError::OutOfDomain { value: x, lo: domain_lo, hi }),
    };
    let y = table[(x - domain_lo) as usize];
    if reencode {
        encode(y as i64, basis).map(TluOutput::Crt)
    } else {
        Ok(TluOutput::Native(y))
    }
}
