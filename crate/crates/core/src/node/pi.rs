//! Decimal digits of pi from Machin's formula in fixed-point integer
//! arithmetic.

use num_bigint::BigUint;
use thiserror::Error;

pub const MAX_DIGITS: u32 = 10_000;

/// Extra digits carried through the series and dropped at the end.
const GUARD_DIGITS: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("pi_digits needs 1..={MAX_DIGITS} digits, got {0}")]
pub struct PiRangeError(pub i64);

/// `scale * atan(1/x)`, truncating each term.
fn atan_inv(x: u32, scale: &BigUint) -> BigUint {
    let x2 = BigUint::from(x) * x;
    let mut power = scale / x;
    let mut sum = power.clone();
    let mut k: u32 = 1;
    let mut subtract = true;
    loop {
        power /= &x2;
        let term = &power / (2 * k + 1);
        if term.bits() == 0 {
            break;
        }
        if subtract {
            sum -= term;
        } else {
            sum += term;
        }
        subtract = !subtract;
        k += 1;
    }
    sum
}

/// `"3."` followed by the first `n` fractional digits of pi, truncated.
pub fn pi_digits(n: i64) -> Result<String, PiRangeError> {
    if !(1..=i64::from(MAX_DIGITS)).contains(&n) {
        return Err(PiRangeError(n));
    }
    let n = n as u32;
    let scale = BigUint::from(10u32).pow(n + GUARD_DIGITS);
    let pi = (atan_inv(5, &scale) * 16u32) - (atan_inv(239, &scale) * 4u32);
    let truncated = pi / BigUint::from(10u32).pow(GUARD_DIGITS);
    let digits = truncated.to_str_radix(10);
    debug_assert_eq!(digits.len(), n as usize + 1);
    Ok(format!("{}.{}", &digits[..1], &digits[1..]))
}
