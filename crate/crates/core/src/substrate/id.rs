use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ID_BITS: u32 = 64;

/// A clique identifier: the `depth` most significant bits of `bits` are
/// significant, the rest are zero. As a point in the 64-bit id space the
/// identifier is `bits`; the clique owns the segment from `bits` up to the
/// next live identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CliqueId {
    bits: u64,
    depth: u8,
}

#[derive(Debug, Error, PartialEq)]
pub enum IdError {
    #[error("clique id depth {0} exceeds the {ID_BITS}-bit id space")]
    TooDeep(usize),
    #[error("invalid bit character {0:?} in clique id")]
    BadChar(char),
}

impl CliqueId {
    pub const ROOT: CliqueId = CliqueId { bits: 0, depth: 0 };

    pub fn new(bits: u64, depth: u8) -> Self {
        assert!(u32::from(depth) <= ID_BITS);
        CliqueId { bits: bits & prefix_mask(u32::from(depth)), depth }
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn depth(&self) -> u32 {
        u32::from(self.depth)
    }

    /// Extends the id by one bit. `None` once the id space is exhausted.
    pub fn child(&self, bit: bool) -> Option<CliqueId> {
        if self.depth() >= ID_BITS {
            return None;
        }
        let b = if bit { 1u64 << (ID_BITS - 1 - self.depth()) } else { 0 };
        Some(CliqueId { bits: self.bits | b, depth: self.depth + 1 })
    }

    pub fn is_prefix_of(&self, other: &CliqueId) -> bool {
        self.depth <= other.depth && (other.bits & prefix_mask(self.depth())) == self.bits
    }

    /// The aligned block of ids sharing this prefix, `[start, end)`.
    pub fn prefix_block(&self) -> (u64, u128) {
        (self.bits, u128::from(self.bits) + (1u128 << (ID_BITS - self.depth())))
    }
}

impl fmt::Display for CliqueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.depth == 0 {
            return write!(f, "*");
        }
        for i in 0..self.depth() {
            let bit = (self.bits >> (ID_BITS - 1 - i)) & 1;
            write!(f, "{bit}")?;
        }
        Ok(())
    }
}

impl FromStr for CliqueId {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "*" || s.is_empty() {
            return Ok(CliqueId::ROOT);
        }
        if s.len() > ID_BITS as usize {
            return Err(IdError::TooDeep(s.len()));
        }
        let mut id = CliqueId::ROOT;
        for c in s.chars() {
            let bit = match c {
                '0' => false,
                '1' => true,
                other => return Err(IdError::BadChar(other)),
            };
            id = id.child(bit).expect("length checked");
        }
        Ok(id)
    }
}

pub fn prefix_mask(nbits: u32) -> u64 {
    match nbits {
        0 => 0,
        n if n >= ID_BITS => u64::MAX,
        n => !(u64::MAX >> n),
    }
}

/// Number of leading bits two ids share.
pub fn common_prefix_bits(a: u64, b: u64) -> u32 {
    (a ^ b).leading_zeros()
}

/// Number of `b`-bit digits in an id.
pub fn digit_count(b: u32) -> u32 {
    ID_BITS.div_ceil(b)
}

/// Value of digit `i` (most significant first). The last digit is narrower
/// when `b` does not divide 64.
pub fn digit(key: u64, i: u32, b: u32) -> u64 {
    let start = i * b;
    debug_assert!(start < ID_BITS);
    let width = b.min(ID_BITS - start);
    (key << start) >> (ID_BITS - width)
}

/// Leading digits shared by two ids.
pub fn common_digits(a: u64, c: u64, b: u32) -> u32 {
    common_prefix_bits(a, c) / b
}

/// The id block `[start, end]` (inclusive) whose first `digits` digits are
/// those of `key` with digit number `digits - 1` replaced by `last`.
pub fn digit_block(key: u64, digits: u32, last: u64, b: u32) -> (u64, u64) {
    let keep = ((digits - 1) * b).min(ID_BITS);
    let width = b.min(ID_BITS - keep);
    let head = key & prefix_mask(keep);
    let start = head | (last << (ID_BITS - keep - width));
    let span = ID_BITS - keep - width;
    let end = if span == 0 { start } else { start | (u64::MAX >> (ID_BITS - span)) };
    (start, end)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_bit_children() {
        let p: CliqueId = "1011".parse().unwrap();
        assert_eq!(p.child(false).unwrap().to_string(), "10110");
        assert_eq!(p.child(true).unwrap().to_string(), "10111");
        assert!(p.is_prefix_of(&p.child(true).unwrap()));
        assert!(!p.child(false).unwrap().is_prefix_of(&p.child(true).unwrap()));
    }

    #[test]
    fn children_halve_the_parent_block() {
        let p: CliqueId = "1011".parse().unwrap();
        let (ps, pe) = p.prefix_block();
        let (as_, ae) = p.child(false).unwrap().prefix_block();
        let (bs, be) = p.child(true).unwrap().prefix_block();
        assert_eq!(as_, ps);
        assert_eq!(ae, u128::from(bs));
        assert_eq!(be, pe);
        assert_eq!(ae - u128::from(as_), be - u128::from(bs));
    }

    #[test]
    fn depth_limit() {
        let mut id = CliqueId::ROOT;
        for _ in 0..64 {
            id = id.child(true).unwrap();
        }
        assert_eq!(id.bits(), u64::MAX);
        assert!(id.child(false).is_none());
        assert!("2".parse::<CliqueId>().is_err());
    }

    #[test]
    fn digits_and_blocks() {
        let key = 0b1101u64 << 60;
        assert_eq!(digit(key, 0, 2), 0b11);
        assert_eq!(digit(key, 1, 2), 0b01);
        assert_eq!(common_digits(key, 0b1110u64 << 60, 2), 1);
        let (s, e) = digit_block(key, 2, 0b10, 2);
        assert_eq!(s, 0b1110u64 << 60);
        assert_eq!(e, (0b1111u64 << 60) - 1 + (1u64 << 60) - (1u64 << 60) + ((1u64 << 60) - 1) - ((1u64 << 60) - 1));
        assert_eq!(e, s | ((1u64 << 60) - 1));
        // b = 3: 21 full digits plus one 1-bit digit.
        assert_eq!(digit_count(3), 22);
        assert_eq!(digit(u64::MAX, 21, 3), 1);
        let (s, e) = digit_block(u64::MAX, 22, 0, 3);
        assert_eq!((s, e), (u64::MAX - 1, u64::MAX - 1));
    }
}
