//! GF(2^m) arithmetic and the (L, n) MDS erasure codec.
//!
//! Session keys are the first message symbol of a Reed-Solomon style code:
//! the controller knows one codeword symbol per participant, interpolates
//! the message through a Vandermonde system, and publishes all message
//! symbols except the first. A participant recombines its own symbol with
//! the published ones to recover the key; nobody else holds a valid row of
//! the system.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// An element of GF(2^m), m <= 16. The value is the coefficient vector of a
/// polynomial over GF(2), little end at bit 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FieldElem(pub u16);

/// An MDS evaluation point, in [1, L]. Positions double as nonzero field
/// elements, which keeps every Vandermonde system over distinct points
/// invertible.
pub type Position = u16;

/// Field size, reduction polynomial, and code length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldParams {
    /// Bit width of field elements, 4..=16.
    pub m: u8,
    /// Irreducible reduction polynomial of degree exactly `m`.
    pub reduction_poly: u32,
    /// Code length L; evaluation points live in [1, L].
    pub code_len: u16,
}

impl FieldParams {
    /// Builds the parameters for a supported width with the fixed default
    /// polynomial (0x13 for m=4, 0x11B for m=8, 0x1100B for m=16) and
    /// L = 2^m - 1, i.e. all nonzero points.
    pub fn for_bits(m: u8) -> Result<Self> {
        let reduction_poly = match m {
            4 => 0x13,
            8 => 0x11B,
            16 => 0x1100B,
            _ => return Err(Error::ConfigError(format!("unsupported field width m={m}"))),
        };
        let code_len = ((1u32 << m) - 1) as u16;
        Self::new(m, reduction_poly, code_len)
    }

    /// Validates an arbitrary parameter choice. The polynomial is checked
    /// irreducible by exhaustive trial division, which is cheap for m <= 16.
    pub fn new(m: u8, reduction_poly: u32, code_len: u16) -> Result<Self> {
        if !(4..=16).contains(&m) {
            return Err(Error::ConfigError(format!("field width m={m} outside 4..=16")));
        }
        if poly_degree(reduction_poly) != m as i32 {
            return Err(Error::ConfigError(format!(
                "reduction polynomial {reduction_poly:#x} does not have degree {m}"
            )));
        }
        if !poly_irreducible(reduction_poly) {
            return Err(Error::ConfigError(format!(
                "reduction polynomial {reduction_poly:#x} is reducible"
            )));
        }
        let max_len = (1u32 << m) - 1;
        if code_len == 0 || code_len as u32 > max_len {
            return Err(Error::ConfigError(format!(
                "code length {code_len} outside [1, {max_len}]"
            )));
        }
        Ok(FieldParams { m, reduction_poly, code_len })
    }

    /// Number of field elements, 2^m.
    pub fn order(&self) -> u32 {
        1u32 << self.m
    }

    /// Bytes needed to encode one element on the wire.
    pub fn elem_bytes(&self) -> usize {
        if self.m > 8 {
            2
        } else {
            1
        }
    }

    /// Masks an arbitrary integer down to a field element.
    pub fn elem(&self, value: u32) -> FieldElem {
        FieldElem((value & (self.order() - 1)) as u16)
    }

    fn check(&self, a: FieldElem) -> FieldElem {
        debug_assert!((a.0 as u32) < self.order(), "element out of field");
        a
    }

    /// Addition: bitwise XOR. Self-inverse.
    pub fn add(&self, a: FieldElem, b: FieldElem) -> FieldElem {
        FieldElem(self.check(a).0 ^ self.check(b).0)
    }

    /// Polynomial product modulo the reduction polynomial.
    pub fn mul(&self, a: FieldElem, b: FieldElem) -> FieldElem {
        let (a, b) = (self.check(a).0 as u32, self.check(b).0 as u32);
        let mut acc: u32 = 0;
        let mut shifted = a;
        let mut rest = b;
        while rest != 0 {
            if rest & 1 == 1 {
                acc ^= shifted;
            }
            shifted <<= 1;
            if shifted & self.order() != 0 {
                shifted ^= self.reduction_poly;
            }
            rest >>= 1;
        }
        FieldElem(acc as u16)
    }

    /// a^e by square and multiply.
    pub fn pow(&self, a: FieldElem, mut e: u32) -> FieldElem {
        let mut base = self.check(a);
        let mut acc = FieldElem(1);
        while e != 0 {
            if e & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            e >>= 1;
        }
        acc
    }

    /// Multiplicative inverse, a^(2^m - 2). Zero has none.
    pub fn inv(&self, a: FieldElem) -> Result<FieldElem> {
        if self.check(a).0 == 0 {
            return Err(Error::DivisionByZero);
        }
        Ok(self.pow(a, self.order() - 2))
    }

    /// Evaluates the message polynomial at position `j`:
    /// c_j = sum_k m_k * j^(k-1). This is the encode direction of the
    /// (L, n) code.
    pub fn codeword_symbol_at(&self, message: &[FieldElem], j: Position) -> Result<FieldElem> {
        if j == 0 || j > self.code_len {
            return Err(Error::OutOfRange("evaluation point outside [1, L]"));
        }
        let x = FieldElem(j);
        // Horner, highest coefficient first.
        let mut acc = FieldElem(0);
        for &coef in message.iter().rev() {
            acc = self.add(self.mul(acc, x), coef);
        }
        Ok(acc)
    }

    /// Erasure decode: given n distinct nonzero points and their symbols,
    /// recovers the unique message (m_1..m_n) with
    /// sum_k m_k * (j_i)^(k-1) = c_{j_i} for every i.
    ///
    /// Gaussian elimination over GF(2^m); this is the reference path every
    /// other route must match bit for bit.
    #[allow(clippy::needless_range_loop)] // row/column indexing mirrors the math
    pub fn vandermonde_solve(
        &self,
        points: &[Position],
        values: &[FieldElem],
    ) -> Result<Vec<FieldElem>> {
        let n = points.len();
        if n == 0 || values.len() != n {
            return Err(Error::SingularSystem("point/value count mismatch or empty"));
        }
        for (i, &p) in points.iter().enumerate() {
            if p == 0 || p > self.code_len {
                return Err(Error::SingularSystem("zero or out-of-range point"));
            }
            if points[..i].contains(&p) {
                return Err(Error::SingularSystem("duplicate point"));
            }
        }

        // Row i: [1, j_i, j_i^2, ..., j_i^(n-1) | c_{j_i}]
        let mut rows: Vec<Vec<FieldElem>> = Vec::with_capacity(n);
        for (i, &p) in points.iter().enumerate() {
            let mut row = Vec::with_capacity(n + 1);
            let mut pw = FieldElem(1);
            for _ in 0..n {
                row.push(pw);
                pw = self.mul(pw, FieldElem(p));
            }
            row.push(values[i]);
            rows.push(row);
        }

        // Forward elimination with pivot search (any nonzero pivot works).
        for col in 0..n {
            let pivot = (col..n)
                .find(|&r| rows[r][col].0 != 0)
                .ok_or(Error::SingularSystem("no pivot"))?;
            rows.swap(col, pivot);
            let inv = self.inv(rows[col][col])?;
            for r in col + 1..n {
                if rows[r][col].0 == 0 {
                    continue;
                }
                let factor = self.mul(rows[r][col], inv);
                for c in col..=n {
                    let sub = self.mul(factor, rows[col][c]);
                    rows[r][c] = self.add(rows[r][c], sub);
                }
            }
        }

        // Back substitution.
        let mut message = vec![FieldElem(0); n];
        for col in (0..n).rev() {
            let mut acc = rows[col][n];
            for c in col + 1..n {
                acc = self.add(acc, self.mul(rows[col][c], message[c]));
            }
            message[col] = self.mul(acc, self.inv(rows[col][col])?);
        }
        Ok(message)
    }

    /// Member-side shortcut for the first message symbol: with its own row
    /// (j, c_j) and the published m_2..m_n,
    /// m_1 = c_j - sum_{k>=2} m_k * j^(k-1). Only the caller's point is
    /// needed because the first Vandermonde column is all ones.
    pub fn first_symbol_from_own_row(
        &self,
        j: Position,
        own_symbol: FieldElem,
        tail: &[FieldElem],
    ) -> FieldElem {
        let x = FieldElem(j);
        let mut acc = own_symbol;
        let mut pw = x;
        for &mk in tail {
            acc = self.add(acc, self.mul(mk, pw));
            pw = self.mul(pw, x);
        }
        acc
    }
}

/// A partial codeword: the (position, symbol) pairs one party knows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codeword {
    pub points: Vec<Position>,
    pub symbols: Vec<FieldElem>,
}

impl Codeword {
    pub fn new(points: Vec<Position>, symbols: Vec<FieldElem>) -> Result<Self> {
        if points.len() != symbols.len() {
            return Err(Error::SingularSystem("point/value count mismatch or empty"));
        }
        for (i, &p) in points.iter().enumerate() {
            if points[..i].contains(&p) {
                return Err(Error::SingularSystem("duplicate point"));
            }
        }
        Ok(Codeword { points, symbols })
    }

    /// Decodes the message determined by these pairs.
    pub fn decode(&self, params: &FieldParams) -> Result<Vec<FieldElem>> {
        params.vandermonde_solve(&self.points, &self.symbols)
    }
}

fn poly_degree(p: u32) -> i32 {
    31 - p.leading_zeros() as i32
}

/// Exhaustive trial division over GF(2)[x]; sufficient for degree <= 16.
fn poly_irreducible(p: u32) -> bool {
    let d = poly_degree(p);
    for f in 2u32..(1u32 << (d / 2 + 1)) {
        if poly_degree(f) < 1 {
            continue;
        }
        if poly_rem(p, f) == 0 {
            return false;
        }
    }
    true
}

fn poly_rem(mut a: u32, b: u32) -> u32 {
    let db = poly_degree(b);
    while a != 0 && poly_degree(a) >= db {
        a ^= b << (poly_degree(a) - db);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn f8() -> FieldParams {
        FieldParams::for_bits(8).unwrap()
    }

    fn f16() -> FieldParams {
        FieldParams::for_bits(16).unwrap()
    }

    /// Schoolbook shift-and-xor multiplier, written independently of
    /// `FieldParams::mul` as its oracle.
    fn oracle_mul(params: &FieldParams, a: u32, b: u32) -> u16 {
        let mut wide: u64 = 0;
        for i in 0..16 {
            if (b >> i) & 1 == 1 {
                wide ^= (a as u64) << i;
            }
        }
        let poly = params.reduction_poly as u64;
        let m = params.m as u32;
        while wide >> m != 0 {
            let top = 63 - wide.leading_zeros();
            wide ^= poly << (top - m);
        }
        wide as u16
    }

    /// Independent Gauss-Jordan solver used as the decode oracle.
    #[allow(clippy::needless_range_loop)]
    fn oracle_solve(params: &FieldParams, points: &[Position], values: &[FieldElem]) -> Vec<FieldElem> {
        let n = points.len();
        let mut aug: Vec<Vec<FieldElem>> = (0..n)
            .map(|i| {
                let mut row: Vec<FieldElem> =
                    (0..n).map(|k| params.pow(FieldElem(points[i]), k as u32)).collect();
                row.push(values[i]);
                row
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n).find(|&r| aug[r][col].0 != 0).expect("oracle pivot");
            aug.swap(col, pivot);
            let inv = params.inv(aug[col][col]).unwrap();
            for c in 0..=n {
                aug[col][c] = params.mul(aug[col][c], inv);
            }
            for r in 0..n {
                if r != col && aug[r][col].0 != 0 {
                    let factor = aug[r][col];
                    for c in 0..=n {
                        let sub = params.mul(factor, aug[col][c]);
                        aug[r][c] = params.add(aug[r][c], sub);
                    }
                }
            }
        }
        (0..n).map(|r| aug[r][n]).collect()
    }

    #[test]
    fn add_is_xor() {
        let f = f8();
        assert_eq!(f.add(FieldElem(0x05), FieldElem(0x05)), FieldElem(0x00));
        assert_eq!(f.add(FieldElem(0x3A), FieldElem(0x00)), FieldElem(0x3A));
        assert_eq!(f.add(FieldElem(0x05), FieldElem(0x07)), FieldElem(0x02));
    }

    #[test]
    fn mul_known_values() {
        let f = f8();
        assert_eq!(f.mul(FieldElem(0x57), FieldElem(0x01)), FieldElem(0x57));
        assert_eq!(f.mul(FieldElem(0x02), FieldElem(0x03)), FieldElem(0x06));
        // 0xF6 is the inverse of 0x03 under 0x11B; confirmed by the
        // schoolbook oracle below.
        assert_eq!(f.mul(FieldElem(0x03), FieldElem(0xF6)), FieldElem(0x01));
        assert_eq!(oracle_mul(&f, 0x03, 0xF6), 0x01);
    }

    #[test]
    fn inv_matches_exhaustive_search() {
        let f = f8();
        assert_eq!(f.inv(FieldElem(0x01)).unwrap(), FieldElem(0x01));
        // Exhaustive search oracle over all 255 candidates.
        let mut found = 0;
        for cand in 1..=255u16 {
            if f.mul(FieldElem(0x03), FieldElem(cand)) == FieldElem(1) {
                found = cand;
            }
        }
        assert_eq!(found, 0xF6);
        assert_eq!(f.inv(FieldElem(0x03)).unwrap(), FieldElem(0xF6));
        assert_eq!(f.inv(FieldElem(0)), Err(Error::DivisionByZero));
    }

    #[test]
    fn inv_all_nonzero_elements_m8() {
        let f = f8();
        for a in 1..=255u16 {
            let inv = f.inv(FieldElem(a)).unwrap();
            assert_eq!(f.mul(FieldElem(a), inv), FieldElem(1), "a={a:#x}");
        }
    }

    #[test]
    fn solve_trivial_1x1() {
        let f = f8();
        let msg = f.vandermonde_solve(&[7], &[FieldElem(0x42)]).unwrap();
        assert_eq!(msg, vec![FieldElem(0x42)]);
    }

    #[test]
    fn solve_worked_2x2() {
        let f = f8();
        let msg = f
            .vandermonde_solve(&[1, 2], &[FieldElem(0x05), FieldElem(0x07)])
            .unwrap();
        // Frozen from the Gaussian oracle: m1 ^ m2 = 0x05 and
        // m1 ^ 2*m2 = 0x07.
        assert_eq!(msg, vec![FieldElem(0xF2), FieldElem(0xF7)]);
        assert_eq!(f.add(msg[0], msg[1]), FieldElem(0x05));
        assert_eq!(f.add(msg[0], f.mul(FieldElem(2), msg[1])), FieldElem(0x07));
    }

    #[test]
    fn solve_rejects_bad_points() {
        let f = f8();
        let v = [FieldElem(1), FieldElem(2)];
        assert!(matches!(f.vandermonde_solve(&[3, 3], &v), Err(Error::SingularSystem(_))));
        assert!(matches!(f.vandermonde_solve(&[0, 1], &v), Err(Error::SingularSystem(_))));
        assert!(matches!(f.vandermonde_solve(&[], &[]), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn symbol_at_edges() {
        let f = f8();
        // Constant polynomial: every point evaluates to m_1.
        assert_eq!(
            f.codeword_symbol_at(&[FieldElem(0x9C)], 200).unwrap(),
            FieldElem(0x9C)
        );
        // Powers of 1 collapse to the XOR of the message.
        assert_eq!(
            f.codeword_symbol_at(&[FieldElem(0x05), FieldElem(0x07)], 1).unwrap(),
            FieldElem(0x02)
        );
        assert!(f.codeword_symbol_at(&[FieldElem(1)], 0).is_err());
        assert!(f16().codeword_symbol_at(&[FieldElem(1)], 0xFFFF).is_ok());
        assert!(f.codeword_symbol_at(&[FieldElem(1)], 0x100).is_err());
    }

    #[test]
    fn encode_decode_roundtrip_randomized() {
        // 10^4 trials split over m=8 and m=16, n <= 8, matching the decode
        // against both the encode and the independent oracle on a sample.
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for trial in 0..10_000usize {
            let params = if trial % 2 == 0 { f8() } else { f16() };
            let n = rng.gen_range(1..=8usize);
            let message: Vec<FieldElem> =
                (0..n).map(|_| params.elem(rng.gen())).collect();
            let mut points: Vec<Position> = Vec::new();
            while points.len() < n {
                let p = rng.gen_range(1..=params.code_len);
                if !points.contains(&p) {
                    points.push(p);
                }
            }
            let symbols: Vec<FieldElem> = points
                .iter()
                .map(|&j| params.codeword_symbol_at(&message, j).unwrap())
                .collect();
            let decoded = params.vandermonde_solve(&points, &symbols).unwrap();
            assert_eq!(decoded, message, "trial {trial}");
            if trial % 10 == 0 {
                assert_eq!(oracle_solve(&params, &points, &symbols), message);
            }
        }
    }

    #[test]
    fn solver_matches_gaussian_oracle() {
        // 10^3 random systems (not necessarily valid codewords), bit exact.
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for trial in 0..1_000usize {
            let params = if trial % 2 == 0 { f8() } else { f16() };
            let n = rng.gen_range(1..=8usize);
            let mut points: Vec<Position> = Vec::new();
            while points.len() < n {
                let p = rng.gen_range(1..=params.code_len);
                if !points.contains(&p) {
                    points.push(p);
                }
            }
            let values: Vec<FieldElem> = (0..n).map(|_| params.elem(rng.gen())).collect();
            let mine = params.vandermonde_solve(&points, &values).unwrap();
            let oracle = oracle_solve(&params, &points, &values);
            assert_eq!(mine, oracle, "trial {trial}");
        }
    }

    #[test]
    fn single_symbol_change_changes_message() {
        // Injectivity of the square Vandermonde map.
        let f = f8();
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        for _ in 0..500 {
            let n = rng.gen_range(1..=6usize);
            let mut points: Vec<Position> = Vec::new();
            while points.len() < n {
                let p = rng.gen_range(1..=f.code_len);
                if !points.contains(&p) {
                    points.push(p);
                }
            }
            let values: Vec<FieldElem> = (0..n).map(|_| f.elem(rng.gen())).collect();
            let base = f.vandermonde_solve(&points, &values).unwrap();
            let idx = rng.gen_range(0..n);
            let mut tweaked = values.clone();
            tweaked[idx] = f.add(tweaked[idx], FieldElem(rng.gen_range(1..=255)));
            let other = f.vandermonde_solve(&points, &tweaked).unwrap();
            assert_ne!(base, other);
        }
    }

    #[test]
    fn member_shortcut_matches_full_solve() {
        let f = f8();
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        for _ in 0..2_000 {
            let n = rng.gen_range(1..=8usize);
            let message: Vec<FieldElem> = (0..n).map(|_| f.elem(rng.gen())).collect();
            let mut points: Vec<Position> = Vec::new();
            while points.len() < n {
                let p = rng.gen_range(1..=f.code_len);
                if !points.contains(&p) {
                    points.push(p);
                }
            }
            let j = points[rng.gen_range(0..n)];
            let own = f.codeword_symbol_at(&message, j).unwrap();
            let got = f.first_symbol_from_own_row(j, own, &message[1..]);
            assert_eq!(got, message[0]);
        }
    }

    #[test]
    fn codeword_type_decodes_and_validates() {
        let f = f8();
        let msg = vec![FieldElem(0x10), FieldElem(0x20), FieldElem(0x30)];
        let points = vec![3u16, 9, 111];
        let symbols: Vec<FieldElem> =
            points.iter().map(|&j| f.codeword_symbol_at(&msg, j).unwrap()).collect();
        let cw = Codeword::new(points, symbols).unwrap();
        assert_eq!(cw.decode(&f).unwrap(), msg);
        assert!(Codeword::new(vec![1, 1], vec![FieldElem(0), FieldElem(1)]).is_err());
        assert!(Codeword::new(vec![1], vec![]).is_err());
    }

    #[test]
    fn rejects_bad_params() {
        assert!(FieldParams::for_bits(3).is_err());
        assert!(FieldParams::for_bits(17).is_err());
        // x^8 + x^4 + x^3 + x^2 + 1 = 0x11D is irreducible, 0x11C is not.
        assert!(FieldParams::new(8, 0x11D, 255).is_ok());
        assert!(FieldParams::new(8, 0x11C, 255).is_err());
        assert!(FieldParams::new(8, 0x11B, 0).is_err());
        assert!(FieldParams::new(8, 0x11B, 256).is_err());
    }

    proptest! {
        #[test]
        fn field_axioms_m8(a in 0u16..256, b in 0u16..256, c in 0u16..256) {
            let f = f8();
            let (a, b, c) = (FieldElem(a), FieldElem(b), FieldElem(c));
            prop_assert_eq!(f.mul(f.mul(a, b), c), f.mul(a, f.mul(b, c)));
            prop_assert_eq!(f.mul(a, f.add(b, c)), f.add(f.mul(a, b), f.mul(a, c)));
            prop_assert_eq!(f.mul(a, b), f.mul(b, a));
            if a.0 != 0 {
                prop_assert_eq!(f.mul(a, f.inv(a).unwrap()), FieldElem(1));
            }
        }

        #[test]
        fn field_axioms_m16(a in 0u32..65536, b in 0u32..65536) {
            let f = f16();
            let (a, b) = (FieldElem(a as u16), FieldElem(b as u16));
            prop_assert_eq!(f.mul(a, b), f.mul(b, a));
            if a.0 != 0 {
                prop_assert_eq!(f.mul(a, f.inv(a).unwrap()), FieldElem(1));
            }
        }
    }
}
