//! Order-independent exact summation of non-negative `f32` values.

/// Fixed-point position of the least significant bit: every finite `f32`
/// is an integer multiple of `2^-149`, so a quantum of `2^-150` represents
/// them exactly.
const FRAC_BITS: i32 = 150;

/// Sum of non-negative `f32` values kept as a 192-bit fixed-point integer
/// (little-endian limbs). Addition is exact, hence associative and
/// commutative bit for bit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ExactSum([u64; 3]);

fn decompose(x: f64) -> (u64, i32) {
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut mant, mut e) = if exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp - 1075)
    };
    if mant == 0 {
        return (0, 0);
    }
    let tz = mant.trailing_zeros();
    mant >>= tz;
    e += tz as i32;
    (mant, e)
}

impl ExactSum {
    pub const ZERO: Self = ExactSum([0; 3]);

    fn add_shifted(&mut self, mant: u64, shift: u32) -> bool {
        let idx = (shift / 64) as usize;
        let wide = (mant as u128) << (shift % 64);
        let parts = [wide as u64, (wide >> 64) as u64];
        if idx >= 3 || (idx == 2 && parts[1] != 0) {
            return false;
        }
        let mut carry = 0u64;
        for (k, limb) in self.0.iter_mut().enumerate().skip(idx) {
            let add = parts.get(k - idx).copied().unwrap_or(0);
            let (s1, c1) = limb.overflowing_add(add);
            let (s2, c2) = s1.overflowing_add(carry);
            *limb = s2;
            carry = (c1 as u64) + (c2 as u64);
        }
        carry == 0
    }

    /// Adds `v`; negative inputs are treated as zero.
    pub fn add_f32(&mut self, v: f32) {
        if !(v > 0.0) {
            return;
        }
        let (mant, e) = decompose(v as f64);
        let ok = self.add_shifted(mant, (e + FRAC_BITS) as u32);
        assert!(ok, "exact sum overflow");
    }

    pub fn add(&mut self, other: &Self) {
        let mut carry = 0u64;
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            let (s1, c1) = a.overflowing_add(b);
            let (s2, c2) = s1.overflowing_add(carry);
            *a = s2;
            carry = (c1 as u64) + (c2 as u64);
        }
        assert!(carry == 0, "exact sum overflow");
    }

    /// Deterministic conversion; exact whenever the sum fits in 53 bits.
    pub fn as_f64(&self) -> f64 {
        let [l0, l1, l2] = self.0;
        let p2 = (l2 as f64) * 2f64.powi(128 - FRAC_BITS);
        let p1 = (l1 as f64) * 2f64.powi(64 - FRAC_BITS);
        let p0 = (l0 as f64) * 2f64.powi(-FRAC_BITS);
        p2 + p1 + p0
    }

    /// Little-endian 64-bit limbs of the fixed-point value.
    pub fn limbs(&self) -> [u64; 3] {
        self.0
    }

    pub fn from_limbs(limbs: [u64; 3]) -> Self {
        ExactSum(limbs)
    }
}
