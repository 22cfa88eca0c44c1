//! Counter-based random numbers.
//!
//! Every Gaussian draw is a pure function of `(key, index, stream, lane)`, so an
//! ensemble gives the same numbers whatever the worker count or evaluation order.
//! The block function is Philox4x32-10.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Stream tags keep independent uses of one key apart.
pub mod stream {
    pub const ENDPOINT: u32 = 0x0001_0000;
    pub const REFINE: u32 = 0x0002_0000;
    pub const DERIVE: u32 = 0x0003_0000;
    pub const UNIFORM: u32 = 0x0004_0000;
}

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with ten rounds.
#[inline]
pub fn philox4x32_10(mut ctr: [u32; 4], mut key: [u32; 2]) -> [u32; 4] {
    for round in 0..10 {
        if round > 0 {
            key[0] = key[0].wrapping_add(PHILOX_W0);
            key[1] = key[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
    }
    ctr
}

#[inline(always)]
fn to_open_unit(hi: u32, lo: u32) -> f64 {
    let bits = (((hi as u64) << 32) | lo as u64) >> 11;
    (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// A keyed counter-based generator. Cheap to copy; holds no mutable state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: [u32; 2],
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
        }
    }

    pub fn seed(&self) -> u64 {
        (self.key[0] as u64) | ((self.key[1] as u64) << 32)
    }

    #[inline]
    pub fn block(&self, index: u64, stream: u32, lane: u32) -> [u32; 4] {
        philox4x32_10([index as u32, (index >> 32) as u32, stream, lane], self.key)
    }

    /// Two uniforms in the open interval (0, 1).
    #[inline]
    pub fn uniform_pair(&self, index: u64, stream: u32, lane: u32) -> (f64, f64) {
        let b = self.block(index, stream, lane);
        (to_open_unit(b[0], b[1]), to_open_unit(b[2], b[3]))
    }

    /// Two independent standard normals (Box-Muller on one Philox block).
    #[inline]
    pub fn normal_pair(&self, index: u64, stream: u32, lane: u32) -> (f64, f64) {
        let (u1, u2) = self.uniform_pair(index, stream, lane);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }

    /// Standard normal for coordinate `coord` at counter `(index, stream)`.
    #[inline]
    pub fn normal(&self, index: u64, stream: u32, coord: usize) -> f64 {
        let (a, b) = self.normal_pair(index, stream, (coord / 2) as u32);
        if coord % 2 == 0 {
            a
        } else {
            b
        }
    }

    #[inline]
    pub fn uniform(&self, index: u64, lane: u32) -> f64 {
        self.uniform_pair(index, stream::UNIFORM, lane).0
    }

    pub fn derive(&self, tag: u32, index: u64) -> u64 {
        let b = self.block(index, stream::DERIVE, tag);
        (b[0] as u64) | ((b[1] as u64) << 32)
    }
}

/// Seed of the `index`-th member of an ensemble rooted at `master`.
pub fn ensemble_seed(master: u64, index: u64) -> u64 {
    CounterRng::new(master).derive(0, index)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors published with the Random123 reference implementation.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0, 0, 0, 0], [0, 0]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn normals_have_unit_variance() {
        let rng = CounterRng::new(7);
        let n = 200_000u64;
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..n {
            let z = rng.normal(i, 3, 0);
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 5.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn uniforms_stay_open() {
        let rng = CounterRng::new(0);
        for i in 0..10_000 {
            let (a, b) = rng.uniform_pair(i, 0, 0);
            assert!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0);
        }
    }

    #[test]
    fn ensemble_seeds_are_distinct() {
        let mut seeds: Vec<u64> = (0..1000).map(|i| ensemble_seed(42, i)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 1000);
    }
}
