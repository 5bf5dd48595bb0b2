//! Stable 64-bit hashing for seeded draws, sharding, and config digests.
//!
//! `std::hash::DefaultHasher` is not guaranteed stable across toolchains,
//! so anything that must reproduce byte-identically (the text down-sampling
//! draw, shard assignment, config hashes) goes through this fixed
//! FNV-1a + SplitMix64 construction instead.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over raw bytes, finalized with the SplitMix64 mixer.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    mix(h)
}

/// Hash with a seed folded in; the draw depends only on (seed, bytes).
pub fn hash_with_seed(seed: u64, bytes: &[u8]) -> u64 {
    mix(hash_bytes(bytes) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Map a hash to a uniform f64 in [0, 1).
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_deterministic() {
        assert_eq!(hash_bytes(b"img-0001"), hash_bytes(b"img-0001"));
        assert_ne!(hash_bytes(b"img-0001"), hash_bytes(b"img-0002"));
    }

    #[test]
    fn seed_changes_draw() {
        let a = hash_with_seed(1, b"img-0001");
        let b = hash_with_seed(2, b"img-0001");
        assert_ne!(a, b);
    }

    #[test]
    fn unit_f64_in_range() {
        for i in 0..1000u64 {
            let u = unit_f64(hash_with_seed(i, b"x"));
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn unit_f64_roughly_uniform() {
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|i| unit_f64(hash_with_seed(7, format!("id-{i}").as_bytes())))
            .sum::<f64>()
            / f64::from(n);
        assert!((mean - 0.5).abs() < 0.02, "mean {mean} far from 0.5");
    }
}
