//! Deterministic sub-seed derivation from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for `component`: `splitmix64(master ^ fnv1a(component))`.
pub fn derive(master: u64, component: &str) -> u64 {
    splitmix64(master ^ fnv1a(component.as_bytes()))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn component_rng(master: u64, component: &str) -> ChaCha8Rng {
    rng(derive(master, component))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_separates_components() {
        assert_eq!(derive(7, "init"), derive(7, "init"));
        assert_ne!(derive(7, "init"), derive(7, "noise"));
        assert_ne!(derive(7, "init"), derive(8, "init"));
        // Pinned so that changing the derivation is a visible break.
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
