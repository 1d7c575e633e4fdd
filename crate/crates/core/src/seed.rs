//! Deterministic seed derivation. Every stochastic stage derives its own
//! stream from one master seed plus a stable label, so subsystems stay
//! reproducible independently of each other.

/// SplitMix64 finalizer over the master seed mixed with a label hash.
pub fn derive(master: u64, label: &str) -> u64 {
    let mut h = master ^ 0x9e37_79b9_7f4a_7c15;
    for b in label.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
