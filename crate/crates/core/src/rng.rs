use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

// Stream tags. Sensors take their own tags from the caller.
pub const TAG_FABRIC: u64 = 0x10;
pub const TAG_SOUNDER: u64 = 0x20;
pub const TAG_FAULTS: u64 = 0x30;

/// Derives an independent stream seed from a run seed and a stream tag (splitmix64).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tag: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, tag))
}
