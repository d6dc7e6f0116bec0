//! Counter-based random substreams.
//!
//! Every random draw in the crate comes from a stream addressed by
//! `(seed, domain, index)`. Work units therefore never share generator state
//! and results do not depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keeping unrelated consumers of the same master seed apart.
pub mod domain {
    pub const MODEL: u64 = 0x6d6f_6465_6c00_0001;
    pub const KEYS: u64 = 0x6b65_7973_0000_0002;
    pub const PLAIN: u64 = 0x706c_6169_6e00_0003;
    pub const OBSERVED_KEYS: u64 = 0x6f62_736b_6579_0004;
    pub const REPLICATE_KEYS: u64 = 0x7265_706c_6b00_0005;
    pub const BOOTSTRAP: u64 = 0x626f_6f74_0000_0006;
    pub const PROMPT: u64 = 0x7072_6f6d_7074_0007;
    pub const FILLER: u64 = 0x6669_6c6c_6572_0008;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` for the given domain and index.
pub fn derive(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(domain)) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Generator for stream `index` of `seed`.
pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
