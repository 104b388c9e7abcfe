//! Named, reproducible random substreams derived from one study seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for substream `(label, index)` of `seed`. Distinct labels or
/// indices give independent streams; the same triple always gives the same one.
pub fn substream(seed: u64, label: &str, index: u64) -> StreamRng {
    let key = splitmix(splitmix(seed ^ fnv1a(label)).wrapping_add(index));
    ChaCha8Rng::seed_from_u64(key)
}
