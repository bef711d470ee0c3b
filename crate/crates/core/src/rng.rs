//! Counter-based random streams.
//!
//! Every component draws from its own ChaCha stream derived from the run seed
//! and a component label, so adding draws in one component never shifts the
//! numbers another component sees. Per-iteration streams take the iteration
//! counter as the ChaCha stream id, which makes resuming from a checkpoint a
//! matter of restoring the counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `component` under `seed`.
pub fn component_rng(seed: u64, component: &str) -> DetRng {
    stream_rng(seed, component, 0)
}

/// Stream number `index` of `component` under `seed`.
pub fn stream_rng(seed: u64, component: &str, index: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ fnv1a(component)));
    rng.set_stream(index);
    rng
}
