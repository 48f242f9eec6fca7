//! Deterministic seed derivation for independent substreams.
//!
//! Every replicate, bootstrap draw, and population gets its own seed hashed
//! from the master seed and its indices, so parallel execution order cannot
//! change any result.

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a substream seed from a master seed and a tag path.
pub fn substream_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0x6a09e667f3bcc908;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x2545f4914f6cdd1d);
        out = splitmix64(&mut state);
    }
    out
}
