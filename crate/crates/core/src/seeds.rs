//! Splittable seed derivation: every reproducible component draws its RNG
//! seed from a master seed plus a (stream, index) pair, so independent
//! pieces of a run never share or race on one RNG.

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and two counters.
pub fn mix_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(master ^ splitmix(stream)).wrapping_add(index))
}
