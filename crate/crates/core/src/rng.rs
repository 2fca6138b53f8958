//! Counter-based random streams.
//!
//! Every random draw in the engine comes from a ChaCha8 stream addressed by
//! `(master seed, purpose, replica, lane)`. The first three coordinates are
//! mixed into the 256-bit key, the lane (usually a bond or walker index)
//! selects one of the 2^64 ChaCha streams under that key. Work can therefore
//! be split across threads in any order without changing a single draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a key, so the
/// environment can be held fixed while walk and particle clocks are resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Environment = 1,
    Graphical = 2,
    InitialConfig = 3,
    Walker = 4,
    Survey = 5,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes the coordinates into a single 64-bit seed; used to derive per-replica seeds.
pub fn derive_seed(master: u64, purpose: Purpose, replica: u64) -> u64 {
    let mut s = master ^ (purpose as u64).wrapping_mul(0xd6e8_feb8_6659_fd93);
    let a = splitmix64(&mut s);
    let mut t = a ^ replica.wrapping_mul(0xa076_1d64_78bd_642f);
    splitmix64(&mut t)
}

/// Opens the stream addressed by `(master, purpose, replica, lane)`.
pub fn stream(master: u64, purpose: Purpose, replica: u64, lane: u64) -> ChaCha8Rng {
    let mut state = derive_seed(master, purpose, replica);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(lane);
    rng
}

/// Uniform draw on (0, 1], safe to pass to `ln`.
pub(crate) fn open_unit<R: rand::Rng>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Exponential inter-arrival time at `rate` by inversion.
pub(crate) fn exponential<R: rand::Rng>(rng: &mut R, rate: f64) -> f64 {
    -open_unit(rng).ln() / rate
}
