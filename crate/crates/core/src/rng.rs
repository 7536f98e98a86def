//! Seed derivation.
//!
//! Every random consumer owns a ChaCha8 stream keyed by the master seed. The
//! 64-bit stream id is `role_tag ^ index`, where `index` is a peer id,
//! replication index or similar. Role tags occupy the top byte so they never
//! collide with realistic indices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOPOLOGY: u64 = 0x01 << 56;
pub const ARRIVAL_TIMES: u64 = 0x02 << 56;
pub const ARRIVAL_PEERS: u64 = 0x03 << 56;
pub const PEER_COMM: u64 = 0x04 << 56;
pub const REPLICATION: u64 = 0x05 << 56;
pub const BATCH: u64 = 0x06 << 56;
pub const INSTANCE: u64 = 0x07 << 56;

pub fn stream(master: u64, role: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(role ^ index);
    rng
}

/// Seed for replication `index` of an experiment whose master seed is `master`.
pub fn replication_seed(master: u64, index: u64) -> u64 {
    use rand::RngCore;
    stream(master, REPLICATION, index).next_u64()
}
