//! Seeded random streams.
//!
//! Every stochastic step draws from a PCG-XSL-RR 128/64 generator
//! (`rand_pcg::Pcg64`). Streams are never shared across purposes: each
//! consumer derives its own seed from the master seed and a purpose tag with
//! [`derive_seed`], so adding a draw in one place never perturbs another.

use rand::SeedableRng;
pub use rand_pcg::Pcg64;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a purpose tag into a sub-seed. Platform independent.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = splitmix64(master);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

/// A generator for `(master, tag)`.
pub fn stream(master: u64, tag: &str) -> Pcg64 {
    Pcg64::seed_from_u64(derive_seed(master, tag))
}
