//! Deterministic RNG substreams keyed by (master seed, agent, round, role).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for. Distinct roles never share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Teacher,
    Feedback,
    AgentEpisode,
    Evaluation,
    Session,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::Teacher => 1,
            Role::Feedback => 2,
            Role::AgentEpisode => 3,
            Role::Evaluation => 4,
            Role::Session => 5,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the key into a 64-bit seed.
pub fn derive(master: u64, agent: u64, round: u64, role: Role, extra: u64) -> u64 {
    let mut h = splitmix(master);
    for part in [agent, round, role.tag(), extra] {
        h = splitmix(h ^ part.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

pub fn stream(master: u64, agent: u64, round: u64, role: Role, extra: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, agent, round, role, extra))
}
