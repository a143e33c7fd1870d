//! Fixtures shared by the benchmarks.

use novelty_sac::novelty::NoveltyConstraint;
use novelty_sac::sac::{Batch, CriticPair, Transition};
use novelty_sac::PolicyParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HIDDEN: [usize; 2] = [32, 32];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn actor(seed: u64) -> PolicyParams {
    PolicyParams::init(2, 2, &HIDDEN, &mut rng(seed))
}

pub fn critics(seed: u64) -> CriticPair {
    CriticPair::init(&HIDDEN, true, &mut rng(seed))
}

pub fn batch(size: usize, seed: u64) -> Batch {
    let mut rng = rng(seed);
    let items: Vec<Transition> = (0..size)
        .map(|_| Transition {
            s: [rng.random(), rng.random()],
            a: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            r: -0.1,
            s_next: [rng.random(), rng.random()],
            done: false,
        })
        .collect();
    Batch::from_transitions(&items)
}

/// `n` frozen priors with a threshold loose enough that most proposals pass.
pub fn constraints(n: usize, epsilon: f64) -> Vec<NoveltyConstraint> {
    (0..n)
        .map(|i| NoveltyConstraint::new(actor(100 + i as u64), epsilon).expect("positive epsilon"))
        .collect()
}
