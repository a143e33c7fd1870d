use rand::Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: [f64; 2],
    pub a: [f64; 2],
    pub r: f64,
    pub s_next: [f64; 2],
    /// True termination (goal reached). Time-limit truncation is not stored
    /// as done, so the critic keeps bootstrapping through it.
    pub done: bool,
}

/// A minibatch in column-stacked form.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(items: &[Transition]) -> Self {
        let n = items.len();
        let flat = |f: fn(&Transition) -> [f64; 2]| {
            Tensor::matrix(n, 2, items.iter().flat_map(f).collect()).expect("two columns")
        };
        Self {
            states: flat(|t| t.s),
            actions: flat(|t| t.a),
            rewards: items.iter().map(|t| t.r).collect(),
            next_states: flat(|t| t.s_next),
            dones: items.iter().map(|t| t.done).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            cursor: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch {
        assert!(!self.items.is_empty(), "sampling from an empty buffer");
        let picked: Vec<Transition> = (0..batch_size)
            .map(|_| self.items[rng.random_range(0..self.items.len())])
            .collect();
        Batch::from_transitions(&picked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(i: usize) -> Transition {
        Transition {
            s: [i as f64, 0.0],
            a: [0.0, 0.0],
            r: i as f64,
            s_next: [0.0, 0.0],
            done: false,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(t(i));
            assert!(b.len() <= 3);
        }
        let mut r: Vec<f64> = b.iter().map(|x| x.r).collect();
        r.sort_by(f64::total_cmp);
        assert_eq!(r, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_seeded_and_roughly_uniform() {
        let mut b = ReplayBuffer::new(4);
        for i in 0..4 {
            b.push(t(i));
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(b.sample(16, &mut r1), b.sample(16, &mut r2));

        let batch = b.sample(40_000, &mut r1);
        let mut counts = [0usize; 4];
        for r in &batch.rewards {
            counts[*r as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 40_000.0 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }
}
