use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Pool of deliverable actions; the next one is drawn uniformly by a seeded
/// generator, standing in for a server that controls message ordering.
#[derive(Debug, Clone)]
pub struct Scheduler<A> {
    pending: Vec<A>,
    rng: ChaCha20Rng,
}

impl<A> Scheduler<A> {
    pub fn new(rng: ChaCha20Rng) -> Self {
        Self {
            pending: Vec::new(),
            rng,
        }
    }

    pub fn push(&mut self, action: A) {
        self.pending.push(action);
    }

    pub fn extend(&mut self, actions: impl IntoIterator<Item = A>) {
        self.pending.extend(actions);
    }

    pub fn next(&mut self) -> Option<A> {
        if self.pending.is_empty() {
            return None;
        }
        let k = self.rng.gen_range(0..self.pending.len());
        Some(self.pending.swap_remove(k))
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}
