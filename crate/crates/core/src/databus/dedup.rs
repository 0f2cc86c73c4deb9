use std::collections::HashSet;
use std::hash::Hash;

/// Consumer-side idempotency filter. Remembers every key it has admitted.
#[derive(Debug, Clone)]
pub struct Deduplicator<K> {
    seen: HashSet<K>,
    suppressed: u64,
}

impl<K: Hash + Eq> Deduplicator<K> {
    pub fn new() -> Self {
        Self {
            seen: HashSet::new(),
            suppressed: 0,
        }
    }

    /// `true` the first time `key` is offered, `false` afterwards.
    pub fn admit(&mut self, key: K) -> bool {
        let fresh = self.seen.insert(key);
        if !fresh {
            self.suppressed += 1;
        }
        fresh
    }

    pub fn contains(&self, key: &K) -> bool {
        self.seen.contains(key)
    }

    pub fn suppressed(&self) -> u64 {
        self.suppressed
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

impl<K: Hash + Eq> Default for Deduplicator<K> {
    fn default() -> Self {
        Self::new()
    }
}
