// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

/// The only source of time in the emulator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LogicalClock {
    tick: u64,
}

impl LogicalClock {
    pub fn now(&self) -> u64 {
        self.tick
    }

    /// Moves the clock forward. Going backwards is a scheduler bug.
    pub fn advance_to(&mut self, tick: u64) {
        assert!(tick >= self.tick, "logical clock cannot run backwards ({} -> {tick})", self.tick);
        self.tick = tick;
    }
}

/// Deadline queue ordered by `(tick, actor, sequence number)`.
#[derive(Debug, Clone)]
pub struct Scheduler<K: Ord, A> {
    queue: BTreeMap<(u64, K, u64), A>,
    next_seq: u64,
}

impl<K: Ord + Clone, A> Scheduler<K, A> {
    pub fn new() -> Self {
        Self {
            queue: BTreeMap::new(),
            next_seq: 0,
        }
    }

    pub fn schedule(&mut self, tick: u64, actor: K, action: A) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((tick, actor, seq), action);
    }

    /// Removes and returns the earliest action due at or before `until`.
    pub fn pop_due(&mut self, until: u64) -> Option<(u64, K, A)> {
        let first = self.queue.first_key_value()?.0;
        if first.0 > until {
            return None;
        }
        let ((tick, actor, _), action) = self.queue.pop_first()?;
        Some((tick, actor, action))
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&K, &A) -> bool) {
        self.queue.retain(|(_, actor, _), action| keep(actor, action));
    }
}

impl<K: Ord + Clone, A> Default for Scheduler<K, A> {
    fn default() -> Self {
        Self::new()
    }
}
