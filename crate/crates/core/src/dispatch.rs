//! The variant dispatch table: one atomically updated slot per multi-variant
//! function, holding the index of the currently active variant.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::pir::Program;

#[derive(Debug)]
pub struct DispatchTable {
    slots: Vec<AtomicU32>,
    variant_counts: Vec<u32>,
}

impl DispatchTable {
    /// A table with every slot on variant 0.
    pub fn new(variant_counts: Vec<u32>) -> Self {
        assert!(variant_counts.iter().all(|&n| n > 0), "every slot needs at least one variant");
        DispatchTable {
            slots: variant_counts.iter().map(|_| AtomicU32::new(0)).collect(),
            variant_counts,
        }
    }

    pub fn for_program(p: &Program) -> Self {
        Self::new(p.slots.iter().map(|s| s.variants.len() as u32).collect())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn variant_count(&self, slot: usize) -> u32 {
        self.variant_counts[slot]
    }

    #[inline]
    pub fn get(&self, slot: usize) -> u32 {
        self.slots[slot].load(Ordering::Relaxed)
    }

    /// Stores `variant` into `slot`. Panics on an id outside the slot's range so
    /// that a slot can never reference a foreign function.
    #[inline]
    pub fn set(&self, slot: usize, variant: u32) {
        assert!(variant < self.variant_counts[slot], "variant {variant} out of range for slot {slot}");
        self.slots[slot].store(variant, Ordering::Relaxed);
    }

    /// Writes only when the value changes; returns whether a write happened.
    #[inline]
    pub fn update(&self, slot: usize, variant: u32) -> bool {
        if self.get(slot) == variant {
            false
        } else {
            self.set(slot, variant);
            true
        }
    }

    pub fn fill(&self, variant_of: impl Fn(usize) -> u32) {
        for s in 0..self.len() {
            self.set(s, variant_of(s));
        }
    }

    pub fn snapshot(&self) -> Vec<u32> {
        (0..self.len()).map(|s| self.get(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_writes_only_on_change() {
        let t = DispatchTable::new(vec![2, 3]);
        assert!(!t.update(0, 0));
        assert!(t.update(0, 1));
        assert!(!t.update(0, 1));
        assert_eq!(t.snapshot(), vec![1, 0]);
    }

    #[test]
    #[should_panic]
    fn rejects_foreign_variant_id() {
        DispatchTable::new(vec![2]).set(0, 2);
    }
}
