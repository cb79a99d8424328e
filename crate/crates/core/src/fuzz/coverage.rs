use crate::pir::{Inst, Program, SlotDecl, VariantKind};

/// Coverage ids owned by one source function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageSite {
    pub function: String,
    pub slot: Option<u32>,
    pub ids: Vec<u32>,
}

/// Maps coverage ids back to source functions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoverageLayout {
    pub sites: Vec<CoverageSite>,
    pub len: usize,
}

fn origin<'a>(slots: &'a [SlotDecl], name: &'a str) -> (&'a str, Option<u32>) {
    for (i, s) in slots.iter().enumerate() {
        if s.variants.iter().any(|(_, n)| n == name) {
            return (s.function.as_str(), Some(i as u32));
        }
    }
    (name, None)
}

impl CoverageLayout {
    pub fn of(program: &Program) -> Self {
        let mut sites = Vec::new();
        let mut len = 0;
        for f in &program.functions {
            if f.kind != VariantKind::Coverage {
                continue;
            }
            let ids: Vec<u32> = f
                .insts()
                .filter_map(|i| match i {
                    Inst::CovHit { id } => Some(*id),
                    _ => None,
                })
                .collect();
            len = len.max(ids.iter().map(|&i| i as usize + 1).max().unwrap_or(0));
            let (name, slot) = origin(&program.slots, &f.name);
            sites.push(CoverageSite { function: name.to_string(), slot, ids });
        }
        CoverageLayout { sites, len }
    }

    pub fn site_for_slot(&self, slot: u32) -> Option<&CoverageSite> {
        self.sites.iter().find(|s| s.slot == Some(slot))
    }
}

/// log2 bucket of a saturating hit counter, as a one-hot bit.
pub fn bucket_bit(count: u8) -> u8 {
    match count {
        0 => 0,
        n => 1 << (7 - n.leading_zeros()),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Novelty {
    pub new_blocks: usize,
    pub new_buckets: usize,
}

impl Novelty {
    pub fn any(&self) -> bool {
        self.new_blocks > 0 || self.new_buckets > 0
    }
}

/// Cumulative block set plus the counter buckets seen per block.
#[derive(Debug, Clone, Default)]
pub struct CoverageMap {
    buckets: Vec<u8>,
    covered: usize,
}

impl CoverageMap {
    pub fn new(len: usize) -> Self {
        CoverageMap { buckets: vec![0; len], covered: 0 }
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn covered_blocks(&self) -> usize {
        self.covered
    }

    pub fn is_covered(&self, id: u32) -> bool {
        self.buckets.get(id as usize).is_some_and(|&b| b != 0)
    }

    /// Merges one execution's counters. The set only ever grows.
    pub fn update(&mut self, counters: &[u8]) -> Novelty {
        let mut n = Novelty::default();
        for (seen, &c) in self.buckets.iter_mut().zip(counters) {
            let bit = bucket_bit(c);
            if bit != 0 && *seen & bit == 0 {
                if *seen == 0 {
                    n.new_blocks += 1;
                } else {
                    n.new_buckets += 1;
                }
                *seen |= bit;
            }
        }
        self.covered += n.new_blocks;
        n
    }

    pub fn fully_explored(&self, site: &CoverageSite) -> bool {
        site.ids.iter().all(|&id| self.is_covered(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_are_log2() {
        let bits: Vec<u8> = [0u8, 1, 2, 3, 4, 7, 8, 128, 255].iter().map(|&c| bucket_bit(c)).collect();
        assert_eq!(bits, vec![0, 1, 2, 2, 4, 4, 8, 128, 128]);
    }

    #[test]
    fn novelty_and_monotonicity() {
        let mut m = CoverageMap::new(3);
        assert_eq!(m.update(&[1, 0, 0]), Novelty { new_blocks: 1, new_buckets: 0 });
        assert_eq!(m.update(&[1, 0, 0]), Novelty::default());
        assert_eq!(m.update(&[2, 0, 0]), Novelty { new_blocks: 0, new_buckets: 1 });
        assert_eq!(m.update(&[0, 0, 0]), Novelty::default());
        assert_eq!(m.covered_blocks(), 1);
        let site = CoverageSite { function: "f".into(), slot: None, ids: vec![0, 2] };
        assert!(!m.fully_explored(&site));
        m.update(&[0, 0, 9]);
        assert!(m.fully_explored(&site));
    }
}
