//! Flat byte-addressed arena with a per-byte shadow.
//!
//! Every allocation is registered with the shadow state regardless of which
//! variant performed it, so checked accesses from sanitized code can validate
//! buffers allocated by unsanitized code. Unchecked accesses fault only when
//! they leave the arena or touch freed cells; anything else inside the arena
//! (neighbouring allocations, redzones, unallocated gaps) is silently read or
//! overwritten. Freed memory is never recycled within one execution.

use std::collections::BTreeMap;

use super::ir::Width;

/// Bytes of poisoned space on each side of a sanitizer-widened allocation.
pub const REDZONE_WIDTH: u64 = 16;
pub const DEFAULT_ARENA_CAPACITY: u64 = 1 << 22;
/// Lowest address handed out; the bytes below stay unallocated so that
/// small integers never look like valid pointers.
pub const ARENA_BASE: u64 = 16;
const ALIGN: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CellState {
    Unallocated = 0,
    Live = 1,
    Redzone = 2,
    Freed = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Allocation {
    pub size: u64,
    pub live: bool,
    pub redzone: bool,
}

/// Sanitizer-side view of the heap.
#[derive(Debug, Clone, Default)]
pub struct ShadowState {
    pub live_allocations: BTreeMap<u64, Allocation>,
    pub redzone_width: u64,
    /// Freed allocations in free order; never reused within a run.
    pub quarantine: Vec<u64>,
}

impl ShadowState {
    /// `[addr, addr+size)` lies wholly inside one live allocation.
    pub fn check(&self, addr: i64, size: u64) -> bool {
        if addr < 0 {
            return false;
        }
        let addr = addr as u64;
        match self.live_allocations.range(..=addr).next_back() {
            Some((&start, a)) => a.live && addr.checked_add(size).is_some_and(|end| end <= start + a.size),
            None => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemFault {
    /// Access left the arena, or the arena is exhausted.
    OutOfArena,
    /// Access touched freed cells.
    Freed,
    /// Sanitizer-visible violation (invalid or double free under `free_q`).
    Checked,
}

#[derive(Debug, Clone)]
pub struct Memory {
    bytes: Vec<u8>,
    cells: Vec<CellState>,
    capacity: u64,
    top: u64,
    pub shadow: ShadowState,
}

impl Memory {
    pub fn new(capacity: u64) -> Self {
        Memory {
            bytes: Vec::new(),
            cells: Vec::new(),
            capacity,
            top: ARENA_BASE,
            shadow: ShadowState { redzone_width: REDZONE_WIDTH, ..Default::default() },
        }
    }

    pub fn reset(&mut self) {
        self.bytes.clear();
        self.cells.clear();
        self.top = ARENA_BASE;
        self.shadow.live_allocations.clear();
        self.shadow.quarantine.clear();
    }

    pub fn top(&self) -> u64 {
        self.top
    }

    fn ensure(&mut self, end: u64) {
        let end = end as usize;
        if self.bytes.len() < end {
            self.bytes.resize(end, 0);
            self.cells.resize(end, CellState::Unallocated);
        }
    }

    fn mark(&mut self, start: u64, len: u64, state: CellState) {
        self.ensure(start + len);
        self.cells[start as usize..(start + len) as usize].fill(state);
    }

    pub fn cell(&self, addr: u64) -> CellState {
        self.cells.get(addr as usize).copied().unwrap_or(CellState::Unallocated)
    }

    pub fn alloc(&mut self, size: i64, redzone: bool) -> Result<u64, MemFault> {
        if size < 0 {
            return Err(MemFault::OutOfArena);
        }
        let size = size as u64;
        let rz = if redzone { self.shadow.redzone_width } else { 0 };
        let footprint = (rz + size + rz).div_ceil(ALIGN) * ALIGN;
        let start = self.top;
        let end = start.checked_add(footprint).filter(|&e| e <= self.capacity).ok_or(MemFault::OutOfArena)?;
        let user = start + rz;
        self.ensure(end);
        if rz > 0 {
            self.mark(start, rz, CellState::Redzone);
            self.mark(user + size, end - (user + size), CellState::Redzone);
        }
        self.mark(user, size, CellState::Live);
        self.shadow.live_allocations.insert(user, Allocation { size, live: true, redzone });
        self.top = end;
        Ok(user)
    }

    pub fn free(&mut self, ptr: i64, quarantine: bool) -> Result<(), MemFault> {
        let found = if ptr < 0 { None } else { self.shadow.live_allocations.get(&(ptr as u64)).copied() };
        match found {
            Some(a) if a.live => {
                let ptr = ptr as u64;
                self.mark(ptr, a.size, CellState::Freed);
                if let Some(entry) = self.shadow.live_allocations.get_mut(&ptr) {
                    entry.live = false;
                }
                self.shadow.quarantine.push(ptr);
                Ok(())
            }
            Some(_) if quarantine => Err(MemFault::Checked),
            Some(_) => Err(MemFault::Freed),
            None if quarantine => Err(MemFault::Checked),
            // Unchecked free of a non-allocation is silently ignored.
            None => Ok(()),
        }
    }

    fn raw_range(&mut self, addr: i64, width: Width) -> Result<usize, MemFault> {
        let n = width.bytes();
        if addr < 0 || (addr as u64).saturating_add(n) > self.capacity {
            return Err(MemFault::OutOfArena);
        }
        let a = addr as u64;
        self.ensure(a + n);
        let a = a as usize;
        if self.cells[a..a + n as usize].contains(&CellState::Freed) {
            return Err(MemFault::Freed);
        }
        Ok(a)
    }

    pub fn load(&mut self, addr: i64, width: Width) -> Result<i64, MemFault> {
        let a = self.raw_range(addr, width)?;
        Ok(match width {
            Width::Byte => self.bytes[a] as i64,
            Width::Quad => i64::from_le_bytes(self.bytes[a..a + 8].try_into().expect("8 bytes")),
        })
    }

    pub fn store(&mut self, addr: i64, value: i64, width: Width) -> Result<(), MemFault> {
        let a = self.raw_range(addr, width)?;
        match width {
            Width::Byte => self.bytes[a] = value as u8,
            Width::Quad => self.bytes[a..a + 8].copy_from_slice(&value.to_le_bytes()),
        }
        Ok(())
    }

    pub fn write_bytes(&mut self, addr: u64, data: &[u8]) {
        self.ensure(addr + data.len() as u64);
        self.bytes[addr as usize..addr as usize + data.len()].copy_from_slice(data);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn redzones_surround_widened_allocations() {
        let mut m = Memory::new(1024);
        let p = m.alloc(10, true).unwrap();
        assert_eq!(p, ARENA_BASE + REDZONE_WIDTH);
        assert_eq!(m.cell(p - 1), CellState::Redzone);
        assert_eq!(m.cell(p), CellState::Live);
        assert_eq!(m.cell(p + 10), CellState::Redzone);
        assert!(m.shadow.check(p as i64, 8));
        assert!(m.shadow.check(p as i64 + 2, 8));
        assert!(!m.shadow.check(p as i64 + 3, 8));
        assert!(!m.shadow.check(p as i64 - 1, 1));
    }

    #[test]
    fn unchecked_overflow_corrupts_neighbour_silently() {
        let mut m = Memory::new(1024);
        let a = m.alloc(8, false).unwrap();
        let b = m.alloc(8, false).unwrap();
        assert_eq!(b, a + 8);
        m.store(a as i64 + 8, 0x41, Width::Byte).unwrap();
        assert_eq!(m.load(b as i64, Width::Byte).unwrap(), 0x41);
        assert!(!m.shadow.check(a as i64 + 8 - 4, 8));
    }

    #[test]
    fn freed_cells_fault_raw_and_fail_checks() {
        let mut m = Memory::new(1024);
        let a = m.alloc(8, false).unwrap() as i64;
        m.free(a, false).unwrap();
        assert_eq!(m.load(a, Width::Byte), Err(MemFault::Freed));
        assert!(!m.shadow.check(a, 1));
        assert_eq!(m.shadow.quarantine, vec![a as u64]);
        assert_eq!(m.free(a, true), Err(MemFault::Checked));
        assert_eq!(m.free(a, false), Err(MemFault::Freed));
        assert_eq!(m.free(a + 1, false), Ok(()));
        assert_eq!(m.free(a + 1, true), Err(MemFault::Checked));
    }

    #[test]
    fn leaving_the_arena_faults() {
        let mut m = Memory::new(64);
        assert_eq!(m.load(-1, Width::Byte), Err(MemFault::OutOfArena));
        assert_eq!(m.store(60, 0, Width::Quad), Err(MemFault::OutOfArena));
        assert_eq!(m.alloc(100, false), Err(MemFault::OutOfArena));
        assert_eq!(m.load(10, Width::Byte), Ok(0));
    }
}
