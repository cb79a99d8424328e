//! Execution-count profiling, profile files and the static cost model.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pir::{BasicBlock, ExecResult, Function, Inst, Opcode, ProfSite, Program, Terminator};

pub const PROFILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionCounts {
    pub exec_count: u64,
    #[serde(default)]
    pub blocks: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub version: u32,
    pub workload: String,
    pub functions: BTreeMap<String, FunctionCounts>,
}

impl Default for Profile {
    fn default() -> Self {
        Profile { version: PROFILE_VERSION, workload: String::new(), functions: BTreeMap::new() }
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("malformed profile at line {line}, column {column}: {message}")]
    Malformed { line: usize, column: usize, message: String },
    #[error("unsupported profile version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("function `{0}` is already profile-instrumented")]
    AlreadyInstrumented(String),
}

impl Profile {
    /// Missing functions count as never executed.
    pub fn count(&self, function: &str) -> u64 {
        self.functions.get(function).map_or(0, |c| c.exec_count)
    }

    pub fn block_count(&self, function: &str, block: &str) -> u64 {
        self.functions.get(function).and_then(|c| c.blocks.get(block)).copied().unwrap_or(0)
    }

    /// Sums counts. Workload ids are combined as a sorted set so the operation
    /// is commutative.
    pub fn merge(&self, other: &Profile) -> Profile {
        let mut functions = self.functions.clone();
        for (name, c) in &other.functions {
            let e = functions.entry(name.clone()).or_default();
            e.exec_count += c.exec_count;
            for (b, n) in &c.blocks {
                *e.blocks.entry(b.clone()).or_default() += n;
            }
        }
        let ids: BTreeSet<&str> = self
            .workload
            .split('+')
            .chain(other.workload.split('+'))
            .filter(|s| !s.is_empty())
            .collect();
        Profile { version: PROFILE_VERSION, workload: ids.into_iter().collect::<Vec<_>>().join("+"), functions }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(text: &str) -> Result<Profile, ProfileError> {
        let p: Profile = serde_json::from_str(text).map_err(|e| ProfileError::Malformed {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if p.version != PROFILE_VERSION {
            return Err(ProfileError::Version(p.version));
        }
        Ok(p)
    }
}

pub fn write_profile(profile: &Profile, path: &Path) -> Result<(), ProfileError> {
    fs::write(path, profile.to_json() + "\n")?;
    Ok(())
}

pub fn read_profile(path: &Path) -> Result<Profile, ProfileError> {
    Profile::from_json(&fs::read_to_string(path)?)
}

fn fresh_label(f: &Function, base: &str) -> String {
    let mut label = base.to_string();
    let mut n = 0;
    while f.block_index(&label).is_some() {
        n += 1;
        label = format!("{base}{n}");
    }
    label
}

/// Inserts `prof_count entry` once per call and `prof_count block` at every
/// block. When the entry block is also a loop header a fresh preheader
/// carries the entry counter so that it counts calls only.
pub fn instrument_profile(program: &Program) -> Result<Program, ProfileError> {
    let mut out = program.clone();
    let mut next = 0u32;
    for f in &mut out.functions {
        if f.instrumented.profile {
            return Err(ProfileError::AlreadyInstrumented(f.name.clone()));
        }
        let entry_label = f.blocks[0].label.clone();
        let reentered = f.blocks.iter().any(|b| b.term.successors().contains(&entry_label.as_str()));
        for b in &mut f.blocks {
            b.insts.insert(0, Inst::ProfCount { site: ProfSite::Block, id: next });
            next += 1;
        }
        let entry_counter = Inst::ProfCount { site: ProfSite::Entry, id: next };
        next += 1;
        if reentered {
            let label = fresh_label(f, "prof_entry");
            f.blocks.insert(0, BasicBlock { label, insts: vec![entry_counter], term: Terminator::Br(entry_label) });
        } else {
            f.blocks[0].insts.insert(0, entry_counter);
        }
        f.instrumented.profile = true;
    }
    Ok(out)
}

/// Reads the counters of a run of a profile-instrumented program.
pub fn profile_from_run(instrumented: &Program, result: &ExecResult, workload: &str) -> Profile {
    let mut functions = BTreeMap::new();
    for f in &instrumented.functions {
        let mut counts = FunctionCounts::default();
        for b in &f.blocks {
            for i in &b.insts {
                if let Inst::ProfCount { site, id } = i {
                    let n = result.profile_counters.get(*id as usize).copied().unwrap_or(0);
                    match site {
                        ProfSite::Entry => counts.exec_count = n,
                        ProfSite::Block => {
                            counts.blocks.insert(b.label.clone(), n);
                        }
                    }
                }
            }
        }
        functions.insert(f.name.clone(), counts);
    }
    Profile { version: PROFILE_VERSION, workload: workload.to_string(), functions }
}

/// A profile with every function of `program` at zero.
pub fn zero_profile(program: &Program) -> Profile {
    let functions = program
        .functions
        .iter()
        .map(|f| {
            let blocks = f.blocks.iter().map(|b| (b.label.clone(), 0)).collect();
            (f.name.clone(), FunctionCounts { exec_count: 0, blocks })
        })
        .collect();
    Profile { functions, ..Profile::default() }
}

/// Extra weight of redzone and quarantine bookkeeping over a plain alloc/free.
pub const BOOKKEEPING_WEIGHT: u64 = 5;

/// Static per-opcode weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub weights: BTreeMap<Opcode, u64>,
}

impl Default for CostModel {
    fn default() -> Self {
        let weights = Opcode::ALL
            .iter()
            .map(|&op| {
                let w = match op {
                    Opcode::CheckAddr => 3,
                    Opcode::AllocRz | Opcode::FreeQ => 1 + BOOKKEEPING_WEIGHT,
                    _ => 1,
                };
                (op, w)
            })
            .collect();
        CostModel { weights }
    }
}

impl CostModel {
    pub fn weight(&self, op: Opcode) -> u64 {
        self.weights.get(&op).copied().unwrap_or(1)
    }
}

/// Sum of weights over every instruction and terminator, blocks weighted
/// uniformly. A dispatched call also pays for its slot read.
pub fn estimate_cost(f: &Function, model: &CostModel) -> u64 {
    f.blocks
        .iter()
        .map(|b| {
            let body: u64 = b
                .insts
                .iter()
                .map(|i| {
                    let extra = if matches!(i, Inst::CallSlot { .. }) { model.weight(Opcode::SlotLoad) } else { 0 };
                    model.weight(Opcode::of_inst(i)) + extra
                })
                .sum();
            body + model.weight(Opcode::of_terminator(&b.term))
        })
        .sum()
}
