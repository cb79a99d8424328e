//! Coverage-guided fuzzing with per-function variant tiers.
//!
//! Every multi-variant function starts on its coverage variant. An input
//! that reaches new coverage is admitted and executed once more with every
//! slot on its sanitized variant. A function whose blocks have all been seen
//! moves to its fast variant for good; partitioning happens synchronously
//! inside the loop.

mod corpus;
mod coverage;
mod mutate;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{content_name, Corpus, CorpusEntry};
pub use coverage::{bucket_bit, CoverageLayout, CoverageMap, CoverageSite, Novelty};
pub use mutate::{mutate, Mutation, DEFAULT_MAX_LEN};

use crate::dispatch::DispatchTable;
use crate::pir::{ExecError, ExecOptions, ExecResult, Image, Machine, Program, TrapInfo, VariantKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Coverage,
    Sanitized,
    Fast,
}

/// Per-slot tiers plus the global sanitized override.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzVariantState {
    pub tiers: Vec<Tier>,
    pub override_active: bool,
}

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("slot {slot} (`{function}`) lacks a {kind} variant")]
    MissingTier { slot: usize, function: String, kind: VariantKind },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub seed: u64,
    /// Stop after this many program executions (re-executions included).
    pub max_executions: u64,
    pub max_time: Option<Duration>,
    pub max_len: usize,
    /// Log crashes and continue instead of stopping at the first one.
    pub keep_going: bool,
    pub exec: ExecOptions,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            seed: 0,
            max_executions: 10_000,
            max_time: None,
            max_len: DEFAULT_MAX_LEN,
            keep_going: false,
            exec: ExecOptions { max_instructions: 1_000_000, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crash {
    pub input: Vec<u8>,
    pub trap: TrapInfo,
    /// Whether the trap came from the sanitized re-execution.
    pub during_override: bool,
    /// Active variant per slot when the trap fired, for exact replay.
    pub table: Vec<u32>,
    pub execution: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepOutcome {
    pub executions: u32,
    pub novelty: Novelty,
    pub admitted: bool,
    /// Functions that moved to the fast tier after this step.
    pub promoted: Vec<String>,
    pub crash: Option<Crash>,
    pub results: Vec<ExecResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub time_secs: f64,
    pub executions: u64,
    pub cumulative_blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub executions: u64,
    pub steps: u64,
    pub sanitized_reexecutions: u64,
    pub instructions: u64,
    pub corpus_size: usize,
    pub cumulative_blocks: usize,
    pub total_blocks: usize,
    pub fast_functions: Vec<String>,
    pub crashes: Vec<Crash>,
    pub series: Vec<SeriesPoint>,
    pub elapsed_secs: f64,
    pub execs_per_sec: f64,
}

impl Report {
    /// Drops wall-clock fields so that reports of identical campaigns compare
    /// equal.
    pub fn without_timing(&self) -> Report {
        let mut r = self.clone();
        r.elapsed_secs = 0.0;
        r.execs_per_sec = 0.0;
        for p in &mut r.series {
            p.time_secs = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn series_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["time_secs", "executions", "cumulative_blocks"]).expect("csv");
        for p in &self.series {
            w.write_record([p.time_secs.to_string(), p.executions.to_string(), p.cumulative_blocks.to_string()])
                .expect("csv");
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8")
    }
}

struct SlotTiers {
    coverage: u32,
    sanitized: u32,
    fast: u32,
    site: Option<usize>,
}

pub struct Fuzzer<'i> {
    machine: Machine<'i>,
    table: Option<DispatchTable>,
    slots: Vec<SlotTiers>,
    layout: CoverageLayout,
    pub state: FuzzVariantState,
    pub coverage: CoverageMap,
    pub corpus: Corpus,
    cfg: FuzzConfig,
    rng: ChaCha20Rng,
    executions: u64,
    steps: u64,
    reexecutions: u64,
    instructions: u64,
}

impl<'i> Fuzzer<'i> {
    /// `program` must be the source of `image`. Programs with slots need a
    /// coverage, sanitized and fast variant per slot; programs without slots
    /// are fuzzed as they are.
    pub fn new(image: &'i Image, program: &Program, cfg: FuzzConfig, corpus: Corpus) -> Result<Self, FuzzError> {
        let layout = CoverageLayout::of(program);
        let mut slots = Vec::new();
        for (i, s) in program.slots.iter().enumerate() {
            let find = |kind: VariantKind| {
                s.variants.iter().position(|(k, _)| *k == kind).map(|p| p as u32).ok_or_else(|| {
                    FuzzError::MissingTier { slot: i, function: s.function.clone(), kind }
                })
            };
            slots.push(SlotTiers {
                coverage: find(VariantKind::Coverage)?,
                sanitized: find(VariantKind::Sanitized)?,
                fast: find(VariantKind::Fast)?,
                site: layout.sites.iter().position(|site| site.slot == Some(i as u32)),
            });
        }
        let table = (!program.slots.is_empty()).then(|| DispatchTable::for_program(program));
        let state = FuzzVariantState { tiers: vec![Tier::Coverage; slots.len()], override_active: false };
        let f = Fuzzer {
            machine: Machine::new(image, cfg.exec.clone()),
            table,
            slots,
            coverage: CoverageMap::new(layout.len),
            layout,
            state,
            corpus,
            rng: ChaCha20Rng::seed_from_u64(cfg.seed),
            cfg,
            executions: 0,
            steps: 0,
            reexecutions: 0,
            instructions: 0,
        };
        f.sync_table();
        Ok(f)
    }

    pub fn layout(&self) -> &CoverageLayout {
        &self.layout
    }

    pub fn table(&self) -> Option<&DispatchTable> {
        self.table.as_ref()
    }

    pub fn executions(&self) -> u64 {
        self.executions
    }

    fn index_for(&self, slot: usize, tier: Tier) -> u32 {
        let s = &self.slots[slot];
        match tier {
            Tier::Coverage => s.coverage,
            Tier::Sanitized => s.sanitized,
            Tier::Fast => s.fast,
        }
    }

    /// Writes the current tiers, or the sanitized override, into the table.
    fn sync_table(&self) {
        if let Some(t) = &self.table {
            for slot in 0..self.slots.len() {
                let tier = if self.state.override_active { Tier::Sanitized } else { self.state.tiers[slot] };
                t.update(slot, self.index_for(slot, tier));
            }
        }
    }

    fn execute(&mut self, input: &[u8]) -> Result<ExecResult, FuzzError> {
        let r = self.machine.run(input, self.table.as_ref())?;
        self.executions += 1;
        self.instructions += r.instructions_executed;
        Ok(r)
    }

    fn crash_from(&self, input: &[u8], r: &ExecResult) -> Option<Crash> {
        r.trap.clone().map(|trap| Crash {
            input: input.to_vec(),
            trap,
            during_override: self.state.override_active,
            table: self.table.as_ref().map(|t| t.snapshot()).unwrap_or_default(),
            execution: self.executions,
        })
    }

    /// One input: run it on the current tiers; on new coverage admit it and
    /// re-run it fully sanitized; then promote newly explored functions.
    pub fn fuzz_step(&mut self, input: &[u8]) -> Result<StepOutcome, FuzzError> {
        self.steps += 1;
        let mut out = StepOutcome::default();
        let first = self.execute(input)?;
        out.executions = 1;
        out.novelty = self.coverage.update(&first.coverage);
        out.crash = self.crash_from(input, &first);
        out.results.push(first);

        if out.novelty.any() {
            self.corpus.admit(input.to_vec(), self.coverage.covered_blocks())?;
            out.admitted = true;
            if self.table.is_some() {
                self.state.override_active = true;
                self.sync_table();
                let again = self.execute(input)?;
                self.reexecutions += 1;
                out.executions += 1;
                if out.crash.is_none() {
                    out.crash = self.crash_from(input, &again);
                }
                out.results.push(again);
                self.state.override_active = false;
            }
        }

        for slot in 0..self.slots.len() {
            if self.state.tiers[slot] != Tier::Coverage {
                continue;
            }
            let explored = match self.slots[slot].site {
                Some(site) => self.coverage.fully_explored(&self.layout.sites[site]),
                None => false,
            };
            if explored {
                self.state.tiers[slot] = Tier::Fast;
                let site = &self.layout.sites[self.slots[slot].site.expect("explored implies site")];
                out.promoted.push(site.function.clone());
            }
        }
        self.sync_table();
        Ok(out)
    }

    fn fast_functions(&self) -> Vec<String> {
        (0..self.slots.len())
            .filter(|&s| self.state.tiers[s] == Tier::Fast)
            .filter_map(|s| self.slots[s].site.map(|i| self.layout.sites[i].function.clone()))
            .collect()
    }

    fn pick_and_mutate(&mut self) -> Vec<u8> {
        if self.corpus.is_empty() {
            return mutate(&[], &[], &mut self.rng, self.cfg.max_len).0;
        }
        let i = self.rng.gen_range(0..self.corpus.len());
        let donors: Vec<&[u8]> = self.corpus.entries().iter().map(|e| e.input.as_slice()).collect();
        mutate(self.corpus.get(i), &donors, &mut self.rng, self.cfg.max_len).0
    }

    /// Runs seeds first, then mutated corpus members, until the execution or
    /// time budget is spent or (unless `keep_going`) the first crash.
    pub fn campaign(&mut self, seeds: &[Vec<u8>]) -> Result<Report, FuzzError> {
        let start = Instant::now();
        let mut crashes = Vec::new();
        let mut series = Vec::new();
        let mut queue: Vec<Vec<u8>> = if seeds.is_empty() { vec![Vec::new()] } else { seeds.to_vec() };
        queue.reverse();
        while self.executions < self.cfg.max_executions
            && self.cfg.max_time.is_none_or(|t| start.elapsed() < t)
        {
            let input = match queue.pop() {
                Some(s) => s,
                None => self.pick_and_mutate(),
            };
            let step = self.fuzz_step(&input)?;
            if step.novelty.new_blocks > 0 {
                series.push(SeriesPoint {
                    time_secs: start.elapsed().as_secs_f64(),
                    executions: self.executions,
                    cumulative_blocks: self.coverage.covered_blocks(),
                });
            }
            if let Some(c) = step.crash {
                crashes.push(c);
                if !self.cfg.keep_going {
                    break;
                }
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        if self.executions > 0 {
            series.push(SeriesPoint {
                time_secs: elapsed,
                executions: self.executions,
                cumulative_blocks: self.coverage.covered_blocks(),
            });
        }
        Ok(Report {
            seed: self.cfg.seed,
            executions: self.executions,
            steps: self.steps,
            sanitized_reexecutions: self.reexecutions,
            instructions: self.instructions,
            corpus_size: self.corpus.len(),
            cumulative_blocks: self.coverage.covered_blocks(),
            total_blocks: self.layout.sites.iter().map(|s| s.ids.len()).sum(),
            fast_functions: self.fast_functions(),
            crashes,
            series,
            elapsed_secs: elapsed,
            execs_per_sec: if elapsed > 0.0 { self.executions as f64 / elapsed } else { 0.0 },
        })
    }
}

/// Compiles `program` and runs a campaign with an in-memory corpus.
pub fn fuzz_campaign(program: &Program, seeds: &[Vec<u8>], cfg: FuzzConfig) -> Result<Report, FuzzError> {
    let image = Image::compile(program)?;
    let mut f = Fuzzer::new(&image, program, cfg, Corpus::in_memory())?;
    f.campaign(seeds)
}

/// Re-runs a crash. With `table` the recorded activation is restored;
/// otherwise every slot uses its sanitized variant.
pub fn replay(
    program: &Program,
    input: &[u8],
    table: Option<&[u32]>,
    opts: &ExecOptions,
) -> Result<ExecResult, ExecError> {
    let image = Image::compile(program)?;
    let t = DispatchTable::for_program(program);
    match table {
        Some(snapshot) => t.fill(|s| snapshot[s]),
        None => {
            for (i, s) in program.slots.iter().enumerate() {
                let idx = s.variants.iter().position(|(k, _)| *k == VariantKind::Sanitized).unwrap_or(0);
                t.set(i, idx as u32);
            }
        }
    }
    Machine::new(&image, opts.clone()).run(input, Some(&t))
}
