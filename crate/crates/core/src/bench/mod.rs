//! Embedded program corpus and the instruction-count benchmark harness.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::DispatchTable;
use crate::pir::{
    parse_program, ExecError, ExecOptions, ExecResult, Image, Machine, ParseError, Program, TrapKind, VariantKind,
};
use crate::profiler::{instrument_profile, profile_from_run, zero_profile, CostModel, Profile, ProfileError};
use crate::runtime::{PolicyConfig, PolicyKind, Runtime, RuntimeError};
use crate::sanitize::CheckConfig;
use crate::variants::{build, Build, BuildMode, PlanConfig, VariantError};

/// A check-clean benchmark program with a training and a reference input.
#[derive(Debug, Clone)]
pub struct BenchProgram {
    pub name: &'static str,
    pub source: &'static str,
    pub train: Vec<u8>,
    pub reference: Vec<u8>,
}

impl BenchProgram {
    pub fn program(&self) -> Program {
        parse_program(self.source).expect("embedded programs parse")
    }
}

fn repeat(s: &str, n: usize) -> Vec<u8> {
    s.repeat(n).into_bytes()
}

/// The benchmark corpus, in a fixed order.
pub fn corpus() -> Vec<BenchProgram> {
    let mut expr = "((1+2)*(3+(4*5)))+".repeat(12);
    expr.push_str(&"(1+2*3)-(4*5+6)*7+".repeat(24));
    expr.push('8');
    vec![
        BenchProgram { name: "sort", source: include_str!("programs/sort.pir"), train: vec![6], reference: vec![40] },
        BenchProgram { name: "matmul", source: include_str!("programs/matmul.pir"), train: vec![3], reference: vec![12] },
        BenchProgram {
            name: "hashtable",
            source: include_str!("programs/hashtable.pir"),
            train: vec![10],
            reference: vec![200],
        },
        BenchProgram {
            name: "strscan",
            source: include_str!("programs/strscan.pir"),
            train: repeat("this is the thing ", 3),
            reference: repeat("the theory of thin threads that thread through the night ", 30),
        },
        BenchProgram {
            name: "parser",
            source: include_str!("programs/parser.pir"),
            train: b"1+2*(3+4)-5".to_vec(),
            reference: expr.into_bytes(),
        },
        BenchProgram {
            name: "checksum",
            source: include_str!("programs/checksum.pir"),
            train: b"abc".to_vec(),
            reference: repeat("0123456789abcdefghij", 10),
        },
        BenchProgram { name: "list", source: include_str!("programs/list.pir"), train: vec![2], reference: vec![60] },
        BenchProgram { name: "sieve", source: include_str!("programs/sieve.pir"), train: vec![4], reference: vec![100] },
    ]
}

/// A program with a known first violation under full sanitization.
#[derive(Debug, Clone)]
pub struct PlantedBug {
    pub name: &'static str,
    pub source: &'static str,
    pub input: Vec<u8>,
    pub kind: TrapKind,
    pub function: &'static str,
    pub block: &'static str,
    /// Index of the faulting instruction in the uninstrumented block.
    pub index: usize,
}

macro_rules! bug {
    ($name:literal, $input:expr, $kind:ident, $f:literal, $b:literal, $i:literal) => {
        PlantedBug {
            name: $name,
            source: include_str!(concat!("bugs/", $name, ".pir")),
            input: $input,
            kind: TrapKind::$kind,
            function: $f,
            block: $b,
            index: $i,
        }
    };
}

pub fn planted_bugs() -> Vec<PlantedBug> {
    vec![
        bug!("heap_overflow_write", vec![], AddressCheck, "fill", "body", 1),
        bug!("heap_overflow_read", vec![], AddressCheck, "main", "b0", 3),
        bug!("heap_underflow_read", vec![], AddressCheck, "main", "b0", 2),
        bug!("global_overflow", vec![], AddressCheck, "get", "b0", 2),
        bug!("use_after_free_read", vec![], AddressCheck, "main", "b0", 3),
        bug!("use_after_free_write", vec![], AddressCheck, "main", "b0", 2),
        bug!("double_free", vec![], AddressCheck, "main", "b0", 2),
        bug!("invalid_free", vec![], AddressCheck, "main", "b0", 2),
        bug!("add_overflow", vec![], OverflowCheck, "bump", "b0", 0),
        bug!("sub_overflow", vec![1], OverflowCheck, "main", "b0", 2),
        bug!("mul_overflow", vec![], OverflowCheck, "main", "b0", 1),
        bug!("shift_too_far", vec![4], ShiftCheck, "main", "b0", 2),
        bug!("shift_negative", vec![], ShiftCheck, "main", "b0", 2),
        bug!("div_by_zero", vec![], DivCheck, "ratio", "b0", 0),
        bug!("div_overflow", vec![], DivCheck, "main", "b0", 1),
        bug!("rem_by_zero", vec![], DivCheck, "main", "b0", 1),
    ]
}

/// Sub-allocates inside one checked allocation and overflows between chunks.
pub const CUSTOM_ALLOCATOR: &str = include_str!("bugs/custom_allocator.pir");
/// Out-of-bounds write on a path training never takes; triggered by a leading `R`.
pub const COLD_BUG: &str = include_str!("targets/cold_bug.pir");
/// Out-of-bounds write in a per-byte function, triggered by one `0xff` byte.
pub const HOT_BUG: &str = include_str!("targets/hot_bug.pir");
/// Fuzzing target with an expensive loop and a bug behind a magic prefix.
pub const FUZZ_TOY: &str = include_str!("targets/fuzz_toy.pir");
/// Fuzzing target with a single-block function writing at an input offset.
pub const FUZZ_BLIND: &str = include_str!("targets/fuzz_blind.pir");

pub fn cold_bug_inputs() -> (Vec<u8>, Vec<u8>) {
    (b"normal input".to_vec(), b"Rare input".to_vec())
}

pub fn hot_bug_inputs() -> (Vec<u8>, Vec<u8>) {
    let train: Vec<u8> = (0..64u8).collect();
    let mut reference: Vec<u8> = (0..200u32).map(|i| (i * 7 % 250) as u8).collect();
    reference[150] = 0xff;
    (train, reference)
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Variant(#[from] VariantError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Runs a profile-instrumented copy of `program` on every input and merges
/// the counts. Traps are tolerated; their counts still count.
pub fn train_profile<I: AsRef<[u8]>>(
    program: &Program,
    inputs: &[I],
    workload: &str,
    opts: &ExecOptions,
) -> Result<Profile, BenchError> {
    let instrumented = instrument_profile(program)?;
    let image = Image::compile(&instrumented)?;
    let mut m = Machine::new(&image, opts.clone());
    let mut total = Profile { workload: workload.to_string(), ..zero_profile(program) };
    for input in inputs {
        let r = m.run(input.as_ref(), None)?;
        total = total.merge(&profile_from_run(&instrumented, &r, workload));
    }
    Ok(total)
}

/// Builds every function as a single sanitized body with direct calls.
pub fn full_sanitized(program: &Program, checks: &CheckConfig) -> Result<Program, BenchError> {
    let cold = zero_profile(program);
    let cfg = PlanConfig { checks: *checks, hot_threshold: 1, mode: BuildMode::Partition };
    Ok(build(program, Some(&cold), &cfg, &CostModel::default(), "full")?.program)
}

/// A table with every slot on the variant of `kind` (or its primary variant).
pub fn fixed_table(program: &Program, kind: VariantKind) -> DispatchTable {
    let t = DispatchTable::for_program(program);
    for (i, s) in program.slots.iter().enumerate() {
        let idx = s
            .variants
            .iter()
            .position(|(k, _)| *k == kind)
            .unwrap_or_else(|| s.variants.iter().position(|(k, _)| *k == VariantKind::Sanitized).unwrap_or(0));
        t.set(i, idx as u32);
    }
    t
}

/// Runs a partitioned build: registers its metadata, initialises the runtime
/// and repartitions every `repartition_every` instructions from inside the
/// interpreter. The background thread is only started when no interval is
/// given and the policy config asks for it.
pub fn run_partitioned(
    b: &Build,
    input: &[u8],
    policy: &PolicyConfig,
    repartition_every: Option<u64>,
    exec: &ExecOptions,
) -> Result<ExecResult, BenchError> {
    let image = Image::compile(&b.program)?;
    if b.metadata.descriptors.is_empty() {
        return Ok(Machine::new(&image, exec.clone()).run(input, None)?);
    }
    let mut rt = Runtime::new();
    rt.register_module(&b.metadata.module, &b.metadata.descriptors)?;
    let cfg = PolicyConfig { background: policy.background && repartition_every.is_none(), ..policy.clone() };
    rt.init_runtime(&cfg)?;
    let table = rt.table()?;
    let opts = ExecOptions { hook_interval: repartition_every, ..exec.clone() };
    let mut m = Machine::new(&image, opts);
    let r = m.run_with_hook(input, Some(&table), &mut |_| {
        let _ = rt.partition_once();
    })?;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "config")]
pub enum BenchConfig {
    Baseline,
    FullSanitized,
    Partitioned { policy: PolicyKind, budget_fraction: f64 },
    Identical,
}

impl BenchConfig {
    pub fn label(&self) -> String {
        match self {
            BenchConfig::Baseline => "baseline".into(),
            BenchConfig::FullSanitized => "all_sanitized".into(),
            BenchConfig::Partitioned { policy, budget_fraction } => match policy {
                PolicyKind::ExpectedCost => format!("expected_cost_{}", budget_fraction),
                p => p.to_string(),
            },
            BenchConfig::Identical => "identical_variants".into(),
        }
    }

    pub fn default_set() -> Vec<BenchConfig> {
        vec![
            BenchConfig::FullSanitized,
            BenchConfig::Partitioned { policy: PolicyKind::ExpectedCost, budget_fraction: 0.01 },
            BenchConfig::Partitioned { policy: PolicyKind::ProfileGuided, budget_fraction: 0.01 },
            BenchConfig::Partitioned { policy: PolicyKind::Random, budget_fraction: 0.01 },
            BenchConfig::Identical,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub checks: CheckConfig,
    pub hot_threshold: u64,
    pub seeds: Vec<u64>,
    pub repartition_every: Option<u64>,
    /// Repartition from the background thread on wall-clock time instead of
    /// from the interpreter. Results are then no longer reproducible.
    pub realtime: bool,
    pub exec: ExecOptions,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            checks: CheckConfig::ADDRESS,
            hot_threshold: 1,
            seeds: vec![1, 2, 3],
            repartition_every: Some(10_000),
            realtime: false,
            exec: ExecOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub program: String,
    pub config: String,
    /// Median over seeds.
    pub instructions: u64,
    pub baseline_instructions: u64,
    pub overhead: f64,
    pub dispatched_calls: u64,
    pub checks_executed: u64,
    pub output_matches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub config: String,
    pub cold_bug_rate: f64,
    pub hot_bug_rate: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<Measurement>,
    /// Geometric mean of `1 + overhead` minus one, per config.
    pub geomean: Vec<(String, f64)>,
    pub detection: Vec<Detection>,
    pub notes: Vec<String>,
}

pub fn median(xs: &mut [u64]) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

pub fn geomean_overhead(overheads: &[f64]) -> f64 {
    if overheads.is_empty() {
        return 0.0;
    }
    let s: f64 = overheads.iter().map(|o| (1.0 + o).ln()).sum();
    (s / overheads.len() as f64).exp() - 1.0
}

fn build_config(
    cfg: &BenchConfig,
    program: &Program,
    profile: &Profile,
    opts: &BenchOptions,
) -> Result<Build, BenchError> {
    let mode = match cfg {
        BenchConfig::Identical => BuildMode::Identical,
        _ => BuildMode::Partition,
    };
    let plan = PlanConfig { checks: opts.checks, hot_threshold: opts.hot_threshold, mode };
    Ok(build(program, Some(profile), &plan, &CostModel::default(), "bench")?)
}

/// Executes one program under one config, returning the per-seed results.
pub fn measure_config(
    cfg: &BenchConfig,
    program: &Program,
    profile: &Profile,
    input: &[u8],
    opts: &BenchOptions,
) -> Result<Vec<ExecResult>, BenchError> {
    match cfg {
        BenchConfig::Baseline => Ok(vec![Machine::new(&Image::compile(program)?, opts.exec.clone()).run(input, None)?]),
        BenchConfig::FullSanitized => {
            let p = full_sanitized(program, &opts.checks)?;
            Ok(vec![Machine::new(&Image::compile(&p)?, opts.exec.clone()).run(input, None)?])
        }
        BenchConfig::Identical => {
            let b = build_config(cfg, program, profile, opts)?;
            let t = DispatchTable::for_program(&b.program);
            Ok(vec![Machine::new(&Image::compile(&b.program)?, opts.exec.clone()).run(input, Some(&t))?])
        }
        BenchConfig::Partitioned { policy, budget_fraction } => {
            let b = build_config(cfg, program, profile, opts)?;
            opts.seeds
                .iter()
                .map(|&seed| {
                    let pc = PolicyConfig {
                        policy: *policy,
                        budget_fraction: *budget_fraction,
                        rng_seed: Some(seed),
                        background: opts.realtime,
                        ..Default::default()
                    };
                    let every = if opts.realtime { None } else { opts.repartition_every };
                    run_partitioned(&b, input, &pc, every, &opts.exec)
                })
                .collect()
        }
    }
}

fn detection_rate(cfg: &BenchConfig, source: &str, train: &[u8], reference: &[u8], opts: &BenchOptions) -> Result<f64, BenchError> {
    let program = parse_program(source)?;
    let profile = train_profile(&program, &[train], "train", &opts.exec)?;
    let results = measure_config(cfg, &program, &profile, reference, opts)?;
    let hits = results.iter().filter(|r| r.trap_kind().is_some_and(|k| k.is_sanitizer_report())).count();
    Ok(hits as f64 / results.len() as f64)
}

pub fn run_bench(programs: &[BenchProgram], configs: &[BenchConfig], opts: &BenchOptions) -> Result<BenchReport, BenchError> {
    let mut rows = Vec::new();
    for bp in programs {
        let program = bp.program();
        let profile = train_profile(&program, &[&bp.train], "train", &opts.exec)?;
        let base = &measure_config(&BenchConfig::Baseline, &program, &profile, &bp.reference, opts)?[0];
        for cfg in configs {
            let results = measure_config(cfg, &program, &profile, &bp.reference, opts)?;
            let mut counts: Vec<u64> = results.iter().map(|r| r.instructions_executed).collect();
            let instructions = median(&mut counts);
            let rep = results.iter().find(|r| r.instructions_executed == instructions).expect("median is a sample");
            rows.push(Measurement {
                program: bp.name.to_string(),
                config: cfg.label(),
                instructions,
                baseline_instructions: base.instructions_executed,
                overhead: crate::pir::overhead(instructions, base.instructions_executed),
                dispatched_calls: rep.dispatched_calls(),
                checks_executed: rep.by_class.checks(),
                output_matches: results.iter().all(|r| r.output == base.output && r.status == base.status),
            });
        }
    }
    let geomean = configs
        .iter()
        .map(|c| {
            let l = c.label();
            let o: Vec<f64> = rows.iter().filter(|r| r.config == l).map(|r| r.overhead).collect();
            (l, geomean_overhead(&o))
        })
        .collect();
    let (ct, cr) = cold_bug_inputs();
    let (ht, hr) = hot_bug_inputs();
    let mut detection = Vec::new();
    for cfg in configs {
        detection.push(Detection {
            config: cfg.label(),
            cold_bug_rate: detection_rate(cfg, COLD_BUG, &ct, &cr, opts)?,
            hot_bug_rate: detection_rate(cfg, HOT_BUG, &ht, &hr, opts)?,
            runs: match cfg {
                BenchConfig::Partitioned { .. } => opts.seeds.len(),
                _ => 1,
            },
        });
    }
    let notes = vec![
        "overheads are ratios of interpreted instruction counts; a dispatched call costs one extra unit".to_string(),
        "the identical_variants row isolates dispatch cost and is not comparable to native wall-clock dispatch overhead"
            .to_string(),
    ];
    Ok(BenchReport { rows, geomean, detection, notes })
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<22} {:>12} {:>12} {:>9} {:>10} {:>10} {:>6}",
            "program", "config", "instrs", "baseline", "overhead", "dispatch", "checks", "same"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:<22} {:>12} {:>12} {:>8.2}% {:>10} {:>10} {:>6}",
                r.program,
                r.config,
                r.instructions,
                r.baseline_instructions,
                r.overhead * 100.0,
                r.dispatched_calls,
                r.checks_executed,
                if r.output_matches { "yes" } else { "NO" }
            );
        }
        out.push('\n');
        for (c, g) in &self.geomean {
            let _ = writeln!(out, "geomean {:<22} {:>8.2}%", c, g * 100.0);
        }
        out.push('\n');
        for d in &self.detection {
            let _ = writeln!(
                out,
                "detection {:<22} cold {:>5.1}%  hot {:>5.1}%  ({} runs)",
                d.config,
                d.cold_bug_rate * 100.0,
                d.hot_bug_rate * 100.0,
                d.runs
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("csv row");
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8")
    }
}
