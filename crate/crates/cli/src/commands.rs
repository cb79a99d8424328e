use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use varsan::bench::{corpus, fixed_table, run_bench, BenchConfig, BenchOptions, BenchReport};
use varsan::fuzz::{content_name, replay as replay_input, Corpus, FuzzConfig, Fuzzer, Report};
use varsan::pir::{
    instruction_cost_report, interpret, overhead, parse_program, serialize_program, ExecOptions, ExecResult, Image,
    Machine, Program, Status, TrapInfo, VariantKind,
};
use varsan::profiler::{instrument_profile, profile_from_run, read_profile, zero_profile, CostModel, Profile};
use varsan::runtime::{
    compute_expected_cost, compute_profile_guided, compute_random, PolicyConfig, PolicyKind, Runtime,
};
use varsan::variants::{build, Metadata, PlanConfig};

use crate::config::{metadata_path_for, BuildConfig, FileConfig, RuntimeFlags};
use crate::{Command, FuzzPolicy, InputArgs};

pub(crate) fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Build { source, runtime, checks, profile, hot_threshold, mode, output, metadata } => {
            let file = FileConfig::load(runtime.config.as_deref())?;
            let output = output.or(file.output.clone()).unwrap_or_else(|| default_output(&source));
            let cfg = BuildConfig {
                checks: checks.resolve(&file)?,
                policy: runtime.resolve(&file)?,
                hot_threshold: hot_threshold.or(file.hot_threshold).unwrap_or(1),
                profile: profile.or(file.profile.clone()),
                mode: mode.or(file.mode).map(Into::into).unwrap_or_default(),
                metadata: metadata.or(file.metadata.clone()).unwrap_or_else(|| metadata_path_for(&output)),
                output,
            };
            cmd_build(&source, &cfg)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Profile { source, inputs, text, workload, output } => {
            let mut runs: Vec<Vec<u8>> = Vec::new();
            for p in &inputs {
                runs.push(fs::read(p).with_context(|| format!("reading {}", p.display()))?);
            }
            runs.extend(text.into_iter().map(String::into_bytes));
            cmd_profile(&source, &runs, &workload, &output)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            program,
            metadata,
            input,
            runtime,
            all_sanitized,
            all_unsanitized,
            repartition_every,
            realtime,
            baseline,
            ub_recovery,
            max_instructions,
            json,
        } => {
            let file = FileConfig::load(runtime.config.as_deref())?;
            let forced = if all_sanitized {
                Some(VariantKind::Sanitized)
            } else if all_unsanitized {
                Some(VariantKind::Unsanitized)
            } else {
                None
            };
            let mut exec = ExecOptions { ub_recovery: ub_recovery || file.ub_recovery.unwrap_or(false), ..Default::default() };
            if let Some(m) = max_instructions {
                exec.max_instructions = m;
            }
            let opts = RunOptions {
                metadata: metadata.or(file.metadata.clone()),
                forced,
                repartition_every: (!realtime).then_some(repartition_every.max(1)),
                realtime,
                baseline,
                json,
                exec,
            };
            cmd_run(&program, &read_input(&input)?, &runtime, &file, &opts)
        }
        Command::Bench {
            programs,
            repeat,
            budget,
            checks,
            hot_threshold,
            repartition_every,
            realtime,
            csv,
            json,
        } => {
            let checks = checks.resolve(&FileConfig::default())?;
            let opts = BenchOptions {
                checks,
                hot_threshold,
                seeds: (1..=repeat.max(1)).collect(),
                repartition_every: Some(repartition_every.max(1)),
                realtime,
                exec: ExecOptions::default(),
            };
            cmd_bench(&programs, budget, &opts, csv.as_deref(), json.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Fuzz {
            program,
            corpus,
            seeds,
            policy,
            seed,
            max_executions,
            max_time,
            max_len,
            keep_going,
            report,
            csv,
            crashes,
            compare,
        } => {
            let cfg = FuzzConfig {
                seed,
                max_executions,
                max_time: max_time.map(Duration::from_secs_f64),
                max_len,
                keep_going,
                ..Default::default()
            };
            let out = FuzzOutputs { report, csv, crashes };
            cmd_fuzz(&program, &corpus, seeds.as_deref(), policy, cfg, &out, compare.as_deref())
        }
        Command::Replay { program, input, table, report, crash } => {
            let (bytes, table) = match report {
                Some(r) => {
                    let rep: Report = serde_json::from_str(&read_text(&r)?).with_context(|| format!("parsing {}", r.display()))?;
                    let c = rep.crashes.get(crash).with_context(|| format!("report has {} crashes", rep.crashes.len()))?;
                    (c.input.clone(), Some(c.table.clone()))
                }
                None => (read_input(&input)?, table),
            };
            cmd_replay(&program, &bytes, table.as_deref())
        }
        Command::Report { file, csv } => {
            cmd_report(&file, csv.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_program(path: &Path) -> Result<Program> {
    parse_program(&read_text(path)?).with_context(|| format!("in {}", path.display()))
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, data).with_context(|| format!("writing {}", path.display()))
}

/// Source function of a variant body, for diagnostics.
fn origin<'a>(program: &'a Program, body: &'a str) -> &'a str {
    program
        .slots
        .iter()
        .find(|s| s.variants.iter().any(|(_, n)| n == body))
        .map_or(body, |s| s.function.as_str())
}

fn describe(program: &Program, t: &TrapInfo) -> String {
    let f = origin(program, &t.function);
    let body = if f == t.function { String::new() } else { format!(", body {}", t.function) };
    format!("{} in function {f} (active variant {}{body}) block {}", t.kind, t.variant, t.block)
}

fn read_input(args: &InputArgs) -> Result<Vec<u8>> {
    Ok(match (&args.input, &args.text, &args.hex) {
        (Some(p), _, _) => fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        (_, Some(t), _) => t.clone().into_bytes(),
        (_, _, Some(h)) => hex::decode(h.trim()).context("decoding --hex")?,
        _ => Vec::new(),
    })
}

fn default_output(source: &Path) -> PathBuf {
    let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("program");
    source.with_file_name(format!("{stem}.built.pir"))
}

fn module_name(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("module").to_string()
}

pub fn cmd_build(source: &Path, cfg: &BuildConfig) -> Result<()> {
    cfg.validate()?;
    let program = load_program(source)?;
    let profile = match &cfg.profile {
        Some(p) => Some(read_profile(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let plan = PlanConfig { checks: cfg.checks, hot_threshold: cfg.hot_threshold, mode: cfg.mode };
    let mut b = build(&program, profile.as_ref(), &plan, &CostModel::default(), &module_name(source))?;
    let probs = match cfg.policy.policy {
        PolicyKind::Random => Some(compute_random(&b.metadata.descriptors)),
        PolicyKind::ProfileGuided => Some(compute_profile_guided(&b.metadata.descriptors)),
        PolicyKind::ExpectedCost => Some(compute_expected_cost(&b.metadata.descriptors, cfg.policy.budget_fraction)),
        _ => None,
    };
    if let Some(probs) = probs {
        for (d, p) in b.metadata.descriptors.iter_mut().zip(probs) {
            d.activation_probability = Some(p);
        }
    }
    write(&cfg.output, serialize_program(&b.program))?;
    write(&cfg.metadata, b.metadata.to_json())?;
    eprintln!(
        "built {} functions into {} bodies, {} slots, {} trampolines -> {}, {}",
        program.functions.len(),
        b.plan.total_bodies(),
        b.program.slots.len(),
        b.trampolines.len(),
        cfg.output.display(),
        cfg.metadata.display()
    );
    Ok(())
}

pub fn cmd_profile(source: &Path, inputs: &[Vec<u8>], workload: &str, output: &Path) -> Result<()> {
    let program = load_program(source)?;
    let instrumented = instrument_profile(&program)?;
    let image = Image::compile(&instrumented)?;
    let mut m = Machine::new(&image, ExecOptions::default());
    let mut total = Profile { workload: workload.to_string(), ..zero_profile(&program) };
    for (i, input) in inputs.iter().enumerate() {
        let r = m.run(input, None)?;
        if let Some(t) = &r.trap {
            eprintln!("workload run {i} trapped: {t}; counts kept");
        }
        total = total.merge(&profile_from_run(&instrumented, &r, workload));
    }
    write(output, total.to_json())?;
    eprintln!("profiled {} runs over {} functions -> {}", inputs.len(), total.functions.len(), output.display());
    Ok(())
}

pub struct RunOptions {
    pub metadata: Option<PathBuf>,
    pub forced: Option<VariantKind>,
    pub repartition_every: Option<u64>,
    pub realtime: bool,
    pub baseline: Option<PathBuf>,
    pub json: bool,
    pub exec: ExecOptions,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    status: Status,
    trap: Option<TrapInfo>,
    output: String,
    return_value: Option<i64>,
    instructions: u64,
    checks: u64,
    dispatched_calls: u64,
    ub_reports: Vec<TrapInfo>,
    policy: Option<String>,
    seed: Option<u64>,
    rounds: Option<u64>,
    baseline_instructions: Option<u64>,
    overhead: Option<f64>,
}

fn cmd_run(path: &Path, input: &[u8], flags: &RuntimeFlags, file: &FileConfig, opts: &RunOptions) -> Result<ExitCode> {
    let program = load_program(path)?;
    let image = Image::compile(&program)?;
    let mut policy_used = None;
    let mut seed = None;
    let mut rounds = None;
    let r: ExecResult = if program.slots.is_empty() {
        Machine::new(&image, opts.exec.clone()).run(input, None)?
    } else if let Some(kind) = opts.forced {
        let t = fixed_table(&program, kind);
        Machine::new(&image, opts.exec.clone()).run(input, Some(&t))?
    } else {
        let cfg = PolicyConfig { background: opts.realtime, ..flags.resolve(file)? };
        let meta_path = opts.metadata.clone().unwrap_or_else(|| metadata_path_for(path));
        let meta = Metadata::from_json(&read_text(&meta_path)?).with_context(|| format!("in {}", meta_path.display()))?;
        let mut rt = Runtime::new();
        rt.register_module(&meta.module, &meta.descriptors)?;
        rt.init_runtime(&cfg)?;
        let table = rt.table()?;
        let exec = ExecOptions { hook_interval: opts.repartition_every, ..opts.exec.clone() };
        let r = Machine::new(&image, exec).run_with_hook(input, Some(&table), &mut |_| {
            let _ = rt.partition_once();
        })?;
        rt.shutdown();
        policy_used = Some(cfg.policy.to_string());
        seed = Some(rt.seed()?);
        rounds = Some(rt.rounds());
        r
    };
    let base = match &opts.baseline {
        Some(b) => Some(interpret(&load_program(b)?, input, None, &opts.exec)?.instructions_executed),
        None => None,
    };
    let cost = instruction_cost_report(&r);
    let summary = RunSummary {
        status: r.status,
        trap: r.trap.clone(),
        output: String::from_utf8_lossy(&r.output).into_owned(),
        return_value: r.return_value,
        instructions: cost.total,
        checks: cost.checks,
        dispatched_calls: r.dispatched_calls(),
        ub_reports: r.ub_reports.clone(),
        policy: policy_used,
        seed,
        rounds,
        baseline_instructions: base,
        overhead: base.map(|b| overhead(cost.total, b)),
    };
    if opts.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        use std::io::Write;
        std::io::stdout().write_all(&r.output)?;
        for u in &summary.ub_reports {
            eprintln!("ub report: {u}");
        }
        if let Some(t) = &summary.trap {
            eprintln!("trap: {}", describe(&program, t));
        }
        eprintln!(
            "status: {:?}, instructions: {} (checks {}, dispatched calls {})",
            summary.status, summary.instructions, summary.checks, summary.dispatched_calls
        );
        if let (Some(p), Some(s)) = (&summary.policy, summary.seed) {
            eprintln!("policy: {p}, seed: {s}, rounds: {}", summary.rounds.unwrap_or(0));
        }
        if let (Some(b), Some(o)) = (summary.baseline_instructions, summary.overhead) {
            eprintln!("overhead vs baseline ({b} instructions): {:.2}%", o * 100.0);
        }
    }
    Ok(if r.status == Status::Ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_bench(names: &[String], budget: f64, opts: &BenchOptions, csv: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let all = corpus();
    let chosen: Vec<_> = if names.is_empty() {
        all
    } else {
        for n in names {
            if !all.iter().any(|b| b.name == n) {
                let known: Vec<_> = all.iter().map(|b| b.name).collect();
                bail!("unknown bench program `{n}` (have: {})", known.join(", "));
            }
        }
        all.into_iter().filter(|b| names.iter().any(|n| n == b.name)).collect()
    };
    let configs: Vec<BenchConfig> = BenchConfig::default_set()
        .into_iter()
        .map(|c| match c {
            BenchConfig::Partitioned { policy, .. } => BenchConfig::Partitioned { policy, budget_fraction: budget },
            c => c,
        })
        .collect();
    let report = run_bench(&chosen, &configs, opts)?;
    print!("{}", report.to_table());
    if let Some(p) = csv {
        write(p, report.to_csv())?;
    }
    if let Some(p) = json {
        write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

pub struct FuzzOutputs {
    pub report: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub crashes: Option<PathBuf>,
}

fn campaign(program: &Program, corpus: Corpus, seeds: &[Vec<u8>], cfg: FuzzConfig) -> Result<Report> {
    let image = Image::compile(program)?;
    let mut f = Fuzzer::new(&image, program, cfg, corpus)?;
    Ok(f.campaign(seeds)?)
}

fn check_fuzz_build(program: &Program, policy: FuzzPolicy, path: &Path) -> Result<()> {
    let has_coverage = program.functions.iter().any(|f| f.kind == VariantKind::Coverage);
    match policy {
        FuzzPolicy::Fuzzing if program.slots.is_empty() || !has_coverage => {
            bail!("{} is not a fuzz build: rebuild with --mode fuzz", path.display())
        }
        FuzzPolicy::AllSanitized if !program.slots.is_empty() => {
            bail!("{} has variant slots: the all-sanitized baseline needs --mode fuzz-baseline", path.display())
        }
        _ => Ok(()),
    }
}

fn cmd_fuzz(
    path: &Path,
    corpus_dir: &Path,
    seeds_dir: Option<&Path>,
    policy: FuzzPolicy,
    cfg: FuzzConfig,
    out: &FuzzOutputs,
    compare: Option<&Path>,
) -> Result<ExitCode> {
    let program = load_program(path)?;
    check_fuzz_build(&program, policy, path)?;
    let mut seeds = Corpus::load_inputs(corpus_dir)?;
    if let Some(d) = seeds_dir {
        seeds.extend(Corpus::load_inputs(d)?);
    }
    let report = campaign(&program, Corpus::persisted(corpus_dir)?, &seeds, cfg.clone())?;
    println!(
        "{} executions ({} sanitized re-executions) in {:.2}s, {:.0} exec/s; coverage {}/{} blocks; corpus {}; fast: [{}]",
        report.executions,
        report.sanitized_reexecutions,
        report.elapsed_secs,
        report.execs_per_sec,
        report.cumulative_blocks,
        report.total_blocks,
        report.corpus_size,
        report.fast_functions.join(", ")
    );
    for c in &report.crashes {
        println!("crash at execution {}: {} (input {})", c.execution, describe(&program, &c.trap), hex::encode(&c.input));
        if let Some(dir) = &out.crashes {
            write(&dir.join(content_name(&c.input)), &c.input)?;
        }
    }
    if let Some(p) = &out.report {
        write(p, report.to_json())?;
    }
    if let Some(p) = &out.csv {
        write(p, report.series_csv())?;
    }
    if let Some(base_path) = compare {
        let base = load_program(base_path)?;
        check_fuzz_build(&base, FuzzPolicy::AllSanitized, base_path)?;
        let b = campaign(&base, Corpus::in_memory(), &seeds, cfg)?;
        println!(
            "throughput: {:?} {:.0} exec/s vs all-sanitized {:.0} exec/s ({:.2}x); baseline coverage {}/{} blocks, {} crashes",
            policy,
            report.execs_per_sec,
            b.execs_per_sec,
            report.execs_per_sec / b.execs_per_sec.max(f64::MIN_POSITIVE),
            b.cumulative_blocks,
            b.total_blocks,
            b.crashes.len()
        );
    }
    Ok(if report.crashes.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_replay(path: &Path, input: &[u8], table: Option<&[u32]>) -> Result<ExitCode> {
    let program = load_program(path)?;
    if let Some(t) = table {
        if t.len() != program.slots.len() {
            bail!("table has {} entries, program has {} slots", t.len(), program.slots.len());
        }
        for (i, (&v, s)) in t.iter().zip(&program.slots).enumerate() {
            if v as usize >= s.variants.len() {
                bail!("slot {i} (`{}`) has no variant {v}", s.function);
            }
        }
    }
    let r = replay_input(&program, input, table, &ExecOptions::default())?;
    match &r.trap {
        Some(t) => {
            println!("trap: {}", describe(&program, t));
            Ok(ExitCode::from(1))
        }
        None => {
            println!("no trap; {} instructions", r.instructions_executed);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_report(path: &Path, csv: Option<&Path>) -> Result<()> {
    let text = read_text(path)?;
    if let Ok(r) = serde_json::from_str::<Report>(&text) {
        println!("seed {}: {} executions in {} steps, {:.0} exec/s", r.seed, r.executions, r.steps, r.execs_per_sec);
        println!("sanitized re-executions: {}", r.sanitized_reexecutions);
        println!("coverage: {}/{} blocks, corpus {}", r.cumulative_blocks, r.total_blocks, r.corpus_size);
        println!("fast tier: [{}]", r.fast_functions.join(", "));
        for c in &r.crashes {
            println!("crash at execution {}: {}", c.execution, c.trap);
        }
        if let Some(p) = csv {
            write(p, r.series_csv())?;
        }
        return Ok(());
    }
    if csv.is_some() {
        bail!("--csv applies to fuzz reports only");
    }
    if let Ok(r) = serde_json::from_str::<BenchReport>(&text) {
        print!("{}", r.to_table());
    } else if let Ok(m) = Metadata::from_json(&text) {
        println!("module {} (metadata version {})", m.module, m.version);
        println!("{:<5} {:<20} {:>10} {:>8} {:>8}  variants", "slot", "function", "count", "delta", "p");
        for d in &m.descriptors {
            let kinds: Vec<_> = d.variants.iter().map(|v| v.kind.as_str()).collect();
            let p = d.activation_probability.map_or("-".to_string(), |p| format!("{p:.4}"));
            println!("{:<5} {:<20} {:>10} {:>8} {:>8}  {}", d.slot, d.function, d.exec_count, d.cost_delta(), p, kinds.join(","));
        }
    } else if let Ok(p) = Profile::from_json(&text) {
        println!("workload {}", p.workload);
        for (name, c) in &p.functions {
            println!("{:<20} {:>10}", name, c.exec_count);
        }
    } else {
        bail!("{} is not a fuzz report, bench report, metadata or profile", path.display());
    }
    Ok(())
}
